#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "psdlab/imaging.hpp"

namespace psdlab {

// Two 3x3 convolutions: input features -> hidden (tanh) -> one logit (sigmoid).
// Input features per pixel: intensity, gradient magnitude, x and y in [-1, 1].
struct Architecture {
  int width = 64;
  int height = 64;
  int inputChannels = 4;
  int hidden = 16;
  int kernel = 3;

  std::size_t parameterCount() const;
  void validate() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Flat layout: W1[hidden][inputChannels][k][k], b1[hidden], W2[hidden][k][k], b2.
struct ModelParameters {
  Architecture arch;
  std::vector<double> values;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ModelParameters&, const ModelParameters&) = default;
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)) per layer, biases zero.
ModelParameters initParameters(const Architecture& arch, std::uint64_t seed);

// Sets the second layer's weights and bias to zero, so the output is 0.5 everywhere.
void zeroFinalLayer(ModelParameters& params);

// Per-pixel input planes for one frame; computed once per frame and reused.
struct SegmenterInput {
  int width = 0;
  int height = 0;
  std::vector<double> planes;  // inputChannels planes of width*height
};

SegmenterInput prepareInput(const Frame& frame);

SoftMask forward(const ModelParameters& params, const Frame& frame);
SoftMask forward(const ModelParameters& params, const SegmenterInput& input);

inline constexpr double kProbabilityClamp = 1e-7;

// Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps].
double ceLoss(const SoftMask& pred, const BinaryMask& target);

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

// Gradient of ceLoss(forward(params, frame), target). Where the clamp is active the
// loss is flat in the logit and contributes no gradient.
LossAndGradient lossAndGradient(const ModelParameters& params, const Frame& frame, const BinaryMask& target);
LossAndGradient lossAndGradient(const ModelParameters& params, const SegmenterInput& input, const BinaryMask& target);

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double learningRate = 1e-4;
  double weightDecay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

OptimizerState makeOptimizer(std::size_t parameterCount, double learningRate, double weightDecay);

// Bias-corrected adaptive-moment step with decoupled weight decay. Throws
// std::domain_error on a non-finite gradient before touching any state.
void optimStep(ModelParameters& params, OptimizerState& state, std::span<const double> gradient);

// teacher = decay * teacher + (1 - decay) * student, elementwise.
void emaUpdate(ModelParameters& teacher, const ModelParameters& student, double decay);

// Checkpoint: "PSDPARAM", u64 little-endian header length, JSON header, then the values
// as little-endian float64.
void saveParameters(const std::filesystem::path& path, const ModelParameters& params);
ModelParameters loadParameters(const std::filesystem::path& path);

}  // namespace psdlab
