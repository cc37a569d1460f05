#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "psdlab/imaging.hpp"

namespace psdlab {

// Closed interval sampled uniformly.
struct Interval {
  double min = 0.0;
  double max = 0.0;
  double width() const { return max - min; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

// Per-frame drift ranges. Each frame draws one increment per component and
// adds it to the running pose, so motion is cumulative.
struct MotionRanges {
  Interval dx{-1.0, 1.0};          // pixels per frame
  Interval dy{-1.0, 1.0};          // pixels per frame
  Interval rotation{-0.03, 0.03};  // radians per frame
  Interval scale{-0.01, 0.01};     // relative size change per frame
  // Per-clip drift speed in pixels per frame, heading uniform; added to dx, dy every
  // frame and reflected at the borders.
  Interval speed{1.0, 2.5};
  friend bool operator==(const MotionRanges&, const MotionRanges&) = default;
};

struct SynthConfig {
  int width = 64;
  int height = 64;
  int frameCount = 60;
  int blobCount = 1;
  double blobRadius = 10.0;  // mean radius of each blob at scale 1
  MotionRanges motion;
  double deformation = 0.012;      // per-frame random-walk step of the boundary harmonics
  double textureContrast = 0.3;    // foreground brightness above background, in [0,1]
  double illuminationDrift = 0.015;  // per-frame random-walk step of the global gain
  double contrastDrift = 0.0;        // per-frame random-walk step of the foreground contrast multiplier
  double noiseSigma = 0.05;
  // Expected specular highlights in the last frame; zero in frame 0, linear in between.
  double specularRate = 6.0;
  int blurRadius = 1;
  // Initial centre of the first blob; random in the central region when unset.
  std::optional<std::pair<double, double>> start;
  std::uint64_t seed = 1;

  // Throws std::invalid_argument on any violated invariant.
  void validate() const;

  // Same geometry and seed with every source of temporal change and noise disabled.
  SynthConfig staticVariant() const;

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct Clip {
  std::string clipId;
  std::uint64_t seed = 0;
  std::vector<Frame> frames;
  std::optional<std::vector<BinaryMask>> gtMasks;

  int length() const { return static_cast<int>(frames.size()); }
  int width() const { return frames.empty() ? 0 : frames.front().width(); }
  int height() const { return frames.empty() ? 0 : frames.front().height(); }
  void validate() const;

  friend bool operator==(const Clip&, const Clip&) = default;
};

// Renders a clip of deforming, drifting star-convex blobs over a textured background.
Clip generateClip(const SynthConfig& cfg, std::string clipId = "clip");

// Crop rectangle in pixel-edge coordinates: [x, x+w) x [y, y+h).
struct CropRect {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
};

struct AffineParams {
  double rotation = 0.0;  // radians, about the frame centre
  double shear = 0.0;     // horizontal shear factor
  double zoom = 1.0;      // isotropic scale about the frame centre
  double tx = 0.0;        // pixels
  double ty = 0.0;
  std::optional<CropRect> crop;  // resized back to the full frame; none = whole frame
};

// 2x3 affine map p' = A p + t on pixel-centre coordinates.
struct AffineMatrix {
  double a = 1.0, b = 0.0, c = 0.0, d = 1.0;
  double tx = 0.0, ty = 0.0;

  std::pair<double, double> apply(double x, double y) const { return {a * x + b * y + tx, c * x + d * y + ty}; }
  double determinant() const { return a * d - b * c; }
  AffineMatrix inverse() const;
  // (lhs * rhs)(p) = lhs(rhs(p)).
  friend AffineMatrix operator*(const AffineMatrix& lhs, const AffineMatrix& rhs);
};

// Forward map from source to output pixel coordinates for a width x height frame.
AffineMatrix toMatrix(const AffineParams& p, int width, int height);

// Image resampled bilinearly, mask by nearest neighbour; outside the source is background 0.
std::pair<Frame, BinaryMask> applyAffine(const Frame& frame, const BinaryMask& mask, const AffineParams& p);
std::pair<Frame, BinaryMask> applyAffine(const Frame& frame, const BinaryMask& mask, const AffineMatrix& m);

// Bounds for fine-tuning clip synthesis.
struct AffineRanges {
  Interval rotation{-0.4363323129985824, 0.4363323129985824};  // ±25 degrees
  Interval shear{-0.15, 0.15};
  Interval zoom{0.8, 1.2};
  double translateFraction = 0.1;  // |t| <= fraction * side
  double cropMinArea = 0.8;        // crop keeps at least this fraction of the area
  // Random-walk step per frame as a fraction of each interval's width.
  double stepFraction = 0.1;

  static AffineRanges identity();
  void validate() const;
};

// Frame 0 is the input pair; later frames are random affine transforms of it.
// The transform parameters follow a bounded random walk starting at identity.
Clip synthesizeFinetuneClip(const Frame& frame, const BinaryMask& mask, int length, const AffineRanges& ranges,
                            std::uint64_t seed);

// On-disk clip layout: manifest.json + frame_%04d.pgm + gt_%04d.pgm (0-based).
void writeClip(const std::filesystem::path& dir, const Clip& clip, const SynthConfig* config = nullptr);
Clip readClip(const std::filesystem::path& dir);

}  // namespace psdlab
