#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "psdlab/scoring.hpp"
#include "psdlab/segmenter.hpp"
#include "psdlab/synth.hpp"
#include "psdlab/tracker.hpp"

namespace psdlab {

struct TrainConfig {
  int epochs = 30;
  double learningRate = 1e-4;
  double weightDecay = 1e-3;
  double emaDecay = 0.999;
  int batchSize = 8;
  double binarizeThreshold = 0.5;
  std::uint64_t seed = 1;
  // Semantic relabelling cadence in epochs; 0 labels once, right after the warm-up.
  int relabelPeriod = 1;
  // Epochs trained before the semantic teacher first produces labels.
  int semanticWarmup = 1;
  int hidden = 16;
  // Tracker calibration: configurations evaluated, and first frames sampled.
  int calibrationBudget = 24;
  int calibrationClips = 4;
  bool perClipCalibration = false;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Settings sized for the synthetic benchmark on a desk machine: a larger step size and a
// faster-moving teacher than the defaults, 8 epochs, one semantic relabel after 5 epochs.
TrainConfig deskScaleTrainConfig();

struct AblationFlags {
  bool usePT = false;
  bool useFT = false;
  bool useST = false;
  bool useBS = false;

  // Throws std::invalid_argument unless FT implies PT and BS implies PT and ST.
  void validate() const;
  std::string label() const;  // "baseline", "PT", "PT+FT", ...
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

// The six rows of the ablation table, in order.
std::vector<AblationFlags> ablationRows();

// Raised when training code asks for a ground-truth mask it must not see.
class LabelLeakError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Read-only view of training clips for training code. Frames are free to read; ground
// truth is available for frame 0 only. Any other ground-truth request is counted and
// refused.
class TrainSet {
 public:
  explicit TrainSet(std::span<const Clip> clips);

  std::size_t size() const { return clips_.size(); }
  const std::string& clipId(std::size_t c) const { return clips_[c].clipId; }
  int length(std::size_t c) const { return clips_[c].length(); }
  std::span<const Frame> frames(std::size_t c) const { return clips_[c].frames; }
  const BinaryMask& groundTruth(std::size_t c, int frameIndex) const;
  const BinaryMask& annotation(std::size_t c) const { return groundTruth(c, 0); }

  std::uint64_t leakAttempts() const { return leakAttempts_; }

 private:
  std::span<const Clip> clips_;
  mutable std::atomic<std::uint64_t> leakAttempts_{0};
};

struct Dataset {
  std::vector<Clip> trainClips;
  std::vector<Clip> testClips;

  void validate() const;
};

// One tracker calibration shared by all training clips, from the annotated first frames
// of cfg.calibrationClips clips sampled with cfg.seed.
CalibrationResult calibrateShared(const TrainSet& train, const TrackerParams& tp, const TrainConfig& cfg);

// Synthetic benchmark: clip k of each split uses base with a seed derived from (seed, split, k).
// Ids are train_%04d and test_%04d.
Dataset generateDataset(const SynthConfig& base, int trainClips, int testClips, std::uint64_t seed, int jobs = 0);

struct ClipMetrics {
  std::string clipId;
  int frames = 0;
  double dice = 0.0;
  double iou = 0.0;
  double mae = 0.0;
};

struct MetricSummary {
  int frames = 0;
  double dice = 0.0;  // unweighted mean over frames
  double iou = 0.0;
  double mae = 0.0;
  std::vector<ClipMetrics> perClip;
};

struct EpochStats {
  int epoch = 0;
  double supLoss = 0.0;
  double unsupLoss = 0.0;
  double totalLoss = 0.0;
  bool relabelled = false;
  int semanticSelections = 0;  // frames labelled by the semantic teacher this epoch
  int labelledFrames = 0;
};

struct RunReport {
  AblationFlags flags;
  TrainConfig config;
  TrackerParams trackerParams;  // parameters actually used for propagation
  std::vector<EpochStats> epochs;
  std::optional<MetricSummary> trainPseudo;  // final-epoch pseudo labels vs ground truth
  MetricSummary test;
  std::uint64_t gtLeakAttempts = 0;
  std::uint64_t propagateSteps = 0;
  double wallclockSeconds = 0.0;
};

struct TrainResult {
  ModelParameters student;
  ModelParameters teacher;
  RunReport report;
  std::vector<PseudoLabelRecord> records;  // every merged label produced (BS runs only)
};

struct RunOptions {
  int jobs = 0;                                // <= 0: default worker count
  std::optional<std::filesystem::path> outDir;  // checkpoints and pseudo labels go here when set
};

// Evaluates per-frame predictions of params against every frame's ground truth.
MetricSummary evaluate(const ModelParameters& params, std::span<const Clip> clips, double threshold = 0.5,
                       int jobs = 0);
// Same metrics for already computed predictions; predictions[c][i] pairs with frame i of clip c.
MetricSummary evaluatePredictions(std::span<const std::vector<SoftMask>> predictions, std::span<const Clip> clips,
                                  double threshold = 0.5);

TrainResult trainFSVPS(const Dataset& data, const AblationFlags& flags, const TrainConfig& cfg,
                       const TrackerParams& tp, const RunOptions& options = {});

struct AblationTable {
  std::vector<RunReport> rows;
  std::vector<std::vector<PseudoLabelRecord>> records;  // per row; empty unless the row uses BS
};

AblationTable runAblationSuite(const Dataset& data, const TrainConfig& cfg, const TrackerParams& tp,
                               const RunOptions& options = {});

// report.csv: one row per configuration. Wall-clock time is left out so that reruns
// with the same seed produce identical bytes; it is kept in report.json.
std::string reportCsv(const AblationTable& table);
void writeReports(const std::filesystem::path& dir, const AblationTable& table);

}  // namespace psdlab
