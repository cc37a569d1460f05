#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <mutex>
#include <memory>
#include <span>
#include <vector>

#include "psdlab/imaging.hpp"
#include "psdlab/synth.hpp"

namespace psdlab {

struct TrackerParams {
  int patchRadius = 1;
  int searchRadius = 3;
  int topK = 1;
  double temperature = 0.005;
  int memoryStride = 1;
  int memoryCapacity = 8;

  void validate() const;
  friend bool operator==(const TrackerParams&, const TrackerParams&) = default;
};

// Per-location descriptors. Stored planar (one width*height plane per
// descriptor component) so similarity passes run over contiguous memory.
class FeatureMap {
 public:
  FeatureMap(int width, int height, int dim);

  int width() const { return width_; }
  int height() const { return height_; }
  int dim() const { return dim_; }
  std::size_t planeSize() const { return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_); }

  float value(int x, int y, int d) const { return data_[offset(x, y, d)]; }
  float& value(int x, int y, int d) { return data_[offset(x, y, d)]; }
  std::vector<float> descriptor(int x, int y) const;
  const float* plane(int d) const { return data_.data() + static_cast<std::size_t>(d) * planeSize(); }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  std::size_t offset(int x, int y, int d) const {
    return static_cast<std::size_t>(d) * planeSize() + static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_;
  int height_;
  int dim_;
  std::vector<float> data_;
};

// Descriptor: intensity patch of radius patchRadius per channel scaled by 1/(2r+1), followed
// by the central-difference gradient magnitude per channel. Similarity between two
// descriptors is 1 - |a - b|^2 / 2, which is their cosine when both have unit length.
FeatureMap extractFeatures(const Frame& frame, const TrackerParams& p);

using FeatureSequence = std::vector<std::shared_ptr<const FeatureMap>>;
FeatureSequence extractSequence(std::span<const Frame> frames, const TrackerParams& p);

namespace detail {
// Per-pixel lists of the K best (score, payload) pairs, best first.
// A newcomer must be strictly better to displace an existing element, so among
// equal scores the earliest offered wins.
template <typename Payload>
class TopKField {
 public:
  TopKField(std::size_t pixels, int k)
      : k_(static_cast<std::size_t>(k)),
        count_(pixels, 0),
        floor_(pixels, -std::numeric_limits<float>::infinity()),
        score_(pixels * k_),
        payload_(pixels * k_) {}

  // Cheap rejection test; admits() false means offer() would be a no-op.
  bool admits(std::size_t pixel, float s) const { return s > floor_[pixel]; }

  void offer(std::size_t pixel, float s, Payload v) {
    const std::size_t base = pixel * k_;
    std::size_t n = count_[pixel];
    if (n == k_ && !(s > score_[base + k_ - 1])) return;
    std::size_t pos = n < k_ ? n : k_ - 1;
    while (pos > 0 && score_[base + pos - 1] < s) {
      score_[base + pos] = score_[base + pos - 1];
      payload_[base + pos] = payload_[base + pos - 1];
      --pos;
    }
    score_[base + pos] = s;
    payload_[base + pos] = v;
    if (n < k_) count_[pixel] = static_cast<std::uint16_t>(++n);
    if (n == k_) floor_[pixel] = score_[base + k_ - 1];
  }

  std::size_t k() const { return k_; }
  std::size_t pixels() const { return count_.size(); }
  std::size_t count(std::size_t pixel) const { return count_[pixel]; }
  float score(std::size_t pixel, std::size_t i) const { return score_[pixel * k_ + i]; }
  Payload payload(std::size_t pixel, std::size_t i) const { return payload_[pixel * k_ + i]; }

  double readout(std::size_t pixel, double temperature) const {
    const std::size_t base = pixel * k_;
    const std::size_t n = count_[pixel];
    if (n == 0) return 0.0;
    const double top = score_[base];
    double wsum = 0.0, vsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = std::exp((static_cast<double>(score_[base + i]) - top) / temperature);
      wsum += w;
      vsum += w * static_cast<double>(payload_[base + i]);
    }
    return std::clamp(vsum / wsum, 0.0, 1.0);
  }

 private:
  std::size_t k_;
  std::vector<std::uint16_t> count_;
  std::vector<float> floor_;  // K-th best score once full, -inf before
  std::vector<float> score_;
  std::vector<Payload> payload_;
};

}  // namespace detail

// For every query pixel, the K best-scoring locations of one memory frame within the
// search window. Payload is the memory pixel index.
struct FrameMatch {
  detail::TopKField<std::uint32_t> top;
};

FrameMatch matchFrames(const FeatureMap& query, const FeatureMap& memory, const TrackerParams& p);

struct MemoryEntry {
  int frameIndex = 0;
  std::shared_ptr<const FeatureMap> features;
  SoftMask mask;
};

// FIFO store of (features, mask) pairs. When the anchor is pinned the first entry
// ever inserted is never evicted.
class MemoryBank {
 public:
  explicit MemoryBank(int capacity, bool anchorPinned = true);

  void insert(MemoryEntry entry);
  const std::deque<MemoryEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int capacity() const { return capacity_; }
  bool anchorPinned() const { return anchorPinned_; }

 private:
  int capacity_;
  bool anchorPinned_;
  std::deque<MemoryEntry> entries_;
};

// Reads out a soft mask for the query from the memory: top-K most similar memory
// locations within the search window, softmax-weighted by similarity / temperature.
SoftMask propagateStep(const MemoryBank& memory, const FeatureMap& query, const TrackerParams& p);
SoftMask propagateStep(const MemoryBank& memory, const Frame& query, const TrackerParams& p);

// Readout from precomputed matches, one per memory entry in memory order. Equals
// propagateStep on the same memory and query.
SoftMask propagateStep(const MemoryBank& memory, std::span<const FrameMatch* const> matches, const TrackerParams& p);

// Total propagateStep invocations in this process; used for cost accounting.
std::uint64_t propagateStepCount();

enum class Direction { Forward, Backward };

// Tracks from the anchor frame in the given direction. Returns one mask per visited
// frame (the anchor itself is not included), in visit order.
std::vector<SoftMask> trackClip(const FeatureSequence& features, int anchorIndex, const SoftMask& anchorMask,
                                Direction direction, const TrackerParams& p);
std::vector<SoftMask> trackClip(const Clip& clip, int anchorIndex, const BinaryMask& anchorMask, Direction direction,
                                const TrackerParams& p);

// Mask propagation bound to one clip. Lets scoring run against the real tracker or a test double.
class ClipPropagator {
 public:
  virtual ~ClipPropagator() = default;
  virtual int length() const = 0;
  virtual std::vector<SoftMask> track(int anchorIndex, const SoftMask& anchorMask, Direction direction) const = 0;
  // Tracks several masks from the same anchor frame; result[j] belongs to anchorMasks[j].
  virtual std::vector<std::vector<SoftMask>> trackMany(int anchorIndex, std::span<const SoftMask> anchorMasks,
                                                       Direction direction) const;
};

class MemoryTracker final : public ClipPropagator {
 public:
  MemoryTracker(std::span<const Frame> frames, const TrackerParams& p);

  int length() const override { return static_cast<int>(features_.size()); }
  std::vector<SoftMask> track(int anchorIndex, const SoftMask& anchorMask, Direction direction) const override;
  std::vector<std::vector<SoftMask>> trackMany(int anchorIndex, std::span<const SoftMask> anchorMasks,
                                               Direction direction) const override;
  const TrackerParams& params() const { return params_; }

 private:
  using MatchPtr = std::shared_ptr<const FrameMatch>;
  MatchPtr windowMatch(int queryIndex, int memoryIndex) const;

  TrackerParams params_;
  FeatureSequence features_;
  // Matches between frames other than the anchor recur across tracking runs on this clip.
  mutable std::mutex cacheMutex_;
  mutable std::map<std::pair<int, int>, MatchPtr> cache_;
};

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationOptions {
  AffineRanges ranges;
  int clipLength = 8;
  int clipsPerAnchor = 2;
};

struct CalibrationTrial {
  TrackerParams params;
  double score = 0.0;
};

struct CalibrationResult {
  TrackerParams best;
  double bestScore = 0.0;
  double initialScore = 0.0;
  std::vector<CalibrationTrial> trials;  // in scan order; trials[0] is the initial point
};

struct AnchorPair {
  Frame frame;
  BinaryMask mask;
};

// Candidate configurations in scan order for a given seed; the initial point is not included.
std::vector<TrackerParams> calibrationCandidates(const TrackerParams& p0, std::uint64_t seed);

// Searches tracker settings on synthesized affine clips of the anchors. budget counts
// evaluated configurations including p0; ties keep the earliest in scan order.
CalibrationResult calibrate(std::span<const AnchorPair> anchors, const TrackerParams& p0, int budget,
                            std::uint64_t seed, const CalibrationOptions& options = {});
TrackerParams calibrate(const Frame& frame, const BinaryMask& mask, const TrackerParams& p0, int budget,
                        std::uint64_t seed);

// Mean Dice of forward tracking from frame 0 against the clip's gtMasks (frames 1..T-1).
double trackingDice(const Clip& clip, const TrackerParams& p);

}  // namespace psdlab
