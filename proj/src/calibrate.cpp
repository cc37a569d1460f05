#include <map>
#include <stdexcept>

#include "psdlab/rng.hpp"
#include "psdlab/tracker.hpp"

namespace psdlab {

namespace {

constexpr int kPatchRadii[] = {1, 2};
constexpr int kSearchRadii[] = {2, 3, 4};
constexpr int kTopKs[] = {1, 2, 4, 8};
constexpr double kTemperatures[] = {0.001, 0.002, 0.005, 0.01};

double meanTrackingDice(const std::vector<Clip>& clips, const std::vector<FeatureSequence>& features,
                        const TrackerParams& p) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const auto& gt = *clips[c].gtMasks;
    const auto masks = trackClip(features[c], 0, SoftMask::fromBinary(gt.front()), Direction::Forward, p);
    for (std::size_t i = 0; i < masks.size(); ++i) {
      sum += dice(binarize(masks[i]), gt[i + 1]);
      ++count;
    }
  }
  return count == 0 ? 1.0 : sum / static_cast<double>(count);
}

}  // namespace

std::vector<TrackerParams> calibrationCandidates(const TrackerParams& p0, std::uint64_t seed) {
  std::vector<TrackerParams> grid;
  for (int pr : kPatchRadii)
    for (int sr : kSearchRadii)
      for (int k : kTopKs)
        for (double t : kTemperatures) {
          TrackerParams p = p0;
          p.patchRadius = pr;
          p.searchRadius = sr;
          p.topK = k;
          p.temperature = t;
          if (p != p0) grid.push_back(p);
        }
  Rng rng(seed);
  rng.shuffle(grid.begin(), grid.end());
  return grid;
}

CalibrationResult calibrate(std::span<const AnchorPair> anchors, const TrackerParams& p0, int budget,
                            std::uint64_t seed, const CalibrationOptions& options) {
  if (budget < 1) throw std::invalid_argument("calibrate: budget must be at least 1");
  if (anchors.empty()) throw std::invalid_argument("calibrate: no anchor frames");
  p0.validate();

  std::vector<Clip> clips;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (anchors[a].mask.empty()) throw std::invalid_argument("calibrate: anchor mask must be non-empty");
    for (int j = 0; j < options.clipsPerAnchor; ++j)
      clips.push_back(synthesizeFinetuneClip(anchors[a].frame, anchors[a].mask, options.clipLength, options.ranges,
                                             deriveSeed(seed, a * 1000 + static_cast<std::uint64_t>(j))));
  }

  // Features depend only on the patch radius.
  std::map<int, std::vector<FeatureSequence>> featureCache;
  auto featuresFor = [&](const TrackerParams& p) -> const std::vector<FeatureSequence>& {
    auto it = featureCache.find(p.patchRadius);
    if (it == featureCache.end()) {
      std::vector<FeatureSequence> seqs;
      for (const auto& c : clips) seqs.push_back(extractSequence(c.frames, p));
      it = featureCache.emplace(p.patchRadius, std::move(seqs)).first;
    }
    return it->second;
  };

  CalibrationResult result;
  result.best = p0;
  result.initialScore = meanTrackingDice(clips, featuresFor(p0), p0);
  result.bestScore = result.initialScore;
  result.trials.push_back({p0, result.initialScore});

  const auto candidates = calibrationCandidates(p0, seed);
  const std::size_t extra = std::min<std::size_t>(static_cast<std::size_t>(budget - 1), candidates.size());
  for (std::size_t i = 0; i < extra; ++i) {
    const auto& p = candidates[i];
    const double score = meanTrackingDice(clips, featuresFor(p), p);
    result.trials.push_back({p, score});
    if (score > result.bestScore) {
      result.bestScore = score;
      result.best = p;
    }
  }
  return result;
}

TrackerParams calibrate(const Frame& frame, const BinaryMask& mask, const TrackerParams& p0, int budget,
                        std::uint64_t seed) {
  const AnchorPair anchor{frame, mask};
  return calibrate(std::span<const AnchorPair>(&anchor, 1), p0, budget, seed).best;
}

}  // namespace psdlab
