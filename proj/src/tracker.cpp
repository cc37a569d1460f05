#include "psdlab/tracker.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace psdlab {

namespace {

std::atomic<std::uint64_t> gPropagateSteps{0};

struct Offset {
  int dx;
  int dy;
};

// Window offsets ordered centre-out so that, among equally similar candidates,
// the closest location is kept.
std::vector<Offset> windowOffsets(int radius) {
  std::vector<Offset> offs;
  offs.reserve(static_cast<std::size_t>((2 * radius + 1) * (2 * radius + 1)));
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) offs.push_back({dx, dy});
  std::stable_sort(offs.begin(), offs.end(), [](const Offset& a, const Offset& b) {
    return a.dx * a.dx + a.dy * a.dy < b.dx * b.dx + b.dy * b.dy;
  });
  return offs;
}

// out[i] = 1 - 0.5 * sum_d (q[d][i] - m[d][i])^2 over one row segment; planes are planeStride apart.
void rowSimilarity(float* __restrict out, const float* __restrict q, const float* __restrict m, std::size_t planeStride,
                   int n, int dim) {
  constexpr int kChunk = 64;
  float acc[kChunk];
  for (int begin = 0; begin < n; begin += kChunk) {
    const int len = std::min(kChunk, n - begin);
    std::fill_n(acc, len, 0.0f);
    for (int d = 0; d < dim; ++d) {
      const float* __restrict qd = q + d * planeStride + begin;
      const float* __restrict md = m + d * planeStride + begin;
      for (int i = 0; i < len; ++i) {
        const float diff = qd[i] - md[i];
        acc[i] += diff * diff;
      }
    }
    for (int i = 0; i < len; ++i) out[begin + i] = 1.0f - 0.5f * acc[i];
  }
}

}  // namespace

void TrackerParams::validate() const {
  if (patchRadius < 1) throw std::invalid_argument("tracker params: patchRadius must be >= 1");
  if (searchRadius < 1) throw std::invalid_argument("tracker params: searchRadius must be >= 1");
  if (topK < 1) throw std::invalid_argument("tracker params: topK must be >= 1");
  if (topK > (2 * searchRadius + 1) * (2 * searchRadius + 1))
    throw std::invalid_argument("tracker params: topK exceeds the search window size");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("tracker params: temperature must be positive");
  if (memoryStride < 1) throw std::invalid_argument("tracker params: memoryStride must be >= 1");
  if (memoryCapacity < 1) throw std::invalid_argument("tracker params: memoryCapacity must be >= 1");
}

FeatureMap::FeatureMap(int width, int height, int dim) : width_(width), height_(height), dim_(dim) {
  if (width <= 0 || height <= 0 || dim <= 0) throw std::invalid_argument("feature map dimensions must be positive");
  data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * static_cast<std::size_t>(dim),
               0.0f);
}

std::vector<float> FeatureMap::descriptor(int x, int y) const {
  std::vector<float> d(static_cast<std::size_t>(dim_));
  for (int i = 0; i < dim_; ++i) d[static_cast<std::size_t>(i)] = value(x, y, i);
  return d;
}

FeatureMap extractFeatures(const Frame& frame, const TrackerParams& p) {
  const int r = p.patchRadius;
  if (r < 1) throw std::invalid_argument("extractFeatures: patchRadius must be >= 1");
  const int w = frame.width(), h = frame.height(), ch = frame.channels();
  if (w < 2 * r + 1 || h < 2 * r + 1) throw std::invalid_argument("extractFeatures: frame smaller than patch");
  const int side = 2 * r + 1;
  const int dim = ch * (side * side + 1);
  // Patch values are scaled so that a squared descriptor distance is the mean squared
  // pixel difference over the patch plus the squared gradient-magnitude difference.
  const double patchScale = 1.0 / side;
  FeatureMap fm(w, h, dim);
  auto px = [&](int x, int y, int c) { return frame(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1), c); };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int k = 0;
      for (int c = 0; c < ch; ++c) {
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) fm.value(x, y, k++) = static_cast<float>(patchScale * px(x + dx, y + dy, c));
        const double gx = 0.5 * (px(x + 1, y, c) - px(x - 1, y, c));
        const double gy = 0.5 * (px(x, y + 1, c) - px(x, y - 1, c));
        fm.value(x, y, k++) = static_cast<float>(std::sqrt(gx * gx + gy * gy));
      }
    }
  }
  return fm;
}

FeatureSequence extractSequence(std::span<const Frame> frames, const TrackerParams& p) {
  FeatureSequence seq;
  seq.reserve(frames.size());
  for (const auto& f : frames) seq.push_back(std::make_shared<const FeatureMap>(extractFeatures(f, p)));
  return seq;
}

MemoryBank::MemoryBank(int capacity, bool anchorPinned) : capacity_(capacity), anchorPinned_(anchorPinned) {
  if (capacity < 1) throw std::invalid_argument("memory capacity must be >= 1");
}

void MemoryBank::insert(MemoryEntry entry) {
  if (!entry.features) throw std::invalid_argument("memory entry requires features");
  if (entry.features->width() != entry.mask.width() || entry.features->height() != entry.mask.height())
    throw DimensionError("memory entry features and mask dimensions differ");
  if (!entries_.empty()) {
    const auto& f = *entries_.front().features;
    if (f.width() != entry.features->width() || f.height() != entry.features->height() ||
        f.dim() != entry.features->dim())
      throw DimensionError("memory entries must share dimensions");
  }
  if (static_cast<int>(entries_.size()) == capacity_) {
    if (anchorPinned_) {
      if (capacity_ == 1) return;  // only the anchor fits
      entries_.erase(entries_.begin() + 1);
    } else {
      entries_.pop_front();
    }
  }
  entries_.push_back(std::move(entry));
}

FrameMatch matchFrames(const FeatureMap& query, const FeatureMap& memory, const TrackerParams& p) {
  if (memory.width() != query.width() || memory.height() != query.height() || memory.dim() != query.dim())
    throw DimensionError("matchFrames: query dimensions do not match memory");
  const int w = query.width(), h = query.height(), dim = query.dim();
  const std::size_t pixels = query.planeSize();
  FrameMatch match{detail::TopKField<std::uint32_t>(pixels, p.topK)};
  auto& top = match.top;
  std::vector<float> sims(pixels);
  for (const auto& o : windowOffsets(p.searchRadius)) {
    // Query pixels whose shifted location stays inside the frame.
    const int x0 = std::max(0, -o.dx), x1 = std::min(w, w - o.dx);
    const int y0 = std::max(0, -o.dy), y1 = std::min(h, h - o.dy);
    if (x0 >= x1 || y0 >= y1) continue;
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(o.dy) * w + o.dx;
    for (int y = y0; y < y1; ++y) {
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(y) * w + x0;
      rowSimilarity(sims.data() + start, query.plane(0) + start, memory.plane(0) + start + shift, pixels, x1 - x0, dim);
    }
    for (int y = y0; y < y1; ++y) {
      const std::size_t row = static_cast<std::size_t>(y) * static_cast<std::size_t>(w);
      for (int x = x0; x < x1; ++x) {
        const std::size_t idx = row + static_cast<std::size_t>(x);
        if (top.admits(idx, sims[idx]))
          top.offer(idx, sims[idx], static_cast<std::uint32_t>(static_cast<std::ptrdiff_t>(idx) + shift));
      }
    }
  }
  return match;
}

SoftMask propagateStep(const MemoryBank& memory, std::span<const FrameMatch* const> matches, const TrackerParams& p) {
  p.validate();
  if (memory.empty()) throw std::invalid_argument("propagateStep: memory is empty");
  if (matches.size() != memory.size()) throw std::invalid_argument("propagateStep: one match per memory entry required");
  const auto& ref = *memory.entries().front().features;
  const std::size_t pixels = ref.planeSize();
  for (const auto* m : matches)
    if (m == nullptr || m->top.pixels() != pixels || m->top.k() != static_cast<std::size_t>(p.topK))
      throw DimensionError("propagateStep: match does not fit the memory");
  gPropagateSteps.fetch_add(1, std::memory_order_relaxed);

  detail::TopKField<double> top(pixels, p.topK);
  for (std::size_t e = 0; e < matches.size(); ++e) {
    const auto& mt = matches[e]->top;
    const double* maskData = memory.entries()[e].mask.data().data();
    for (std::size_t i = 0; i < pixels; ++i) {
      const std::size_t n = mt.count(i);
      for (std::size_t j = 0; j < n; ++j) {
        const float s = mt.score(i, j);
        if (!top.admits(i, s)) break;  // the list is sorted, nothing further can enter
        top.offer(i, s, maskData[mt.payload(i, j)]);
      }
    }
  }
  SoftMask out(ref.width(), ref.height());
  for (std::size_t i = 0; i < pixels; ++i) out[i] = top.readout(i, p.temperature);
  return out;
}

SoftMask propagateStep(const MemoryBank& memory, const FeatureMap& query, const TrackerParams& p) {
  p.validate();
  if (memory.empty()) throw std::invalid_argument("propagateStep: memory is empty");
  std::vector<FrameMatch> matches;
  matches.reserve(memory.size());
  for (const auto& e : memory.entries()) matches.push_back(matchFrames(query, *e.features, p));
  std::vector<const FrameMatch*> ptrs;
  for (const auto& m : matches) ptrs.push_back(&m);
  return propagateStep(memory, ptrs, p);
}

SoftMask propagateStep(const MemoryBank& memory, const Frame& query, const TrackerParams& p) {
  return propagateStep(memory, extractFeatures(query, p), p);
}

std::uint64_t propagateStepCount() { return gPropagateSteps.load(std::memory_order_relaxed); }

namespace {

using MatchFn = std::function<std::shared_ptr<const FrameMatch>(int queryIndex, int memoryIndex)>;

void checkAnchor(const FeatureSequence& features, int anchorIndex, const SoftMask& anchorMask) {
  const int n = static_cast<int>(features.size());
  if (anchorIndex < 0 || anchorIndex >= n) throw std::out_of_range("trackClip: anchor index out of range");
  const auto& anchorFeat = features[static_cast<std::size_t>(anchorIndex)];
  if (anchorFeat->width() != anchorMask.width() || anchorFeat->height() != anchorMask.height())
    throw DimensionError("trackClip: anchor mask dimensions do not match the clip");
}

// Runs one tracking pass; matches come from the callback so they can be shared.
std::vector<SoftMask> trackWith(const FeatureSequence& features, int anchorIndex, const SoftMask& anchorMask,
                                Direction direction, const TrackerParams& p, const MatchFn& match) {
  checkAnchor(features, anchorIndex, anchorMask);
  const int n = static_cast<int>(features.size());
  MemoryBank memory(p.memoryCapacity, true);
  memory.insert({anchorIndex, features[static_cast<std::size_t>(anchorIndex)], anchorMask});
  const int step = direction == Direction::Forward ? 1 : -1;
  std::vector<SoftMask> results;
  results.reserve(static_cast<std::size_t>(direction == Direction::Forward ? n - 1 - anchorIndex : anchorIndex));
  std::vector<std::shared_ptr<const FrameMatch>> held;
  std::vector<const FrameMatch*> ptrs;
  int visited = 0;
  for (int i = anchorIndex + step; i >= 0 && i < n; i += step) {
    held.clear();
    ptrs.clear();
    for (const auto& e : memory.entries()) {
      held.push_back(match(i, e.frameIndex));
      ptrs.push_back(held.back().get());
    }
    SoftMask m = propagateStep(memory, ptrs, p);
    ++visited;
    if (visited % p.memoryStride == 0) memory.insert({i, features[static_cast<std::size_t>(i)], m});
    results.push_back(std::move(m));
  }
  return results;
}

}  // namespace

std::vector<SoftMask> trackClip(const FeatureSequence& features, int anchorIndex, const SoftMask& anchorMask,
                                Direction direction, const TrackerParams& p) {
  p.validate();
  return trackWith(features, anchorIndex, anchorMask, direction, p, [&](int q, int m) {
    return std::make_shared<const FrameMatch>(
        matchFrames(*features[static_cast<std::size_t>(q)], *features[static_cast<std::size_t>(m)], p));
  });
}

std::vector<SoftMask> trackClip(const Clip& clip, int anchorIndex, const BinaryMask& anchorMask, Direction direction,
                                const TrackerParams& p) {
  p.validate();
  return trackClip(extractSequence(clip.frames, p), anchorIndex, SoftMask::fromBinary(anchorMask), direction, p);
}

std::vector<std::vector<SoftMask>> ClipPropagator::trackMany(int anchorIndex, std::span<const SoftMask> anchorMasks,
                                                             Direction direction) const {
  std::vector<std::vector<SoftMask>> out;
  out.reserve(anchorMasks.size());
  for (const auto& m : anchorMasks) out.push_back(track(anchorIndex, m, direction));
  return out;
}

MemoryTracker::MemoryTracker(std::span<const Frame> frames, const TrackerParams& p)
    : params_(p), features_(extractSequence(frames, p)) {
  p.validate();
}

MemoryTracker::MatchPtr MemoryTracker::windowMatch(int queryIndex, int memoryIndex) const {
  const auto key = std::make_pair(queryIndex, memoryIndex);
  {
    std::lock_guard lock(cacheMutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  auto m = std::make_shared<const FrameMatch>(matchFrames(*features_[static_cast<std::size_t>(queryIndex)],
                                                          *features_[static_cast<std::size_t>(memoryIndex)], params_));
  std::lock_guard lock(cacheMutex_);
  return cache_.emplace(key, std::move(m)).first->second;
}

std::vector<SoftMask> MemoryTracker::track(int anchorIndex, const SoftMask& anchorMask, Direction direction) const {
  return std::move(trackMany(anchorIndex, std::span<const SoftMask>(&anchorMask, 1), direction).front());
}

std::vector<std::vector<SoftMask>> MemoryTracker::trackMany(int anchorIndex, std::span<const SoftMask> anchorMasks,
                                                            Direction direction) const {
  // Matches against the anchor frame are shared by the masks of this call only;
  // all other pairs lie within the memory window and go through the clip cache.
  std::map<int, MatchPtr> anchorMatches;
  const MatchFn match = [&](int q, int m) -> MatchPtr {
    if (m != anchorIndex) return windowMatch(q, m);
    auto& slot = anchorMatches[q];
    if (!slot)
      slot = std::make_shared<const FrameMatch>(
          matchFrames(*features_[static_cast<std::size_t>(q)], *features_[static_cast<std::size_t>(m)], params_));
    return slot;
  };
  std::vector<std::vector<SoftMask>> out;
  out.reserve(anchorMasks.size());
  for (const auto& mask : anchorMasks) out.push_back(trackWith(features_, anchorIndex, mask, direction, params_, match));
  return out;
}

double trackingDice(const Clip& clip, const TrackerParams& p) {
  if (!clip.gtMasks) throw std::invalid_argument("trackingDice: clip has no ground truth");
  const auto& gt = *clip.gtMasks;
  const auto masks = trackClip(clip, 0, gt.front(), Direction::Forward, p);
  double sum = 0.0;
  for (std::size_t i = 0; i < masks.size(); ++i) sum += dice(binarize(masks[i]), gt[i + 1]);
  return masks.empty() ? 1.0 : sum / static_cast<double>(masks.size());
}

}  // namespace psdlab
