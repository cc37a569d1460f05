#include "psdlab/scoring.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace psdlab {

namespace {

using json = nlohmann::json;

std::string labelName(int frameIndex) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "labels_%04d.pgm", frameIndex);
  return buf;
}

void checkScore(double s, const char* name) {
  if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument(std::string("score out of [0,1]: ") + name);
}

}  // namespace

std::string_view toString(Source s) { return s == Source::Propagative ? "propagative" : "semantic"; }

Source parseSource(std::string_view s) {
  if (s == "propagative") return Source::Propagative;
  if (s == "semantic") return Source::Semantic;
  throw std::invalid_argument("unknown pseudo-label source: " + std::string(s));
}

double backPropScore(const ClipPropagator& tracker, int frameIndex, const SoftMask& candidate, const BinaryMask& y1,
                     double threshold) {
  if (frameIndex < 1 || frameIndex >= tracker.length())
    throw std::out_of_range("backPropScore: frame index must be in [1, T-1]");
  if (!candidate.sameShape(y1)) throw DimensionError("backPropScore: candidate and annotation dimensions differ");
  const auto masks = tracker.track(frameIndex, candidate, Direction::Backward);
  return iou(binarize(masks.back(), threshold), y1);
}

double backPropScore(const Clip& clip, int frameIndex, const SoftMask& candidate, const BinaryMask& y1,
                     const TrackerParams& p, double threshold) {
  if (frameIndex < 1 || frameIndex >= static_cast<int>(clip.frames.size()))
    throw std::out_of_range("backPropScore: frame index must be in [1, T-1]");
  // Only frames 0..i take part in the backward run.
  const MemoryTracker tracker(std::span<const Frame>(clip.frames.data(), static_cast<std::size_t>(frameIndex) + 1), p);
  return backPropScore(tracker, frameIndex, candidate, y1, threshold);
}

std::vector<std::vector<double>> backPropScoreSets(const ClipPropagator& tracker,
                                                   std::span<const std::vector<SoftMask>> sets, const BinaryMask& y1,
                                                   double threshold) {
  const int T = tracker.length();
  for (const auto& s : sets)
    if (static_cast<int>(s.size()) != T - 1)
      throw std::invalid_argument("backPropScoreSets: each candidate set must cover frames 1..T-1");
  std::vector<std::vector<double>> scores(sets.size(), std::vector<double>(static_cast<std::size_t>(T - 1)));
  std::vector<SoftMask> anchors;
  for (int i = 1; i < T; ++i) {
    anchors.clear();
    for (const auto& s : sets) {
      const SoftMask& c = s[static_cast<std::size_t>(i - 1)];
      if (!c.sameShape(y1)) throw DimensionError("backPropScoreSets: candidate and annotation dimensions differ");
      anchors.push_back(c);
    }
    const auto runs = tracker.trackMany(i, anchors, Direction::Backward);
    for (std::size_t s = 0; s < sets.size(); ++s)
      scores[s][static_cast<std::size_t>(i - 1)] = iou(binarize(runs[s].back(), threshold), y1);
  }
  return scores;
}

MergedLabel mergePseudoLabel(const SoftMask& pCand, const SoftMask& sCand, double scoreP, double scoreS,
                             double threshold) {
  if (!pCand.sameShape(sCand)) throw DimensionError("mergePseudoLabel: candidate dimensions differ");
  checkScore(scoreP, "scoreP");
  checkScore(scoreS, "scoreS");
  const bool semantic = scoreS > scoreP;
  return {binarize(semantic ? sCand : pCand, threshold), semantic ? Source::Semantic : Source::Propagative, scoreP,
          scoreS};
}

std::vector<PseudoLabelRecord> scoreClip(const ClipPropagator& tracker, const std::string& clipId,
                                         const BinaryMask& y1, std::span<const SoftMask> propMasks,
                                         std::span<const SoftMask> semMasks, double threshold, int epoch) {
  const std::size_t n = static_cast<std::size_t>(tracker.length() - 1);
  if (propMasks.size() != n || semMasks.size() != n)
    throw std::invalid_argument("scoreClip: candidate lists must cover frames 1..T-1");
  const std::vector<std::vector<SoftMask>> sets{{propMasks.begin(), propMasks.end()},
                                                {semMasks.begin(), semMasks.end()}};
  const auto scores = backPropScoreSets(tracker, sets, y1, threshold);
  std::vector<PseudoLabelRecord> records;
  records.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto merged = mergePseudoLabel(propMasks[k], semMasks[k], scores[0][k], scores[1][k], threshold);
    records.push_back({clipId, static_cast<int>(k) + 1, std::move(merged.mask), merged.source, merged.scoreProp,
                       merged.scoreSem, epoch});
  }
  return records;
}

std::vector<PseudoLabelRecord> scoreClip(const Clip& clip, const BinaryMask& y1, std::span<const SoftMask> propMasks,
                                         std::span<const SoftMask> semMasks, const TrackerParams& p, double threshold,
                                         int epoch) {
  const MemoryTracker tracker(clip.frames, p);
  return scoreClip(tracker, clip.clipId, y1, propMasks, semMasks, threshold, epoch);
}

void writePseudoLabels(const std::filesystem::path& dir, std::span<const PseudoLabelRecord> records) {
  std::filesystem::create_directories(dir);
  json scores = json::object();
  for (const auto& r : records) {
    writePgm(dir / labelName(r.frameIndex), r.mask);
    scores[std::to_string(r.frameIndex)] = {{"scoreProp", r.scoreProp},
                                            {"scoreSem", r.scoreSem},
                                            {"source", std::string(toString(r.source))},
                                            {"clipId", r.clipId},
                                            {"epoch", r.epochProduced}};
  }
  std::ofstream os(dir / "scores.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "scores.json").string());
  os << scores.dump(2) << '\n';
}

std::vector<PseudoLabelRecord> readPseudoLabels(const std::filesystem::path& dir) {
  std::ifstream is(dir / "scores.json");
  if (!is) throw std::runtime_error("cannot read " + (dir / "scores.json").string());
  const json scores = json::parse(is);
  std::map<int, PseudoLabelRecord> byFrame;
  for (const auto& [key, v] : scores.items()) {
    PseudoLabelRecord r;
    r.frameIndex = std::stoi(key);
    r.clipId = v.at("clipId");
    r.scoreProp = v.at("scoreProp");
    r.scoreSem = v.at("scoreSem");
    r.source = parseSource(v.at("source").get<std::string>());
    r.epochProduced = v.at("epoch");
    r.mask = readPgmMask(dir / labelName(r.frameIndex));
    byFrame.emplace(r.frameIndex, std::move(r));
  }
  std::vector<PseudoLabelRecord> out;
  for (auto& [k, r] : byFrame) out.push_back(std::move(r));
  return out;
}

}  // namespace psdlab
