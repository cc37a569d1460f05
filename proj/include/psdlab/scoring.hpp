#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psdlab/imaging.hpp"
#include "psdlab/tracker.hpp"

namespace psdlab {

enum class Source { Propagative, Semantic };

std::string_view toString(Source s);
Source parseSource(std::string_view s);

struct PseudoLabelRecord {
  std::string clipId;
  int frameIndex = 0;  // 0-based; frame 0 carries the annotation and has no record
  BinaryMask mask;
  Source source = Source::Propagative;
  double scoreProp = 0.0;
  double scoreSem = 0.0;
  int epochProduced = 0;
};

// Tracks the candidate for frame i back to frame 0 and returns its IoU with y1.
double backPropScore(const ClipPropagator& tracker, int frameIndex, const SoftMask& candidate, const BinaryMask& y1,
                     double threshold = 0.5);
double backPropScore(const Clip& clip, int frameIndex, const SoftMask& candidate, const BinaryMask& y1,
                     const TrackerParams& p, double threshold = 0.5);

// Scores several candidate sets in one sweep. sets[s][i - 1] is the candidate of set s
// for frame i (i = 1..T-1); result[s][i - 1] is its score. One backward run per
// candidate; runs from the same anchor frame share their frame matches.
std::vector<std::vector<double>> backPropScoreSets(const ClipPropagator& tracker,
                                                   std::span<const std::vector<SoftMask>> sets, const BinaryMask& y1,
                                                   double threshold = 0.5);

struct MergedLabel {
  BinaryMask mask;
  Source source = Source::Propagative;
  double scoreProp = 0.0;
  double scoreSem = 0.0;
};

// Keeps the candidate with the strictly higher score; ties go to the propagative one.
MergedLabel mergePseudoLabel(const SoftMask& pCand, const SoftMask& sCand, double scoreP, double scoreS,
                             double threshold = 0.5);

// One record per frame 1..T-1, in frame order. Exactly 2(T-1) backward runs.
std::vector<PseudoLabelRecord> scoreClip(const ClipPropagator& tracker, const std::string& clipId,
                                         const BinaryMask& y1, std::span<const SoftMask> propMasks,
                                         std::span<const SoftMask> semMasks, double threshold = 0.5,
                                         int epoch = 0);
std::vector<PseudoLabelRecord> scoreClip(const Clip& clip, const BinaryMask& y1, std::span<const SoftMask> propMasks,
                                         std::span<const SoftMask> semMasks, const TrackerParams& p,
                                         double threshold = 0.5, int epoch = 0);

// Writes labels_%04d.pgm per record and scores.json into dir (created if missing).
void writePseudoLabels(const std::filesystem::path& dir, std::span<const PseudoLabelRecord> records);
std::vector<PseudoLabelRecord> readPseudoLabels(const std::filesystem::path& dir);

}  // namespace psdlab
