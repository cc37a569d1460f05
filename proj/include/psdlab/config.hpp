#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "psdlab/pipeline.hpp"
#include "psdlab/synth.hpp"
#include "psdlab/tracker.hpp"

namespace psdlab {

using Json = nlohmann::json;

// Raised for malformed configuration: unknown keys, wrong types, violated invariants.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Everything a run depends on. Parsing is strict: unknown keys are errors and every
// section is validated before it is returned.
struct RunConfig {
  SynthConfig synth;
  int trainClips = 20;
  int testClips = 8;
  TrackerParams tracker;
  TrainConfig train = deskScaleTrainConfig();
  AblationFlags flags{true, true, true, true};
  std::string datasetDir = "data";
  std::string outDir = "runs";
  std::uint64_t seed = 1;

  void validate() const;
};

Json toJson(const Interval& v);
Json toJson(const MotionRanges& v);
Json toJson(const SynthConfig& v);
Json toJson(const TrackerParams& v);
Json toJson(const AffineRanges& v);
Json toJson(const TrainConfig& v);
Json toJson(const AblationFlags& v);
Json toJson(const RunConfig& v);
Json toJson(const MetricSummary& v);
Json toJson(const EpochStats& v);
Json toJson(const RunReport& v);

// Each parser starts from `base` and overrides only the keys present.
SynthConfig synthConfigFromJson(const Json& j, SynthConfig base = {});
TrackerParams trackerParamsFromJson(const Json& j, TrackerParams base = {});
AffineRanges affineRangesFromJson(const Json& j, AffineRanges base = {});
TrainConfig trainConfigFromJson(const Json& j, TrainConfig base = {});
AblationFlags ablationFlagsFromJson(const Json& j, AblationFlags base = {});
RunConfig runConfigFromJson(const Json& j, RunConfig base = {});

RunConfig loadRunConfig(const std::filesystem::path& path);
Json readJsonFile(const std::filesystem::path& path);
void writeJsonFile(const std::filesystem::path& path, const Json& j);

// Dataset layout: dataset.json (clip ids per split, generator settings) plus one clip
// directory per clip under train/ and test/.
void writeDataset(const std::filesystem::path& dir, const Dataset& data, const Json& generator = Json::object());
Dataset readDataset(const std::filesystem::path& dir);

// 64-bit FNV-1a of the compact JSON dump, as 16 hex digits.
std::string configHash(const Json& j);

}  // namespace psdlab
