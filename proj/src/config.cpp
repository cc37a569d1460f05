#include "psdlab/config.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

namespace psdlab {

namespace {

// Reads keys of one JSON object, checking types; finish() rejects keys nobody asked for.
class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError(section_ + ": expected a JSON object");
  }

  void get(const char* key, int& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      const auto x = v->get<std::int64_t>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) fail(key, "a 32-bit integer");
      out = static_cast<int>(x);
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, Interval& out) {
    if (const Json* v = find(key)) {
      Reader r(*v, section_ + "." + key);
      r.get("min", out.min);
      r.get("max", out.max);
      r.finish();
    }
  }
  // Returns the sub-object for a nested section, or nullptr.
  const Json* section(const char* key) { return find(key); }
  std::string path(const char* key) const { return section_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(section_ + ": unknown key \"" + k + "\"");
  }

 private:
  const Json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    return &*it;
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError(section_ + "." + key + ": expected " + what);
  }

  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

template <typename T>
T validated(T v, const std::string& section) {
  try {
    v.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(section + ": " + e.what());
  }
  return v;
}

}  // namespace

void RunConfig::validate() const {
  synth.validate();
  tracker.validate();
  train.validate();
  flags.validate();
  if (trainClips < 1) throw std::invalid_argument("trainClips must be at least 1");
  if (testClips < 0) throw std::invalid_argument("testClips must be non-negative");
  if (datasetDir.empty()) throw std::invalid_argument("datasetDir must not be empty");
  if (outDir.empty()) throw std::invalid_argument("outDir must not be empty");
}

Json toJson(const Interval& v) { return {{"min", v.min}, {"max", v.max}}; }

Json toJson(const MotionRanges& v) {
  return {{"dx", toJson(v.dx)}, {"dy", toJson(v.dy)}, {"rotation", toJson(v.rotation)}, {"scale", toJson(v.scale)},
          {"speed", toJson(v.speed)}};
}

Json toJson(const SynthConfig& v) {
  Json j = {{"width", v.width},
            {"height", v.height},
            {"frameCount", v.frameCount},
            {"blobCount", v.blobCount},
            {"blobRadius", v.blobRadius},
            {"motion", toJson(v.motion)},
            {"deformation", v.deformation},
            {"textureContrast", v.textureContrast},
            {"illuminationDrift", v.illuminationDrift},
            {"contrastDrift", v.contrastDrift},
            {"noiseSigma", v.noiseSigma},
            {"specularRate", v.specularRate},
            {"blurRadius", v.blurRadius},
            {"seed", v.seed}};
  if (v.start) j["start"] = {{"x", v.start->first}, {"y", v.start->second}};
  return j;
}

Json toJson(const TrackerParams& v) {
  return {{"patchRadius", v.patchRadius},   {"searchRadius", v.searchRadius},     {"topK", v.topK},
          {"temperature", v.temperature},   {"memoryStride", v.memoryStride},     {"memoryCapacity", v.memoryCapacity}};
}

Json toJson(const AffineRanges& v) {
  return {{"rotation", toJson(v.rotation)},
          {"shear", toJson(v.shear)},
          {"zoom", toJson(v.zoom)},
          {"translateFraction", v.translateFraction},
          {"cropMinArea", v.cropMinArea},
          {"stepFraction", v.stepFraction}};
}

Json toJson(const TrainConfig& v) {
  return {{"epochs", v.epochs},
          {"learningRate", v.learningRate},
          {"weightDecay", v.weightDecay},
          {"emaDecay", v.emaDecay},
          {"batchSize", v.batchSize},
          {"binarizeThreshold", v.binarizeThreshold},
          {"seed", v.seed},
          {"relabelPeriod", v.relabelPeriod},
          {"semanticWarmup", v.semanticWarmup},
          {"hidden", v.hidden},
          {"calibrationBudget", v.calibrationBudget},
          {"calibrationClips", v.calibrationClips},
          {"perClipCalibration", v.perClipCalibration}};
}

Json toJson(const AblationFlags& v) {
  return {{"usePT", v.usePT}, {"useFT", v.useFT}, {"useST", v.useST}, {"useBS", v.useBS}};
}

Json toJson(const RunConfig& v) {
  return {{"synth", toJson(v.synth)},     {"trainClips", v.trainClips}, {"testClips", v.testClips},
          {"tracker", toJson(v.tracker)}, {"train", toJson(v.train)},   {"flags", toJson(v.flags)},
          {"datasetDir", v.datasetDir},   {"outDir", v.outDir},         {"seed", v.seed}};
}

Json toJson(const MetricSummary& v) {
  Json clips = Json::array();
  for (const auto& c : v.perClip)
    clips.push_back({{"clipId", c.clipId}, {"frames", c.frames}, {"dice", c.dice}, {"iou", c.iou}, {"mae", c.mae}});
  return {{"frames", v.frames}, {"dice", v.dice}, {"iou", v.iou}, {"mae", v.mae}, {"perClip", clips}};
}

Json toJson(const EpochStats& v) {
  return {{"epoch", v.epoch},
          {"supLoss", v.supLoss},
          {"unsupLoss", v.unsupLoss},
          {"totalLoss", v.totalLoss},
          {"relabelled", v.relabelled},
          {"semanticSelections", v.semanticSelections},
          {"labelledFrames", v.labelledFrames}};
}

Json toJson(const RunReport& v) {
  Json epochs = Json::array();
  for (const auto& e : v.epochs) epochs.push_back(toJson(e));
  return {{"label", v.flags.label()},
          {"flags", toJson(v.flags)},
          {"config", toJson(v.config)},
          {"trackerParams", toJson(v.trackerParams)},
          {"epochs", epochs},
          {"trainPseudo", v.trainPseudo ? toJson(*v.trainPseudo) : Json(nullptr)},
          {"test", toJson(v.test)},
          {"gtLeakAttempts", v.gtLeakAttempts},
          {"propagateSteps", v.propagateSteps},
          {"wallclockSeconds", v.wallclockSeconds}};
}

SynthConfig synthConfigFromJson(const Json& j, SynthConfig v) {
  Reader r(j, "synth");
  r.get("width", v.width);
  r.get("height", v.height);
  r.get("frameCount", v.frameCount);
  r.get("blobCount", v.blobCount);
  r.get("blobRadius", v.blobRadius);
  if (const Json* m = r.section("motion")) {
    Reader mr(*m, r.path("motion"));
    mr.get("dx", v.motion.dx);
    mr.get("dy", v.motion.dy);
    mr.get("rotation", v.motion.rotation);
    mr.get("scale", v.motion.scale);
    mr.get("speed", v.motion.speed);
    mr.finish();
  }
  r.get("deformation", v.deformation);
  r.get("textureContrast", v.textureContrast);
  r.get("illuminationDrift", v.illuminationDrift);
  r.get("contrastDrift", v.contrastDrift);
  r.get("noiseSigma", v.noiseSigma);
  r.get("specularRate", v.specularRate);
  r.get("blurRadius", v.blurRadius);
  r.get("seed", v.seed);
  if (const Json* s = r.section("start")) {
    if (s->is_null()) {
      v.start.reset();
    } else {
      Reader sr(*s, r.path("start"));
      std::pair<double, double> p = v.start.value_or(std::pair<double, double>{0.0, 0.0});
      sr.get("x", p.first);
      sr.get("y", p.second);
      sr.finish();
      v.start = p;
    }
  }
  r.finish();
  return validated(v, "synth");
}

TrackerParams trackerParamsFromJson(const Json& j, TrackerParams v) {
  Reader r(j, "tracker");
  r.get("patchRadius", v.patchRadius);
  r.get("searchRadius", v.searchRadius);
  r.get("topK", v.topK);
  r.get("temperature", v.temperature);
  r.get("memoryStride", v.memoryStride);
  r.get("memoryCapacity", v.memoryCapacity);
  r.finish();
  return validated(v, "tracker");
}

AffineRanges affineRangesFromJson(const Json& j, AffineRanges v) {
  Reader r(j, "affine");
  r.get("rotation", v.rotation);
  r.get("shear", v.shear);
  r.get("zoom", v.zoom);
  r.get("translateFraction", v.translateFraction);
  r.get("cropMinArea", v.cropMinArea);
  r.get("stepFraction", v.stepFraction);
  r.finish();
  return validated(v, "affine");
}

TrainConfig trainConfigFromJson(const Json& j, TrainConfig v) {
  Reader r(j, "train");
  r.get("epochs", v.epochs);
  r.get("learningRate", v.learningRate);
  r.get("weightDecay", v.weightDecay);
  r.get("emaDecay", v.emaDecay);
  r.get("batchSize", v.batchSize);
  r.get("binarizeThreshold", v.binarizeThreshold);
  r.get("seed", v.seed);
  r.get("relabelPeriod", v.relabelPeriod);
  r.get("semanticWarmup", v.semanticWarmup);
  r.get("hidden", v.hidden);
  r.get("calibrationBudget", v.calibrationBudget);
  r.get("calibrationClips", v.calibrationClips);
  r.get("perClipCalibration", v.perClipCalibration);
  r.finish();
  return validated(v, "train");
}

AblationFlags ablationFlagsFromJson(const Json& j, AblationFlags v) {
  Reader r(j, "flags");
  r.get("usePT", v.usePT);
  r.get("useFT", v.useFT);
  r.get("useST", v.useST);
  r.get("useBS", v.useBS);
  r.finish();
  return validated(v, "flags");
}

RunConfig runConfigFromJson(const Json& j, RunConfig v) {
  Reader r(j, "config");
  if (const Json* s = r.section("synth")) v.synth = synthConfigFromJson(*s, v.synth);
  r.get("trainClips", v.trainClips);
  r.get("testClips", v.testClips);
  if (const Json* s = r.section("tracker")) v.tracker = trackerParamsFromJson(*s, v.tracker);
  if (const Json* s = r.section("train")) v.train = trainConfigFromJson(*s, v.train);
  if (const Json* s = r.section("flags")) v.flags = ablationFlagsFromJson(*s, v.flags);
  r.get("datasetDir", v.datasetDir);
  r.get("outDir", v.outDir);
  r.get("seed", v.seed);
  r.finish();
  return validated(v, "config");
}

Json readJsonFile(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  try {
    return Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void writeJsonFile(const std::filesystem::path& path, const Json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

RunConfig loadRunConfig(const std::filesystem::path& path) { return runConfigFromJson(readJsonFile(path)); }

void writeDataset(const std::filesystem::path& dir, const Dataset& data, const Json& generator) {
  std::filesystem::create_directories(dir);
  Json train = Json::array(), test = Json::array();
  for (const auto& c : data.trainClips) {
    writeClip(dir / "train" / c.clipId, c);
    train.push_back(c.clipId);
  }
  for (const auto& c : data.testClips) {
    writeClip(dir / "test" / c.clipId, c);
    test.push_back(c.clipId);
  }
  writeJsonFile(dir / "dataset.json",
                {{"format", "psdlab-dataset"}, {"version", 1}, {"train", train}, {"test", test}, {"generator", generator}});
}

Dataset readDataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "dataset.json"))
    throw std::runtime_error(dir.string() + " is not a dataset directory (no dataset.json); run `gen` first");
  const Json j = readJsonFile(dir / "dataset.json");
  if (j.value("format", "") != "psdlab-dataset" || j.value("version", 0) != 1)
    throw std::runtime_error(dir.string() + "/dataset.json: unsupported format");
  Dataset d;
  for (const auto& id : j.at("train")) d.trainClips.push_back(readClip(dir / "train" / id.get<std::string>()));
  for (const auto& id : j.at("test")) d.testClips.push_back(readClip(dir / "test" / id.get<std::string>()));
  return d;
}

std::string configHash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

std::string indexedName(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d.pgm", prefix, i);
  return buf;
}

}  // namespace

void writeClip(const std::filesystem::path& dir, const Clip& clip, const SynthConfig* config) {
  clip.validate();
  if (clip.frames.front().channels() != 1) throw std::invalid_argument("writeClip: only single-channel clips");
  std::filesystem::create_directories(dir);
  Json manifest = {{"format", "psdlab-clip"},
                   {"version", 1},
                   {"clipId", clip.clipId},
                   {"seed", clip.seed},
                   {"width", clip.width()},
                   {"height", clip.height()},
                   {"frameCount", clip.length()},
                   {"groundTruth", clip.gtMasks.has_value()}};
  if (config) manifest["config"] = toJson(*config);
  for (int i = 0; i < clip.length(); ++i) {
    writePgm(dir / indexedName("frame", i), clip.frames[static_cast<std::size_t>(i)]);
    if (clip.gtMasks) writePgm(dir / indexedName("gt", i), (*clip.gtMasks)[static_cast<std::size_t>(i)]);
  }
  writeJsonFile(dir / "manifest.json", manifest);
}

Clip readClip(const std::filesystem::path& dir) {
  const Json m = readJsonFile(dir / "manifest.json");
  if (m.value("format", "") != "psdlab-clip" || m.value("version", 0) != 1)
    throw std::runtime_error(dir.string() + ": not a clip directory (bad manifest format)");
  Clip clip;
  clip.clipId = m.at("clipId").get<std::string>();
  clip.seed = m.at("seed").get<std::uint64_t>();
  const int n = m.at("frameCount").get<int>();
  const int w = m.at("width").get<int>();
  const int h = m.at("height").get<int>();
  const bool gt = m.at("groundTruth").get<bool>();
  if (gt) clip.gtMasks.emplace();
  for (int i = 0; i < n; ++i) {
    clip.frames.push_back(readPgmFrame(dir / indexedName("frame", i)));
    if (clip.frames.back().width() != w || clip.frames.back().height() != h)
      throw DimensionError(dir.string() + ": frame size differs from manifest");
    if (gt) clip.gtMasks->push_back(readPgmMask(dir / indexedName("gt", i)));
  }
  clip.validate();
  return clip;
}

}  // namespace psdlab
