#include "psdlab/cli.hpp"

#include <unistd.h>

#include <functional>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "psdlab/config.hpp"
#include "psdlab/parallel.hpp"
#include "psdlab/pipeline.hpp"

namespace psdlab {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  int jobs = 0;
  std::string data;
  std::string checkpoint;
  std::string tracker;
  std::string split = "test";
};

// Usage problems the user can fix: reported without a stack of context, exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  RunConfig cfg;
  Json echo;  // resolved configuration written into every output directory
  int jobs = 1;
  std::ostream& out;
};

Context resolve(const CommonOptions& o, std::ostream& out) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : loadRunConfig(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.data.empty()) cfg.datasetDir = o.data;
  cfg.train.seed = cfg.seed;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  Context ctx{cfg, toJson(cfg), o.jobs > 0 ? o.jobs : defaultJobs(), out};
  return ctx;
}

// Builds the output in a hidden sibling directory and renames it into place only on
// success, so a failed command never leaves a partial result behind.
void atomicOutput(const fs::path& target, bool force, const std::function<void(const fs::path&)>& build) {
  if (fs::exists(target) && !force)
    throw UsageError(target.string() + " already exists; pass --force to overwrite");
  const fs::path parent = target.parent_path().empty() ? fs::path(".") : target.parent_path();
  fs::create_directories(parent);
  const fs::path tmp = parent / ("." + target.filename().string() + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    build(tmp);
    if (fs::exists(target)) fs::remove_all(target);
    fs::rename(tmp, target);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
}

fs::path runDir(const Context& ctx, const CommonOptions& o, const std::string& command, const Json& extra = {}) {
  Json key = {{"command", command}, {"config", ctx.echo}, {"extra", extra}};
  const fs::path base = o.out.empty() ? fs::path(ctx.cfg.outDir) : fs::path(o.out);
  return base / (command + "_" + configHash(key) + "_seed" + std::to_string(ctx.cfg.seed));
}

void writeEcho(const fs::path& dir, const Context& ctx, const std::string& command, const Json& extra = {}) {
  Json j = {{"command", command}, {"config", ctx.echo}};
  if (!extra.is_null()) j["inputs"] = extra;
  writeJsonFile(dir / "config.json", j);
}

Dataset loadDataset(const Context& ctx) { return readDataset(ctx.cfg.datasetDir); }

TrackerParams trackerFor(const Context& ctx, const CommonOptions& o) {
  if (o.tracker.empty()) return ctx.cfg.tracker;
  const Json j = readJsonFile(o.tracker);
  return trackerParamsFromJson(j.contains("tracker") ? j.at("tracker") : j);
}

void cmdGen(const CommonOptions& o, Context& ctx) {
  const fs::path target = o.out.empty() ? fs::path(ctx.cfg.datasetDir) : fs::path(o.out);
  const auto& c = ctx.cfg;
  atomicOutput(target, o.force, [&](const fs::path& dir) {
    const Dataset data = generateDataset(c.synth, c.trainClips, c.testClips, c.seed, ctx.jobs);
    writeDataset(dir, data,
                 {{"synth", toJson(c.synth)}, {"trainClips", c.trainClips}, {"testClips", c.testClips}, {"seed", c.seed}});
    writeEcho(dir, ctx, "gen");
  });
  ctx.out << "wrote " << c.trainClips << " train + " << c.testClips << " test clips (" << c.synth.width << "x"
          << c.synth.height << ", T=" << c.synth.frameCount << ") to " << target.string() << '\n';
}

void cmdCalibrate(const CommonOptions& o, Context& ctx) {
  const Dataset data = loadDataset(ctx);
  const TrackerParams p0 = trackerFor(ctx, o);
  const Json extra = {{"tracker", toJson(p0)}};
  const fs::path target = runDir(ctx, o, "calibrate", extra);
  CalibrationResult result;
  atomicOutput(target, o.force, [&](const fs::path& dir) {
    const TrainSet train(data.trainClips);
    result = calibrateShared(train, p0, ctx.cfg.train);
    Json trials = Json::array();
    for (const auto& t : result.trials) trials.push_back({{"params", toJson(t.params)}, {"score", t.score}});
    writeJsonFile(dir / "tracker_params.json", {{"tracker", toJson(result.best)}});
    writeJsonFile(dir / "calibration.json", {{"best", toJson(result.best)},
                                             {"bestScore", result.bestScore},
                                             {"initialScore", result.initialScore},
                                             {"trials", trials}});
    writeEcho(dir, ctx, "calibrate", extra);
  });
  ctx.out << "calibrated tracker: score " << result.initialScore << " -> " << result.bestScore << "; wrote "
          << (target / "tracker_params.json").string() << '\n';
}

void cmdLabel(const CommonOptions& o, Context& ctx) {
  const Dataset data = loadDataset(ctx);
  const TrackerParams tp = trackerFor(ctx, o);
  std::optional<ModelParameters> teacher;
  if (!o.checkpoint.empty()) teacher = loadParameters(o.checkpoint);
  const Json extra = {{"tracker", toJson(tp)}, {"checkpoint", o.checkpoint}};
  const fs::path target = runDir(ctx, o, "label", extra);
  const double thr = ctx.cfg.train.binarizeThreshold;
  std::size_t semantic = 0, total = 0;
  atomicOutput(target, o.force, [&](const fs::path& dir) {
    const TrainSet train(data.trainClips);
    std::vector<std::vector<PseudoLabelRecord>> records(train.size());
    parallelFor(train.size(), ctx.jobs, [&](std::size_t c) {
      const MemoryTracker tracker(train.frames(c), tp);
      const BinaryMask& y1 = train.annotation(c);
      const auto prop = tracker.track(0, SoftMask::fromBinary(y1), Direction::Forward);
      if (teacher) {
        std::vector<SoftMask> sem;
        for (std::size_t i = 1; i < train.frames(c).size(); ++i) sem.push_back(forward(*teacher, train.frames(c)[i]));
        records[c] = scoreClip(tracker, train.clipId(c), y1, prop, sem, thr, 0);
      } else {
        const std::vector<std::vector<SoftMask>> sets{prop};
        const auto scores = backPropScoreSets(tracker, sets, y1, thr);
        for (std::size_t k = 0; k < prop.size(); ++k)
          records[c].push_back({train.clipId(c), static_cast<int>(k) + 1, binarize(prop[k], thr), Source::Propagative,
                                scores[0][k], 0.0, 0});
      }
    });
    for (std::size_t c = 0; c < train.size(); ++c) {
      writePseudoLabels(dir / "clips" / train.clipId(c) / "pseudo" / "epoch_000", records[c]);
      for (const auto& r : records[c]) {
        semantic += r.source == Source::Semantic;
        ++total;
      }
    }
    writeEcho(dir, ctx, "label", extra);
  });
  ctx.out << "labelled " << total << " frames (" << semantic << " from the semantic teacher) in " << target.string()
          << '\n';
}

void cmdTrain(const CommonOptions& o, Context& ctx) {
  const Dataset data = loadDataset(ctx);
  const TrackerParams tp = trackerFor(ctx, o);
  const Json extra = {{"tracker", toJson(tp)}};
  const fs::path target = runDir(ctx, o, "train", extra);
  RunReport report;
  atomicOutput(target, o.force, [&](const fs::path& dir) {
    const TrainResult r = trainFSVPS(data, ctx.cfg.flags, ctx.cfg.train, tp, {ctx.jobs, dir});
    saveParameters(dir / "student.bin", r.student);
    saveParameters(dir / "teacher.bin", r.teacher);
    const AblationTable table{{r.report}, {r.records}};
    writeReports(dir, table);
    writeEcho(dir, ctx, "train", extra);
    report = r.report;
  });
  ctx.out << report.flags.label() << ": test Dice " << report.test.dice << ", IoU " << report.test.iou << ", MAE "
          << report.test.mae << "; run directory " << target.string() << '\n';
}

void cmdEval(const CommonOptions& o, Context& ctx) {
  if (o.checkpoint.empty()) throw UsageError("eval needs --checkpoint <parameters.bin>");
  if (o.split != "test" && o.split != "train") throw UsageError("--split must be test or train");
  const Dataset data = loadDataset(ctx);
  const ModelParameters params = loadParameters(o.checkpoint);
  const auto& clips = o.split == "test" ? data.testClips : data.trainClips;
  const Json extra = {{"checkpoint", fs::absolute(o.checkpoint).string()}, {"split", o.split}};
  const fs::path target = runDir(ctx, o, "eval", extra);
  MetricSummary m;
  atomicOutput(target, o.force, [&](const fs::path& dir) {
    m = evaluate(params, clips, ctx.cfg.train.binarizeThreshold, ctx.jobs);
    writeJsonFile(dir / "report.json", {{"split", o.split}, {"metrics", toJson(m)}});
    writeEcho(dir, ctx, "eval", extra);
  });
  ctx.out << "Dice " << m.dice << " IoU " << m.iou << " MAE " << m.mae << " over " << m.frames << " frames; report "
          << (target / "report.json").string() << '\n';
}

void cmdAblate(const CommonOptions& o, Context& ctx) {
  const Dataset data = loadDataset(ctx);
  const TrackerParams tp = trackerFor(ctx, o);
  const Json extra = {{"tracker", toJson(tp)}};
  const fs::path target = runDir(ctx, o, "ablate", extra);
  AblationTable table;
  atomicOutput(target, o.force, [&](const fs::path& dir) {
    table = runAblationSuite(data, ctx.cfg.train, tp, {ctx.jobs, dir});
    writeReports(dir, table);
    Json timing = Json::array();
    double total = 0.0;
    for (const auto& r : table.rows) {
      timing.push_back({{"label", r.flags.label()}, {"wallclockSeconds", r.wallclockSeconds}});
      total += r.wallclockSeconds;
    }
    writeJsonFile(dir / "timing.json", {{"rows", timing}, {"totalSeconds", total}});
    writeEcho(dir, ctx, "ablate", extra);
  });
  ctx.out << reportCsv(table) << "run directory " << target.string() << '\n';
}

}  // namespace

int runCli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot video polyp segmentation lab on synthetic clips", "psdlab"};
  app.require_subcommand(1);
  CommonOptions o;

  using Handler = void (*)(const CommonOptions&, Context&);
  std::vector<std::pair<CLI::App*, Handler>> commands;
  auto add = [&](const char* name, const char* help, Handler h) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Run seed (overrides the config)");
    sub->add_option("--out", o.out, "Output directory (overrides the config)");
    sub->add_flag("--force", o.force, "Overwrite existing output");
    sub->add_option("--jobs", o.jobs, "Worker threads (default: $PSDNET_LAB_JOBS, else all cores)")
        ->check(CLI::PositiveNumber);
    if (std::string(name) != "gen") sub->add_option("--data", o.data, "Dataset directory (overrides the config)");
    commands.emplace_back(sub, h);
    return sub;
  };
  add("gen", "Generate the synthetic train/test dataset", cmdGen);
  add("calibrate", "Calibrate the propagative tracker on annotated first frames", cmdCalibrate)
      ->add_option("--tracker", o.tracker, "Initial tracker parameters (JSON)")
      ->check(CLI::ExistingFile);
  auto* label = add("label", "Propagate and score pseudo labels for the training clips", cmdLabel);
  label->add_option("--tracker", o.tracker, "Tracker parameters (JSON, e.g. from calibrate)")->check(CLI::ExistingFile);
  label->add_option("--checkpoint", o.checkpoint, "Semantic teacher parameters")->check(CLI::ExistingFile);
  add("train", "Train a student with the configured flags", cmdTrain)
      ->add_option("--tracker", o.tracker, "Tracker parameters (JSON)")
      ->check(CLI::ExistingFile);
  auto* eval = add("eval", "Evaluate a checkpoint against ground truth", cmdEval);
  eval->add_option("--checkpoint", o.checkpoint, "Model parameters")->check(CLI::ExistingFile);
  eval->add_option("--split", o.split, "test or train");
  add("ablate", "Run the six-row ablation and write report.csv", cmdAblate)
      ->add_option("--tracker", o.tracker, "Tracker parameters (JSON)")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    Context ctx = resolve(o, out);
    for (const auto& [sub, handler] : commands)
      if (sub->parsed()) handler(o, ctx);
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace psdlab
