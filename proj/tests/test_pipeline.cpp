#include <doctest.h>

#include <filesystem>
#include <map>

#include "psdlab/pipeline.hpp"
#include "support/oracles.hpp"

using namespace psdlab;

namespace {

Dataset tinyData(std::uint64_t seed = 3) {
  SynthConfig cfg;
  cfg.width = cfg.height = 32;
  cfg.blobRadius = 6;
  cfg.frameCount = 6;
  return generateDataset(cfg, 3, 2, seed, 1);
}

TrainConfig tinyConfig() {
  TrainConfig c = deskScaleTrainConfig();
  c.epochs = 3;
  c.hidden = 4;
  c.semanticWarmup = 1;
  c.relabelPeriod = 1;
  c.calibrationBudget = 3;
  c.calibrationClips = 2;
  return c;
}

}  // namespace

TEST_CASE("ablation flags") {
  CHECK_NOTHROW(AblationFlags{}.validate());
  CHECK_THROWS((AblationFlags{false, true, false, false}.validate()));
  CHECK_THROWS((AblationFlags{true, false, false, true}.validate()));
  CHECK_THROWS((AblationFlags{false, false, true, true}.validate()));
  const auto rows = ablationRows();
  REQUIRE(rows.size() == 6);
  std::vector<std::string> labels;
  for (const auto& r : rows) {
    CHECK_NOTHROW(r.validate());
    labels.push_back(r.label());
  }
  CHECK(labels == std::vector<std::string>{"baseline", "PT", "PT+FT", "ST", "PT+FT+ST", "PT+FT+ST+BS"});
}

TEST_CASE("train config validation") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  CHECK_NOTHROW(deskScaleTrainConfig().validate());
  TrainConfig c;
  c.epochs = 0;
  CHECK_THROWS(c.validate());
  c = {};
  c.emaDecay = 1.2;
  CHECK_THROWS(c.validate());
  c = {};
  c.batchSize = 0;
  CHECK_THROWS(c.validate());
  c = {};
  c.relabelPeriod = -1;
  CHECK_THROWS(c.validate());
}

TEST_CASE("train set refuses ground truth beyond the first frame") {
  const Dataset d = tinyData();
  const TrainSet ts(d.trainClips);
  CHECK(ts.annotation(1) == (*d.trainClips[1].gtMasks)[0]);
  CHECK(ts.leakAttempts() == 0);
  CHECK_THROWS_AS(ts.groundTruth(0, 1), LabelLeakError);
  CHECK_THROWS_AS(ts.groundTruth(2, 5), LabelLeakError);
  CHECK(ts.leakAttempts() == 2);
  CHECK(ts.frames(0).size() == 6);
}

TEST_CASE("evaluation aggregates per-frame oracle metrics") {
  const Dataset d = tinyData();
  const auto& clips = d.testClips;
  Rng rng(1);
  std::vector<std::vector<SoftMask>> preds(clips.size());
  double dsum = 0, isum = 0, msum = 0;
  int n = 0;
  for (std::size_t c = 0; c < clips.size(); ++c)
    for (const auto& g : *clips[c].gtMasks) {
      SoftMask p(32, 32);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.uniform();
      const auto b = binarize(p);
      dsum += oracle::dice(b, g);
      isum += oracle::iou(b, g);
      msum += oracle::mae(p, g);
      ++n;
      preds[c].push_back(std::move(p));
    }
  const MetricSummary m = evaluatePredictions(preds, clips);
  CHECK(m.frames == n);
  CHECK(m.dice == doctest::Approx(dsum / n).epsilon(1e-12));
  CHECK(m.iou == doctest::Approx(isum / n).epsilon(1e-12));
  CHECK(m.mae == doctest::Approx(msum / n).epsilon(1e-12));
  REQUIRE(m.perClip.size() == clips.size());
  CHECK(m.perClip[0].clipId == clips[0].clipId);

  std::vector<std::vector<SoftMask>> exact(clips.size());
  for (std::size_t c = 0; c < clips.size(); ++c)
    for (const auto& g : *clips[c].gtMasks) exact[c].push_back(SoftMask::fromBinary(g));
  const MetricSummary e = evaluatePredictions(exact, clips);
  CHECK(e.dice == 1.0);
  CHECK(e.iou == 1.0);
  CHECK(e.mae == 0.0);

  Architecture a;
  a.width = a.height = 32;
  auto half = initParameters(a, 1);
  zeroFinalLayer(half);
  CHECK(evaluate(half, clips).mae == 0.5);

  std::vector<Clip> unlabeled{clips[0]};
  unlabeled[0].gtMasks.reset();
  CHECK_THROWS(evaluate(half, unlabeled));
}

TEST_CASE("training keeps its bookkeeping invariants") {
  const Dataset d = tinyData();
  const TrainConfig cfg = tinyConfig();
  for (const auto& flags : ablationRows()) {
    CAPTURE(flags.label());
    const TrainResult r = trainFSVPS(d, flags, cfg, TrackerParams{}, {1, std::nullopt});
    const RunReport& rep = r.report;
    CHECK(rep.gtLeakAttempts == 0);
    REQUIRE(rep.epochs.size() == 3);
    for (const auto& e : rep.epochs) {
      CHECK(std::abs(e.totalLoss - (e.supLoss + e.unsupLoss)) <= 1e-12);
      CHECK(std::isfinite(e.totalLoss));
      if (!flags.usePT && !flags.useST) CHECK(e.unsupLoss == 0.0);
    }
    CHECK(rep.trainPseudo.has_value() == (flags.usePT || flags.useST));
    CHECK(rep.test.frames == 2 * 6);
    CHECK((rep.test.dice >= 0.0 && rep.test.dice <= 1.0));
    CHECK(r.records.empty() == !flags.useBS);
    if (!flags.useFT) CHECK(rep.trackerParams == TrackerParams{});
    if (!flags.useST) CHECK(rep.epochs.back().semanticSelections == 0);
  }
}

TEST_CASE("training is deterministic and independent of the worker count") {
  const Dataset d = tinyData();
  const AblationFlags flags{true, true, true, true};
  const TrainResult a = trainFSVPS(d, flags, tinyConfig(), TrackerParams{}, {1, std::nullopt});
  const TrainResult b = trainFSVPS(d, flags, tinyConfig(), TrackerParams{}, {3, std::nullopt});
  CHECK(a.student == b.student);
  CHECK(a.teacher == b.teacher);
  CHECK(a.report.test.dice == b.report.test.dice);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(a.records[i].mask == b.records[i].mask);
}

TEST_CASE("merged labels are persisted, dominate, and propagative candidates stay frozen") {
  const auto dir = std::filesystem::temp_directory_path() / "psdlab_test_bs";
  std::filesystem::remove_all(dir);
  const Dataset d = tinyData();
  const TrainResult r = trainFSVPS(d, {true, true, true, true}, tinyConfig(), TrackerParams{}, {1, dir});

  // Epochs 1 and 2 relabel; each produces T-1 records per clip.
  REQUIRE(r.records.size() == 2u * 3u * 5u);
  std::map<std::pair<std::string, int>, double> propScore;
  for (const auto& rec : r.records) {
    const double chosen = rec.source == Source::Propagative ? rec.scoreProp : rec.scoreSem;
    CHECK(chosen == std::max(rec.scoreProp, rec.scoreSem));
    // Propagative candidates never change, so neither does their score.
    const auto key = std::pair{rec.clipId, rec.frameIndex};
    if (auto it = propScore.find(key); it != propScore.end())
      CHECK(it->second == rec.scoreProp);
    else
      propScore[key] = rec.scoreProp;
  }

  std::size_t seen = 0;
  for (const auto& clip : d.trainClips)
    for (int epoch : {1, 2}) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d", epoch);
      const auto onDisk = readPseudoLabels(dir / "clips" / clip.clipId / "pseudo" / name);
      REQUIRE(onDisk.size() == 5);
      for (const auto& rec : onDisk) {
        bool found = false;
        for (const auto& mem : r.records)
          if (mem.clipId == rec.clipId && mem.frameIndex == rec.frameIndex && mem.epochProduced == epoch) {
            CHECK(mem.mask == rec.mask);
            CHECK((mem.source == rec.source));
            found = true;
          }
        CHECK(found);
        ++seen;
      }
    }
  CHECK(seen == r.records.size());
  CHECK(std::filesystem::exists(dir / "checkpoints" / "student_epoch_002.bin"));
  CHECK(loadParameters(dir / "checkpoints" / "teacher_epoch_002.bin") == r.teacher);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablation suite rows equal individual runs") {
  const Dataset d = tinyData();
  TrainConfig cfg = tinyConfig();
  cfg.epochs = 2;
  const AblationTable t = runAblationSuite(d, cfg, TrackerParams{}, {1, std::nullopt});
  REQUIRE(t.rows.size() == 6);
  REQUIRE(t.records.size() == 6);
  const TrainResult base = trainFSVPS(d, {}, cfg, TrackerParams{}, {1, std::nullopt});
  CHECK(t.rows[0].test.dice == base.report.test.dice);
  CHECK(t.rows[0].test.mae == base.report.test.mae);

  const std::string csv = reportCsv(t);
  CHECK(csv.rfind("config,usePT,useFT,useST,useBS,trainDice,testDice,testIoU,testMAE\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(csv.find("\nbaseline,0,0,0,0,,") != std::string::npos);
  CHECK(reportCsv(runAblationSuite(d, cfg, TrackerParams{}, {2, std::nullopt})) == csv);
}

TEST_CASE("inconsistent inputs are rejected") {
  const Dataset d = tinyData();
  CHECK_THROWS(trainFSVPS(d, {false, true, false, false}, tinyConfig(), TrackerParams{}));
  TrainConfig bad = tinyConfig();
  bad.learningRate = -1;
  CHECK_THROWS(trainFSVPS(d, {}, bad, TrackerParams{}));
  Dataset broken = d;
  broken.trainClips[0].gtMasks.reset();
  CHECK_THROWS(trainFSVPS(broken, {}, tinyConfig(), TrackerParams{}));
}
