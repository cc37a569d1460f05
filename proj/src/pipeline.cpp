#include "psdlab/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "psdlab/config.hpp"
#include "psdlab/parallel.hpp"
#include "psdlab/rng.hpp"

namespace psdlab {

namespace {

using json = nlohmann::json;

// Stream tags for deriveSeed.
enum : std::uint64_t {
  kTagInit = 1,
  kTagCalibrationSample = 2,
  kTagCalibration = 3,
  kTagShuffle = 4,
  kTagSourcePick = 5,
  kTagTrainSplit = 6,
  kTagTestSplit = 7,
  kTagClipCalibration = 1000,
};

std::string epochName(const char* prefix, int epoch, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%03d%s", prefix, epoch, suffix);
  return buf;
}

std::string rowDirName(const AblationFlags& f) {
  std::string s = f.label();
  for (char& ch : s)
    if (ch == '+') ch = '_';
  return s;
}

// Training item: frame i of clip c with its current target.
struct Item {
  std::size_t clip = 0;
  int frame = 0;
};

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (!(learningRate > 0.0) || !std::isfinite(learningRate)) throw std::invalid_argument("learningRate must be > 0");
  if (!(weightDecay >= 0.0) || !std::isfinite(weightDecay)) throw std::invalid_argument("weightDecay must be >= 0");
  if (!(emaDecay >= 0.0 && emaDecay <= 1.0)) throw std::invalid_argument("emaDecay must be in [0,1]");
  if (batchSize < 1) throw std::invalid_argument("batchSize must be at least 1");
  if (!(binarizeThreshold > 0.0 && binarizeThreshold < 1.0))
    throw std::invalid_argument("binarizeThreshold must be in (0,1)");
  if (relabelPeriod < 0) throw std::invalid_argument("relabelPeriod must be >= 0");
  if (semanticWarmup < 0) throw std::invalid_argument("semanticWarmup must be >= 0");
  if (hidden < 1) throw std::invalid_argument("hidden must be at least 1");
  if (calibrationBudget < 1) throw std::invalid_argument("calibrationBudget must be at least 1");
  if (calibrationClips < 1) throw std::invalid_argument("calibrationClips must be at least 1");
}

void AblationFlags::validate() const {
  if (useFT && !usePT) throw std::invalid_argument("useFT requires usePT");
  if (useBS && !(usePT && useST)) throw std::invalid_argument("useBS requires usePT and useST");
}

std::string AblationFlags::label() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += name;
  };
  add(usePT, "PT");
  add(useFT, "FT");
  add(useST, "ST");
  add(useBS, "BS");
  return s.empty() ? "baseline" : s;
}

std::vector<AblationFlags> ablationRows() {
  return {
      {false, false, false, false}, {true, false, false, false}, {true, true, false, false},
      {false, false, true, false},  {true, true, true, false},   {true, true, true, true},
  };
}

TrainSet::TrainSet(std::span<const Clip> clips) : clips_(clips) {}

const BinaryMask& TrainSet::groundTruth(std::size_t c, int frameIndex) const {
  if (frameIndex != 0) {
    ++leakAttempts_;
    throw LabelLeakError("training code requested ground truth for frame " + std::to_string(frameIndex) +
                         " of clip " + clips_[c].clipId);
  }
  const auto& gt = clips_[c].gtMasks;
  if (!gt || gt->empty()) throw std::invalid_argument("training clip " + clips_[c].clipId + " has no annotation");
  return gt->front();
}

void Dataset::validate() const {
  if (trainClips.empty()) throw std::invalid_argument("dataset has no training clips");
  const int w = trainClips.front().width();
  const int h = trainClips.front().height();
  auto check = [&](const Clip& c, bool fullGt) {
    c.validate();
    if (c.length() < 2) throw std::invalid_argument("clip " + c.clipId + " must have at least 2 frames");
    if (c.width() != w || c.height() != h) throw DimensionError("clip " + c.clipId + " has different dimensions");
    if (!c.gtMasks) throw std::invalid_argument("clip " + c.clipId + (fullGt ? " has no ground truth" : " has no annotation"));
  };
  for (const auto& c : trainClips) {
    check(c, false);
    if (c.gtMasks->front().empty()) throw std::invalid_argument("clip " + c.clipId + " has an empty annotation");
  }
  for (const auto& c : testClips) check(c, true);
}

TrainConfig deskScaleTrainConfig() {
  TrainConfig c;
  c.epochs = 8;
  c.learningRate = 1e-2;
  c.emaDecay = 0.99;
  c.relabelPeriod = 0;
  c.semanticWarmup = 5;
  c.calibrationBudget = 16;
  return c;
}

CalibrationResult calibrateShared(const TrainSet& train, const TrackerParams& tp, const TrainConfig& cfg) {
  const std::size_t N = train.size();
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng pick(deriveSeed(cfg.seed, kTagCalibrationSample));
  pick.shuffle(order.begin(), order.end());
  std::vector<AnchorPair> anchors;
  const std::size_t n = std::min<std::size_t>(N, static_cast<std::size_t>(cfg.calibrationClips));
  for (std::size_t k = 0; k < n; ++k) anchors.push_back({train.frames(order[k]).front(), train.annotation(order[k])});
  return calibrate(anchors, tp, cfg.calibrationBudget, deriveSeed(cfg.seed, kTagCalibration));
}

Dataset generateDataset(const SynthConfig& base, int trainClips, int testClips, std::uint64_t seed, int jobs) {
  if (trainClips < 0 || testClips < 0) throw std::invalid_argument("clip counts must be non-negative");
  base.validate();
  Dataset d;
  d.trainClips.resize(static_cast<std::size_t>(trainClips));
  d.testClips.resize(static_cast<std::size_t>(testClips));
  auto make = [&](std::vector<Clip>& out, const char* split, std::uint64_t tag) {
    parallelFor(out.size(), jobs, [&](std::size_t k) {
      SynthConfig cfg = base;
      cfg.seed = deriveSeed(deriveSeed(seed, tag), k);
      char id[32];
      std::snprintf(id, sizeof id, "%s_%04zu", split, k);
      out[k] = generateClip(cfg, id);
    });
  };
  make(d.trainClips, "train", kTagTrainSplit);
  make(d.testClips, "test", kTagTestSplit);
  return d;
}

MetricSummary evaluatePredictions(std::span<const std::vector<SoftMask>> predictions, std::span<const Clip> clips,
                                  double threshold) {
  if (predictions.size() != clips.size()) throw std::invalid_argument("evaluate: one prediction list per clip");
  MetricSummary out;
  double dSum = 0.0, iSum = 0.0, mSum = 0.0;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const auto& clip = clips[c];
    if (!clip.gtMasks) throw std::invalid_argument("evaluate: clip " + clip.clipId + " has no ground truth");
    const auto& gt = *clip.gtMasks;
    if (predictions[c].size() != gt.size())
      throw std::invalid_argument("evaluate: prediction count differs from frame count for " + clip.clipId);
    ClipMetrics cm;
    cm.clipId = clip.clipId;
    cm.frames = static_cast<int>(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const BinaryMask bin = binarize(predictions[c][i], threshold);
      const double d = dice(bin, gt[i]);
      const double u = iou(bin, gt[i]);
      const double m = mae(predictions[c][i], gt[i]);
      cm.dice += d;
      cm.iou += u;
      cm.mae += m;
      dSum += d;
      iSum += u;
      mSum += m;
    }
    if (cm.frames > 0) {
      cm.dice /= cm.frames;
      cm.iou /= cm.frames;
      cm.mae /= cm.frames;
    }
    out.frames += cm.frames;
    out.perClip.push_back(std::move(cm));
  }
  if (out.frames > 0) {
    out.dice = dSum / out.frames;
    out.iou = iSum / out.frames;
    out.mae = mSum / out.frames;
  }
  return out;
}

MetricSummary evaluate(const ModelParameters& params, std::span<const Clip> clips, double threshold, int jobs) {
  std::vector<std::vector<SoftMask>> predictions(clips.size());
  parallelFor(clips.size(), jobs, [&](std::size_t c) {
    for (const auto& f : clips[c].frames) predictions[c].push_back(forward(params, f));
  });
  return evaluatePredictions(predictions, clips, threshold);
}

TrainResult trainFSVPS(const Dataset& data, const AblationFlags& flags, const TrainConfig& cfg,
                       const TrackerParams& tp, const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t stepsBefore = propagateStepCount();
  flags.validate();
  cfg.validate();
  tp.validate();
  data.validate();

  const TrainSet train(data.trainClips);
  const std::size_t N = train.size();
  const int jobs = options.jobs > 0 ? options.jobs : defaultJobs();
  const double thr = cfg.binarizeThreshold;

  Architecture arch;
  arch.width = data.trainClips.front().width();
  arch.height = data.trainClips.front().height();
  arch.hidden = cfg.hidden;

  TrainResult result;
  result.student = initParameters(arch, deriveSeed(cfg.seed, kTagInit));
  result.teacher = result.student;
  RunReport& report = result.report;
  report.flags = flags;
  report.config = cfg;
  report.trackerParams = tp;

  // Per-clip input planes, reused every epoch.
  std::vector<std::vector<SegmenterInput>> inputs(N);
  std::vector<BinaryMask> annotations(N);
  for (std::size_t c = 0; c < N; ++c) annotations[c] = train.annotation(c);
  parallelFor(N, jobs, [&](std::size_t c) {
    for (const auto& f : train.frames(c)) inputs[c].push_back(prepareInput(f));
  });

  // Tracker settings per clip.
  std::vector<TrackerParams> clipParams(N, tp);
  if (flags.useFT) {
    if (cfg.perClipCalibration) {
      parallelFor(N, jobs, [&](std::size_t c) {
        clipParams[c] = calibrate(train.frames(c).front(), annotations[c], tp, cfg.calibrationBudget,
                                  deriveSeed(cfg.seed, kTagClipCalibration + c));
      });
    } else {
      const auto shared = calibrateShared(train, tp, cfg).best;
      std::fill(clipParams.begin(), clipParams.end(), shared);
    }
    report.trackerParams = clipParams.front();
  }

  // Propagative candidates, frozen for the run. prop[c][i - 1] belongs to frame i.
  std::vector<std::vector<SoftMask>> prop(N);
  if (flags.usePT) {
    parallelFor(N, jobs, [&](std::size_t c) {
      const MemoryTracker tracker(train.frames(c), clipParams[c]);
      prop[c] = tracker.track(0, SoftMask::fromBinary(annotations[c]), Direction::Forward);
    });
  }

  // labels[c][i - 1]: current unsupervised target of frame i, when one exists.
  std::vector<std::vector<std::optional<BinaryMask>>> labels(N);
  for (std::size_t c = 0; c < N; ++c) labels[c].resize(static_cast<std::size_t>(train.length(c) - 1));
  if (flags.usePT) {
    for (std::size_t c = 0; c < N; ++c)
      for (std::size_t k = 0; k < prop[c].size(); ++k) labels[c][k] = binarize(prop[c][k], thr);
  }

  std::vector<std::vector<double>> propScores(N);
  Rng shuffleRng(deriveSeed(cfg.seed, kTagShuffle));
  std::size_t totalFrames = 0;
  for (std::size_t c = 0; c < N; ++c) totalFrames += static_cast<std::size_t>(train.length(c));
  const std::size_t B = static_cast<std::size_t>(cfg.batchSize);
  const std::size_t stepsPerEpoch = (totalFrames + B - 1) / B;
  OptimizerState optim = makeOptimizer(result.student.values.size(), cfg.learningRate, cfg.weightDecay);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;

    const bool relabel = flags.useST && epoch >= cfg.semanticWarmup &&
                         (epoch == cfg.semanticWarmup ||
                          (cfg.relabelPeriod > 0 && (epoch - cfg.semanticWarmup) % cfg.relabelPeriod == 0));
    if (relabel) {
      stats.relabelled = true;
      std::vector<std::vector<SoftMask>> sem(N);
      parallelFor(N, jobs, [&](std::size_t c) {
        for (int i = 1; i < train.length(c); ++i)
          sem[c].push_back(forward(result.teacher, inputs[c][static_cast<std::size_t>(i)]));
      });

      if (flags.useBS) {
        std::vector<std::vector<PseudoLabelRecord>> clipRecords(N);
        parallelFor(N, jobs, [&](std::size_t c) {
          const MemoryTracker tracker(train.frames(c), clipParams[c]);
          std::vector<std::vector<SoftMask>> sets;
          if (propScores[c].empty()) sets.push_back(prop[c]);
          sets.push_back(sem[c]);
          auto scores = backPropScoreSets(tracker, sets, annotations[c], thr);
          if (propScores[c].empty()) propScores[c] = std::move(scores.front());
          const auto& semScores = scores.back();
          for (std::size_t k = 0; k < sem[c].size(); ++k) {
            auto merged = mergePseudoLabel(prop[c][k], sem[c][k], propScores[c][k], semScores[k], thr);
            clipRecords[c].push_back({train.clipId(c), static_cast<int>(k) + 1, std::move(merged.mask), merged.source,
                                      merged.scoreProp, merged.scoreSem, epoch});
          }
        });
        for (std::size_t c = 0; c < N; ++c) {
          for (const auto& r : clipRecords[c]) labels[c][static_cast<std::size_t>(r.frameIndex - 1)] = r.mask;
          if (options.outDir)
            writePseudoLabels(*options.outDir / "clips" / train.clipId(c) / "pseudo" / epochName("epoch_", epoch, ""),
                              clipRecords[c]);
          for (auto& r : clipRecords[c]) result.records.push_back(std::move(r));
        }
      } else if (flags.usePT) {
        Rng pickRng(deriveSeed(deriveSeed(cfg.seed, kTagSourcePick), static_cast<std::uint64_t>(epoch)));
        for (std::size_t c = 0; c < N; ++c)
          for (std::size_t k = 0; k < sem[c].size(); ++k)
            labels[c][k] = binarize(pickRng.below(2) == 0 ? prop[c][k] : sem[c][k], thr);
      } else {
        for (std::size_t c = 0; c < N; ++c)
          for (std::size_t k = 0; k < sem[c].size(); ++k) labels[c][k] = binarize(sem[c][k], thr);
      }
      // Count semantic picks for the report.
      if (flags.useBS) {
        for (const auto& r : result.records)
          if (r.epochProduced == epoch && r.source == Source::Semantic) ++stats.semanticSelections;
      } else if (!flags.usePT) {
        for (const auto& l : labels) stats.semanticSelections += static_cast<int>(l.size());
      }
    }

    // Item pool fixed for the epoch: every annotation plus every labelled frame.
    std::vector<Item> items;
    for (std::size_t c = 0; c < N; ++c) {
      items.push_back({c, 0});
      for (std::size_t k = 0; k < labels[c].size(); ++k)
        if (labels[c][k]) items.push_back({c, static_cast<int>(k) + 1});
    }
    stats.labelledFrames = static_cast<int>(items.size() - N);

    std::vector<std::size_t> perm(items.size());
    std::size_t cursor = perm.size();
    double supSum = 0.0, unsupSum = 0.0, allSum = 0.0;
    std::size_t seen = 0;
    std::vector<LossAndGradient> batchOut(B);
    std::vector<double> grad(result.student.values.size());

    for (std::size_t step = 0; step < stepsPerEpoch; ++step) {
      std::vector<Item> batch;
      while (batch.size() < B) {
        if (cursor == perm.size()) {
          std::iota(perm.begin(), perm.end(), std::size_t{0});
          shuffleRng.shuffle(perm.begin(), perm.end());
          cursor = 0;
        }
        batch.push_back(items[perm[cursor++]]);
      }
      parallelFor(batch.size(), jobs, [&](std::size_t b) {
        const Item& it = batch[b];
        const BinaryMask& target =
            it.frame == 0 ? annotations[it.clip] : *labels[it.clip][static_cast<std::size_t>(it.frame - 1)];
        batchOut[b] = lossAndGradient(result.student, inputs[it.clip][static_cast<std::size_t>(it.frame)], target);
      });
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const double l = batchOut[b].loss;
        if (!std::isfinite(l)) throw std::domain_error("non-finite training loss");
        (batch[b].frame == 0 ? supSum : unsupSum) += l;
        allSum += l;
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += batchOut[b].gradient[j];
      }
      for (double& g : grad) g /= static_cast<double>(batch.size());
      seen += batch.size();
      optimStep(result.student, optim, grad);
      emaUpdate(result.teacher, result.student, cfg.emaDecay);
    }

    // Both terms are shares of the mean per-item loss, so they add up to the total.
    stats.supLoss = supSum / static_cast<double>(seen);
    stats.unsupLoss = unsupSum / static_cast<double>(seen);
    stats.totalLoss = allSum / static_cast<double>(seen);
    report.epochs.push_back(stats);

    if (options.outDir) {
      std::filesystem::create_directories(*options.outDir / "checkpoints");
      saveParameters(*options.outDir / "checkpoints" / epochName("student_epoch_", epoch, ".bin"), result.student);
      saveParameters(*options.outDir / "checkpoints" / epochName("teacher_epoch_", epoch, ".bin"), result.teacher);
    }
  }

  report.gtLeakAttempts = train.leakAttempts();

  // Quality of the final pseudo labels; evaluation side, so the raw clips are read here.
  bool anyLabel = false;
  for (const auto& l : labels)
    for (const auto& m : l) anyLabel = anyLabel || m.has_value();
  if (anyLabel) {
    MetricSummary s;
    double dSum = 0.0, iSum = 0.0, mSum = 0.0;
    for (std::size_t c = 0; c < N; ++c) {
      const auto& gt = *data.trainClips[c].gtMasks;
      ClipMetrics cm;
      cm.clipId = train.clipId(c);
      for (std::size_t k = 0; k < labels[c].size(); ++k) {
        if (!labels[c][k]) continue;
        const auto& y = gt[k + 1];
        const double d = dice(*labels[c][k], y), u = iou(*labels[c][k], y);
        const double m = mae(SoftMask::fromBinary(*labels[c][k]), y);
        cm.dice += d;
        cm.iou += u;
        cm.mae += m;
        dSum += d;
        iSum += u;
        mSum += m;
        ++cm.frames;
      }
      if (cm.frames > 0) {
        cm.dice /= cm.frames;
        cm.iou /= cm.frames;
        cm.mae /= cm.frames;
      }
      s.frames += cm.frames;
      s.perClip.push_back(std::move(cm));
    }
    s.dice = dSum / s.frames;
    s.iou = iSum / s.frames;
    s.mae = mSum / s.frames;
    report.trainPseudo = std::move(s);
  }

  report.test = evaluate(result.student, data.testClips, thr, jobs);
  report.propagateSteps = propagateStepCount() - stepsBefore;
  report.wallclockSeconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

AblationTable runAblationSuite(const Dataset& data, const TrainConfig& cfg, const TrackerParams& tp,
                               const RunOptions& options) {
  AblationTable table;
  for (const auto& flags : ablationRows()) {
    RunOptions rowOptions = options;
    if (options.outDir) rowOptions.outDir = *options.outDir / rowDirName(flags);
    auto result = trainFSVPS(data, flags, cfg, tp, rowOptions);
    table.rows.push_back(std::move(result.report));
    table.records.push_back(std::move(result.records));
  }
  return table;
}

std::string reportCsv(const AblationTable& table) {
  std::ostringstream os;
  os << "config,usePT,useFT,useST,useBS,trainDice,testDice,testIoU,testMAE\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& r : table.rows) {
    const auto& f = r.flags;
    os << f.label() << ',' << f.usePT << ',' << f.useFT << ',' << f.useST << ',' << f.useBS << ','
       << (r.trainPseudo ? num(r.trainPseudo->dice) : std::string()) << ',' << num(r.test.dice) << ','
       << num(r.test.iou) << ',' << num(r.test.mae) << '\n';
  }
  return os.str();
}

void writeReports(const std::filesystem::path& dir, const AblationTable& table) {
  std::filesystem::create_directories(dir);
  json rows = json::array();
  for (const auto& r : table.rows) rows.push_back(toJson(r));
  {
    std::ofstream os(dir / "report.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "report.json").string());
    os << json{{"rows", rows}}.dump(2) << '\n';
  }
  std::ofstream os(dir / "report.csv", std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + (dir / "report.csv").string());
  os << reportCsv(table);
}

}  // namespace psdlab
