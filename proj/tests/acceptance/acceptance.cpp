// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fails.
// PSDNET_LAB_JOBS sets the worker count of the ablation suite.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>

#include "psdlab/config.hpp"
#include "psdlab/parallel.hpp"
#include "psdlab/pipeline.hpp"
#include "psdlab/stats.hpp"
#include "support/oracles.hpp"
#include "support/stub_tracker.hpp"

using namespace psdlab;

namespace {

int failures = 0;

void report(int id, const char* name, bool ok, double seconds, const std::string& detail) {
  std::printf("[%s] %2d %-32s %8.1fs  %s\n", ok ? "PASS" : "FAIL", id, name, seconds, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

template <class F>
void criterion(int id, const char* name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail;
  bool ok = false;
  try {
    ok = body(detail);
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(id, name, ok, s, detail);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool metricOracles(std::string& detail) {
  Rng rng(2024);
  int mismatches = 0;
  double worstIdentity = 0.0;
  for (int k = 0; k < 100; ++k) {
    const auto a = oracle::randomMask(16, 16, rng.uniform(), rng);
    const auto b = oracle::randomMask(16, 16, rng.uniform(), rng);
    SoftMask p(16, 16);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.uniform();
    if (dice(a, b) != oracle::dice(a, b) || iou(a, b) != oracle::iou(a, b) || mae(p, b) != oracle::mae(p, b) ||
        mae(SoftMask::fromBinary(a), b) != oracle::mae(SoftMask::fromBinary(a), b))
      ++mismatches;
    const double j = iou(a, b);
    worstIdentity = std::max(worstIdentity, std::abs(dice(a, b) - 2 * j / (1 + j)));
  }
  detail = fmt("mismatches %d, max |dice - 2j/(1+j)| %.2e", mismatches, worstIdentity);
  return mismatches == 0 && worstIdentity <= 1e-12;
}

bool gradientCheck(std::string& detail) {
  Architecture a;
  a.width = 20;
  a.height = 18;
  a.hidden = 6;
  const double h = 1e-4;
  double worst = 0.0;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    auto p = initParameters(a, s);
    Rng rng(1000 + s);
    for (auto& v : p.values) v += 0.2 * rng.normal();
    Frame f(a.width, a.height);
    for (auto& v : f.data()) v = rng.uniform();
    const auto target = oracle::disk(a.width, a.height, 6 + rng.uniform() * 8, 5 + rng.uniform() * 8, 4.0);
    const SegmenterInput in = prepareInput(f);
    const auto lg = lossAndGradient(p, in, target);
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      auto q = p;
      q.values[j] = p.values[j] + h;
      const double up = ceLoss(forward(q, in), target);
      q.values[j] = p.values[j] - h;
      const double down = ceLoss(forward(q, in), target);
      const double fd = (up - down) / (2 * h);
      const double rel = std::abs(fd - lg.gradient[j]) / std::max({std::abs(fd), std::abs(lg.gradient[j]), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  detail = fmt("max relative error %.2e over 10 seeds", worst);
  return worst < 1e-4;
}

bool emaClosedForm(std::string& detail) {
  Architecture a;
  a.width = a.height = 8;
  a.hidden = 4;
  const auto s = initParameters(a, 5);
  double worst = 0.0;
  for (double d : {0.0, 0.5, 0.999, 1.0}) {
    auto t = initParameters(a, 6);
    const auto t0 = t;
    for (int k = 0; k < 1000; ++k) emaUpdate(t, s, d);
    const double dn = std::pow(d, 1000);
    for (std::size_t i = 0; i < t.values.size(); ++i)
      worst = std::max(worst, std::abs(t.values[i] - (dn * t0.values[i] + (1 - dn) * s.values[i])));
  }
  detail = fmt("max abs error %.2e", worst);
  return worst <= 1e-9;
}

bool staticIdentity(std::string& detail) {
  const Clip c = generateClip(SynthConfig{}.staticVariant());
  const BinaryMask& y = (*c.gtMasks)[0];
  const TrackerParams p;
  int bad = 0, checked = 0;
  for (const auto& m : trackClip(c, 0, y, Direction::Forward, p)) {
    bad += binarize(m) != y;
    ++checked;
  }
  for (int anchor = 1; anchor < c.length(); anchor += 7) {
    for (const auto& m : trackClip(c, anchor, y, Direction::Backward, p)) {
      bad += binarize(m) != y;
      ++checked;
    }
  }
  const auto last = trackClip(c, c.length() - 1, y, Direction::Backward, p);
  for (const auto& m : last) {
    bad += binarize(m) != y;
    ++checked;
  }
  detail = fmt("%d of %d propagated masks differ", bad, checked);
  return bad == 0;
}

bool translation(std::string& detail) {
  SynthConfig cfg = SynthConfig{}.staticVariant();
  cfg.motion.dx = {2.0, 2.0};
  cfg.start = std::pair{14.0, 32.0};
  cfg.frameCount = 20;
  const Clip c = generateClip(cfg);
  const auto& gt = *c.gtMasks;
  const auto masks = trackClip(c, 0, gt[0], Direction::Forward, TrackerParams{});
  double worst = 1.0;
  for (std::size_t i = 0; i < masks.size(); ++i)
    worst = std::min(worst, dice(binarize(masks[i]), oracle::shift(gt[0], 2 * static_cast<int>(i + 1), 0)));
  detail = fmt("min per-frame Dice %.4f over %zu frames", worst, masks.size());
  return worst >= 0.95;
}

bool scoreCorrelation(std::string& detail) {
  constexpr int W = 40, H = 32, T = 12;
  const auto base = oracle::disk(W, H, 10, 16, 6);
  std::vector<BinaryMask> gt;
  for (int i = 0; i < T; ++i) gt.push_back(oracle::shift(base, i, 0));
  const stub::DriftTracker tracker({.length = T, .vx = 1, .driftEvery = 6});
  Rng rng(99);
  double worst = 1.0;
  std::vector<double> all;
  for (int i = 1; i < T; ++i) {
    std::vector<double> score, quality;
    for (int k = 0; k < 60; ++k) {
      BinaryMask c = oracle::shift(gt[static_cast<std::size_t>(i)], static_cast<int>(rng.below(13)) - 6,
                                   static_cast<int>(rng.below(13)) - 6);
      const int grow = static_cast<int>(rng.below(5)) - 2;
      for (int g = 0; g < grow; ++g) c = oracle::dilate(c);
      for (int g = 0; g > grow; --g) c = oracle::erode(c);
      score.push_back(backPropScore(tracker, i, SoftMask::fromBinary(c), gt[0]));
      quality.push_back(oracle::iou(c, gt[static_cast<std::size_t>(i)]));
    }
    const double r = spearman(score, quality);
    worst = std::min(worst, r);
    all.push_back(r);
  }
  detail = fmt("Spearman min %.3f mean %.3f over %d frames x 60 candidates", worst, mean(all), T - 1);
  return worst >= 0.8;
}

bool errorAccumulation(const Dataset& data, std::string& detail) {
  std::vector<double> rhos(data.trainClips.size());
  parallelFor(data.trainClips.size(), 0, [&](std::size_t c) {
    const Clip& clip = data.trainClips[c];
    const auto masks = trackClip(clip, 0, clip.gtMasks->front(), Direction::Forward, TrackerParams{});
    std::vector<double> d, idx;
    for (std::size_t i = 0; i < masks.size(); ++i) {
      d.push_back(dice(binarize(masks[i]), (*clip.gtMasks)[i + 1]));
      idx.push_back(static_cast<double>(i + 1));
    }
    rhos[c] = spearman(d, idx);
  });
  const double avg = mean(rhos);
  detail = fmt("mean Spearman(Dice, frame) %.3f over %zu clips", avg, rhos.size());
  return avg < -0.3;
}

}  // namespace

int main() {
  criterion(1, "metric oracles", metricOracles);
  criterion(2, "finite-difference gradient", gradientCheck);
  criterion(3, "EMA closed form", emaClosedForm);
  criterion(4, "static clip identity", staticIdentity);
  criterion(5, "translation tracking", translation);
  criterion(6, "score-quality correlation", scoreCorrelation);

  const RunConfig rc;
  const Dataset data = generateDataset(rc.synth, rc.trainClips, rc.testClips, rc.seed);
  criterion(7, "error accumulation", [&](std::string& d) { return errorAccumulation(data, d); });

  TrainConfig tc = rc.train;
  tc.seed = rc.seed;
  const RunOptions opts{0, std::nullopt};
  AblationTable table;
  std::string csv;
  double suiteSeconds = 0.0;
  criterion(8, "ablation ordering", [&](std::string& d) {
    const auto t0 = std::chrono::steady_clock::now();
    table = runAblationSuite(data, tc, rc.tracker, opts);
    suiteSeconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    csv = reportCsv(table);
    std::printf("%s", csv.c_str());
    const auto test = [&](std::size_t r) { return table.rows.at(r).test.dice; };
    const auto train = [&](std::size_t r) { return table.rows.at(r).trainPseudo.value().dice; };
    // Rows: baseline, PT, PT+FT, ST, PT+FT+ST, PT+FT+ST+BS.
    const bool ptOverBase = test(0) < test(1);
    const bool ftOverPt = test(1) < test(2);
    const bool bsOverDual = test(5) > test(4);
    const bool dualOverBest = test(4) >= std::max(test(2), test(3));
    const bool trainBs = train(5) > train(4);
    const bool runtime = suiteSeconds < 45 * 60;
    d = fmt("base<PT %d, PT<PT+FT %d, BS>dual %d, dual>=max(PT+FT,ST) %d, train BS>dual %d, runtime %.0fs on %d "
            "worker(s) %d",
            ptOverBase, ftOverPt, bsOverDual, dualOverBest, trainBs, suiteSeconds, defaultJobs(), runtime);
    return ptOverBase && ftOverPt && bsOverDual && dualOverBest && trainBs && runtime;
  });

  criterion(9, "merged-score dominance", [&](std::string& d) {
    if (table.records.size() != 6) throw std::runtime_error("ablation suite did not run");
    const auto& recs = table.records[5];
    int violations = 0;
    for (const auto& r : recs) {
      const double chosen = r.source == Source::Propagative ? r.scoreProp : r.scoreSem;
      violations += chosen != std::max(r.scoreProp, r.scoreSem);
    }
    d = fmt("%d violations over %zu merged labels", violations, recs.size());
    return violations == 0 && !recs.empty();
  });

  criterion(10, "no ground-truth leaks", [&](std::string& d) {
    if (table.rows.size() != 6) throw std::runtime_error("ablation suite did not run");
    std::uint64_t leaks = 0;
    for (const auto& r : table.rows) leaks += r.gtLeakAttempts;
    d = fmt("%llu leak attempts over %zu runs", static_cast<unsigned long long>(leaks), table.rows.size());
    return leaks == 0;
  });

  criterion(11, "deterministic report.csv", [&](std::string& d) {
    if (csv.empty()) throw std::runtime_error("ablation suite did not run");
    const std::string again = reportCsv(runAblationSuite(data, tc, rc.tracker, opts));
    d = again == csv ? "identical bytes on rerun" : "report.csv differs on rerun";
    return again == csv;
  });

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
