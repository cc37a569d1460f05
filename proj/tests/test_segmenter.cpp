#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "psdlab/segmenter.hpp"
#include "psdlab/synth.hpp"
#include "support/oracles.hpp"

using namespace psdlab;

namespace {

Architecture small(int w = 12, int h = 10, int hidden = 5) {
  Architecture a;
  a.width = w;
  a.height = h;
  a.hidden = hidden;
  return a;
}

Frame randomFrame(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Frame f(w, h);
  for (auto& v : f.data()) v = rng.uniform();
  return f;
}

// Direct four-loop evaluation of the two-layer network on the prepared input planes.
SoftMask naiveForward(const ModelParameters& P, const SegmenterInput& in) {
  const Architecture& a = P.arch;
  const int W = a.width, H = a.height, C = a.inputChannels, K = a.kernel, r = K / 2;
  const auto& v = P.values;
  auto w1 = [&](int h, int c, int ky, int kx) { return v[static_cast<std::size_t>(((h * C + c) * K + ky) * K + kx)]; };
  const std::size_t b1 = static_cast<std::size_t>(a.hidden * C * K * K);
  const std::size_t w2 = b1 + static_cast<std::size_t>(a.hidden);
  const std::size_t b2 = w2 + static_cast<std::size_t>(a.hidden * K * K);
  auto plane = [&](int c, int x, int y) {
    if (x < 0 || y < 0 || x >= W || y >= H) return 0.0;
    return in.planes[static_cast<std::size_t>((c * H + y) * W + x)];
  };
  std::vector<double> hid(static_cast<std::size_t>(a.hidden * W * H));
  for (int h = 0; h < a.hidden; ++h)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double s = v[b1 + static_cast<std::size_t>(h)];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) s += w1(h, c, ky, kx) * plane(c, x + kx - r, y + ky - r);
        hid[static_cast<std::size_t>((h * H + y) * W + x)] = std::tanh(s);
      }
  SoftMask out(W, H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = v[b2];
      for (int h = 0; h < a.hidden; ++h)
        for (int ky = 0; ky < K; ++ky)
          for (int kx = 0; kx < K; ++kx) {
            const int xx = x + kx - r, yy = y + ky - r;
            if (xx < 0 || yy < 0 || xx >= W || yy >= H) continue;
            s += v[w2 + static_cast<std::size_t>((h * K + ky) * K + kx)] *
                 hid[static_cast<std::size_t>((h * H + yy) * W + xx)];
          }
      out(x, y) = 1.0 / (1.0 + std::exp(-s));
    }
  return out;
}

double naiveCe(const SoftMask& p, const BinaryMask& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    s += t[i] ? -std::log(q) : -std::log(1.0 - q);
  }
  return s / static_cast<double>(p.size());
}

}  // namespace

TEST_CASE("parameter count and validation") {
  Architecture a;
  CHECK(a.parameterCount() == 16 * 4 * 9 + 16 + 16 * 9 + 1);
  a.kernel = 2;
  CHECK_THROWS(a.validate());
  a = {};
  a.inputChannels = 3;
  CHECK_THROWS(a.validate());
  ModelParameters p = initParameters(Architecture{}, 1);
  p.values.pop_back();
  CHECK_THROWS(p.validate());
}

TEST_CASE("init is seeded and bounded per layer") {
  const Architecture a = small();
  const auto p = initParameters(a, 4);
  CHECK(p == initParameters(a, 4));
  CHECK_FALSE(p.values == initParameters(a, 5).values);
  const double bound1 = std::sqrt(6.0 / (4 * 9 + 5 * 9));
  for (int i = 0; i < 5 * 4 * 9; ++i) CHECK(std::abs(p.values[static_cast<std::size_t>(i)]) <= bound1);
  for (int i = 5 * 4 * 9; i < 5 * 4 * 9 + 5; ++i) CHECK(p.values[static_cast<std::size_t>(i)] == 0.0);
}

TEST_CASE("input planes: intensity, gradient magnitude, coordinates") {
  Frame f(5, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x) f(x, y) = 0.1 * x;
  const SegmenterInput in = prepareInput(f);
  REQUIRE(in.planes.size() == 4u * 15u);
  const std::size_t hw = 15;
  CHECK(in.planes[7] == doctest::Approx(0.2));                 // intensity at (2,1)
  CHECK(in.planes[hw + 7] == doctest::Approx(0.1));            // central difference (0.3 - 0.1) / 2
  CHECK(in.planes[2 * hw + 0] == doctest::Approx(-1.0));       // x at the left edge
  CHECK(in.planes[2 * hw + 4] == doctest::Approx(1.0));        // x at the right edge
  CHECK(in.planes[3 * hw + 10] == doctest::Approx(1.0));       // y on the last row
}

TEST_CASE("forward matches a direct evaluation") {
  const Architecture a = small();
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto p = initParameters(a, s);
    Rng rng(s + 100);
    for (auto& v : p.values) v += 0.2 * rng.normal();
    const Frame f = randomFrame(a.width, a.height, s);
    const SoftMask got = forward(p, f);
    const SoftMask want = naiveForward(p, prepareInput(f));
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(forward(initParameters(a, 0), Frame(7, 7)), DimensionError);
}

TEST_CASE("zeroed final layer predicts one half everywhere") {
  auto p = initParameters(small(), 3);
  zeroFinalLayer(p);
  const SoftMask out = forward(p, randomFrame(12, 10, 1));
  for (double v : out.data()) CHECK(v == 0.5);
  BinaryMask gt(12, 10);
  gt.set(3, 3, true);
  CHECK(mae(out, gt) == 0.5);
  CHECK(ceLoss(out, gt) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("ceLoss matches the direct sum, including clamped pixels") {
  SoftMask p(4, 1);
  p[0] = 0.0;
  p[1] = 1.0;
  p[2] = 0.3;
  p[3] = 0.9;
  BinaryMask t(4, 1);
  t[0] = 1;
  t[2] = 1;
  CHECK(ceLoss(p, t) == doctest::Approx(naiveCe(p, t)));
  CHECK(std::isfinite(ceLoss(p, t)));
}

TEST_CASE("gradient agrees with central differences") {
  const Architecture a = small(10, 9, 4);
  for (std::uint64_t s = 0; s < 4; ++s) {
    auto p = initParameters(a, s);
    Rng rng(s + 7);
    for (auto& v : p.values) v += 0.3 * rng.normal();
    const Frame f = randomFrame(a.width, a.height, s + 50);
    const auto target = oracle::disk(a.width, a.height, 4.5, 4.0, 2.5);
    const auto lg = lossAndGradient(p, f, target);
    CHECK(lg.loss == doctest::Approx(naiveCe(naiveForward(p, prepareInput(f)), target)).epsilon(1e-12));
    const double h = 1e-4;
    double worst = 0.0;
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      auto q = p;
      q.values[j] = p.values[j] + h;
      const double up = naiveCe(naiveForward(q, prepareInput(f)), target);
      q.values[j] = p.values[j] - h;
      const double down = naiveCe(naiveForward(q, prepareInput(f)), target);
      const double fd = (up - down) / (2 * h);
      const double rel = std::abs(fd - lg.gradient[j]) / std::max({std::abs(fd), std::abs(lg.gradient[j]), 1e-6});
      worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("optimizer step matches a hand-rolled update") {
  ModelParameters p = initParameters(small(3, 3, 1), 2);
  const std::size_t n = p.values.size();
  OptimizerState st = makeOptimizer(n, 0.01, 0.1);
  std::vector<double> w = p.values, m(n, 0.0), v(n, 0.0);
  Rng rng(8);
  for (int t = 1; t <= 3; ++t) {
    std::vector<double> g(n);
    for (auto& x : g) x = rng.normal();
    optimStep(p, st, g);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] = w[i] * (1 - 0.01 * 0.1) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < n; ++i) CHECK(p.values[i] == doctest::Approx(w[i]).epsilon(1e-12));

  std::vector<double> bad(n, 0.0);
  bad[0] = std::nan("");
  const auto before = p.values;
  CHECK_THROWS_AS(optimStep(p, st, bad), std::domain_error);
  CHECK(p.values == before);
  CHECK(st.step == 3);
}

TEST_CASE("ema update and its closed form") {
  const Architecture a = small(4, 4, 2);
  const auto s = initParameters(a, 1);
  for (double d : {0.0, 0.5, 0.9, 1.0}) {
    auto t = initParameters(a, 2);
    const auto t0 = t;
    for (int k = 0; k < 50; ++k) emaUpdate(t, s, d);
    const double dn = std::pow(d, 50);
    for (std::size_t i = 0; i < t.values.size(); ++i)
      CHECK(t.values[i] == doctest::Approx(dn * t0.values[i] + (1 - dn) * s.values[i]).epsilon(1e-12));
  }
  auto t = initParameters(a, 2);
  CHECK_THROWS(emaUpdate(t, s, 1.5));
  CHECK_THROWS(emaUpdate(t, initParameters(small(5, 4, 2), 1), 0.5));
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "psdlab_test_ckpt";
  std::filesystem::create_directories(dir);
  auto p = initParameters(Architecture{}, 77);
  p.values[3] = -0.0;
  p.values[4] = 1e-300;
  saveParameters(dir / "p.bin", p);
  const auto back = loadParameters(dir / "p.bin");
  CHECK(back == p);
  CHECK(std::signbit(back.values[3]));

  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOTPARAMS";
  }
  CHECK_THROWS(loadParameters(dir / "bad.bin"));
  CHECK_THROWS(loadParameters(dir / "missing.bin"));
  std::filesystem::remove_all(dir);
}
