#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "psdlab/pipeline.hpp"
#include "psdlab/synth.hpp"
#include "support/oracles.hpp"

using namespace psdlab;

TEST_CASE("default clip shape and determinism") {
  SynthConfig cfg;
  const Clip a = generateClip(cfg, "a");
  CHECK(a.length() == 60);
  CHECK(a.width() == 64);
  CHECK(a.height() == 64);
  REQUIRE(a.gtMasks);
  CHECK(a.gtMasks->size() == 60);
  for (const auto& m : *a.gtMasks) CHECK(m.count() > 0);
  for (const auto& f : a.frames)
    for (double v : f.data()) CHECK((v >= 0.0 && v <= 1.0));

  const Clip b = generateClip(cfg, "a");
  CHECK(a == b);
  cfg.seed = 2;
  CHECK_FALSE(generateClip(cfg, "a").frames == a.frames);
}

TEST_CASE("config validation") {
  SynthConfig cfg;
  cfg.frameCount = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS(generateClip(cfg));
  cfg = {};
  cfg.noiseSigma = -0.1;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.motion.dx = {1.0, -1.0};
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.motion.speed = {-1.0, 1.0};
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.specularRate = -1.0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("static variant repeats frame 0") {
  SynthConfig cfg;
  cfg.specularRate = 4.0;
  cfg.motion.speed = {1.0, 2.0};
  const Clip c = generateClip(cfg.staticVariant());
  for (int i = 1; i < c.length(); ++i) {
    CHECK(c.frames[static_cast<std::size_t>(i)] == c.frames[0]);
    CHECK((*c.gtMasks)[static_cast<std::size_t>(i)] == (*c.gtMasks)[0]);
  }
}

TEST_CASE("pure translation moves the mask by whole pixels") {
  SynthConfig cfg = SynthConfig{}.staticVariant();
  cfg.motion.dx = {2.0, 2.0};
  cfg.start = std::pair{16.0, 30.0};
  cfg.frameCount = 12;
  const Clip c = generateClip(cfg);
  const auto& gt = *c.gtMasks;
  for (int i = 1; i < c.length(); ++i) CHECK(gt[static_cast<std::size_t>(i)] == oracle::shift(gt[0], 2 * i, 0));
}

TEST_CASE("specular highlights are absent in frame 0 and appear later") {
  SynthConfig cfg;
  cfg.noiseSigma = 0.0;
  cfg.specularRate = 8.0;
  cfg.blurRadius = 0;
  const Clip c = generateClip(cfg);
  auto saturated = [](const Frame& f) {
    int n = 0;
    for (double v : f.data()) n += v >= 0.999;
    return n;
  };
  CHECK(saturated(c.frames.front()) == 0);
  CHECK(saturated(c.frames.back()) > 0);
}

TEST_CASE("affine matrices compose and invert") {
  AffineParams p;
  p.rotation = 0.3;
  p.shear = 0.1;
  p.zoom = 1.15;
  p.tx = 2.5;
  p.ty = -1.0;
  const AffineMatrix m = toMatrix(p, 64, 64);
  const AffineMatrix id = m * m.inverse();
  CHECK(id.a == doctest::Approx(1.0));
  CHECK(id.b == doctest::Approx(0.0));
  CHECK(id.c == doctest::Approx(0.0));
  CHECK(id.d == doctest::Approx(1.0));
  CHECK(id.tx == doctest::Approx(0.0));
  CHECK(id.ty == doctest::Approx(0.0));
  // The frame centre is fixed by rotation, shear and zoom.
  AffineParams q = p;
  q.tx = q.ty = 0.0;
  const auto [cx, cy] = toMatrix(q, 64, 64).apply(31.5, 31.5);
  CHECK(cx == doctest::Approx(31.5));
  CHECK(cy == doctest::Approx(31.5));
}

TEST_CASE("applyAffine identity and integer translation") {
  Rng rng(2);
  Frame f(20, 20);
  for (auto& v : f.data()) v = rng.uniform();
  const auto mask = oracle::disk(20, 20, 9, 9, 4);
  const auto [f0, m0] = applyAffine(f, mask, AffineParams{});
  CHECK(f0.data()[0] == doctest::Approx(f.data()[0]));
  CHECK(m0 == mask);

  AffineParams t;
  t.tx = 3.0;
  t.ty = 1.0;
  const auto [f1, m1] = applyAffine(f, mask, t);
  CHECK(m1 == oracle::shift(mask, 3, 1));
  CHECK(f1(10, 10) == doctest::Approx(f(7, 9)));
  CHECK(f1(0, 0) == 0.0);
}

TEST_CASE("finetune clips start at the input pair and stay in range") {
  const Clip src = generateClip(SynthConfig{});
  const AffineRanges r;
  const Clip c = synthesizeFinetuneClip(src.frames[0], (*src.gtMasks)[0], 8, r, 5);
  CHECK(c.length() == 8);
  CHECK(c.frames[0] == src.frames[0]);
  CHECK((*c.gtMasks)[0] == (*src.gtMasks)[0]);
  CHECK_FALSE(c.frames[7] == c.frames[0]);
  CHECK(synthesizeFinetuneClip(src.frames[0], (*src.gtMasks)[0], 8, r, 5) == c);

  const Clip still = synthesizeFinetuneClip(src.frames[0], (*src.gtMasks)[0], 4, AffineRanges::identity(), 5);
  for (const auto& m : *still.gtMasks) CHECK(m == (*src.gtMasks)[0]);
  CHECK_THROWS(synthesizeFinetuneClip(src.frames[0], (*src.gtMasks)[0], 1, r, 5));
}

TEST_CASE("clip directory round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "psdlab_test_clip";
  std::filesystem::remove_all(dir);
  SynthConfig cfg;
  cfg.frameCount = 5;
  const Clip c = generateClip(cfg, "c0");
  writeClip(dir, c, &cfg);
  const Clip back = readClip(dir);
  CHECK(back.clipId == "c0");
  CHECK(back.seed == c.seed);
  CHECK(back.gtMasks == c.gtMasks);
  REQUIRE(back.length() == 5);
  for (std::size_t i = 0; i < c.frames.size(); ++i)
    for (std::size_t k = 0; k < c.frames[i].data().size(); ++k)
      CHECK(back.frames[i].data()[k] == static_cast<double>(quantize8(c.frames[i].data()[k])) / 255.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset generation is seeded per clip and independent of jobs") {
  SynthConfig cfg;
  cfg.frameCount = 4;
  const Dataset a = generateDataset(cfg, 3, 2, 9, 1);
  const Dataset b = generateDataset(cfg, 3, 2, 9, 3);
  REQUIRE(a.trainClips.size() == 3);
  REQUIRE(a.testClips.size() == 2);
  CHECK(a.trainClips[0].clipId == "train_0000");
  CHECK(a.testClips[1].clipId == "test_0001");
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.trainClips[i] == b.trainClips[i]);
  CHECK_FALSE(a.trainClips[0].frames == a.trainClips[1].frames);
}
