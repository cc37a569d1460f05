#include "psdlab/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "psdlab/rng.hpp"

namespace psdlab {

namespace {

constexpr int kHarmonics = 3;  // boundary harmonics k = 2, 3, 4
constexpr double kMaxHarmonic = 0.28;
constexpr double kMinScale = 0.6;
constexpr double kMaxScale = 1.6;
constexpr double kMinGain = 0.75;
constexpr double kMaxGain = 1.25;
constexpr double kMinContrastGain = 0.25;
constexpr double kMaxContrastGain = 1.75;

// Smooth lattice noise in [0,1], periodic over the lattice.
class ValueNoise {
 public:
  ValueNoise(Rng& rng, double cell, int latticeSize = 32) : cell_(cell), n_(latticeSize), values_(n_ * n_) {
    for (auto& v : values_) v = rng.uniform();
  }

  double operator()(double x, double y) const {
    const double gx = x / cell_, gy = y / cell_;
    const double fx = std::floor(gx), fy = std::floor(gy);
    const double tx = smooth(gx - fx), ty = smooth(gy - fy);
    const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
    const double v00 = at(ix, iy), v10 = at(ix + 1, iy), v01 = at(ix, iy + 1), v11 = at(ix + 1, iy + 1);
    return (1 - ty) * ((1 - tx) * v00 + tx * v10) + ty * ((1 - tx) * v01 + tx * v11);
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }
  double at(int x, int y) const {
    const int xx = ((x % n_) + n_) % n_, yy = ((y % n_) + n_) % n_;
    return values_[static_cast<std::size_t>(yy * n_ + xx)];
  }

  double cell_;
  int n_;
  std::vector<double> values_;
};

struct BlobState {
  double cx = 0.0, cy = 0.0;
  double vx = 0.0, vy = 0.0;  // persistent drift per frame
  double rotation = 0.0;
  double scale = 1.0;
  std::array<double, kHarmonics> amp{};
  std::array<double, kHarmonics> baseAmp{};
  std::array<double, kHarmonics> phase{};

  double radiusAt(double theta, double baseRadius) const {
    double r = 1.0;
    for (int k = 0; k < kHarmonics; ++k) r += amp[k] * std::cos((k + 2) * (theta - rotation) + phase[k]);
    return baseRadius * scale * r;
  }
};

double sample(const Interval& iv, Rng& rng) { return iv.width() == 0.0 ? iv.min : rng.uniform(iv.min, iv.max); }

void boxBlur(std::vector<double>& img, int w, int h, int radius) {
  if (radius <= 0) return;
  std::vector<double> tmp(img.size());
  const double norm = 1.0 / (2 * radius + 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += img[static_cast<std::size_t>(y * w + std::clamp(x + k, 0, w - 1))];
      tmp[static_cast<std::size_t>(y * w + x)] = s * norm;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += tmp[static_cast<std::size_t>(std::clamp(y + k, 0, h - 1) * w + x)];
      img[static_cast<std::size_t>(y * w + x)] = s * norm;
    }
}

void requireFinite(const Interval& iv, const char* name) {
  if (!std::isfinite(iv.min) || !std::isfinite(iv.max) || iv.min > iv.max) {
    throw std::invalid_argument(std::string("synth config: invalid drift range for ") + name);
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("synth config: dimensions must be positive");
  if (frameCount < 2) throw std::invalid_argument("synth config: frameCount must be at least 2");
  if (blobCount < 1) throw std::invalid_argument("synth config: blobCount must be at least 1");
  if (!(blobRadius > 0.0)) throw std::invalid_argument("synth config: blobRadius must be positive");
  if (2.0 * blobRadius >= std::min(width, height))
    throw std::invalid_argument("synth config: blob larger than frame");
  requireFinite(motion.dx, "dx");
  requireFinite(motion.dy, "dy");
  requireFinite(motion.rotation, "rotation");
  requireFinite(motion.scale, "scale");
  requireFinite(motion.speed, "speed");
  if (motion.speed.min < 0.0) throw std::invalid_argument("synth config: speed must be non-negative");
  if (motion.scale.min <= -1.0) throw std::invalid_argument("synth config: scale drift must stay above -1");
  if (!(deformation >= 0.0) || !std::isfinite(deformation))
    throw std::invalid_argument("synth config: deformation must be finite and non-negative");
  if (!(textureContrast >= 0.0 && textureContrast <= 1.0))
    throw std::invalid_argument("synth config: textureContrast must be in [0,1]");
  if (!(illuminationDrift >= 0.0) || !std::isfinite(illuminationDrift))
    throw std::invalid_argument("synth config: illuminationDrift must be finite and non-negative");
  if (!(specularRate >= 0.0) || !std::isfinite(specularRate))
    throw std::invalid_argument("synth config: specularRate must be finite and non-negative");
  if (!(contrastDrift >= 0.0) || !std::isfinite(contrastDrift))
    throw std::invalid_argument("synth config: contrastDrift must be finite and non-negative");
  if (!(noiseSigma >= 0.0) || !std::isfinite(noiseSigma))
    throw std::invalid_argument("synth config: noiseSigma must be finite and non-negative");
  if (blurRadius < 0) throw std::invalid_argument("synth config: blurRadius must be non-negative");
  if (start && (!std::isfinite(start->first) || !std::isfinite(start->second)))
    throw std::invalid_argument("synth config: start must be finite");
}

SynthConfig SynthConfig::staticVariant() const {
  SynthConfig s = *this;
  s.motion = MotionRanges{{0, 0}, {0, 0}, {0, 0}, {0, 0}, {0, 0}};
  s.deformation = 0.0;
  s.illuminationDrift = 0.0;
  s.contrastDrift = 0.0;
  s.specularRate = 0.0;
  s.noiseSigma = 0.0;
  return s;
}

void Clip::validate() const {
  if (frames.size() < 2) throw std::invalid_argument("clip must contain at least 2 frames");
  for (const auto& f : frames)
    if (!f.sameShape(frames.front())) throw DimensionError("clip frames must share dimensions");
  if (gtMasks) {
    if (gtMasks->size() != frames.size()) throw DimensionError("clip gtMasks must match frame count");
    for (const auto& m : *gtMasks)
      if (!frames.front().sameShape(m)) throw DimensionError("clip gtMasks must match frame dimensions");
  }
}

Clip generateClip(const SynthConfig& cfg, std::string clipId) {
  cfg.validate();
  const int w = cfg.width, h = cfg.height;
  Rng rng(cfg.seed);

  const ValueNoise bgCoarse(rng, 16.0);
  const ValueNoise bgFine(rng, 3.0);
  const ValueNoise fgFine(rng, 2.5);

  std::vector<BlobState> blobs(static_cast<std::size_t>(cfg.blobCount));
  for (std::size_t b = 0; b < blobs.size(); ++b) {
    auto& s = blobs[b];
    if (b == 0 && cfg.start) {
      s.cx = cfg.start->first;
      s.cy = cfg.start->second;
    } else {
      s.cx = rng.uniform(0.3 * w, 0.7 * w);
      s.cy = rng.uniform(0.3 * h, 0.7 * h);
    }
    s.rotation = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (cfg.motion.speed.max > 0.0) {
      const double speed = sample(cfg.motion.speed, rng);
      const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
      s.vx = speed * std::cos(heading);
      s.vy = speed * std::sin(heading);
    }
    for (int k = 0; k < kHarmonics; ++k) {
      s.baseAmp[k] = rng.uniform(-0.12, 0.12) / (k + 1);
      s.amp[k] = s.baseAmp[k];
      s.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }
  double gain = 1.0;
  double contrastGain = 1.0;
  const double margin = 0.5 * cfg.blobRadius;

  Clip clip;
  clip.clipId = std::move(clipId);
  clip.seed = cfg.seed;
  clip.gtMasks.emplace();
  clip.frames.reserve(static_cast<std::size_t>(cfg.frameCount));
  clip.gtMasks->reserve(static_cast<std::size_t>(cfg.frameCount));

  std::vector<double> img(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  for (int t = 0; t < cfg.frameCount; ++t) {
    if (t > 0) {
      for (auto& s : blobs) {
        double dx = s.vx + sample(cfg.motion.dx, rng), dy = s.vy + sample(cfg.motion.dy, rng);
        if (s.cx + dx < margin || s.cx + dx > w - 1 - margin) {
          dx = -dx;
          s.vx = -s.vx;
        }
        if (s.cy + dy < margin || s.cy + dy > h - 1 - margin) {
          dy = -dy;
          s.vy = -s.vy;
        }
        s.cx += dx;
        s.cy += dy;
        s.rotation += sample(cfg.motion.rotation, rng);
        s.scale = std::clamp(s.scale * (1.0 + sample(cfg.motion.scale, rng)), kMinScale, kMaxScale);
        if (cfg.deformation > 0.0) {
          for (int k = 0; k < kHarmonics; ++k) {
            const double pull = 0.05 * (s.baseAmp[k] - s.amp[k]);
            s.amp[k] = std::clamp(s.amp[k] + pull + cfg.deformation * rng.normal(), -kMaxHarmonic, kMaxHarmonic);
            s.phase[k] += 2.0 * cfg.deformation * rng.normal();
          }
        }
      }
      if (cfg.illuminationDrift > 0.0)
        gain = std::clamp(gain + cfg.illuminationDrift * rng.normal(), kMinGain, kMaxGain);
      if (cfg.contrastDrift > 0.0)
        contrastGain = std::clamp(contrastGain + cfg.contrastDrift * rng.normal(), kMinContrastGain, kMaxContrastGain);
    }

    BinaryMask gt(w, h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double bg = 0.22 + 0.12 * bgCoarse(x, y) + 0.06 * bgFine(x, y);
        double v = bg;
        for (const auto& s : blobs) {
          const double ox = x - s.cx, oy = y - s.cy;
          const double dist = std::hypot(ox, oy);
          const double theta = std::atan2(oy, ox);
          if (dist <= s.radiusAt(theta, cfg.blobRadius)) {
            gt.set(x, y, true);
            // Texture coordinates move, rotate and scale with the blob.
            const double cr = std::cos(-s.rotation), sr = std::sin(-s.rotation);
            const double u = (cr * ox - sr * oy) / s.scale, q = (sr * ox + cr * oy) / s.scale;
            v = bg + contrastGain * cfg.textureContrast * (0.7 + 0.3 * fgFine(u + 40.0, q + 40.0));
            break;
          }
        }
        img[static_cast<std::size_t>(y * w + x)] = gain * v;
      }
    }
    // Specular highlights: small saturated spots, none in frame 0, rate rising linearly.
    if (cfg.specularRate > 0.0 && cfg.frameCount > 1) {
      const double rate = cfg.specularRate * t / (cfg.frameCount - 1);
      int spots = static_cast<int>(rate);
      if (rng.uniform() < rate - spots) ++spots;
      for (int k = 0; k < spots; ++k) {
        const double sx = rng.uniform(0.0, w), sy = rng.uniform(0.0, h), sr = rng.uniform(1.5, 3.0);
        for (int y = std::max(0, static_cast<int>(sy - sr)); y <= std::min(h - 1, static_cast<int>(sy + sr)); ++y)
          for (int x = std::max(0, static_cast<int>(sx - sr)); x <= std::min(w - 1, static_cast<int>(sx + sr)); ++x)
            if (std::hypot(x - sx, y - sy) <= sr) img[static_cast<std::size_t>(y * w + x)] = 1.0;
      }
    }
    boxBlur(img, w, h, cfg.blurRadius);
    std::vector<double> data(img);
    if (cfg.noiseSigma > 0.0)
      for (auto& v : data) v += cfg.noiseSigma * rng.normal();
    for (auto& v : data) v = std::clamp(v, 0.0, 1.0);
    clip.frames.emplace_back(w, h, 1, std::move(data));
    clip.gtMasks->push_back(std::move(gt));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Affine transforms

AffineMatrix AffineMatrix::inverse() const {
  const double det = determinant();
  if (det == 0.0 || !std::isfinite(det)) throw std::invalid_argument("affine transform is not invertible");
  AffineMatrix inv;
  inv.a = d / det;
  inv.b = -b / det;
  inv.c = -c / det;
  inv.d = a / det;
  inv.tx = -(inv.a * tx + inv.b * ty);
  inv.ty = -(inv.c * tx + inv.d * ty);
  return inv;
}

AffineMatrix operator*(const AffineMatrix& l, const AffineMatrix& r) {
  AffineMatrix m;
  m.a = l.a * r.a + l.b * r.c;
  m.b = l.a * r.b + l.b * r.d;
  m.c = l.c * r.a + l.d * r.c;
  m.d = l.c * r.b + l.d * r.d;
  m.tx = l.a * r.tx + l.b * r.ty + l.tx;
  m.ty = l.c * r.tx + l.d * r.ty + l.ty;
  return m;
}

AffineMatrix toMatrix(const AffineParams& p, int width, int height) {
  if (!(p.zoom > 0.0) || !std::isfinite(p.zoom)) throw std::invalid_argument("affine zoom must be positive");
  const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
  const double cr = std::cos(p.rotation), sr = std::sin(p.rotation);
  // zoom * R * Shear, with Shear = [[1, s], [0, 1]]
  AffineMatrix lin;
  lin.a = p.zoom * cr;
  lin.b = p.zoom * (cr * p.shear - sr);
  lin.c = p.zoom * sr;
  lin.d = p.zoom * (sr * p.shear + cr);
  AffineMatrix toOrigin;
  toOrigin.tx = -cx;
  toOrigin.ty = -cy;
  AffineMatrix back;
  back.tx = cx + p.tx;
  back.ty = cy + p.ty;
  AffineMatrix m = back * lin * toOrigin;
  if (p.crop) {
    const auto& c = *p.crop;
    if (!(c.w > 0.0 && c.h > 0.0) || c.x < 0.0 || c.y < 0.0 || c.x + c.w > width + 1e-9 || c.y + c.h > height + 1e-9)
      throw std::invalid_argument("affine crop must lie within the frame");
    // Pixel centre i sits at edge coordinate i + 0.5.
    AffineMatrix cropMap;
    cropMap.a = width / c.w;
    cropMap.d = height / c.h;
    cropMap.tx = (0.5 - c.x) * cropMap.a - 0.5;
    cropMap.ty = (0.5 - c.y) * cropMap.d - 0.5;
    m = cropMap * m;
  }
  return m;
}

std::pair<Frame, BinaryMask> applyAffine(const Frame& frame, const BinaryMask& mask, const AffineParams& p) {
  return applyAffine(frame, mask, toMatrix(p, frame.width(), frame.height()));
}

std::pair<Frame, BinaryMask> applyAffine(const Frame& frame, const BinaryMask& mask, const AffineMatrix& m) {
  if (!frame.sameShape(mask)) throw DimensionError("applyAffine: frame and mask dimensions differ");
  const AffineMatrix inv = m.inverse();
  const int w = frame.width(), h = frame.height(), ch = frame.channels();
  Frame outFrame(w, h, ch);
  BinaryMask outMask(w, h);
  auto pixel = [&](int x, int y, int c) -> double {
    return (x >= 0 && y >= 0 && x < w && y < h) ? frame(x, y, c) : 0.0;
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto [sx, sy] = inv.apply(x, y);
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
      for (int c = 0; c < ch; ++c) {
        double v = 0.0;
        // Zero-weight taps are skipped so identity maps reproduce the input exactly.
        if ((1 - ax) * (1 - ay) != 0.0) v += (1 - ax) * (1 - ay) * pixel(ix, iy, c);
        if (ax * (1 - ay) != 0.0) v += ax * (1 - ay) * pixel(ix + 1, iy, c);
        if ((1 - ax) * ay != 0.0) v += (1 - ax) * ay * pixel(ix, iy + 1, c);
        if (ax * ay != 0.0) v += ax * ay * pixel(ix + 1, iy + 1, c);
        outFrame(x, y, c) = std::clamp(v, 0.0, 1.0);
      }
      const int nx = static_cast<int>(std::floor(sx + 0.5)), ny = static_cast<int>(std::floor(sy + 0.5));
      if (mask.inBounds(nx, ny)) outMask(x, y) = mask(nx, ny);
    }
  }
  return {std::move(outFrame), std::move(outMask)};
}

AffineRanges AffineRanges::identity() {
  AffineRanges r;
  r.rotation = {0.0, 0.0};
  r.shear = {0.0, 0.0};
  r.zoom = {1.0, 1.0};
  r.translateFraction = 0.0;
  r.cropMinArea = 1.0;
  return r;
}

void AffineRanges::validate() const {
  for (const auto* iv : {&rotation, &shear, &zoom})
    if (!std::isfinite(iv->min) || !std::isfinite(iv->max) || iv->min > iv->max)
      throw std::invalid_argument("affine ranges: invalid interval");
  if (!(zoom.min > 0.0)) throw std::invalid_argument("affine ranges: zoom must be positive");
  if (!(translateFraction >= 0.0)) throw std::invalid_argument("affine ranges: translateFraction must be >= 0");
  if (!(cropMinArea > 0.0 && cropMinArea <= 1.0)) throw std::invalid_argument("affine ranges: cropMinArea in (0,1]");
  if (!(stepFraction >= 0.0)) throw std::invalid_argument("affine ranges: stepFraction must be >= 0");
}

Clip synthesizeFinetuneClip(const Frame& frame, const BinaryMask& mask, int length, const AffineRanges& ranges,
                            std::uint64_t seed) {
  if (mask.empty()) throw std::invalid_argument("synthesizeFinetuneClip: mask must be non-empty");
  if (length < 2) throw std::invalid_argument("synthesizeFinetuneClip: length must be at least 2");
  if (!frame.sameShape(mask)) throw DimensionError("synthesizeFinetuneClip: frame and mask dimensions differ");
  ranges.validate();
  const int w = frame.width(), h = frame.height();
  Rng rng(seed);

  struct WalkState {
    double rotation = 0.0, shear = 0.0, zoom = 1.0, tx = 0.0, ty = 0.0;
    double area = 1.0, cropU = 0.5, cropV = 0.5;  // crop area fraction and relative position
  };
  const Interval txRange{-ranges.translateFraction * w, ranges.translateFraction * w};
  const Interval tyRange{-ranges.translateFraction * h, ranges.translateFraction * h};
  const Interval areaRange{ranges.cropMinArea, 1.0};
  const Interval unit{0.0, 1.0};
  auto step = [&](double v, const Interval& iv) {
    const double moved = v + rng.uniform(-1.0, 1.0) * ranges.stepFraction * iv.width();
    return std::clamp(moved, iv.min, iv.max);
  };

  Clip clip;
  clip.clipId = "finetune";
  clip.seed = seed;
  clip.frames.push_back(frame);
  clip.gtMasks.emplace();
  clip.gtMasks->push_back(mask);

  constexpr int kMaxRetries = 64;
  WalkState state;
  for (int t = 1; t < length; ++t) {
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxRetries && !accepted; ++attempt) {
      WalkState next = state;
      next.rotation = step(state.rotation, ranges.rotation);
      next.shear = step(state.shear, ranges.shear);
      next.zoom = step(state.zoom, ranges.zoom);
      next.tx = step(state.tx, txRange);
      next.ty = step(state.ty, tyRange);
      next.area = step(state.area, areaRange);
      next.cropU = step(state.cropU, unit);
      next.cropV = step(state.cropV, unit);

      AffineParams p{next.rotation, next.shear, next.zoom, next.tx, next.ty, std::nullopt};
      if (next.area < 1.0) {
        const double side = std::sqrt(next.area);
        CropRect c{0.0, 0.0, side * w, side * h};
        c.x = next.cropU * (w - c.w);
        c.y = next.cropV * (h - c.h);
        p.crop = c;
      }
      auto [f, m] = applyAffine(frame, mask, p);
      if (m.empty()) continue;
      state = next;
      clip.frames.push_back(std::move(f));
      clip.gtMasks->push_back(std::move(m));
      accepted = true;
    }
    if (!accepted) {
      std::ostringstream os;
      os << "synthesizeFinetuneClip: could not keep the mask in frame after " << kMaxRetries << " retries";
      throw std::runtime_error(os.str());
    }
  }
  return clip;
}

}  // namespace psdlab
