#include "psdlab/segmenter.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "psdlab/rng.hpp"

namespace psdlab {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'P', 'S', 'D', 'P', 'A', 'R', 'A', 'M'};

struct Layout {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, total = 0;
  explicit Layout(const Architecture& a) {
    const std::size_t kk = static_cast<std::size_t>(a.kernel) * static_cast<std::size_t>(a.kernel);
    const std::size_t hid = static_cast<std::size_t>(a.hidden);
    w1 = 0;
    b1 = w1 + hid * static_cast<std::size_t>(a.inputChannels) * kk;
    w2 = b1 + hid;
    b2 = w2 + hid * kk;
    total = b2 + 1;
  }
};

// Calls fn(dy, dx, y0, y1, x0, x1, kernelIndex) for every kernel tap, with the output
// rows/columns for which the tap reads inside the image (zero padding elsewhere).
template <typename Fn>
void forEachTap(const Architecture& a, Fn&& fn) {
  const int half = a.kernel / 2;
  int k = 0;
  for (int ky = 0; ky < a.kernel; ++ky)
    for (int kx = 0; kx < a.kernel; ++kx, ++k) {
      const int dy = ky - half, dx = kx - half;
      const int y0 = std::max(0, -dy), y1 = std::min(a.height, a.height - dy);
      const int x0 = std::max(0, -dx), x1 = std::min(a.width, a.width - dx);
      fn(dy, dx, y0, y1, x0, x1, k);
    }
}

struct Activations {
  std::vector<double> hidden;  // tanh outputs, hidden planes
  std::vector<double> prob;
};

void checkInput(const Architecture& a, const SegmenterInput& in) {
  if (in.width != a.width || in.height != a.height)
    throw DimensionError("segmenter: frame dimensions do not match the architecture");
  if (in.planes.size() != static_cast<std::size_t>(a.inputChannels) * static_cast<std::size_t>(a.width * a.height))
    throw DimensionError("segmenter: input plane count does not match the architecture");
}

void runForward(const ModelParameters& params, const SegmenterInput& in, Activations& act) {
  params.validate();
  const Architecture& a = params.arch;
  checkInput(a, in);
  const Layout L(a);
  const std::size_t hw = static_cast<std::size_t>(a.width) * static_cast<std::size_t>(a.height);
  const std::size_t kk = static_cast<std::size_t>(a.kernel * a.kernel);
  const double* P = params.values.data();
  const int w = a.width;

  act.hidden.assign(static_cast<std::size_t>(a.hidden) * hw, 0.0);
  for (int c = 0; c < a.hidden; ++c) {
    double* out = act.hidden.data() + static_cast<std::size_t>(c) * hw;
    std::fill_n(out, hw, P[L.b1 + static_cast<std::size_t>(c)]);
    for (int i = 0; i < a.inputChannels; ++i) {
      const double* x = in.planes.data() + static_cast<std::size_t>(i) * hw;
      const double* wk = P + L.w1 + (static_cast<std::size_t>(c) * static_cast<std::size_t>(a.inputChannels) +
                                     static_cast<std::size_t>(i)) * kk;
      forEachTap(a, [&](int dy, int dx, int y0, int y1, int x0, int x1, int k) {
        const double wt = wk[k];
        for (int y = y0; y < y1; ++y) {
          double* o = out + y * w;
          const double* src = x + (y + dy) * w + dx;
          for (int xx = x0; xx < x1; ++xx) o[xx] += wt * src[xx];
        }
      });
    }
    for (std::size_t p = 0; p < hw; ++p) out[p] = std::tanh(out[p]);
  }

  act.prob.assign(hw, P[L.b2]);
  double* z = act.prob.data();
  for (int c = 0; c < a.hidden; ++c) {
    const double* hc = act.hidden.data() + static_cast<std::size_t>(c) * hw;
    const double* wk = P + L.w2 + static_cast<std::size_t>(c) * kk;
    forEachTap(a, [&](int dy, int dx, int y0, int y1, int x0, int x1, int k) {
      const double wt = wk[k];
      for (int y = y0; y < y1; ++y) {
        double* o = z + y * w;
        const double* src = hc + (y + dy) * w + dx;
        for (int xx = x0; xx < x1; ++xx) o[xx] += wt * src[xx];
      }
    });
  }
  for (std::size_t p = 0; p < hw; ++p) z[p] = 1.0 / (1.0 + std::exp(-z[p]));
}

double pixelCe(double p, bool t) {
  const double pc = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return t ? -std::log(pc) : -std::log(1.0 - pc);
}

void putU64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

std::uint64_t getU64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t Architecture::parameterCount() const {
  validate();
  return Layout(*this).total;
}

void Architecture::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("architecture: dimensions must be positive");
  if (inputChannels != 4) throw std::invalid_argument("architecture: inputChannels must be 4");
  if (hidden < 1) throw std::invalid_argument("architecture: hidden must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("architecture: kernel must be odd and positive");
}

void ModelParameters::validate() const {
  if (values.size() != arch.parameterCount())
    throw std::invalid_argument("model parameters: value count does not match the architecture");
}

ModelParameters initParameters(const Architecture& arch, std::uint64_t seed) {
  ModelParameters p;
  p.arch = arch;
  p.seed = seed;
  p.values.assign(arch.parameterCount(), 0.0);
  const Layout L(arch);
  const double kk = arch.kernel * arch.kernel;
  Rng rng(seed);
  const double lim1 = std::sqrt(6.0 / (arch.inputChannels * kk + arch.hidden * kk));
  for (std::size_t i = L.w1; i < L.b1; ++i) p.values[i] = rng.uniform(-lim1, lim1);
  const double lim2 = std::sqrt(6.0 / (arch.hidden * kk + kk));
  for (std::size_t i = L.w2; i < L.b2; ++i) p.values[i] = rng.uniform(-lim2, lim2);
  return p;
}

void zeroFinalLayer(ModelParameters& params) {
  params.validate();
  const Layout L(params.arch);
  std::fill(params.values.begin() + static_cast<std::ptrdiff_t>(L.w2), params.values.end(), 0.0);
}

SegmenterInput prepareInput(const Frame& frame) {
  const int w = frame.width(), h = frame.height(), ch = frame.channels();
  const std::size_t hw = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  SegmenterInput in;
  in.width = w;
  in.height = h;
  in.planes.assign(4 * hw, 0.0);
  auto intensity = [&](int x, int y) {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    double s = 0.0;
    for (int c = 0; c < ch; ++c) s += frame(x, y, c);
    return s / ch;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x);
      const double gx = 0.5 * (intensity(x + 1, y) - intensity(x - 1, y));
      const double gy = 0.5 * (intensity(x, y + 1) - intensity(x, y - 1));
      in.planes[p] = intensity(x, y);
      in.planes[hw + p] = std::sqrt(gx * gx + gy * gy);
      in.planes[2 * hw + p] = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
      in.planes[3 * hw + p] = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
    }
  return in;
}

SoftMask forward(const ModelParameters& params, const SegmenterInput& input) {
  Activations act;
  runForward(params, input, act);
  return SoftMask(params.arch.width, params.arch.height, std::move(act.prob));
}

SoftMask forward(const ModelParameters& params, const Frame& frame) { return forward(params, prepareInput(frame)); }

double ceLoss(const SoftMask& pred, const BinaryMask& target) {
  if (!pred.sameShape(target)) throw DimensionError("ceLoss: prediction and target dimensions differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += pixelCe(pred[i], target[i] != 0);
  return sum / static_cast<double>(pred.size());
}

LossAndGradient lossAndGradient(const ModelParameters& params, const SegmenterInput& input, const BinaryMask& target) {
  const Architecture& a = params.arch;
  if (target.width() != a.width || target.height() != a.height)
    throw DimensionError("lossAndGradient: target dimensions do not match the architecture");
  Activations act;
  runForward(params, input, act);
  const Layout L(a);
  const std::size_t hw = static_cast<std::size_t>(a.width) * static_cast<std::size_t>(a.height);
  const std::size_t kk = static_cast<std::size_t>(a.kernel * a.kernel);
  const double* P = params.values.data();
  const int w = a.width;
  const double invN = 1.0 / static_cast<double>(hw);

  LossAndGradient out;
  out.gradient.assign(L.total, 0.0);
  double* G = out.gradient.data();

  std::vector<double> dz(hw);
  double loss = 0.0;
  for (std::size_t p = 0; p < hw; ++p) {
    const double prob = act.prob[p];
    const bool t = target[p] != 0;
    loss += pixelCe(prob, t);
    const bool clamped = prob < kProbabilityClamp || prob > 1.0 - kProbabilityClamp;
    dz[p] = clamped ? 0.0 : (prob - (t ? 1.0 : 0.0)) * invN;
  }
  out.loss = loss * invN;

  double db2 = 0.0;
  for (std::size_t p = 0; p < hw; ++p) db2 += dz[p];
  G[L.b2] = db2;

  std::vector<double> dh(hw);
  for (int c = 0; c < a.hidden; ++c) {
    const double* hc = act.hidden.data() + static_cast<std::size_t>(c) * hw;
    const double* wk = P + L.w2 + static_cast<std::size_t>(c) * kk;
    double* gk = G + L.w2 + static_cast<std::size_t>(c) * kk;
    std::fill(dh.begin(), dh.end(), 0.0);
    forEachTap(a, [&](int dy, int dx, int y0, int y1, int x0, int x1, int k) {
      const double wt = wk[k];
      double acc = 0.0;
      for (int y = y0; y < y1; ++y) {
        const double* g = dz.data() + y * w;
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(y + dy) * w + dx;
        const double* src = hc + off;
        double* dst = dh.data() + off;
        for (int xx = x0; xx < x1; ++xx) {
          acc += g[xx] * src[xx];
          dst[xx] += wt * g[xx];
        }
      }
      gk[k] = acc;
    });
    // Through tanh.
    for (std::size_t p = 0; p < hw; ++p) dh[p] *= 1.0 - hc[p] * hc[p];
    double db1 = 0.0;
    for (std::size_t p = 0; p < hw; ++p) db1 += dh[p];
    G[L.b1 + static_cast<std::size_t>(c)] = db1;
    for (int i = 0; i < a.inputChannels; ++i) {
      const double* x = input.planes.data() + static_cast<std::size_t>(i) * hw;
      double* g1 = G + L.w1 + (static_cast<std::size_t>(c) * static_cast<std::size_t>(a.inputChannels) +
                               static_cast<std::size_t>(i)) * kk;
      forEachTap(a, [&](int dy, int dx, int y0, int y1, int x0, int x1, int k) {
        double acc = 0.0;
        for (int y = y0; y < y1; ++y) {
          const double* g = dh.data() + y * w;
          const double* src = x + (y + dy) * w + dx;
          for (int xx = x0; xx < x1; ++xx) acc += g[xx] * src[xx];
        }
        g1[k] = acc;
      });
    }
  }
  return out;
}

LossAndGradient lossAndGradient(const ModelParameters& params, const Frame& frame, const BinaryMask& target) {
  return lossAndGradient(params, prepareInput(frame), target);
}

OptimizerState makeOptimizer(std::size_t parameterCount, double learningRate, double weightDecay) {
  if (!(learningRate > 0.0) || !std::isfinite(learningRate))
    throw std::invalid_argument("optimizer: learning rate must be positive");
  if (!(weightDecay >= 0.0) || !std::isfinite(weightDecay))
    throw std::invalid_argument("optimizer: weight decay must be non-negative");
  OptimizerState s;
  s.m.assign(parameterCount, 0.0);
  s.v.assign(parameterCount, 0.0);
  s.learningRate = learningRate;
  s.weightDecay = weightDecay;
  return s;
}

void optimStep(ModelParameters& params, OptimizerState& state, std::span<const double> gradient) {
  const std::size_t n = params.values.size();
  if (gradient.size() != n || state.m.size() != n || state.v.size() != n)
    throw DimensionError("optimStep: gradient or optimizer state length does not match the parameters");
  for (double g : gradient)
    if (!std::isfinite(g)) throw std::domain_error("optimStep: non-finite gradient");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = gradient[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    double& w = params.values[i];
    w -= state.learningRate * state.weightDecay * w;
    w -= state.learningRate * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

void emaUpdate(ModelParameters& teacher, const ModelParameters& student, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("emaUpdate: decay must be in [0,1]");
  if (!(teacher.arch == student.arch) || teacher.values.size() != student.values.size())
    throw std::invalid_argument("emaUpdate: architectures differ");
  for (std::size_t i = 0; i < teacher.values.size(); ++i)
    teacher.values[i] = decay * teacher.values[i] + (1.0 - decay) * student.values[i];
}

void saveParameters(const std::filesystem::path& path, const ModelParameters& params) {
  params.validate();
  const json header = {{"format", "psdlab-params"},
                       {"version", 1},
                       {"architecture",
                        {{"width", params.arch.width},
                         {"height", params.arch.height},
                         {"inputChannels", params.arch.inputChannels},
                         {"hidden", params.arch.hidden},
                         {"kernel", params.arch.kernel}}},
                       {"parameterCount", params.values.size()},
                       {"seed", params.seed}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  putU64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : params.values) putU64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ModelParameters loadParameters(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("not a parameter checkpoint: " + path.string());
  const std::uint64_t len = getU64(is);
  if (len > (1u << 20)) throw std::runtime_error("checkpoint header too large");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("checkpoint truncated");
  const json header = json::parse(text);
  if (header.at("format") != "psdlab-params" || header.at("version") != 1)
    throw std::runtime_error("unsupported checkpoint format");
  ModelParameters p;
  const auto& a = header.at("architecture");
  p.arch.width = a.at("width");
  p.arch.height = a.at("height");
  p.arch.inputChannels = a.at("inputChannels");
  p.arch.hidden = a.at("hidden");
  p.arch.kernel = a.at("kernel");
  p.seed = header.at("seed");
  const std::size_t n = header.at("parameterCount");
  if (n != p.arch.parameterCount()) throw std::runtime_error("checkpoint parameter count does not match architecture");
  p.values.resize(n);
  for (auto& v : p.values) v = std::bit_cast<double>(getU64(is));
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint has trailing bytes");
  return p;
}

}  // namespace psdlab
