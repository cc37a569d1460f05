#include "psdlab/imaging.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace psdlab {

namespace {

void requireSameShape(int wa, int ha, int wb, int hb, const char* what) {
  if (wa != wb || ha != hb) {
    std::ostringstream os;
    os << what << ": dimension mismatch (" << wa << "x" << ha << " vs " << wb << "x" << hb << ")";
    throw DimensionError(os.str());
  }
}

struct OverlapCounts {
  std::size_t inter = 0;
  std::size_t a = 0;
  std::size_t b = 0;
};

OverlapCounts countOverlap(const BinaryMask& a, const BinaryMask& b, const char* what) {
  requireSameShape(a.width(), a.height(), b.width(), b.height(), what);
  OverlapCounts c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] != 0;
    const bool pb = b[i] != 0;
    c.a += pa;
    c.b += pb;
    c.inter += (pa && pb);
  }
  return c;
}

void writeBytes(const std::filesystem::path& path, int w, int h, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Reads the next header token, skipping whitespace and '#' comments.
std::string headerToken(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

std::vector<std::uint8_t> readBytes(const std::filesystem::path& path, int& w, int& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  if (headerToken(in) != "P5") throw std::runtime_error("not a binary PGM (P5): " + path.string());
  try {
    w = std::stoi(headerToken(in));
    h = std::stoi(headerToken(in));
    if (std::stoi(headerToken(in)) != 255) throw std::runtime_error("unsupported PGM maxval: " + path.string());
  } catch (const std::logic_error&) {
    throw std::runtime_error("malformed PGM header: " + path.string());
  }
  if (w <= 0 || h <= 0) throw std::runtime_error("invalid PGM dimensions: " + path.string());
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw std::runtime_error("truncated PGM: " + path.string());
  return bytes;
}

}  // namespace

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (auto v : data()) n += (v != 0);
  return n;
}

SoftMask SoftMask::fromBinary(const BinaryMask& m) {
  SoftMask s(m.width(), m.height());
  for (std::size_t i = 0; i < m.size(); ++i) s[i] = m[i] ? 1.0 : 0.0;
  return s;
}

Frame::Frame(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels) {
  if (width <= 0 || height <= 0 || channels <= 0) throw std::invalid_argument("frame dimensions must be positive");
  data_.assign(pixelCount() * static_cast<std::size_t>(channels), fill);
}

Frame::Frame(int width, int height, int channels, std::vector<double> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
  if (width <= 0 || height <= 0 || channels <= 0) throw std::invalid_argument("frame dimensions must be positive");
  if (data_.size() != pixelCount() * static_cast<std::size_t>(channels))
    throw DimensionError("frame data length does not match width*height*channels");
  for (double v : data_)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("frame values must lie in [0,1]");
}

void Frame::clamp01() {
  for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
}

BinaryMask binarize(const SoftMask& m, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("binarize threshold must be in (0,1)");
  BinaryMask out(m.width(), m.height());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] >= threshold ? 1 : 0;
  return out;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  const auto c = countOverlap(a, b, "iou");
  const std::size_t uni = c.a + c.b - c.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.inter) / static_cast<double>(uni);
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  const auto c = countOverlap(a, b, "dice");
  if (c.a + c.b == 0) return 1.0;
  return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.a + c.b);
}

double mae(const SoftMask& pred, const BinaryMask& gt) {
  requireSameShape(pred.width(), pred.height(), gt.width(), gt.height(), "mae");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred[i] - (gt[i] ? 1.0 : 0.0));
  return sum / static_cast<double>(pred.size());
}

std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void writePgm(const std::filesystem::path& path, const Frame& frame) {
  if (frame.channels() != 1) throw std::invalid_argument("PGM output requires a single-channel frame");
  std::vector<std::uint8_t> bytes(frame.pixelCount());
  const auto d = frame.data();
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize8(d[i]);
  writeBytes(path, frame.width(), frame.height(), bytes);
}

void writePgm(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> bytes(mask.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask[i] ? 255 : 0;
  writeBytes(path, mask.width(), mask.height(), bytes);
}

Frame readPgmFrame(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto bytes = readBytes(path, w, h);
  std::vector<double> data(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) data[i] = static_cast<double>(bytes[i]) / 255.0;
  return Frame(w, h, 1, std::move(data));
}

BinaryMask readPgmMask(const std::filesystem::path& path) {
  int w = 0, h = 0;
  auto bytes = readBytes(path, w, h);
  for (auto& b : bytes) b = b ? 1 : 0;
  return BinaryMask(w, h, std::move(bytes));
}

}  // namespace psdlab
