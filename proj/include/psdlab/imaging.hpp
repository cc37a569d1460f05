#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace psdlab {

// Raised when two rasters that must agree in size do not.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Row-major single-plane raster. Base for the two mask types; not used directly.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(checkedDim(width)), height_(checkedDim(height)),
        data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {}
  Grid(int width, int height, std::vector<T> data)
      : width_(checkedDim(width)), height_(checkedDim(height)), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_))
      throw DimensionError("raster data length does not match width*height");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  template <typename Other>
  bool sameShape(const Other& o) const {
    return width_ == o.width() && height_ == o.height();
  }
  bool inBounds(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 protected:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

 private:
  static int checkedDim(int d) {
    if (d <= 0) throw std::invalid_argument("raster dimensions must be positive");
    return d;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

// Per-pixel boolean mask, stored as 0/1 bytes.
class BinaryMask : public Grid<std::uint8_t> {
 public:
  using Grid::Grid;
  bool get(int x, int y) const { return (*this)(x, y) != 0; }
  void set(int x, int y, bool v) { (*this)(x, y) = v ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Per-pixel foreground probability in [0,1].
class SoftMask : public Grid<double> {
 public:
  using Grid::Grid;
  static SoftMask fromBinary(const BinaryMask& m);
  friend bool operator==(const SoftMask&, const SoftMask&) = default;
};

// Image with values in [0,1], row-major, channel-interleaved.
class Frame {
 public:
  Frame() = default;
  Frame(int width, int height, int channels = 1, double fill = 0.0);
  Frame(int width, int height, int channels, std::vector<double> data);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t pixelCount() const { return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_); }

  double& operator()(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  double operator()(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool sameShape(const Frame& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }
  template <typename T>
  bool sameShape(const Grid<T>& g) const { return width_ == g.width() && height_ == g.height(); }

  // Clamps every value into [0,1].
  void clamp01();

  friend bool operator==(const Frame&, const Frame&) = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(channels_) +
           static_cast<std::size_t>(c);
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<double> data_;
};

inline constexpr double kDefaultThreshold = 0.5;

// Pixel is foreground iff probability >= threshold.
BinaryMask binarize(const SoftMask& m, double threshold = kDefaultThreshold);

// |A∩B| / |A∪B|; 1.0 when both masks are empty.
double iou(const BinaryMask& a, const BinaryMask& b);

// 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
double dice(const BinaryMask& a, const BinaryMask& b);

// Mean absolute error between a soft prediction and a binary ground truth.
double mae(const SoftMask& pred, const BinaryMask& gt);

// PGM (P5, maxval 255) I/O. Frames are quantized as round(255 v); masks as {0,255}.
void writePgm(const std::filesystem::path& path, const Frame& frame);
void writePgm(const std::filesystem::path& path, const BinaryMask& mask);
Frame readPgmFrame(const std::filesystem::path& path);
// Any nonzero byte reads as foreground.
BinaryMask readPgmMask(const std::filesystem::path& path);

std::uint8_t quantize8(double v);

}  // namespace psdlab
