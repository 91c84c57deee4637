#pragma once

// Dense raster types shared by every stage: binary masks, RGB frames,
// two-channel vector fields and per-frame instance mask sets.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <stdexcept>
#include <vector>

namespace saflab {

struct Size {
  int width = 0;
  int height = 0;

  [[nodiscard]] std::size_t area() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }
  [[nodiscard]] bool contains(int x, int y) const {
    return x >= 0 && y >= 0 && x < width && y < height;
  }
  friend bool operator==(const Size&, const Size&) = default;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Single-channel 8-bit raster. Used for binary masks (0/1) and for
/// small-integer label maps.
class Mask {
 public:
  Mask() = default;
  explicit Mask(Size size, std::uint8_t fill = 0)
      : size_(size), data_(size.area(), fill) {}

  [[nodiscard]] Size size() const { return size_; }
  [[nodiscard]] int width() const { return size_.width; }
  [[nodiscard]] int height() const { return size_.height; }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  std::uint8_t& at(int x, int y) { return data_[index(x, y)]; }
  [[nodiscard]] std::uint8_t at(int x, int y) const { return data_[index(x, y)]; }
  std::uint8_t& operator[](std::size_t i) { return data_[i]; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::span<const std::uint8_t> pixels() const { return data_; }
  std::span<std::uint8_t> pixels() { return data_; }

  /// Number of nonzero pixels.
  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] bool any() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  [[nodiscard]] std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(size_.width) +
           static_cast<std::size_t>(x);
  }

  Size size_;
  std::vector<std::uint8_t> data_;
};

/// Interleaved 8-bit RGB frame.
class RgbImage {
 public:
  RgbImage() = default;
  explicit RgbImage(Size size) : size_(size), data_(size.area() * 3, 0) {}

  [[nodiscard]] Size size() const { return size_; }
  [[nodiscard]] int width() const { return size_.width; }
  [[nodiscard]] int height() const { return size_.height; }

  std::uint8_t* px(int x, int y) { return &data_[offset(x, y)]; }
  [[nodiscard]] const std::uint8_t* px(int x, int y) const { return &data_[offset(x, y)]; }

  [[nodiscard]] std::span<const std::uint8_t> bytes() const { return data_; }
  std::span<std::uint8_t> bytes() { return data_; }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;

 private:
  [[nodiscard]] std::size_t offset(int x, int y) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(size_.width) +
            static_cast<std::size_t>(x)) * 3;
  }

  Size size_;
  std::vector<std::uint8_t> data_;
};

struct Vec2f {
  float dx = 0.0f;
  float dy = 0.0f;
  friend bool operator==(const Vec2f&, const Vec2f&) = default;
};

/// W x H grid of 2-vectors in pixel units. The tag distinguishes
/// displacement fields (pixel -> centroid) from optical flow (t -> t+1)
/// so the two cannot be swapped by accident.
template <typename Tag>
class VectorField {
 public:
  VectorField() = default;
  explicit VectorField(Size size) : size_(size), data_(size.area()) {}

  [[nodiscard]] Size size() const { return size_; }
  [[nodiscard]] int width() const { return size_.width; }
  [[nodiscard]] int height() const { return size_.height; }

  Vec2f& at(int x, int y) { return data_[index(x, y)]; }
  [[nodiscard]] const Vec2f& at(int x, int y) const { return data_[index(x, y)]; }
  Vec2f& operator[](std::size_t i) { return data_[i]; }
  const Vec2f& operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::span<const Vec2f> vectors() const { return data_; }
  std::span<Vec2f> vectors() { return data_; }

  friend bool operator==(const VectorField&, const VectorField&) = default;

 private:
  [[nodiscard]] std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(size_.width) +
           static_cast<std::size_t>(x);
  }

  Size size_;
  std::vector<Vec2f> data_;
};

struct DisplacementTag {};
struct FlowTag {};
using DisplacementField = VectorField<DisplacementTag>;
using FlowField = VectorField<FlowTag>;

/// Disjoint per-instance binary masks of one frame, optionally carrying a
/// class id per instance.
struct InstanceMaskSet {
  Size size;
  std::vector<Mask> masks;
  std::vector<std::optional<int>> class_ids;  // empty or one per mask

  [[nodiscard]] std::size_t count() const { return masks.size(); }
  [[nodiscard]] Mask union_mask() const;
  /// Label map: 0 = background, i + 1 = instance i. Requires < 256 instances.
  [[nodiscard]] Mask label_map() const;
  static InstanceMaskSet from_label_map(const Mask& labels);

  friend bool operator==(const InstanceMaskSet&, const InstanceMaskSet&) = default;
};

[[nodiscard]] Point2 mask_centroid(const Mask& mask);

inline void require_same_size(Size a, Size b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
}

}  // namespace saflab
