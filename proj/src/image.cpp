#include "saflab/image.hpp"

#include <algorithm>

namespace saflab {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(
      std::count_if(data_.begin(), data_.end(), [](std::uint8_t v) { return v != 0; }));
}

bool Mask::any() const {
  return std::any_of(data_.begin(), data_.end(), [](std::uint8_t v) { return v != 0; });
}

Mask InstanceMaskSet::union_mask() const {
  Mask out(size);
  for (const auto& m : masks) {
    for (std::size_t i = 0; i < out.size().area(); ++i) {
      if (m[i]) out[i] = 1;
    }
  }
  return out;
}

Mask InstanceMaskSet::label_map() const {
  if (masks.size() > 255) throw std::invalid_argument("label_map: more than 255 instances");
  Mask out(size);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    for (std::size_t i = 0; i < out.size().area(); ++i) {
      if (masks[k][i]) out[i] = static_cast<std::uint8_t>(k + 1);
    }
  }
  return out;
}

InstanceMaskSet InstanceMaskSet::from_label_map(const Mask& labels) {
  InstanceMaskSet set;
  set.size = labels.size();
  std::uint8_t max_id = 0;
  for (auto v : labels.pixels()) max_id = std::max(max_id, v);
  set.masks.assign(max_id, Mask(labels.size()));
  for (std::size_t i = 0; i < labels.size().area(); ++i) {
    if (labels[i]) set.masks[labels[i] - 1][i] = 1;
  }
  return set;
}

Point2 mask_centroid(const Mask& mask) {
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask.at(x, y)) {
        sx += x;
        sy += y;
        ++n;
      }
    }
  }
  if (n == 0) return {};
  return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

}  // namespace saflab
