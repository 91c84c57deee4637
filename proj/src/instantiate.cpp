#include "saflab/instantiate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>

#include "saflab/rng.hpp"
#include "saflab/scene_sim.hpp"

namespace saflab {

InstanceMaskSet cc_label(const Mask& binary_mask) {
  const Size size = binary_mask.size();
  InstanceMaskSet out;
  out.size = size;
  std::vector<int> label(size.area(), -1);
  std::vector<std::size_t> stack;
  const auto W = static_cast<std::size_t>(size.width);
  for (std::size_t start = 0; start < size.area(); ++start) {
    if (!binary_mask[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(out.masks.size());
    Mask comp(size);
    label[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      comp[i] = 1;
      const int x = static_cast<int>(i % W);
      const int y = static_cast<int>(i / W);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if (!size.contains(nx, ny)) continue;
          const auto j = static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx);
          if (binary_mask[j] && label[j] < 0) {
            label[j] = id;
            stack.push_back(j);
          }
        }
      }
    }
    out.masks.push_back(std::move(comp));
  }
  return out;
}

Mask detect_overlap(const InstanceMaskSet& cc_masks, int width) {
  Mask out(cc_masks.size);
  for (const auto& m : cc_masks.masks) {
    bool left = false, right = false;
    for (int y = 0; y < m.height(); ++y) {
      left = left || m.at(0, y);
      right = right || m.at(width - 1, y);
    }
    if (!(left && right)) continue;
    for (std::size_t i = 0; i < out.size().area(); ++i) {
      if (m[i]) out[i] = 1;
    }
  }
  return out;
}

DisplacementField fabricate_field(const InstanceMaskSet& cc_masks) { return gt_displacement(cc_masks); }

PasteResult augm_paste(const RgbImage& image, const Mask& binary_mask, const DisplacementField& field,
                       const PasteDonor& donor, std::uint64_t placement_seed) {
  const Size size = image.size();
  require_same_size(binary_mask.size(), size, "augm_paste");
  require_same_size(field.size(), size, "augm_paste");
  require_same_size(donor.image.size(), size, "augm_paste");
  require_same_size(donor.instance_mask.size(), size, "augm_paste");
  if (cc_label(donor.instance_mask).count() != 1) {
    throw std::invalid_argument("augm_paste: donor mask must hold a single instance");
  }

  PasteResult result{image, binary_mask, field, Mask(size), false, 0};
  const InstanceMaskSet existing = cc_label(binary_mask);
  Rng rng = make_rng(placement_seed, 0xA11);

  for (int attempt = 1; attempt <= 10; ++attempt) {
    result.attempts = attempt;
    const int ox = uniform_int(rng, -size.width / 2, size.width / 2);
    const int oy = uniform_int(rng, -size.height / 2, size.height / 2);
    Mask pasted(size);
    for (int y = 0; y < size.height; ++y) {
      for (int x = 0; x < size.width; ++x) {
        if (donor.instance_mask.at(x, y) && size.contains(x + ox, y + oy)) pasted.at(x + ox, y + oy) = 1;
      }
    }
    if (!pasted.any()) continue;
    bool erases = false;
    for (const auto& comp : existing.masks) {
      bool survives = false;
      for (std::size_t i = 0; i < size.area() && !survives; ++i) survives = comp[i] && !pasted[i];
      if (!survives) {
        erases = true;
        break;
      }
    }
    if (erases) continue;

    const Point2 c = mask_centroid(pasted);
    for (int y = 0; y < size.height; ++y) {
      for (int x = 0; x < size.width; ++x) {
        if (!pasted.at(x, y)) continue;
        const auto* src = donor.image.px(x - ox, y - oy);
        auto* dst = result.image.px(x, y);
        std::copy(src, src + 3, dst);
        result.mask.at(x, y) = 1;
        result.field.at(x, y) = Vec2f{static_cast<float>(c.x - x), static_cast<float>(c.y - y)};
      }
    }
    result.pasted = std::move(pasted);
    result.applied = true;
    return result;
  }
  return result;
}

double loss_fs(const DisplacementField& d_gt, const DisplacementField& d_pred) {
  require_same_size(d_gt.size(), d_pred.size(), "loss_fs");
  const auto n = d_gt.size().area();
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum += std::abs(static_cast<double>(d_gt[i].dx) - d_pred[i].dx);
    sum += std::abs(static_cast<double>(d_gt[i].dy) - d_pred[i].dy);
  }
  return sum / (2.0 * static_cast<double>(n));
}

double loss_instantiation(const DisplacementField& d_cc, const DisplacementField& d_pred, const Mask& overlap,
                          const Mask& binary_target, std::span<const float> predicted_probs) {
  const Size size = d_cc.size();
  require_same_size(d_pred.size(), size, "loss_instantiation");
  require_same_size(overlap.size(), size, "loss_instantiation");
  require_same_size(binary_target.size(), size, "loss_instantiation");
  if (predicted_probs.size() != size.area()) throw std::invalid_argument("loss_instantiation: shape mismatch");
  constexpr double kClamp = 1e-7;

  double l1 = 0.0;
  std::size_t kept = 0;
  double bce = 0.0;
  for (std::size_t i = 0; i < size.area(); ++i) {
    if (!overlap[i]) {
      l1 += std::abs(static_cast<double>(d_cc[i].dx) - d_pred[i].dx);
      l1 += std::abs(static_cast<double>(d_cc[i].dy) - d_pred[i].dy);
      ++kept;
    }
    const double p_raw = predicted_probs[i];
    if (!(p_raw >= 0.0 && p_raw <= 1.0)) {
      throw std::invalid_argument("loss_instantiation: probability outside (0,1) at pixel " + std::to_string(i));
    }
    const double p = std::clamp(p_raw, kClamp, 1.0 - kClamp);
    bce -= binary_target[i] ? std::log(p) : std::log(1.0 - p);
  }
  const double l1_term = kept ? l1 / (2.0 * static_cast<double>(kept)) : 0.0;
  const double bce_term = size.area() ? bce / static_cast<double>(size.area()) : 0.0;
  return l1_term + bce_term;
}

DisplacementField mask_field(const DisplacementField& field, const Mask& binary_mask) {
  require_same_size(field.size(), binary_mask.size(), "mask_field");
  DisplacementField out(field.size());
  for (std::size_t i = 0; i < field.size().area(); ++i) {
    if (binary_mask[i]) out[i] = field[i];
  }
  return out;
}

void InferenceParams::validate(Size size) const {
  if (grid_squares_per_side <= 0 || size.width % grid_squares_per_side != 0 ||
      size.height % grid_squares_per_side != 0) {
    throw std::invalid_argument("InferenceParams: grid " + std::to_string(grid_squares_per_side) +
                                " does not divide the image size");
  }
  if (!(eps_c > 0.0)) throw std::invalid_argument("InferenceParams: eps_c must be positive");
}

Extraction extract_instances_detailed(const DisplacementField& field, const Mask& binary_mask,
                                      const InferenceParams& params) {
  const Size size = field.size();
  require_same_size(binary_mask.size(), size, "extract_instances");
  params.validate(size);
  const int g = params.grid_squares_per_side;
  const int sw = size.width / g;
  const int sh = size.height / g;
  const double square_area = static_cast<double>(sw) * sh;

  Extraction out;
  out.instances.size = size;
  out.convergence.assign(static_cast<std::size_t>(g) * static_cast<std::size_t>(g), 0.0);

  // Vote targets; targets outside the image are clipped to its bounds.
  struct Vote {
    std::size_t pixel;
    double tx, ty;
    int square;
  };
  std::vector<Vote> votes;
  std::vector<std::size_t> square_votes(out.convergence.size(), 0);
  for (int y = 0; y < size.height; ++y) {
    for (int x = 0; x < size.width; ++x) {
      if (!binary_mask.at(x, y)) continue;
      const Vec2f v = field.at(x, y);
      const double tx = std::clamp(x + static_cast<double>(v.dx), 0.0, size.width - 1.0);
      const double ty = std::clamp(y + static_cast<double>(v.dy), 0.0, size.height - 1.0);
      const int sx = std::clamp(static_cast<int>(std::floor((tx + 0.5) / sw)), 0, g - 1);
      const int sy = std::clamp(static_cast<int>(std::floor((ty + 0.5) / sh)), 0, g - 1);
      const int sq = sy * g + sx;
      ++square_votes[static_cast<std::size_t>(sq)];
      const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(size.width) + static_cast<std::size_t>(x);
      votes.push_back({i, tx, ty, sq});
    }
  }
  if (votes.empty()) return out;
  for (std::size_t s = 0; s < square_votes.size(); ++s) {
    out.convergence[s] = static_cast<double>(square_votes[s]) / square_area;
  }

  // Group passing squares by 4-connectivity.
  std::vector<int> region_of(out.convergence.size(), -1);
  std::vector<CentroidRegion> regions;
  for (int s0 = 0; s0 < g * g; ++s0) {
    if (out.convergence[static_cast<std::size_t>(s0)] <= params.eps_c || region_of[static_cast<std::size_t>(s0)] >= 0)
      continue;
    const int id = static_cast<int>(regions.size());
    CentroidRegion region;
    std::vector<int> stack{s0};
    region_of[static_cast<std::size_t>(s0)] = id;
    double wx = 0.0, wy = 0.0;
    while (!stack.empty()) {
      const int s = stack.back();
      stack.pop_back();
      region.squares.push_back(s);
      const auto n = square_votes[static_cast<std::size_t>(s)];
      region.votes += n;
      const int qx = s % g, qy = s / g;
      wx += static_cast<double>(n) * (qx * sw + 0.5 * (sw - 1));
      wy += static_cast<double>(n) * (qy * sh + 0.5 * (sh - 1));
      const std::array<std::array<int, 2>, 4> nbrs{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
      for (const auto& d : nbrs) {
        const int nx = qx + d[0], ny = qy + d[1];
        if (nx < 0 || ny < 0 || nx >= g || ny >= g) continue;
        const int t = ny * g + nx;
        if (out.convergence[static_cast<std::size_t>(t)] > params.eps_c && region_of[static_cast<std::size_t>(t)] < 0) {
          region_of[static_cast<std::size_t>(t)] = id;
          stack.push_back(t);
        }
      }
    }
    std::sort(region.squares.begin(), region.squares.end());
    region.position = {wx / static_cast<double>(region.votes), wy / static_cast<double>(region.votes)};
    regions.push_back(std::move(region));
  }

  const auto tool_pixels = static_cast<double>(votes.size());
  if (regions.empty()) {
    std::clog << "extract_instances: no grid square above eps_c=" << params.eps_c
              << "; returning the whole mask as one instance\n";
    out.fallback = true;
    Mask whole(size);
    for (const auto& v : votes) whole[v.pixel] = 1;
    CentroidRegion region;
    region.position = mask_centroid(whole);
    region.votes = votes.size();
    out.instances.masks.push_back(std::move(whole));
    out.regions.push_back(std::move(region));
    out.scores.push_back(1.0);
    return out;
  }

  // Nearest region to each vote target; ties to the lowest region index.
  std::vector<Mask> masks(regions.size(), Mask(size));
  std::vector<std::size_t> assigned(regions.size(), 0);
  for (const auto& v : votes) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < regions.size(); ++r) {
      const double ddx = v.tx - regions[r].position.x;
      const double ddy = v.ty - regions[r].position.y;
      const double d = ddx * ddx + ddy * ddy;
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(r);
      }
    }
    masks[static_cast<std::size_t>(best)][v.pixel] = 1;
    ++assigned[static_cast<std::size_t>(best)];
  }
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (assigned[r] == 0) continue;
    out.scores.push_back(static_cast<double>(regions[r].votes) / tool_pixels);
    out.instances.masks.push_back(std::move(masks[r]));
    out.regions.push_back(std::move(regions[r]));
  }
  return out;
}

NoisyFieldMask noisy_oracle(const DisplacementField& gt_field, const Mask& gt_mask, const NoiseConfig& cfg) {
  require_same_size(gt_field.size(), gt_mask.size(), "noisy_oracle");
  if (cfg.sigma_px < 0.0 || cfg.boundary_iters < 0) {
    throw std::invalid_argument("noisy_oracle: noise parameters must be nonnegative");
  }
  const Size size = gt_mask.size();
  Rng boundary_rng = make_rng(cfg.seed, 0xB0);
  Rng vector_rng = make_rng(cfg.seed, 0xF1);

  Mask mask = gt_mask;
  for (int it = 0; it < cfg.boundary_iters; ++it) {
    const bool dilate = it % 2 == 0;
    const Mask before = mask;
    for (int y = 0; y < size.height; ++y) {
      for (int x = 0; x < size.width; ++x) {
        const bool on = before.at(x, y) != 0;
        if (on == dilate) continue;
        bool frontier = false;
        const std::array<std::array<int, 2>, 4> nbrs{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
        for (const auto& d : nbrs) {
          const int nx = x + d[0], ny = y + d[1];
          if (size.contains(nx, ny) && (before.at(nx, ny) != 0) != on) frontier = true;
        }
        if (frontier && uniform01(boundary_rng) < 0.5) mask.at(x, y) = dilate ? 1 : 0;
      }
    }
  }

  DisplacementField field(size);
  for (std::size_t i = 0; i < size.area(); ++i) {
    if (!mask[i]) continue;
    Vec2f v = gt_field[i];
    if (cfg.sigma_px > 0.0) {
      v.dx += static_cast<float>(cfg.sigma_px * gaussian(vector_rng));
      v.dy += static_cast<float>(cfg.sigma_px * gaussian(vector_rng));
    }
    field[i] = v;
  }
  return {std::move(field), std::move(mask)};
}

}  // namespace saflab
