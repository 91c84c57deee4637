#include "saflab/scene_sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "saflab/rng.hpp"

namespace saflab {
namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kClassColors{{
    {172, 174, 180},  // brushed steel
    {58, 60, 70},     // graphite
    {80, 125, 205},   // blue insulation
    {205, 190, 110},  // gold
    {110, 185, 135},  // green
    {225, 225, 232},  // white
    {140, 92, 172},   // purple
    {70, 170, 190},   // teal
}};
constexpr std::array<int, 4> kClassWidths{12, 16, 14, 18};
constexpr std::array<int, 3> kTipLengths{14, 22, 10};

constexpr int kMaxClassWidth = 18;
constexpr int kMinClassWidth = 12;

// Grid quantum for tool positions: keeps the fractional part exactly
// representable so integer translations shift rasters exactly.
constexpr double kPosQuantum = 1.0 / 256.0;

double quantize(double v) { return std::round(v / kPosQuantum) * kPosQuantum; }

int scaled(int base, Size size) {
  return std::max(3, static_cast<int>(std::lround(base * size.width / 256.0)));
}

struct Pose {
  double x = 0.0;  // tip-base point
  double y = 0.0;
};

struct Constraint {
  double apex_lo = 0.0, apex_hi = 0.0;  // apex x range
  double y_lo = 0.0, y_hi = 0.0;        // band, inclusive pixel rows
  bool paired = false;
  double pair_center = 0.0;  // axis y at the image mid-column
  double pair_slack = 0.0;
};

struct ToolState {
  ToolSpec spec;
  double dir_x = 1.0, dir_y = 0.0;  // unit axis pointing into the image
  Constraint limits;
  Pose pose;
};

double slope(const ToolState& t) { return t.dir_y / t.dir_x; }

double apex_x(const ToolState& t, const Pose& p) { return p.x + t.dir_x * t.spec.tip_length_px; }

double axis_y_at(const ToolState& t, const Pose& p, double x) { return p.y + slope(t) * (x - p.x); }

bool pose_valid(const ToolState& t, const Pose& p, Size size) {
  const double ax = apex_x(t, p);
  if (ax < t.limits.apex_lo || ax > t.limits.apex_hi) return false;
  const double border_x = t.spec.entry_side == EntrySide::left ? 0.0 : size.width - 1.0;
  const double s = slope(t);
  const double half = 0.5 * t.spec.width_px * std::sqrt(1.0 + s * s) + 1.0;
  const double y0 = axis_y_at(t, p, border_x);
  const double y1 = axis_y_at(t, p, ax);
  if (std::min(y0, y1) - half < t.limits.y_lo || std::max(y0, y1) + half > t.limits.y_hi) return false;
  if (t.limits.paired) {
    const double mid = axis_y_at(t, p, 0.5 * (size.width - 1));
    if (std::abs(mid - t.limits.pair_center) > t.limits.pair_slack) return false;
  }
  return true;
}

// Point-in-tool test on a pixel center.
bool inside_tool(const ToolState& t, const Pose& p, double px, double py, double* perp) {
  const double rx = px - p.x;
  const double ry = py - p.y;
  const double u = rx * t.dir_x + ry * t.dir_y;  // along axis, 0 at tip base
  const double v = -rx * t.dir_y + ry * t.dir_x;
  const double r = 0.5 * t.spec.width_px;
  *perp = v;
  if (u <= 0.0) {
    return std::abs(v) <= r;  // shaft extends out of the image
  }
  if (u <= t.spec.tip_length_px) {
    const double half = r * (1.0 - u / t.spec.tip_length_px);
    return std::abs(v) <= half;
  }
  return false;
}

void rgb_from_tool(const ToolState& t, const Pose& p, double px, double py, double perp,
                   std::uint8_t* out) {
  const double rx = px - p.x;
  const double ry = py - p.y;
  const double u = rx * t.dir_x + ry * t.dir_y;
  const double r = 0.5 * t.spec.width_px;
  const double shade = 1.0 - 0.35 * (perp / r) * (perp / r) - (u > 0.0 ? 0.12 : 0.0);
  const double tex = 22.0 * value_noise(u, perp, 6.0, t.spec.texture_seed) +
                     8.0 * lattice_value(static_cast<std::int64_t>(std::floor(u)),
                                         static_cast<std::int64_t>(std::floor(perp * 2.0)),
                                         t.spec.texture_seed ^ 0xABCDull);
  for (int c = 0; c < 3; ++c) {
    const double v = t.spec.color_mean[static_cast<std::size_t>(c)] * shade + tex;
    out[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
}

RgbImage render_background(Size size, std::uint64_t seed) {
  RgbImage img(size);
  for (int y = 0; y < size.height; ++y) {
    for (int x = 0; x < size.width; ++x) {
      const double low = value_noise(x, y, 40.0, seed);
      const double mid = value_noise(x, y, 9.0, seed ^ 0x77ull);
      const double tint = value_noise(x, y, 64.0, seed ^ 0x1234ull);
      auto* px = img.px(x, y);
      const double v = 1.0 + 0.22 * low + 0.08 * mid;
      px[0] = static_cast<std::uint8_t>(std::clamp(std::lround(158.0 * v + 12.0 * tint), 0L, 255L));
      px[1] = static_cast<std::uint8_t>(std::clamp(std::lround(62.0 * v + 10.0 * tint), 0L, 255L));
      px[2] = static_cast<std::uint8_t>(std::clamp(std::lround(58.0 * v - 6.0 * tint), 0L, 255L));
    }
  }
  return img;
}

// Keeps only the 8-connected pieces of `owner == id` that touch the entry
// border column; returns the removed pixel indices.
std::vector<std::size_t> strip_detached(std::vector<int>& owner, Size size, int id, EntrySide side) {
  const int border_x = side == EntrySide::left ? 0 : size.width - 1;
  std::vector<std::uint8_t> keep(size.area(), 0);
  std::vector<std::size_t> stack;
  for (int y = 0; y < size.height; ++y) {
    const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(size.width) +
                   static_cast<std::size_t>(border_x);
    if (owner[i] == id && !keep[i]) {
      keep[i] = 1;
      stack.push_back(i);
    }
  }
  while (!stack.empty()) {
    const auto i = stack.back();
    stack.pop_back();
    const int x = static_cast<int>(i % static_cast<std::size_t>(size.width));
    const int y = static_cast<int>(i / static_cast<std::size_t>(size.width));
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx, ny = y + dy;
        if (!size.contains(nx, ny)) continue;
        const auto j = static_cast<std::size_t>(ny) * static_cast<std::size_t>(size.width) +
                       static_cast<std::size_t>(nx);
        if (owner[j] == id && !keep[j]) {
          keep[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  std::vector<std::size_t> removed;
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (owner[i] == id && !keep[i]) {
      owner[i] = -1;
      removed.push_back(i);
    }
  }
  return removed;
}

}  // namespace

ToolSpec class_tool_spec(int class_id, Size image_size) {
  if (class_id < 0) throw std::invalid_argument("class_tool_spec: negative class id");
  ToolSpec spec;
  spec.class_id = class_id;
  const auto c = static_cast<std::size_t>(class_id);
  spec.width_px = scaled(kClassWidths[c % kClassWidths.size()], image_size);
  spec.tip_length_px = scaled(kTipLengths[c % kTipLengths.size()], image_size);
  if (c < kClassColors.size()) {
    spec.color_mean = kClassColors[c];
  } else {
    const auto h = splitmix64(c * 7919ull);
    for (int k = 0; k < 3; ++k) {
      spec.color_mean[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(60 + ((h >> (k * 16)) % 170));
    }
  }
  spec.texture_seed = splitmix64(1000ull + c);
  return spec;
}

double SimConfig::min_tool_area() const {
  return static_cast<double>(scaled(kMinClassWidth, size)) * 0.25 * size.width;
}

void SimConfig::validate() const {
  if (size.width < 16 || size.height < 16) throw std::invalid_argument("SimConfig: image must be at least 16x16");
  if (n_classes < 1) throw std::invalid_argument("SimConfig: n_classes must be positive");
  if (n_frames < 1) throw std::invalid_argument("SimConfig: n_frames must be positive");
  if (max_instances_per_frame < 0) throw std::invalid_argument("SimConfig: max_instances_per_frame must be >= 0");
  if (overlap_probability < 0.0 || overlap_probability > 1.0)
    throw std::invalid_argument("SimConfig: overlap_probability outside [0,1]");
  if (absent_class_fraction < 0.0 || absent_class_fraction > 1.0)
    throw std::invalid_argument("SimConfig: absent_class_fraction outside [0,1]");
  if (motion_px_per_frame < 0.0) throw std::invalid_argument("SimConfig: motion_px_per_frame must be >= 0");
  if (max_instances_per_frame == 0) return;
  if (max_instances_per_frame * min_tool_area() > 0.5 * static_cast<double>(size.area())) {
    throw std::invalid_argument("SimConfig: unsatisfiable layout (max_instances_per_frame x min tool area > W*H/2)");
  }
  if (size.height / max_instances_per_frame < scaled(kMaxClassWidth, size) + 10) {
    throw std::invalid_argument("SimConfig: unsatisfiable layout (image too short for the instance bands)");
  }
}

SyntheticSequence gen_sequence(const SimConfig& config, std::uint64_t seed) {
  config.validate();
  const Size size = config.size;
  const int W = size.width;
  const int T = config.n_frames;

  SyntheticSequence seq;
  seq.config = config;
  seq.seed = seed;

  Rng layout_rng = make_rng(seed, 1);
  Rng motion_rng = make_rng(seed, 2);

  // Tool count and classes.
  int n_tools = 0;
  if (config.max_instances_per_frame > 0) {
    n_tools = uniform_int(layout_rng, std::min(2, config.max_instances_per_frame), config.max_instances_per_frame);
  }
  std::vector<int> classes;
  {
    std::vector<int> pool(static_cast<std::size_t>(config.n_classes));
    for (int c = 0; c < config.n_classes; ++c) pool[static_cast<std::size_t>(c)] = c;
    for (int i = config.n_classes - 1; i > 0; --i) {
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(uniform_int(layout_rng, 0, i))]);
    }
    for (int k = 0; k < n_tools; ++k) {
      classes.push_back(k < config.n_classes ? pool[static_cast<std::size_t>(k)]
                                             : uniform_int(layout_rng, 0, config.n_classes - 1));
    }
  }

  const bool overlap_pair = n_tools >= 2 && uniform01(layout_rng) < config.overlap_probability;
  const int n_bands = overlap_pair ? n_tools - 1 : n_tools;
  std::vector<int> band_of(static_cast<std::size_t>(n_tools));
  {
    std::vector<int> bands(static_cast<std::size_t>(n_bands));
    for (int b = 0; b < n_bands; ++b) bands[static_cast<std::size_t>(b)] = b;
    for (int i = n_bands - 1; i > 0; --i) {
      std::swap(bands[static_cast<std::size_t>(i)], bands[static_cast<std::size_t>(uniform_int(layout_rng, 0, i))]);
    }
    for (int k = 0; k < n_tools; ++k) {
      // Tools 0 and 1 share a band when paired.
      const int slot = overlap_pair ? std::max(0, k - 1) : k;
      band_of[static_cast<std::size_t>(k)] = bands[static_cast<std::size_t>(slot)];
    }
  }

  std::vector<ToolState> tools(static_cast<std::size_t>(n_tools));
  const double band_h = n_bands > 0 ? static_cast<double>(size.height) / n_bands : 0.0;
  for (int k = 0; k < n_tools; ++k) {
    auto& t = tools[static_cast<std::size_t>(k)];
    t.spec = class_tool_spec(classes[static_cast<std::size_t>(k)], size);
    const bool paired = overlap_pair && k < 2;
    if (paired) {
      t.spec.entry_side = k == 0 ? EntrySide::left : EntrySide::right;
    } else {
      t.spec.entry_side = uniform01(layout_rng) < 0.5 ? EntrySide::left : EntrySide::right;
    }
    const int band = band_of[static_cast<std::size_t>(k)];
    t.limits.y_lo = std::floor(band * band_h) + 1.0;
    t.limits.y_hi = std::ceil((band + 1) * band_h) - 2.0;
    const bool left = t.spec.entry_side == EntrySide::left;
    if (paired) {
      t.limits.paired = true;
      t.limits.pair_center = 0.5 * (t.limits.y_lo + t.limits.y_hi);
      t.limits.pair_slack = 0.25 * scaled(kMinClassWidth, size);
      t.limits.apex_lo = left ? 0.52 * W : 0.38 * W;
      t.limits.apex_hi = left ? 0.62 * W : 0.48 * W;
    } else {
      t.limits.apex_lo = left ? 0.25 * W : 0.40 * W;
      t.limits.apex_hi = left ? 0.60 * W : 0.75 * W;
    }
    const double reach = 0.6 * W;
    const double room = (t.limits.y_hi - t.limits.y_lo) - 1.1 * t.spec.width_px - 8.0;
    double smax = std::clamp(room / reach, 0.0, 0.25);
    if (paired) smax = std::min(smax, 0.06);

    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double s = attempt < 150 ? uniform(layout_rng, -smax, smax) : 0.0;
      const double norm = std::sqrt(1.0 + s * s);
      t.dir_x = (left ? 1.0 : -1.0) / norm;
      t.dir_y = s / norm * (left ? 1.0 : -1.0);
      const double ax = uniform(layout_rng, t.limits.apex_lo, t.limits.apex_hi);
      const double center = paired ? t.limits.pair_center
                                   : uniform(layout_rng, t.limits.y_lo, t.limits.y_hi);
      Pose p;
      p.x = quantize(ax - t.dir_x * t.spec.tip_length_px);
      // Place the axis so that it passes `center` at the mid-column.
      p.y = quantize(center - slope(t) * (0.5 * (W - 1) - p.x));
      if (pose_valid(t, p, size)) {
        t.pose = p;
        placed = true;
      }
    }
    if (!placed) throw std::runtime_error("gen_sequence: failed to place tool " + std::to_string(k));
    seq.tools.push_back(t.spec);
  }

  // Hidden-class interval: frames where one sequence class is invisible.
  std::vector<std::uint8_t> hidden_class_frame(static_cast<std::size_t>(T), 0);
  int hidden_class = -1;
  if (n_tools > 0 && T > 1 && config.absent_class_fraction > 0.0) {
    hidden_class = classes[static_cast<std::size_t>(uniform_int(layout_rng, 0, n_tools - 1))];
    const int len = std::min(T - 1, static_cast<int>(std::lround(config.absent_class_fraction * T)));
    if (len > 0) {
      const int start = uniform_int(layout_rng, 0, T - len);
      for (int t = start; t < start + len; ++t) hidden_class_frame[static_cast<std::size_t>(t)] = 1;
    }
  }

  const RgbImage background = render_background(size, splitmix64(seed ^ 0xB6ull));
  const double m = config.motion_px_per_frame;

  for (int t = 0; t < T; ++t) {
    std::vector<int> owner(size.area(), -1);
    std::vector<double> perp_at(size.area(), 0.0);
    std::vector<std::uint8_t> visible(static_cast<std::size_t>(n_tools), 0);
    for (int k = 0; k < n_tools; ++k) {
      const auto& tool = tools[static_cast<std::size_t>(k)];
      if (hidden_class_frame[static_cast<std::size_t>(t)] && tool.spec.class_id == hidden_class) continue;
      visible[static_cast<std::size_t>(k)] = 1;
      const double ax = apex_x(tool, tool.pose);
      const bool left = tool.spec.entry_side == EntrySide::left;
      const int x0 = left ? 0 : std::max(0, static_cast<int>(std::floor(ax)) - 1);
      const int x1 = left ? std::min(W - 1, static_cast<int>(std::ceil(ax)) + 1) : W - 1;
      const int y0 = std::max(0, static_cast<int>(tool.limits.y_lo) - 1);
      const int y1 = std::min(size.height - 1, static_cast<int>(tool.limits.y_hi) + 1);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          double perp = 0.0;
          if (inside_tool(tool, tool.pose, x, y, &perp)) {
            const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(W) + static_cast<std::size_t>(x);
            owner[i] = k;  // later tools draw on top
            perp_at[i] = perp;
          }
        }
      }
    }
    for (int k = 0; k < n_tools; ++k) {
      if (visible[static_cast<std::size_t>(k)]) {
        strip_detached(owner, size, k, tools[static_cast<std::size_t>(k)].spec.entry_side);
      }
    }

    RgbImage frame = background;
    std::vector<Mask> masks(static_cast<std::size_t>(n_tools), Mask(size));
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_tools), 0);
    for (int y = 0; y < size.height; ++y) {
      for (int x = 0; x < W; ++x) {
        const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(W) + static_cast<std::size_t>(x);
        const int k = owner[i];
        if (k < 0) continue;
        const auto& tool = tools[static_cast<std::size_t>(k)];
        rgb_from_tool(tool, tool.pose, x, y, perp_at[i], frame.px(x, y));
        masks[static_cast<std::size_t>(k)][i] = 1;
        ++counts[static_cast<std::size_t>(k)];
      }
    }

    InstanceMaskSet set;
    set.size = size;
    std::vector<int> ids;
    std::set<int> present;
    for (int k = 0; k < n_tools; ++k) {
      if (counts[static_cast<std::size_t>(k)] == 0) continue;
      set.masks.push_back(std::move(masks[static_cast<std::size_t>(k)]));
      set.class_ids.emplace_back(tools[static_cast<std::size_t>(k)].spec.class_id);
      ids.push_back(k);
      present.insert(tools[static_cast<std::size_t>(k)].spec.class_id);
    }
    seq.frames.push_back(std::move(frame));
    seq.instance_masks.push_back(std::move(set));
    seq.tool_ids.push_back(std::move(ids));
    seq.presence_sw.insert(present.begin(), present.end());
    seq.presence_fw.push_back(std::move(present));

    if (t + 1 == T) break;

    // Advance every tool (hidden ones keep moving) by an integer step.
    std::vector<std::array<int, 2>> step(static_cast<std::size_t>(n_tools), {0, 0});
    for (int k = 0; k < n_tools; ++k) {
      auto& tool = tools[static_cast<std::size_t>(k)];
      const double ang = uniform(motion_rng, 0.0, 2.0 * 3.14159265358979323846);
      const double rad = uniform(motion_rng, 0.0, m);
      int dx = static_cast<int>(std::lround(rad * std::cos(ang)));
      int dy = static_cast<int>(std::lround(rad * std::sin(ang)));
      while (dx * dx + dy * dy > m * m) {
        if (std::abs(dx) >= std::abs(dy)) dx -= dx > 0 ? 1 : -1;
        else dy -= dy > 0 ? 1 : -1;
      }
      const std::array<std::array<int, 2>, 5> tries{{{dx, dy}, {-dx, dy}, {dx, -dy}, {-dx, -dy}, {0, 0}}};
      for (const auto& c : tries) {
        Pose p{tool.pose.x + c[0], tool.pose.y + c[1]};
        if (pose_valid(tool, p, size) || (c[0] == 0 && c[1] == 0)) {
          tool.pose = p;
          step[static_cast<std::size_t>(k)] = c;
          break;
        }
      }
    }
    FlowField flow(size);
    for (std::size_t i = 0; i < owner.size(); ++i) {
      if (owner[i] < 0) continue;
      const auto& s = step[static_cast<std::size_t>(owner[i])];
      flow[i] = Vec2f{static_cast<float>(s[0]), static_cast<float>(s[1])};
    }
    seq.flows.push_back(std::move(flow));
    seq.motions.push_back(std::move(step));
  }
  return seq;
}

DisplacementField gt_displacement(const InstanceMaskSet& masks) {
  DisplacementField field(masks.size);
  for (const auto& m : masks.masks) {
    require_same_size(m.size(), masks.size, "gt_displacement");
    const Point2 c = mask_centroid(m);
    for (int y = 0; y < m.height(); ++y) {
      for (int x = 0; x < m.width(); ++x) {
        if (m.at(x, y)) {
          field.at(x, y) = Vec2f{static_cast<float>(c.x - x), static_cast<float>(c.y - y)};
        }
      }
    }
  }
  return field;
}

FlowField gt_flow(const SyntheticSequence& seq, int t) {
  if (t < 0 || t + 1 >= seq.n_frames()) {
    throw std::out_of_range("gt_flow: frame index " + std::to_string(t) + " out of range");
  }
  return seq.flows[static_cast<std::size_t>(t)];
}

}  // namespace saflab
