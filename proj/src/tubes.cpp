#include "saflab/tubes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <tuple>

namespace saflab {

FlowMethod parse_flow_method(const std::string& name) {
  if (name == "gt") return FlowMethod::gt;
  if (name == "block_match") return FlowMethod::block_match;
  throw std::invalid_argument("unsupported flow method: " + name);
}

std::string to_string(FlowMethod method) { return method == FlowMethod::gt ? "gt" : "block_match"; }

namespace {

std::vector<int> luminance(const RgbImage& img) {
  std::vector<int> out(img.size().area());
  const auto bytes = img.bytes();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = bytes[3 * i] + 2 * bytes[3 * i + 1] + bytes[3 * i + 2];
  }
  return out;
}

}  // namespace

FlowField block_match_flow(const RgbImage& a, const RgbImage& b, const BlockMatchParams& params) {
  require_same_size(a.size(), b.size(), "block_match_flow");
  const Size size = a.size();
  const int W = size.width, H = size.height;
  const auto la = luminance(a);
  const auto lb = luminance(b);
  FlowField flow(size);

  // Candidate displacements sorted by magnitude so the first minimum found
  // is the smallest one.
  std::vector<std::array<int, 2>> candidates;
  for (int v = -params.radius; v <= params.radius; ++v) {
    for (int u = -params.radius; u <= params.radius; ++u) candidates.push_back({u, v});
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const auto& p, const auto& q) {
    return p[0] * p[0] + p[1] * p[1] < q[0] * q[0] + q[1] * q[1];
  });

  for (int by = 0; by < H; by += params.block) {
    for (int bx = 0; bx < W; bx += params.block) {
      const int bw = std::min(params.block, W - bx);
      const int bh = std::min(params.block, H - by);
      long best = std::numeric_limits<long>::max();
      std::array<int, 2> best_d{0, 0};
      for (const auto& d : candidates) {
        if (bx + d[0] < 0 || by + d[1] < 0 || bx + d[0] + bw > W || by + d[1] + bh > H) continue;
        long sad = 0;
        for (int y = 0; y < bh && sad < best; ++y) {
          const int* ra = &la[static_cast<std::size_t>((by + y) * W + bx)];
          const int* rb = &lb[static_cast<std::size_t>((by + y + d[1]) * W + bx + d[0])];
          for (int x = 0; x < bw; ++x) sad += std::abs(ra[x] - rb[x]);
        }
        if (sad < best) {
          best = sad;
          best_d = d;
        }
      }
      const Vec2f v{static_cast<float>(best_d[0]), static_cast<float>(best_d[1])};
      for (int y = by; y < by + bh; ++y) {
        for (int x = bx; x < bx + bw; ++x) flow.at(x, y) = v;
      }
    }
  }
  return flow;
}

FlowField estimate_flow(const RgbImage& a, const RgbImage& b, FlowMethod method, const FlowField* simulator_flow) {
  require_same_size(a.size(), b.size(), "estimate_flow");
  switch (method) {
    case FlowMethod::gt:
      if (simulator_flow == nullptr) throw std::invalid_argument("estimate_flow: gt method needs simulator flow");
      return *simulator_flow;
    case FlowMethod::block_match:
      return block_match_flow(a, b);
  }
  throw std::invalid_argument("estimate_flow: unsupported method");
}

Vec2f centroid_flow(const Point2& centroid, const Mask* instance_mask, const FlowField& flow) {
  const int cx = static_cast<int>(std::lround(centroid.x));
  const int cy = static_cast<int>(std::lround(centroid.y));
  const bool inside = flow.size().contains(cx, cy);
  if (instance_mask == nullptr) {
    if (!inside) return {};
    return flow.at(std::clamp(cx, 0, flow.width() - 1), std::clamp(cy, 0, flow.height() - 1));
  }
  if (inside && instance_mask->at(cx, cy)) return flow.at(cx, cy);
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < flow.size().area(); ++i) {
    if ((*instance_mask)[i]) {
      sx += flow[i].dx;
      sy += flow[i].dy;
      ++n;
    }
  }
  if (n == 0) return {};
  return {static_cast<float>(sx / n), static_cast<float>(sy / n)};
}

std::vector<int> track_step(std::span<const Point2> centroids_t, const FlowField& flow,
                            std::span<const Point2> centroids_t1, double max_dist,
                            std::span<const Mask* const> masks_t) {
  if (!masks_t.empty() && masks_t.size() != centroids_t.size()) {
    throw std::invalid_argument("track_step: masks must parallel centroids");
  }
  struct Pair {
    double dist;
    int i, j;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < centroids_t.size(); ++i) {
    const Vec2f f = centroid_flow(centroids_t[i], masks_t.empty() ? nullptr : masks_t[i], flow);
    const double px = centroids_t[i].x + f.dx;
    const double py = centroids_t[i].y + f.dy;
    for (std::size_t j = 0; j < centroids_t1.size(); ++j) {
      const double d = std::hypot(px - centroids_t1[j].x, py - centroids_t1[j].y);
      if (d <= max_dist) pairs.push_back({d, static_cast<int>(i), static_cast<int>(j)});
    }
  }
  std::sort(pairs.begin(), pairs.end(),
            [](const Pair& a, const Pair& b) { return std::tie(a.dist, a.i, a.j) < std::tie(b.dist, b.i, b.j); });
  std::vector<int> match(centroids_t.size(), -1);
  std::vector<std::uint8_t> taken(centroids_t1.size(), 0);
  for (const auto& p : pairs) {
    if (match[static_cast<std::size_t>(p.i)] >= 0 || taken[static_cast<std::size_t>(p.j)]) continue;
    match[static_cast<std::size_t>(p.i)] = p.j;
    taken[static_cast<std::size_t>(p.j)] = 1;
  }
  return match;
}

TubeSet build_tubes(std::span<const FrameInstances> frames, std::span<const FlowField> flows, double max_dist,
                    int frame_offset, int first_tube_id, int sequence) {
  if (!frames.empty() && flows.size() + 1 < frames.size()) {
    throw std::invalid_argument("build_tubes: need one flow per consecutive frame pair");
  }
  TubeSet set;
  std::vector<int> tube_of;  // tube index (into set) per instance of the current frame
  auto start_tube = [&](int frame, int instance) {
    Tube tube;
    tube.id = first_tube_id + static_cast<int>(set.tubes.size());
    tube.sequence = sequence;
    tube.entries.push_back({frame_offset + frame, instance});
    set.tubes.push_back(std::move(tube));
    return static_cast<int>(set.tubes.size()) - 1;
  };
  if (frames.empty()) return set;
  for (std::size_t i = 0; i < frames[0].centroids.size(); ++i) tube_of.push_back(start_tube(0, static_cast<int>(i)));

  for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
    const auto& cur = frames[t];
    const auto& next = frames[t + 1];
    std::span<const Mask* const> masks;
    if (cur.masks.size() == cur.centroids.size()) masks = cur.masks;
    const auto match = track_step(cur.centroids, flows[t], next.centroids, max_dist, masks);
    std::vector<int> next_tube(next.centroids.size(), -1);
    for (std::size_t i = 0; i < match.size(); ++i) {
      if (match[i] < 0) continue;
      const int tube = tube_of[i];
      set.tubes[static_cast<std::size_t>(tube)].entries.push_back({frame_offset + static_cast<int>(t) + 1, match[i]});
      next_tube[static_cast<std::size_t>(match[i])] = tube;
    }
    for (std::size_t j = 0; j < next_tube.size(); ++j) {
      if (next_tube[j] < 0) next_tube[j] = start_tube(static_cast<int>(t) + 1, static_cast<int>(j));
    }
    tube_of = std::move(next_tube);
  }
  return set;
}

}  // namespace saflab
