#pragma once

// Temporal instance tubes: centroids are projected with optical flow into
// the next frame and greedily matched to that frame's centroids.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saflab/image.hpp"

namespace saflab {

enum class FlowMethod { gt, block_match };

FlowMethod parse_flow_method(const std::string& name);
std::string to_string(FlowMethod method);

struct BlockMatchParams {
  int block = 16;
  int radius = 8;
};

/// Integer per-block flow from `a` to `b` by exhaustive SAD search on
/// luminance; ties go to the smallest displacement.
FlowField block_match_flow(const RgbImage& a, const RgbImage& b, const BlockMatchParams& params = {});

/// `gt` passes `simulator_flow` through and requires it.
FlowField estimate_flow(const RgbImage& a, const RgbImage& b, FlowMethod method,
                        const FlowField* simulator_flow = nullptr);

/// Flow vector used to project an instance centroid: the rounded centroid
/// pixel when it belongs to the instance, otherwise the mean flow over the
/// instance mask.
Vec2f centroid_flow(const Point2& centroid, const Mask* instance_mask, const FlowField& flow);

/// Greedy ascending-distance matching of projected t-centroids to
/// t+1-centroids within `max_dist`. Returns, for each t-centroid, the
/// matched t+1 index or -1.
std::vector<int> track_step(std::span<const Point2> centroids_t, const FlowField& flow,
                            std::span<const Point2> centroids_t1, double max_dist,
                            std::span<const Mask* const> masks_t = {});

struct TubeEntry {
  int frame = 0;  // global frame index
  int instance = 0;
  friend bool operator==(const TubeEntry&, const TubeEntry&) = default;
};

struct Tube {
  int id = 0;
  int sequence = 0;
  std::vector<TubeEntry> entries;

  [[nodiscard]] int first_frame() const { return entries.front().frame; }
  [[nodiscard]] int last_frame() const { return entries.back().frame; }
  friend bool operator==(const Tube&, const Tube&) = default;
};

struct TubeSet {
  std::vector<Tube> tubes;
  friend bool operator==(const TubeSet&, const TubeSet&) = default;
};

struct FrameInstances {
  std::vector<Point2> centroids;
  std::vector<const Mask*> masks;  // optional, parallel to centroids
};

/// Chains track_step over one sequence. `flows[t]` maps frame t to t + 1.
/// New tubes get dense ids starting at `first_tube_id`.
TubeSet build_tubes(std::span<const FrameInstances> frames, std::span<const FlowField> flows, double max_dist,
                    int frame_offset = 0, int first_tube_id = 0, int sequence = 0);

/// Fraction of tube entries whose identity equals the majority identity of
/// their tube. `identity(frame, instance)` returns the ground-truth id.
template <typename IdentityFn>
double tube_purity(const TubeSet& set, IdentityFn identity);

}  // namespace saflab

#include <map>

template <typename IdentityFn>
double saflab::tube_purity(const TubeSet& set, IdentityFn identity) {
  std::size_t total = 0, pure = 0;
  for (const auto& tube : set.tubes) {
    std::map<long long, std::size_t> votes;
    for (const auto& e : tube.entries) ++votes[static_cast<long long>(identity(e.frame, e.instance))];
    std::size_t best = 0;
    for (const auto& [id, n] : votes) best = std::max(best, n);
    pure += best;
    total += tube.entries.size();
  }
  return total ? static_cast<double>(pure) / static_cast<double>(total) : 1.0;
}
