#pragma once

// Synthetic endoscopic-like sequences with full ground truth: per-instance
// masks with classes, exact tool motion, and frame/sequence presence labels.

#include <array>
#include <cstdint>
#include <set>
#include <vector>

#include "saflab/image.hpp"

namespace saflab {

enum class EntrySide { left, right };

/// Appearance and entry side of one tool. Every instance of a class shares
/// the appearance fields (width, color, texture).
struct ToolSpec {
  int class_id = 0;
  int width_px = 12;
  int tip_length_px = 14;
  std::array<std::uint8_t, 3> color_mean{};
  std::uint64_t texture_seed = 0;
  EntrySide entry_side = EntrySide::left;
};

/// Class catalogue entry for `class_id`. Deterministic, independent of any
/// sequence seed so that classes look the same across sequences.
ToolSpec class_tool_spec(int class_id, Size image_size);

struct SimConfig {
  Size size{256, 256};
  int n_classes = 4;
  int n_frames = 100;
  int max_instances_per_frame = 4;
  double overlap_probability = 0.25;
  double motion_px_per_frame = 4.0;
  double absent_class_fraction = 0.4;

  /// Throws std::invalid_argument when the config is inconsistent or the
  /// layout is unsatisfiable.
  void validate() const;
  /// Smallest visible area a generated tool can have.
  [[nodiscard]] double min_tool_area() const;
};

struct SyntheticSequence {
  SimConfig config;
  std::uint64_t seed = 0;
  std::vector<ToolSpec> tools;                 // one per physical tool
  std::vector<RgbImage> frames;
  std::vector<InstanceMaskSet> instance_masks;  // visible instances, class ids set
  std::vector<std::vector<int>> tool_ids;       // parallel to instance_masks[t].masks
  std::vector<FlowField> flows;                 // n_frames - 1 entries
  std::vector<std::set<int>> presence_fw;
  std::set<int> presence_sw;
  /// Integer translation of each tool between frame t and t + 1.
  std::vector<std::vector<std::array<int, 2>>> motions;

  [[nodiscard]] int n_frames() const { return static_cast<int>(frames.size()); }
};

SyntheticSequence gen_sequence(const SimConfig& config, std::uint64_t seed);

/// Displacement from every instance pixel to the arithmetic-mean centroid of
/// its instance; zero on background.
DisplacementField gt_displacement(const InstanceMaskSet& masks);

FlowField gt_flow(const SyntheticSequence& seq, int t);

}  // namespace saflab
