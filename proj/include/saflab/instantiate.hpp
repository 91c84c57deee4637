#pragma once

// Pseudo-supervision from binary masks (connected components, overlap
// masking, instance pasting), the instantiation losses, and inference of
// instance masks from a displacement field by grid convergence.

#include <cstdint>
#include <span>
#include <vector>

#include "saflab/image.hpp"

namespace saflab {

/// Maximal 8-connected components, ordered by their first pixel in
/// row-major scan (top-most row, then left-most pixel of that row).
InstanceMaskSet cc_label(const Mask& binary_mask);

/// Union of components whose column support includes both column 0 and
/// column W - 1.
Mask detect_overlap(const InstanceMaskSet& cc_masks, int width);

/// Displacement field of CC masks (same contract as gt_displacement).
DisplacementField fabricate_field(const InstanceMaskSet& cc_masks);

struct PasteDonor {
  const RgbImage& image;
  const Mask& instance_mask;
};

struct PasteResult {
  RgbImage image;
  Mask mask;
  DisplacementField field;
  Mask pasted;          // pixels written by the donor (empty on pass-through)
  bool applied = false;
  int attempts = 0;
};

/// Pastes one donor instance at a seeded random translation. Pasted pixels
/// point to the centroid of the (clipped) pasted instance; all other pixels
/// keep their original vectors. Placements that would cover an existing
/// component entirely are redrawn up to 10 times, after which the input is
/// returned unchanged.
PasteResult augm_paste(const RgbImage& image, const Mask& binary_mask, const DisplacementField& field,
                       const PasteDonor& donor, std::uint64_t placement_seed);

/// Mean absolute difference over all pixels and both channels.
double loss_fs(const DisplacementField& d_gt, const DisplacementField& d_pred);

/// L1 term over pixels outside the overlap mask plus mean pixel-wise binary
/// cross-entropy of the predicted tool probabilities.
double loss_instantiation(const DisplacementField& d_cc, const DisplacementField& d_pred, const Mask& overlap,
                          const Mask& binary_target, std::span<const float> predicted_probs);

DisplacementField mask_field(const DisplacementField& field, const Mask& binary_mask);

struct InferenceParams {
  int grid_squares_per_side = 32;
  double eps_c = 5.0;

  void validate(Size size) const;
};

struct CentroidRegion {
  std::vector<int> squares;  // row-major square indices
  Point2 position;           // count-weighted mean of square centers
  std::size_t votes = 0;     // vectors landing in the region
};

struct Extraction {
  InstanceMaskSet instances;
  std::vector<CentroidRegion> regions;  // parallel to instances.masks
  std::vector<double> scores;           // region votes / tool pixels in frame
  std::vector<double> convergence;      // per grid square, row-major
  bool fallback = false;                // no square passed eps_c
};

Extraction extract_instances_detailed(const DisplacementField& field, const Mask& binary_mask,
                                      const InferenceParams& params);

inline InstanceMaskSet extract_instances(const DisplacementField& field, const Mask& binary_mask,
                                         const InferenceParams& params) {
  return extract_instances_detailed(field, binary_mask, params).instances;
}

struct NoiseConfig {
  double sigma_px = 0.0;
  int boundary_iters = 0;
  std::uint64_t seed = 0;
};

struct NoisyFieldMask {
  DisplacementField field;
  Mask mask;
};

/// Emulates an imperfect field source: random boundary dilation/erosion of
/// the mask and iid Gaussian noise on the vectors of tool pixels.
NoisyFieldMask noisy_oracle(const DisplacementField& gt_field, const Mask& gt_mask, const NoiseConfig& cfg);

}  // namespace saflab
