#pragma once

// Class-agnostic average precision, the per-frame class IoU used for
// semantic evaluation, and plain mask IoU.

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "saflab/image.hpp"

namespace saflab {

/// |a & b| / |a | b|; 1 when both are empty.
double iou(const Mask& a, const Mask& b);

/// IoU of tool-vs-background (any nonzero pixel counts as tool).
double binary_iou(const Mask& pred, const Mask& gt);

struct Detection {
  Mask mask;
  std::optional<int> class_id;
  double score = 0.0;
};
using FrameDetections = std::vector<Detection>;

/// Predictions ranked by descending score over the whole stream (ties keep
/// stream order); each is greedily matched to the unmatched ground-truth
/// instance of its frame with the highest IoU >= thr. Area under the
/// precision-recall curve with the all-points precision envelope. Throws
/// when there is no ground-truth instance at all.
double ap_class_agnostic(std::span<const FrameDetections> predictions, std::span<const InstanceMaskSet> ground_truth,
                         double thr);

/// Per-pixel class map: 0 = background, c + 1 = class c.
using ClassMap = Mask;

/// Class map from instances carrying class ids; instances without a class
/// are left as background.
ClassMap class_map(const InstanceMaskSet& instances);
ClassMap class_map(Size size, std::span<const Detection> detections);

struct ChallengeIou {
  double mean = 0.0;
  std::map<int, double> per_class;  // class id -> mean IoU over frames where it is present
  std::size_t frames = 0;           // evaluable frames
};

/// For each frame with at least one ground-truth tool pixel, the IoU of
/// every class present in the ground truth, averaged over those classes;
/// then averaged over frames. Throws "no evaluable frames" otherwise.
ChallengeIou challenge_iou(std::span<const ClassMap> predicted, std::span<const ClassMap> ground_truth);

}  // namespace saflab
