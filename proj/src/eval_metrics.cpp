#include "saflab/eval_metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace saflab {

double iou(const Mask& a, const Mask& b) {
  require_same_size(a.size(), b.size(), "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size().area(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += (x && y);
    uni += (x || y);
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

double binary_iou(const Mask& pred, const Mask& gt) { return iou(pred, gt); }

double ap_class_agnostic(std::span<const FrameDetections> predictions, std::span<const InstanceMaskSet> ground_truth,
                         double thr) {
  if (!(thr > 0.0 && thr <= 1.0)) throw std::invalid_argument("ap_class_agnostic: thr must lie in (0, 1]");
  if (predictions.size() != ground_truth.size()) throw std::invalid_argument("ap_class_agnostic: frame count mismatch");
  std::size_t n_gt = 0;
  for (const auto& g : ground_truth) n_gt += g.count();
  if (n_gt == 0) throw std::invalid_argument("ap_class_agnostic: no ground-truth instances");

  struct Ref {
    double score;
    std::size_t frame, index;
  };
  std::vector<Ref> order;
  for (std::size_t f = 0; f < predictions.size(); ++f) {
    for (std::size_t i = 0; i < predictions[f].size(); ++i) order.push_back({predictions[f][i].score, f, i});
  }
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<std::vector<std::uint8_t>> matched(ground_truth.size());
  for (std::size_t f = 0; f < ground_truth.size(); ++f) matched[f].assign(ground_truth[f].count(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0, seen = 0;
  for (const auto& r : order) {
    const auto& pred = predictions[r.frame][r.index].mask;
    const auto& gts = ground_truth[r.frame];
    double best = -1.0;
    std::size_t who = 0;
    for (std::size_t g = 0; g < gts.count(); ++g) {
      if (matched[r.frame][g]) continue;
      const double v = iou(pred, gts.masks[g]);
      if (v > best) {
        best = v;
        who = g;
      }
    }
    ++seen;
    if (best >= thr) {
      matched[r.frame][who] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }

  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

ClassMap class_map(const InstanceMaskSet& instances) {
  ClassMap out(instances.size);
  for (std::size_t k = 0; k < instances.count() && k < instances.class_ids.size(); ++k) {
    if (!instances.class_ids[k]) continue;
    const auto v = static_cast<std::uint8_t>(*instances.class_ids[k] + 1);
    const auto& m = instances.masks[k];
    for (std::size_t i = 0; i < m.size().area(); ++i) {
      if (m[i]) out[i] = v;
    }
  }
  return out;
}

ClassMap class_map(Size size, std::span<const Detection> detections) {
  ClassMap out(size);
  for (const auto& d : detections) {
    if (!d.class_id) continue;
    require_same_size(size, d.mask.size(), "class_map");
    const auto v = static_cast<std::uint8_t>(*d.class_id + 1);
    for (std::size_t i = 0; i < size.area(); ++i) {
      if (d.mask[i]) out[i] = v;
    }
  }
  return out;
}

ChallengeIou challenge_iou(std::span<const ClassMap> predicted, std::span<const ClassMap> ground_truth) {
  if (predicted.size() != ground_truth.size()) throw std::invalid_argument("challenge_iou: frame count mismatch");
  ChallengeIou out;
  std::map<int, std::pair<double, std::size_t>> per_class;
  double total = 0.0;
  for (std::size_t f = 0; f < ground_truth.size(); ++f) {
    const auto& gt = ground_truth[f];
    const auto& pr = predicted[f];
    require_same_size(gt.size(), pr.size(), "challenge_iou");
    std::set<int> present;
    for (std::size_t i = 0; i < gt.size().area(); ++i) {
      if (gt[i]) present.insert(gt[i]);
    }
    if (present.empty()) continue;
    double frame_sum = 0.0;
    for (int c : present) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < gt.size().area(); ++i) {
        const bool a = gt[i] == c, b = pr[i] == c;
        inter += (a && b);
        uni += (a || b);
      }
      const double v = static_cast<double>(inter) / static_cast<double>(uni);
      frame_sum += v;
      auto& acc = per_class[c - 1];
      acc.first += v;
      ++acc.second;
    }
    total += frame_sum / static_cast<double>(present.size());
    ++out.frames;
  }
  if (out.frames == 0) throw std::invalid_argument("challenge_iou: no evaluable frames");
  out.mean = total / static_cast<double>(out.frames);
  for (const auto& [c, acc] : per_class) out.per_class[c] = acc.first / static_cast<double>(acc.second);
  return out;
}

}  // namespace saflab
