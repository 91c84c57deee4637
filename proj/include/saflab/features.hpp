#pragma once

// Per-instance descriptors, the trainable projection head and the
// supervised contrastive objective with tubes as classes.

#include <cstdint>
#include <span>
#include <vector>

#include "saflab/image.hpp"
#include "saflab/matrix.hpp"
#include "saflab/rng.hpp"
#include "saflab/tubes.hpp"

namespace saflab {

inline constexpr std::size_t kDescriptorDim = 48;
inline constexpr std::size_t kHistogramDims = 24;  // 3 channels x 8 bins
inline constexpr std::size_t kMomentDims = 7;

using FeatureVector = std::vector<float>;

/// Masked color histogram, log-scaled Hu moments and shape/color
/// statistics. Uses only pixels under `instance_mask`, relative coordinates
/// only.
FeatureVector extract_descriptor(const RgbImage& image, const Mask& instance_mask);

/// Per-dimension z-scoring fitted on training descriptors.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Matrix& x);
  [[nodiscard]] Matrix apply(const Matrix& x) const;
};

/// d -> hidden -> e with max(0, .) between the affine layers; outputs are
/// L2-normalized.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, std::uint64_t seed);

  [[nodiscard]] std::size_t in_dim() const { return in_; }
  [[nodiscard]] std::size_t hidden_dim() const { return hidden_; }
  [[nodiscard]] std::size_t out_dim() const { return out_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  /// Flat parameter vector: W1 (hidden x in), b1, W2 (out x hidden), b2.
  std::span<float> params() { return params_; }
  [[nodiscard]] std::span<const float> params() const { return params_; }

  struct Cache {
    Matrix input;
    std::vector<double> hidden;  // post-activation, n x hidden
    std::vector<double> raw;     // pre-normalization, n x out
    std::vector<double> norms;
    Matrix embeddings;           // unit rows
    std::vector<double> unit;    // embeddings in double
  };

  [[nodiscard]] Cache forward(const Matrix& x) const;
  [[nodiscard]] Matrix embed(const Matrix& x) const { return forward(x).embeddings; }
  /// Gradient w.r.t. params given dL/d(embedding) rows (n x out).
  [[nodiscard]] std::vector<double> backward(const Cache& cache, std::span<const double> grad_embeddings) const;

  friend bool operator==(const ProjectionHead&, const ProjectionHead&) = default;

 private:
  std::size_t in_ = 0, hidden_ = 0, out_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<float> params_;
};

struct SupConResult {
  double loss = 0.0;
  std::vector<double> grad;  // n x e, w.r.t. the embeddings
  std::size_t anchors = 0;   // anchors that had at least one positive
};

/// Supervised contrastive loss over unit embeddings (n x e, row-major
/// doubles). Throws when no anchor has a positive.
SupConResult supcon_loss(std::span<const double> embeddings, std::size_t dim, std::span<const int> tube_ids,
                         double tau);
double supcon_loss(const Matrix& embeddings, std::span<const int> tube_ids, double tau);

struct BatchItem {
  int tube = 0;  // tube id
  TubeEntry entry;
};

struct SamplerConfig {
  std::size_t batch_size = 64;
  int t_far = 50;
  double cooccur_weight = 2.0;
};

/// k = batch/4 tubes with 4 entries each. Tubes are drawn one at a time
/// among those that co-occur with, live in another sequence than, or are
/// at least t_far frames away from every tube already drawn; co-occurring
/// candidates carry `cooccur_weight`.
std::vector<BatchItem> sample_batch(const TubeSet& tubes, const SamplerConfig& cfg, Rng& rng);

struct FeatureTrainConfig {
  int epochs = 80;
  double lr = 5e-5;
  std::size_t batch = 64;
  double tau = 0.1;
  std::uint64_t seed = 0;
  int t_far = 50;
  std::size_t hidden = 64;
  std::size_t embed_dim = 16;
};

struct FeatureTrainResult {
  ProjectionHead head;
  std::vector<double> loss_history;  // [0] = initial head, [e] = after epoch e
};

/// `descriptors` are standardized rows; `row_of(entry)` maps a tube entry
/// to its descriptor row.
template <typename RowOf>
FeatureTrainResult train_feature_head(const Matrix& descriptors, const TubeSet& tubes,
                                      const FeatureTrainConfig& cfg, RowOf row_of);

namespace detail {
FeatureTrainResult train_feature_head_rows(const Matrix& descriptors, const TubeSet& tubes,
                                           const std::vector<std::vector<std::size_t>>& rows_per_tube,
                                           const FeatureTrainConfig& cfg);
}

template <typename RowOf>
FeatureTrainResult train_feature_head(const Matrix& descriptors, const TubeSet& tubes,
                                      const FeatureTrainConfig& cfg, RowOf row_of) {
  std::vector<std::vector<std::size_t>> rows(tubes.tubes.size());
  for (std::size_t t = 0; t < tubes.tubes.size(); ++t) {
    for (const auto& e : tubes.tubes[t].entries) rows[t].push_back(row_of(e));
  }
  return detail::train_feature_head_rows(descriptors, tubes, rows, cfg);
}

}  // namespace saflab
