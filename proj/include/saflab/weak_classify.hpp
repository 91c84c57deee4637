#pragma once

// Prototype selection by clustering, label propagation, and the
// teacher-student classifiers trained from prototype and weak labels.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "saflab/image.hpp"
#include "saflab/matrix.hpp"

namespace saflab {

struct ClusterModel {
  Matrix centroids;             // n_km x e
  std::vector<int> assignment;  // per row of the clustered matrix
  double inertia = 0.0;
  int iterations = 0;
};

/// D^2-seeded k-means followed by Lloyd iterations until the assignment
/// stops changing or `max_iter` is reached.
ClusterModel kmeans_pp(const Matrix& points, int n_km, std::uint64_t seed, int max_iter = 300);

/// Sum of squared distances of each point to its nearest centroid.
double kmeans_inertia(const Matrix& points, const Matrix& centroids);

struct Prototype {
  int cluster_id = 0;
  std::size_t instance = 0;  // row in the clustered matrix
  std::optional<int> label;
};
using PrototypeSet = std::vector<Prototype>;

/// Per cluster, the member nearest to the centroid (ties: lowest row).
/// Empty clusters get no prototype.
PrototypeSet select_prototypes(const ClusterModel& model, const Matrix& points);

/// Label each prototype with the class of the ground-truth instance of the
/// same frame that has maximum IoU with the prototype's predicted mask.
/// `predicted[k]` and `ground_truth[k]` belong to prototype k. Zero IoU
/// with every instance leaves the label unassigned.
PrototypeSet auto_label_prototypes(const PrototypeSet& prototypes, std::span<const Mask* const> predicted,
                                   std::span<const InstanceMaskSet* const> ground_truth);

/// Every clustered row inherits its cluster's prototype label.
std::vector<std::optional<int>> propagate_labels(const ClusterModel& model, const PrototypeSet& prototypes);

/// affine(e -> hidden), batch normalization with learned scale/shift,
/// max(0, .), affine(hidden -> n_classes), softmax.
class ClassifierMLP {
 public:
  ClassifierMLP() = default;
  ClassifierMLP(std::size_t in_dim, std::size_t hidden, std::size_t n_classes, std::uint64_t seed);

  [[nodiscard]] std::size_t in_dim() const { return in_; }
  [[nodiscard]] std::size_t hidden_dim() const { return hidden_; }
  [[nodiscard]] std::size_t n_classes() const { return classes_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  /// W1 (hidden x in), b1, gamma, beta, W2 (classes x hidden), b2.
  std::span<float> params() { return params_; }
  [[nodiscard]] std::span<const float> params() const { return params_; }
  std::vector<float>& running_mean() { return running_mean_; }
  std::vector<float>& running_var() { return running_var_; }
  [[nodiscard]] const std::vector<float>& running_mean() const { return running_mean_; }
  [[nodiscard]] const std::vector<float>& running_var() const { return running_var_; }

  struct Cache {
    Matrix input;
    std::vector<double> normalized;  // n x hidden, before scale/shift
    std::vector<double> inv_std;     // per hidden unit
    std::vector<double> activated;   // n x hidden, after max(0, .)
    std::vector<double> probs;       // n x classes
  };

  /// Training-mode forward: batch statistics, running estimates updated.
  Cache forward_train(const Matrix& x);
  /// Inference-mode probabilities from the frozen running estimates.
  [[nodiscard]] Matrix predict_proba(const Matrix& x) const;
  /// Gradient of the mean cross-entropy w.r.t. params.
  [[nodiscard]] std::vector<double> backward(const Cache& cache, std::span<const int> targets) const;

  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

  friend bool operator==(const ClassifierMLP&, const ClassifierMLP&) = default;

 private:
  std::size_t in_ = 0, hidden_ = 0, classes_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<float> params_;
  std::vector<float> running_mean_, running_var_;
};

/// Mean cross-entropy of rows of `probs` (clamped at 1e-7) against targets.
double cross_entropy(const Matrix& probs, std::span<const int> targets);

/// Argmax of the inference-mode softmax; ties go to the lowest class.
std::pair<int, std::vector<float>> classify(const ClassifierMLP& model, std::span<const float> embedding);
int argmax_lowest(std::span<const float> probs);

struct ClassifierTrainConfig {
  int epochs = 40;
  double lr = 1e-4;
  std::size_t batch = 128;
  std::size_t hidden = 512;
  std::uint64_t seed = 0;
};

struct ClassifierTrainResult {
  ClassifierMLP model;
  std::vector<double> loss_history;  // mean training loss per epoch
};

/// Mini-batch cross-entropy training with Adam. Rows without a target are
/// skipped.
ClassifierTrainResult train_classifier(const Matrix& x, std::span<const std::optional<int>> targets,
                                       std::size_t n_classes, const ClassifierTrainConfig& cfg);

/// Teacher on propagated prototype labels; needs at least two classes.
ClassifierTrainResult train_teacher(const Matrix& embeddings, std::span<const std::optional<int>> labels,
                                    std::size_t n_classes, const ClassifierTrainConfig& cfg);

enum class WeakMode { frame_wise, sequence_wise };
WeakMode parse_weak_mode(const std::string& name);
std::string to_string(WeakMode mode);

using LabelTuple = std::vector<int>;

inline constexpr std::size_t kEnumerationCap = 1'000'000;

/// Number of tuples enumerate_label_sets yields, saturating at SIZE_MAX.
std::size_t label_set_count(std::size_t n_inst, std::size_t n_weak);

/// Candidate label tuples for `n_inst` instances given the weak label set
/// (sorted, distinct). Fewer instances than labels: ordered injective
/// tuples; as many: permutations; more: every function instance -> label.
/// Lexicographic order.
std::vector<LabelTuple> enumerate_label_sets(std::size_t n_inst, std::span<const int> weak);

/// Calls `visit` on each candidate tuple in enumerate_label_sets order
/// without materializing the list.
void for_each_label_set(std::size_t n_inst, std::span<const int> weak,
                        const std::function<void(const LabelTuple&)>& visit);

/// Mean of -log p_i[tuple_i] with probabilities clamped at 1e-7.
double assignment_cost(const Matrix& probs, std::span<const int> tuple);

/// Candidate tuple of minimum assignment cost; ties keep the earliest.
LabelTuple match_weak_labels(const Matrix& teacher_probs, std::span<const int> weak);
LabelTuple match_weak_labels(const ClassifierMLP& teacher, const Matrix& frame_embeddings, std::span<const int> weak);

struct StudentFrame {
  std::vector<std::size_t> rows;  // instance rows in the embedding matrix
  std::vector<int> weak;          // sorted distinct class ids
};

struct StudentResult {
  ClassifierTrainResult train;
  std::vector<std::optional<int>> matched;  // per embedding row
};

/// Matches every frame's instances to its weak set with the frozen teacher
/// and trains a fresh classifier on the matched labels. Frames without
/// instances or weak labels are skipped.
StudentResult train_student(const Matrix& embeddings, std::span<const StudentFrame> frames,
                            const ClassifierMLP& teacher, std::size_t n_classes, const ClassifierTrainConfig& cfg);

}  // namespace saflab
