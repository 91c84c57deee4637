#include "saflab/weak_classify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "saflab/rng.hpp"

namespace saflab {
namespace {

double sq_dist(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - b[k];
    s += d * d;
  }
  return s;
}

int nearest_centroid(std::span<const float> p, const Matrix& centroids, double* dist = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double d = sq_dist(p, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = best_d;
  return best;
}

double mask_iou(const Mask& a, const Mask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size().area(); ++i) {
    inter += (a[i] && b[i]);
    uni += (a[i] || b[i]);
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

}  // namespace

double kmeans_inertia(const Matrix& points, const Matrix& centroids) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.rows; ++i) {
    double d = 0.0;
    nearest_centroid(points.row(i), centroids, &d);
    s += d;
  }
  return s;
}

ClusterModel kmeans_pp(const Matrix& points, int n_km, std::uint64_t seed, int max_iter) {
  if (n_km <= 0) throw std::invalid_argument("kmeans_pp: n_km must be positive");
  const std::size_t n = points.rows;
  const auto k = static_cast<std::size_t>(n_km);
  if (n < k) throw std::invalid_argument("kmeans_pp: fewer points than clusters");
  Rng rng = make_rng(seed, 0xC1);

  ClusterModel model;
  model.centroids = Matrix(k, points.cols);
  auto set_centroid = [&](std::size_t c, std::size_t i) {
    const auto src = points.row(i);
    std::copy(src.begin(), src.end(), model.centroids.row(c).begin());
  };

  // D^2 seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n) - 1));
  set_centroid(0, first);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points.row(i), model.centroids.row(c - 1)));
      total += d2[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = uniform01(rng) * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (u < d2[i]) {
          pick = i;
          break;
        }
        u -= d2[i];
      }
      while (d2[pick] == 0.0 && pick > 0) --pick;  // float slack at the tail
    } else {
      pick = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n) - 1));
    }
    set_centroid(c, pick);
  }

  // Lloyd iterations.
  model.assignment.assign(n, -1);
  std::vector<double> dist(n, 0.0);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = nearest_centroid(points.row(i), model.centroids, &dist[i]);
      if (a != model.assignment[i]) {
        model.assignment[i] = a;
        changed = true;
      }
    }
    model.iterations = iter + 1;
    if (!changed && iter > 0) break;

    std::vector<std::size_t> counts(k, 0);
    for (auto a : model.assignment) ++counts[static_cast<std::size_t>(a)];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      // Re-seed an empty cluster with the point farthest from its centroid.
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(model.assignment[i])] < 2) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      --counts[static_cast<std::size_t>(model.assignment[far])];
      model.assignment[far] = static_cast<int>(c);
      counts[c] = 1;
      dist[far] = 0.0;
    }
    std::vector<double> sums(k * points.cols, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = points.row(i);
      double* s = &sums[static_cast<std::size_t>(model.assignment[i]) * points.cols];
      for (std::size_t j = 0; j < points.cols; ++j) s[j] += p[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < points.cols; ++j) {
        model.centroids(c, j) = static_cast<float>(sums[c * points.cols + j] / static_cast<double>(counts[c]));
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    model.assignment[i] = nearest_centroid(points.row(i), model.centroids, &dist[i]);
  }
  model.inertia = 0.0;
  for (double d : dist) model.inertia += d;
  return model;
}

PrototypeSet select_prototypes(const ClusterModel& model, const Matrix& points) {
  if (model.assignment.size() != points.rows) throw std::invalid_argument("select_prototypes: model/points mismatch");
  const std::size_t k = model.centroids.rows;
  std::vector<double> best(k, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> who(k, 0);
  for (std::size_t i = 0; i < points.rows; ++i) {
    const auto c = static_cast<std::size_t>(model.assignment[i]);
    const double d = sq_dist(points.row(i), model.centroids.row(c));
    if (d < best[c]) {
      best[c] = d;
      who[c] = i;
    }
  }
  PrototypeSet out;
  for (std::size_t c = 0; c < k; ++c) {
    if (std::isinf(best[c])) continue;
    out.push_back({static_cast<int>(c), who[c], std::nullopt});
  }
  return out;
}

PrototypeSet auto_label_prototypes(const PrototypeSet& prototypes, std::span<const Mask* const> predicted,
                                   std::span<const InstanceMaskSet* const> ground_truth) {
  if (predicted.size() != prototypes.size() || ground_truth.size() != prototypes.size()) {
    throw std::invalid_argument("auto_label_prototypes: one mask and one ground-truth set per prototype");
  }
  PrototypeSet out = prototypes;
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto& gt = *ground_truth[k];
    double best = 0.0;
    std::optional<int> label;
    for (std::size_t g = 0; g < gt.masks.size(); ++g) {
      const double v = mask_iou(*predicted[k], gt.masks[g]);
      if (v > best && g < gt.class_ids.size() && gt.class_ids[g]) {
        best = v;
        label = gt.class_ids[g];
      }
    }
    out[k].label = label;
  }
  return out;
}

std::vector<std::optional<int>> propagate_labels(const ClusterModel& model, const PrototypeSet& prototypes) {
  std::vector<std::optional<int>> by_cluster(model.centroids.rows);
  for (const auto& p : prototypes) {
    if (p.cluster_id < 0 || static_cast<std::size_t>(p.cluster_id) >= by_cluster.size()) {
      throw std::invalid_argument("propagate_labels: unknown cluster id");
    }
    by_cluster[static_cast<std::size_t>(p.cluster_id)] = p.label;
  }
  std::vector<std::optional<int>> out(model.assignment.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = by_cluster[static_cast<std::size_t>(model.assignment[i])];
  return out;
}

ClassifierMLP::ClassifierMLP(std::size_t in_dim, std::size_t hidden, std::size_t n_classes, std::uint64_t seed)
    : in_(in_dim), hidden_(hidden), classes_(n_classes), seed_(seed) {
  params_.resize(hidden * in_dim + 3 * hidden + n_classes * hidden + n_classes);
  Rng rng = make_rng(seed, 0xC1A5);
  const double a1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  std::size_t p = 0;
  for (std::size_t i = 0; i < hidden * in_dim + hidden; ++i) params_[p++] = static_cast<float>(uniform(rng, -a1, a1));
  for (std::size_t i = 0; i < hidden; ++i) params_[p++] = 1.0f;
  for (std::size_t i = 0; i < hidden; ++i) params_[p++] = 0.0f;
  for (std::size_t i = 0; i < n_classes * hidden + n_classes; ++i) params_[p++] = static_cast<float>(uniform(rng, -a2, a2));
  running_mean_.assign(hidden, 0.0f);
  running_var_.assign(hidden, 1.0f);
}

namespace {

struct Views {
  const float* w1;
  const float* b1;
  const float* gamma;
  const float* beta;
  const float* w2;
  const float* b2;
};

Views views(std::span<const float> p, std::size_t in, std::size_t hidden, std::size_t classes) {
  Views v{};
  v.w1 = p.data();
  v.b1 = v.w1 + hidden * in;
  v.gamma = v.b1 + hidden;
  v.beta = v.gamma + hidden;
  v.w2 = v.beta + hidden;
  v.b2 = v.w2 + classes * hidden;
  return v;
}

void affine1(const Views& v, std::span<const float> x, std::size_t in, std::size_t hidden, double* out) {
  for (std::size_t h = 0; h < hidden; ++h) {
    double acc = v.b1[h];
    const float* w = v.w1 + h * in;
    for (std::size_t j = 0; j < in; ++j) acc += static_cast<double>(w[j]) * x[j];
    out[h] = acc;
  }
}

void head(const Views& v, const double* act, std::size_t hidden, std::size_t classes, double* probs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < classes; ++c) {
    double acc = v.b2[c];
    const float* w = v.w2 + c * hidden;
    for (std::size_t h = 0; h < hidden; ++h) acc += static_cast<double>(w[h]) * act[h];
    probs[c] = acc;
    mx = std::max(mx, acc);
  }
  double z = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    probs[c] = std::exp(probs[c] - mx);
    z += probs[c];
  }
  for (std::size_t c = 0; c < classes; ++c) probs[c] /= z;
}

}  // namespace

ClassifierMLP::Cache ClassifierMLP::forward_train(const Matrix& x) {
  if (x.cols != in_) throw std::invalid_argument("ClassifierMLP: input dimension mismatch");
  if (x.rows < 2) throw std::invalid_argument("ClassifierMLP: training batch needs at least 2 rows");
  const auto v = views(params_, in_, hidden_, classes_);
  const std::size_t n = x.rows;
  Cache c;
  c.input = x;
  std::vector<double> pre(n * hidden_);
  for (std::size_t s = 0; s < n; ++s) affine1(v, x.row(s), in_, hidden_, &pre[s * hidden_]);
  c.normalized.assign(n * hidden_, 0.0);
  c.inv_std.assign(hidden_, 0.0);
  c.activated.assign(n * hidden_, 0.0);
  for (std::size_t h = 0; h < hidden_; ++h) {
    double mean = 0.0;
    for (std::size_t s = 0; s < n; ++s) mean += pre[s * hidden_ + h];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double d = pre[s * hidden_ + h] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kBnEps);
    c.inv_std[h] = inv;
    for (std::size_t s = 0; s < n; ++s) {
      const double xn = (pre[s * hidden_ + h] - mean) * inv;
      c.normalized[s * hidden_ + h] = xn;
      c.activated[s * hidden_ + h] = std::max(0.0, v.gamma[h] * xn + v.beta[h]);
    }
    running_mean_[h] = static_cast<float>((1.0 - kBnMomentum) * running_mean_[h] + kBnMomentum * mean);
    const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
    running_var_[h] = static_cast<float>((1.0 - kBnMomentum) * running_var_[h] + kBnMomentum * unbiased);
  }
  c.probs.assign(n * classes_, 0.0);
  for (std::size_t s = 0; s < n; ++s) head(v, &c.activated[s * hidden_], hidden_, classes_, &c.probs[s * classes_]);
  return c;
}

Matrix ClassifierMLP::predict_proba(const Matrix& x) const {
  if (x.cols != in_) throw std::invalid_argument("ClassifierMLP: input dimension mismatch");
  const auto v = views(params_, in_, hidden_, classes_);
  Matrix out(x.rows, classes_);
  std::vector<double> act(hidden_), probs(classes_);
  for (std::size_t s = 0; s < x.rows; ++s) {
    affine1(v, x.row(s), in_, hidden_, act.data());
    for (std::size_t h = 0; h < hidden_; ++h) {
      const double xn = (act[h] - running_mean_[h]) / std::sqrt(static_cast<double>(running_var_[h]) + kBnEps);
      act[h] = std::max(0.0, v.gamma[h] * xn + v.beta[h]);
    }
    head(v, act.data(), hidden_, classes_, probs.data());
    for (std::size_t c = 0; c < classes_; ++c) out(s, c) = static_cast<float>(probs[c]);
  }
  return out;
}

std::vector<double> ClassifierMLP::backward(const Cache& cache, std::span<const int> targets) const {
  const std::size_t n = cache.input.rows;
  if (targets.size() != n) throw std::invalid_argument("ClassifierMLP::backward: one target per row");
  const auto v = views(params_, in_, hidden_, classes_);
  std::vector<double> grad(params_.size(), 0.0);
  double* gw1 = grad.data();
  double* gb1 = gw1 + hidden_ * in_;
  double* ggamma = gb1 + hidden_;
  double* gbeta = ggamma + hidden_;
  double* gw2 = gbeta + hidden_;
  double* gb2 = gw2 + classes_ * hidden_;

  std::vector<double> dxn(n * hidden_, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double* act = &cache.activated[s * hidden_];
    for (std::size_t c = 0; c < classes_; ++c) {
      const double dl = (cache.probs[s * classes_ + c] - (static_cast<int>(c) == targets[s] ? 1.0 : 0.0)) * inv_n;
      gb2[c] += dl;
      const float* w = v.w2 + c * hidden_;
      for (std::size_t h = 0; h < hidden_; ++h) {
        gw2[c * hidden_ + h] += dl * act[h];
        if (act[h] > 0.0) dxn[s * hidden_ + h] += dl * w[h];  // d(gamma*xn+beta), pre-gamma below
      }
    }
  }
  for (std::size_t h = 0; h < hidden_; ++h) {
    double sum_dy = 0.0, sum_dy_xn = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double dy = dxn[s * hidden_ + h];
      sum_dy += dy;
      sum_dy_xn += dy * cache.normalized[s * hidden_ + h];
    }
    ggamma[h] = sum_dy_xn;
    gbeta[h] = sum_dy;
    // d(pre-activation) for batch normalization, with d(xn) = gamma * dy.
    const double g = v.gamma[h];
    for (std::size_t s = 0; s < n; ++s) {
      const double xn = cache.normalized[s * hidden_ + h];
      const double da = g * cache.inv_std[h] * inv_n *
                        (static_cast<double>(n) * dxn[s * hidden_ + h] - sum_dy - xn * sum_dy_xn);
      gb1[h] += da;
      const auto xi = cache.input.row(s);
      for (std::size_t j = 0; j < in_; ++j) gw1[h * in_ + j] += da * xi[j];
    }
  }
  return grad;
}

double cross_entropy(const Matrix& probs, std::span<const int> targets) {
  if (targets.size() != probs.rows || probs.rows == 0) throw std::invalid_argument("cross_entropy: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.rows; ++i) {
    s -= std::log(std::max(static_cast<double>(probs(i, static_cast<std::size_t>(targets[i]))), 1e-7));
  }
  return s / static_cast<double>(probs.rows);
}

int argmax_lowest(std::span<const float> probs) {
  int best = 0;
  for (std::size_t c = 1; c < probs.size(); ++c) {
    if (probs[c] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  }
  return best;
}

std::pair<int, std::vector<float>> classify(const ClassifierMLP& model, std::span<const float> embedding) {
  for (float e : embedding) {
    if (!std::isfinite(e)) throw std::invalid_argument("classify: non-finite embedding");
  }
  Matrix x(1, embedding.size());
  std::copy(embedding.begin(), embedding.end(), x.data.begin());
  const Matrix p = model.predict_proba(x);
  std::vector<float> probs(p.data.begin(), p.data.end());
  return {argmax_lowest(probs), probs};
}

ClassifierTrainResult train_classifier(const Matrix& x, std::span<const std::optional<int>> targets,
                                       std::size_t n_classes, const ClassifierTrainConfig& cfg) {
  if (targets.size() != x.rows) throw std::invalid_argument("train_classifier: one target slot per row");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!targets[i]) continue;
    if (*targets[i] < 0 || static_cast<std::size_t>(*targets[i]) >= n_classes) {
      throw std::invalid_argument("train_classifier: target outside class range");
    }
    rows.push_back(i);
  }
  if (rows.size() < 2) throw std::invalid_argument("train_classifier: need at least 2 labelled rows");
  if (cfg.batch < 2) throw std::invalid_argument("train_classifier: batch must be at least 2");

  ClassifierTrainResult result;
  result.model = ClassifierMLP(x.cols, cfg.hidden, n_classes, cfg.seed);
  Adam adam(result.model.params().size(), Adam::Config{cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng = make_rng(cfg.seed, 0x5EED);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = rows.size() - 1; i > 0; --i) {
      std::swap(rows[i], rows[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i)))]);
    }
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < rows.size(); start += cfg.batch) {
      const std::size_t end = std::min(rows.size(), start + cfg.batch);
      if (end - start < 2) continue;  // batch statistics need two rows
      const std::span<const std::size_t> idx(rows.data() + start, end - start);
      std::vector<int> t;
      for (auto r : idx) t.push_back(*targets[r]);
      const auto cache = result.model.forward_train(gather_rows(x, idx));
      double loss = 0.0;
      for (std::size_t s = 0; s < t.size(); ++s) {
        loss -= std::log(std::max(cache.probs[s * n_classes + static_cast<std::size_t>(t[s])], 1e-300));
      }
      loss /= static_cast<double>(t.size());
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train_classifier: non-finite loss at epoch " << epoch;
        throw std::runtime_error(msg.str());
      }
      sum += loss;
      ++batches;
      adam.step(result.model.params(), result.model.backward(cache, t));
    }
    result.loss_history.push_back(batches ? sum / static_cast<double>(batches) : 0.0);
  }
  return result;
}

ClassifierTrainResult train_teacher(const Matrix& embeddings, std::span<const std::optional<int>> labels,
                                    std::size_t n_classes, const ClassifierTrainConfig& cfg) {
  std::set<int> distinct;
  for (const auto& l : labels) {
    if (l) distinct.insert(*l);
  }
  if (distinct.size() < 2) throw std::invalid_argument("train_teacher: degenerate labels (fewer than 2 classes)");
  return train_classifier(embeddings, labels, n_classes, cfg);
}

WeakMode parse_weak_mode(const std::string& name) {
  if (name == "frame_wise") return WeakMode::frame_wise;
  if (name == "sequence_wise") return WeakMode::sequence_wise;
  throw std::invalid_argument("unknown weak mode: " + name);
}

std::string to_string(WeakMode mode) { return mode == WeakMode::frame_wise ? "frame_wise" : "sequence_wise"; }

std::size_t label_set_count(std::size_t n_inst, std::size_t n_weak) {
  constexpr std::size_t kMax = std::numeric_limits<std::size_t>::max();
  std::size_t count = 1;
  for (std::size_t i = 0; i < n_inst; ++i) {
    const std::size_t f = n_inst <= n_weak ? n_weak - i : n_weak;
    if (f == 0) return 0;
    if (count > kMax / f) return kMax;
    count *= f;
  }
  return count;
}

void for_each_label_set(std::size_t n_inst, std::span<const int> weak,
                        const std::function<void(const LabelTuple&)>& visit) {
  if (weak.empty()) throw std::invalid_argument("enumerate_label_sets: empty weak label set");
  if (n_inst == 0) throw std::invalid_argument("enumerate_label_sets: need at least one instance");
  if (!std::is_sorted(weak.begin(), weak.end()) || std::adjacent_find(weak.begin(), weak.end()) != weak.end()) {
    throw std::invalid_argument("enumerate_label_sets: weak labels must be sorted and distinct");
  }
  if (label_set_count(n_inst, weak.size()) > kEnumerationCap) {
    std::ostringstream msg;
    msg << "enumerate_label_sets: combinatorial blow-up (" << n_inst << " instances, " << weak.size()
        << " labels)";
    throw std::runtime_error(msg.str());
  }
  const bool injective = n_inst <= weak.size();
  LabelTuple tuple(n_inst);
  std::vector<std::uint8_t> used(weak.size(), 0);
  std::function<void(std::size_t)> rec = [&](std::size_t pos) {
    if (pos == n_inst) {
      visit(tuple);
      return;
    }
    for (std::size_t l = 0; l < weak.size(); ++l) {
      if (injective && used[l]) continue;
      tuple[pos] = weak[l];
      used[l] = 1;
      rec(pos + 1);
      used[l] = 0;
    }
  };
  rec(0);
}

std::vector<LabelTuple> enumerate_label_sets(std::size_t n_inst, std::span<const int> weak) {
  std::vector<LabelTuple> out;
  for_each_label_set(n_inst, weak, [&](const LabelTuple& t) { out.push_back(t); });
  return out;
}

double assignment_cost(const Matrix& probs, std::span<const int> tuple) {
  if (tuple.size() != probs.rows || tuple.empty()) throw std::invalid_argument("assignment_cost: tuple length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < tuple.size(); ++i) {
    if (tuple[i] < 0 || static_cast<std::size_t>(tuple[i]) >= probs.cols) {
      throw std::invalid_argument("assignment_cost: label outside class range");
    }
    s -= std::log(std::max(static_cast<double>(probs(i, static_cast<std::size_t>(tuple[i]))), 1e-7));
  }
  return s / static_cast<double>(tuple.size());
}

LabelTuple match_weak_labels(const Matrix& teacher_probs, std::span<const int> weak) {
  if (teacher_probs.rows == 0) throw std::invalid_argument("match_weak_labels: frame has no instances");
  // Per-instance costs are tabulated once; tuple cost is their mean.
  std::vector<double> nll(teacher_probs.rows * teacher_probs.cols);
  for (std::size_t i = 0; i < nll.size(); ++i) nll[i] = -std::log(std::max(static_cast<double>(teacher_probs.data[i]), 1e-7));
  for (int l : weak) {
    if (l < 0 || static_cast<std::size_t>(l) >= teacher_probs.cols) {
      throw std::invalid_argument("match_weak_labels: weak label outside class range");
    }
  }
  LabelTuple best;
  double best_cost = std::numeric_limits<double>::infinity();
  const double inv = 1.0 / static_cast<double>(teacher_probs.rows);
  for_each_label_set(teacher_probs.rows, weak, [&](const LabelTuple& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += nll[i * teacher_probs.cols + static_cast<std::size_t>(t[i])];
    s *= inv;
    if (s < best_cost) {
      best_cost = s;
      best = t;
    }
  });
  return best;
}

LabelTuple match_weak_labels(const ClassifierMLP& teacher, const Matrix& frame_embeddings, std::span<const int> weak) {
  return match_weak_labels(teacher.predict_proba(frame_embeddings), weak);
}

StudentResult train_student(const Matrix& embeddings, std::span<const StudentFrame> frames,
                            const ClassifierMLP& teacher, std::size_t n_classes, const ClassifierTrainConfig& cfg) {
  StudentResult result;
  result.matched.assign(embeddings.rows, std::nullopt);
  for (const auto& f : frames) {
    if (f.rows.empty() || f.weak.empty()) continue;
    const auto tuple = match_weak_labels(teacher, gather_rows(embeddings, f.rows), f.weak);
    for (std::size_t i = 0; i < f.rows.size(); ++i) result.matched[f.rows[i]] = tuple[i];
  }
  result.train = train_classifier(embeddings, result.matched, n_classes, cfg);
  return result;
}

}  // namespace saflab
