#include "saflab/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace saflab {
namespace {

double signed_log(double h) { return (h < 0 ? -1.0 : 1.0) * std::log1p(std::abs(h) * 1e4); }

}  // namespace

FeatureVector extract_descriptor(const RgbImage& image, const Mask& instance_mask) {
  require_same_size(image.size(), instance_mask.size(), "extract_descriptor");
  const Size size = image.size();
  int xmin = size.width, ymin = size.height, xmax = -1, ymax = -1;
  for (int y = 0; y < size.height; ++y) {
    for (int x = 0; x < size.width; ++x) {
      if (!instance_mask.at(x, y)) continue;
      xmin = std::min(xmin, x);
      ymin = std::min(ymin, y);
      xmax = std::max(xmax, x);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax < 0) throw std::invalid_argument("extract_descriptor: empty mask");

  FeatureVector f(kDescriptorDim, 0.0f);
  std::array<double, 3> sum{}, sum2{};
  double lum_sum = 0.0, lum_sum2 = 0.0;
  double n = 0.0, sx = 0.0, sy = 0.0;
  std::size_t perimeter = 0;
  double grad_sum = 0.0;
  std::size_t grad_n = 0;
  auto lum = [&](int x, int y) {
    const auto* p = image.px(x, y);
    return (p[0] + 2.0 * p[1] + p[2]) / 4.0;
  };
  auto in = [&](int x, int y) { return size.contains(x, y) && instance_mask.at(x, y) != 0; };

  for (int y = ymin; y <= ymax; ++y) {
    for (int x = xmin; x <= xmax; ++x) {
      if (!instance_mask.at(x, y)) continue;
      const auto* p = image.px(x, y);
      for (std::size_t c = 0; c < 3; ++c) {
        f[c * 8 + p[c] / 32] += 1.0f;
        sum[c] += p[c];
        sum2[c] += static_cast<double>(p[c]) * p[c];
      }
      const double l = lum(x, y);
      lum_sum += l;
      lum_sum2 += l * l;
      n += 1.0;
      sx += x - xmin;
      sy += y - ymin;
      if (!in(x + 1, y) || !in(x - 1, y) || !in(x, y + 1) || !in(x, y - 1)) ++perimeter;
      if (in(x + 1, y) && in(x, y + 1)) {
        grad_sum += std::abs(lum(x + 1, y) - l) + std::abs(lum(x, y + 1) - l);
        ++grad_n;
      }
    }
  }
  for (std::size_t k = 0; k < kHistogramDims; ++k) f[k] = static_cast<float>(f[k] / n);

  // Central and normalized moments in bounding-box coordinates.
  const double cx = sx / n, cy = sy / n;
  double mu20 = 0, mu02 = 0, mu11 = 0, mu30 = 0, mu03 = 0, mu21 = 0, mu12 = 0;
  for (int y = ymin; y <= ymax; ++y) {
    for (int x = xmin; x <= xmax; ++x) {
      if (!instance_mask.at(x, y)) continue;
      const double dx = (x - xmin) - cx;
      const double dy = (y - ymin) - cy;
      mu20 += dx * dx;
      mu02 += dy * dy;
      mu11 += dx * dy;
      mu30 += dx * dx * dx;
      mu03 += dy * dy * dy;
      mu21 += dx * dx * dy;
      mu12 += dx * dy * dy;
    }
  }
  const double s2 = std::pow(n, 2.0), s3 = std::pow(n, 2.5);
  const double e20 = mu20 / s2, e02 = mu02 / s2, e11 = mu11 / s2;
  const double e30 = mu30 / s3, e03 = mu03 / s3, e21 = mu21 / s3, e12 = mu12 / s3;
  const double a = e30 + e12, b = e21 + e03;
  const double c = e30 - 3 * e12, d = 3 * e21 - e03;
  const std::array<double, 7> hu{
      e20 + e02,
      (e20 - e02) * (e20 - e02) + 4 * e11 * e11,
      c * c + d * d,
      a * a + b * b,
      c * a * (a * a - 3 * b * b) + d * b * (3 * a * a - b * b),
      (e20 - e02) * (a * a - b * b) + 4 * e11 * a * b,
      d * a * (a * a - 3 * b * b) - c * b * (3 * a * a - b * b),
  };
  for (std::size_t k = 0; k < kMomentDims; ++k) f[kHistogramDims + k] = static_cast<float>(signed_log(hu[k]));

  // Shape and color statistics.
  const double cov_xx = mu20 / n, cov_yy = mu02 / n, cov_xy = mu11 / n;
  const double tr = cov_xx + cov_yy;
  const double disc = std::sqrt(std::max(0.0, 0.25 * (cov_xx - cov_yy) * (cov_xx - cov_yy) + cov_xy * cov_xy));
  const double l1 = 0.5 * tr + disc;
  const double l2 = std::max(0.0, 0.5 * tr - disc);
  const double major = 4.0 * std::sqrt(l1);
  const double minor = 4.0 * std::sqrt(l2);
  const double per = static_cast<double>(perimeter);
  const double bbox = static_cast<double>(xmax - xmin + 1) * static_cast<double>(ymax - ymin + 1);

  std::size_t k = kHistogramDims + kMomentDims;
  auto put = [&](double v) { f[k++] = static_cast<float>(v); };
  put(std::log(n));
  put(std::log(per + 1.0));
  put(std::min(4.0 * std::numbers::pi * n / std::max(per * per, 1.0), 4.0));
  put(std::log(major + 1e-6));
  put(std::log(minor + 1e-6));
  put(major > 0 ? minor / major : 1.0);
  put(l1 > 0 ? std::sqrt(std::max(0.0, 1.0 - l2 / l1)) : 0.0);
  put(n / bbox);
  for (std::size_t ch = 0; ch < 3; ++ch) put(sum[ch] / n / 255.0);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double mean = sum[ch] / n;
    put(std::sqrt(std::max(0.0, sum2[ch] / n - mean * mean)) / 255.0);
  }
  const double lm = lum_sum / n;
  put(lm / 255.0);
  put(std::sqrt(std::max(0.0, lum_sum2 / n - lm * lm)) / 255.0);
  put(grad_n ? grad_sum / static_cast<double>(grad_n) / 255.0 : 0.0);
  return f;
}

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows == 0) throw std::invalid_argument("Standardizer::fit: no rows");
  Standardizer s;
  s.mean.assign(x.cols, 0.0);
  s.scale.assign(x.cols, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) s.mean[j] += x(i, j);
  }
  for (auto& m : s.mean) m /= static_cast<double>(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double d = x(i, j) - s.mean[j];
      s.scale[j] += d * d;
    }
  }
  for (auto& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(x.rows));
    if (v < 1e-6) v = 1.0;
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  if (x.cols != mean.size()) throw std::invalid_argument("Standardizer::apply: dimension mismatch");
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = static_cast<float>((x(i, j) - mean[j]) / scale[j]);
  }
  return out;
}

ProjectionHead::ProjectionHead(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, std::uint64_t seed)
    : in_(in_dim), hidden_(hidden), out_(out_dim), seed_(seed) {
  params_.resize(hidden * in_dim + hidden + out_dim * hidden + out_dim);
  Rng rng = make_rng(seed, 0x4EAD);
  const double a1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  std::size_t p = 0;
  for (std::size_t i = 0; i < hidden * in_dim + hidden; ++i) params_[p++] = static_cast<float>(uniform(rng, -a1, a1));
  for (std::size_t i = 0; i < out_dim * hidden + out_dim; ++i) params_[p++] = static_cast<float>(uniform(rng, -a2, a2));
}

ProjectionHead::Cache ProjectionHead::forward(const Matrix& x) const {
  if (x.cols != in_) throw std::invalid_argument("ProjectionHead::forward: input dimension mismatch");
  const float* w1 = params_.data();
  const float* b1 = w1 + hidden_ * in_;
  const float* w2 = b1 + hidden_;
  const float* b2 = w2 + out_ * hidden_;
  Cache c;
  c.input = x;
  const std::size_t n = x.rows;
  c.hidden.assign(n * hidden_, 0.0);
  c.raw.assign(n * out_, 0.0);
  c.norms.assign(n, 0.0);
  c.unit.assign(n * out_, 0.0);
  c.embeddings = Matrix(n, out_);
  for (std::size_t s = 0; s < n; ++s) {
    const auto xi = x.row(s);
    for (std::size_t h = 0; h < hidden_; ++h) {
      double acc = b1[h];
      const float* w = w1 + h * in_;
      for (std::size_t j = 0; j < in_; ++j) acc += static_cast<double>(w[j]) * xi[j];
      c.hidden[s * hidden_ + h] = acc < 0.0 ? 0.0 : acc;  // NaN passes through
    }
    double norm2 = 0.0;
    for (std::size_t o = 0; o < out_; ++o) {
      double acc = b2[o];
      const float* w = w2 + o * hidden_;
      for (std::size_t h = 0; h < hidden_; ++h) acc += static_cast<double>(w[h]) * c.hidden[s * hidden_ + h];
      c.raw[s * out_ + o] = acc;
      norm2 += acc * acc;
    }
    const double norm = std::max(std::sqrt(norm2), 1e-12);
    c.norms[s] = norm;
    for (std::size_t o = 0; o < out_; ++o) {
      c.unit[s * out_ + o] = c.raw[s * out_ + o] / norm;
      c.embeddings(s, o) = static_cast<float>(c.unit[s * out_ + o]);
    }
  }
  return c;
}

std::vector<double> ProjectionHead::backward(const Cache& cache, std::span<const double> grad_embeddings) const {
  const std::size_t n = cache.input.rows;
  if (grad_embeddings.size() != n * out_) throw std::invalid_argument("ProjectionHead::backward: gradient shape");
  const float* w2 = params_.data() + hidden_ * in_ + hidden_;
  std::vector<double> grad(params_.size(), 0.0);
  double* gw1 = grad.data();
  double* gb1 = gw1 + hidden_ * in_;
  double* gw2 = gb1 + hidden_;
  double* gb2 = gw2 + out_ * hidden_;
  std::vector<double> dz(out_), dh(hidden_);
  for (std::size_t s = 0; s < n; ++s) {
    const double* e = &cache.unit[s * out_];
    const double* g = &grad_embeddings[s * out_];
    double ge = 0.0;
    for (std::size_t o = 0; o < out_; ++o) ge += g[o] * e[o];
    for (std::size_t o = 0; o < out_; ++o) dz[o] = (g[o] - ge * e[o]) / cache.norms[s];
    std::fill(dh.begin(), dh.end(), 0.0);
    const double* h = &cache.hidden[s * hidden_];
    for (std::size_t o = 0; o < out_; ++o) {
      gb2[o] += dz[o];
      const float* w = w2 + o * hidden_;
      for (std::size_t k = 0; k < hidden_; ++k) {
        gw2[o * hidden_ + k] += dz[o] * h[k];
        dh[k] += dz[o] * w[k];
      }
    }
    const auto xi = cache.input.row(s);
    for (std::size_t k = 0; k < hidden_; ++k) {
      if (h[k] <= 0.0) continue;
      gb1[k] += dh[k];
      for (std::size_t j = 0; j < in_; ++j) gw1[k * in_ + j] += dh[k] * xi[j];
    }
  }
  return grad;
}

SupConResult supcon_loss(std::span<const double> embeddings, std::size_t dim, std::span<const int> tube_ids,
                         double tau) {
  const std::size_t n = tube_ids.size();
  if (n < 2) throw std::invalid_argument("supcon_loss: batch must hold at least 2 samples");
  if (!(tau > 0.0)) throw std::invalid_argument("supcon_loss: tau must be positive");
  if (embeddings.size() != n * dim) throw std::invalid_argument("supcon_loss: embedding shape mismatch");

  SupConResult r;
  r.grad.assign(n * dim, 0.0);
  std::vector<double> sim(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) s += embeddings[i * dim + k] * embeddings[j * dim + k];
      sim[i * n + j] = sim[j * n + i] = s;
    }
  }
  // dL/dsim accumulated per ordered pair, then pushed to the embeddings.
  std::vector<double> dsim(n * n, 0.0);
  std::vector<double> q(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t positives = 0;
    for (std::size_t a = 0; a < n; ++a) positives += (a != i && tube_ids[a] == tube_ids[i]);
    if (positives == 0) continue;
    ++r.anchors;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a) {
      if (a != i) mx = std::max(mx, sim[i * n + a] / tau);
    }
    double z = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      q[a] = a == i ? 0.0 : std::exp(sim[i * n + a] / tau - mx);
      z += q[a];
    }
    const double lse = mx + std::log(z);
    double li = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      if (a == i) continue;
      const bool pos = tube_ids[a] == tube_ids[i];
      if (pos) li -= sim[i * n + a] / tau - lse;
      dsim[i * n + a] = (q[a] / z - (pos ? 1.0 / static_cast<double>(positives) : 0.0)) / tau;
    }
    r.loss += li / static_cast<double>(positives);
  }
  if (r.anchors == 0) throw std::invalid_argument("supcon_loss: degenerate batch (no anchor has a positive)");
  const double inv = 1.0 / static_cast<double>(r.anchors);
  r.loss *= inv;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < n; ++a) {
      const double d = dsim[i * n + a] * inv;
      if (d == 0.0) continue;
      for (std::size_t k = 0; k < dim; ++k) {
        r.grad[i * dim + k] += d * embeddings[a * dim + k];
        r.grad[a * dim + k] += d * embeddings[i * dim + k];
      }
    }
  }
  return r;
}

double supcon_loss(const Matrix& embeddings, std::span<const int> tube_ids, double tau) {
  std::vector<double> e(embeddings.data.begin(), embeddings.data.end());
  return supcon_loss(e, embeddings.cols, tube_ids, tau).loss;
}

std::vector<BatchItem> sample_batch(const TubeSet& tubes, const SamplerConfig& cfg, Rng& rng) {
  std::vector<std::size_t> usable;
  for (std::size_t t = 0; t < tubes.tubes.size(); ++t) {
    if (tubes.tubes[t].entries.size() >= 2) usable.push_back(t);
  }
  if (usable.size() < 2) throw std::invalid_argument("sample_batch: fewer than 2 usable tubes");
  const std::size_t k = std::max<std::size_t>(2, cfg.batch_size / 4);

  auto cooccur = [&](const Tube& a, const Tube& b) {
    if (a.sequence != b.sequence) return false;
    if (a.last_frame() < b.first_frame() || b.last_frame() < a.first_frame()) return false;
    std::size_t i = 0, j = 0;
    while (i < a.entries.size() && j < b.entries.size()) {
      if (a.entries[i].frame == b.entries[j].frame) return true;
      if (a.entries[i].frame < b.entries[j].frame) ++i;
      else ++j;
    }
    return false;
  };
  auto far_apart = [&](const Tube& a, const Tube& b) {
    if (a.sequence != b.sequence) return true;
    const int gap = std::max(a.first_frame(), b.first_frame()) - std::min(a.last_frame(), b.last_frame());
    return gap >= cfg.t_far;
  };

  std::vector<std::size_t> chosen;
  std::vector<std::uint8_t> used(tubes.tubes.size(), 0);
  chosen.push_back(usable[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(usable.size()) - 1))]);
  used[chosen.back()] = 1;
  while (chosen.size() < k) {
    std::vector<std::size_t> cand;
    std::vector<double> weight;
    double total = 0.0;
    for (auto t : usable) {
      if (used[t]) continue;
      bool eligible = true, co = false;
      for (auto s : chosen) {
        const bool c = cooccur(tubes.tubes[t], tubes.tubes[s]);
        co = co || c;
        if (!c && !far_apart(tubes.tubes[t], tubes.tubes[s])) {
          eligible = false;
          break;
        }
      }
      if (!eligible) continue;
      cand.push_back(t);
      weight.push_back(co ? cfg.cooccur_weight : 1.0);
      total += weight.back();
    }
    if (cand.empty()) {
      if (chosen.size() >= 2) break;
      // No valid negative exists for the first tube; relax to any other tube.
      for (auto t : usable) {
        if (!used[t]) {
          cand.push_back(t);
          weight.push_back(1.0);
          total += 1.0;
        }
      }
    }
    double u = uniform01(rng) * total;
    std::size_t pick = cand.back();
    for (std::size_t c = 0; c < cand.size(); ++c) {
      if (u < weight[c]) {
        pick = cand[c];
        break;
      }
      u -= weight[c];
    }
    chosen.push_back(pick);
    used[pick] = 1;
  }

  std::vector<BatchItem> batch;
  for (auto t : chosen) {
    const auto& tube = tubes.tubes[t];
    const int m = static_cast<int>(tube.entries.size());
    if (m >= 4) {
      // Four distinct entries via partial Fisher-Yates.
      std::vector<int> idx(static_cast<std::size_t>(m));
      for (int i = 0; i < m; ++i) idx[static_cast<std::size_t>(i)] = i;
      for (int i = 0; i < 4; ++i) {
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(uniform_int(rng, i, m - 1))]);
        batch.push_back({tube.id, tube.entries[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]});
      }
    } else {
      for (int i = 0; i < 4; ++i) {
        batch.push_back({tube.id, tube.entries[static_cast<std::size_t>(uniform_int(rng, 0, m - 1))]});
      }
    }
  }
  return batch;
}

namespace detail {

FeatureTrainResult train_feature_head_rows(const Matrix& descriptors, const TubeSet& tubes,
                                           const std::vector<std::vector<std::size_t>>& rows_per_tube,
                                           const FeatureTrainConfig& cfg) {
  if (descriptors.rows == 0) throw std::invalid_argument("train_feature_head: empty dataset");
  FeatureTrainResult result;
  result.head = ProjectionHead(descriptors.cols, cfg.hidden, cfg.embed_dim, cfg.seed);

  std::map<int, std::size_t> index_of;
  std::size_t total_entries = 0;
  for (std::size_t t = 0; t < tubes.tubes.size(); ++t) {
    index_of[tubes.tubes[t].id] = t;
    total_entries += tubes.tubes[t].entries.size();
  }
  auto row_for = [&](const BatchItem& item) {
    const std::size_t t = index_of.at(item.tube);
    const auto& entries = tubes.tubes[t].entries;
    const auto it = std::find(entries.begin(), entries.end(), item.entry);
    return rows_per_tube[t][static_cast<std::size_t>(it - entries.begin())];
  };

  SamplerConfig scfg;
  scfg.batch_size = cfg.batch;
  scfg.t_far = cfg.t_far;
  Rng eval_rng = make_rng(cfg.seed, 0xE7A1);
  Rng train_rng = make_rng(cfg.seed, 0x7A1);

  struct Prepared {
    std::vector<std::size_t> rows;
    std::vector<int> ids;
  };
  auto prepare = [&](const std::vector<BatchItem>& batch) {
    Prepared p;
    for (const auto& item : batch) {
      p.rows.push_back(row_for(item));
      p.ids.push_back(item.tube);
    }
    return p;
  };
  std::vector<Prepared> eval_batches;
  for (int b = 0; b < 8; ++b) eval_batches.push_back(prepare(sample_batch(tubes, scfg, eval_rng)));
  auto eval_loss = [&](const ProjectionHead& head) {
    double sum = 0.0;
    for (const auto& p : eval_batches) {
      const auto cache = head.forward(gather_rows(descriptors, p.rows));
      sum += supcon_loss(cache.unit, head.out_dim(), p.ids, cfg.tau).loss;
    }
    return sum / static_cast<double>(eval_batches.size());
  };

  result.loss_history.push_back(eval_loss(result.head));
  Adam adam(result.head.params().size(), Adam::Config{cfg.lr, 0.9, 0.999, 1e-8});
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, (total_entries + cfg.batch - 1) / cfg.batch);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const auto p = prepare(sample_batch(tubes, scfg, train_rng));
      const auto cache = result.head.forward(gather_rows(descriptors, p.rows));
      const auto loss = supcon_loss(cache.unit, result.head.out_dim(), p.ids, cfg.tau);
      if (!std::isfinite(loss.loss)) {
        std::ostringstream msg;
        msg << "train_feature_head: non-finite loss at epoch " << epoch << ", step " << s;
        throw std::runtime_error(msg.str());
      }
      const auto grad = result.head.backward(cache, loss.grad);
      adam.step(result.head.params(), grad);
    }
    result.loss_history.push_back(eval_loss(result.head));
  }
  return result;
}

}  // namespace detail
}  // namespace saflab
