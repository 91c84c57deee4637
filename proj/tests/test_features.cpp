#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "oracles.hpp"
#include "saflab/features.hpp"
#include "saflab/scene_sim.hpp"

using namespace saflab;

namespace {

std::vector<double> random_unit_rows(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> e(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t k = 0; k < dim; ++k) norm += (e[i * dim + k] = g(rng)) * e[i * dim + k];
    for (std::size_t k = 0; k < dim; ++k) e[i * dim + k] /= std::sqrt(norm);
  }
  return e;
}

// Direct transcription of the loss, no log-sum-exp shift.
double naive_supcon(const std::vector<double>& e, std::size_t dim, const std::vector<int>& ids, double tau) {
  const std::size_t n = ids.size();
  auto dot = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += e[i * dim + k] * e[j * dim + k];
    return s;
  };
  double total = 0.0;
  int anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) denom += std::exp(dot(i, a) / tau);
    double li = 0.0;
    int np = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || ids[p] != ids[i]) continue;
      li += -std::log(std::exp(dot(i, p) / tau) / denom);
      ++np;
    }
    if (np == 0) continue;
    total += li / np;
    ++anchors;
  }
  return total / anchors;
}

bool close(double analytic, double numeric, double rel = 1e-4, double abs_tol = 1e-6) {
  return std::fabs(analytic - numeric) <= std::max(abs_tol, rel * std::max(std::fabs(analytic), std::fabs(numeric)));
}

struct Labelled {
  Matrix x;
  std::vector<int> cls;
};

Labelled descriptors_of(std::uint64_t first_seed, int sequences, std::size_t limit) {
  std::vector<float> rows;
  Labelled out;
  for (int s = 0; s < sequences; ++s) {
    const auto seq = gen_sequence(SimConfig{}, first_seed + static_cast<std::uint64_t>(s));
    for (int t = 0; t < seq.n_frames(); t += 2) {
      const auto& set = seq.instance_masks[t];
      for (std::size_t i = 0; i < set.count(); ++i) {
        if (out.cls.size() >= limit) break;
        const auto f = extract_descriptor(seq.frames[t], set.masks[i]);
        rows.insert(rows.end(), f.begin(), f.end());
        out.cls.push_back(*set.class_ids[i]);
      }
    }
  }
  out.x = Matrix(out.cls.size(), kDescriptorDim);
  out.x.data = rows;
  return out;
}

}  // namespace

TEST_CASE("descriptor is translation invariant and colour sensitive") {
  const Size size{64, 64};
  RgbImage img(size);
  Mask m(size), shifted(size);
  RgbImage img2(size);
  std::mt19937_64 rng(1);
  for (int y = 10; y < 30; ++y)
    for (int x = 5; x < 40; ++x) {
      if ((x - 5) * 20 < (y - 10) * 35 + 100) {
        m.at(x, y) = 1;
        shifted.at(x + 17, y + 21) = 1;
        auto* p = img.px(x, y);
        for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>(rng() % 256);
        std::copy(p, p + 3, img2.px(x + 17, y + 21));
      }
    }
  const auto a = extract_descriptor(img, m);
  const auto b = extract_descriptor(img2, shifted);
  CHECK(a.size() == kDescriptorDim);
  CHECK(a == b);

  RgbImage recolored = img;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      auto* p = recolored.px(x, y);
      std::swap(p[0], p[2]);
      p[1] = static_cast<std::uint8_t>(255 - p[1]);
    }
  const auto c = extract_descriptor(recolored, m);
  CHECK_FALSE(std::equal(a.begin(), a.begin() + kHistogramDims, c.begin()));
  CHECK_THROWS_AS(extract_descriptor(img, Mask(size)), std::invalid_argument);
}

TEST_CASE("descriptor signal floor: nearest-centroid accuracy on held-out instances") {
  const auto train = descriptors_of(500, 6, 1000);
  const auto test = descriptors_of(600, 4, 1000);
  REQUIRE(train.cls.size() >= 500);
  REQUIRE(test.cls.size() >= 500);
  const auto st = Standardizer::fit(train.x);
  const Matrix xs = st.apply(train.x), ts = st.apply(test.x);
  std::map<int, std::vector<double>> centroid;
  std::map<int, int> count;
  for (std::size_t i = 0; i < xs.rows; ++i) {
    auto& c = centroid[train.cls[i]];
    c.resize(xs.cols, 0.0);
    for (std::size_t j = 0; j < xs.cols; ++j) c[j] += xs(i, j);
    ++count[train.cls[i]];
  }
  for (auto& [k, c] : centroid)
    for (auto& v : c) v /= count[k];
  int correct = 0;
  for (std::size_t i = 0; i < ts.rows; ++i) {
    int best = -1;
    double bd = 1e300;
    for (const auto& [k, c] : centroid) {
      double d = 0.0;
      for (std::size_t j = 0; j < ts.cols; ++j) d += (ts(i, j) - c[j]) * (ts(i, j) - c[j]);
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    correct += best == test.cls[i];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(ts.rows);
  INFO("nearest-centroid accuracy " << acc);
  CHECK(acc >= 0.9);
}

TEST_CASE("standardizer") {
  Matrix x(3, 2);
  x.data = {1, 5, 2, 5, 3, 5};
  const auto s = Standardizer::fit(x);
  CHECK(s.mean[0] == doctest::Approx(2.0));
  CHECK(s.scale[1] == 1.0);  // constant column keeps unit scale
  const auto y = s.apply(x);
  CHECK(y(0, 0) == doctest::Approx(-std::sqrt(1.5)));
  CHECK(y(2, 1) == 0.0f);
}

TEST_CASE("supcon closed-form values") {
  const double tau = 0.1;
  // Two identical embeddings in one tube: the positive is the only term.
  const std::vector<double> two{1, 0, 1, 0};
  CHECK(supcon_loss(two, 2, std::vector<int>{3, 3}, tau).loss == doctest::Approx(0.0));

  // {z, z, w}, z orthogonal to w.
  const std::vector<double> three{1, 0, 1, 0, 0, 1};
  const auto r = supcon_loss(three, 2, std::vector<int>{1, 1, 2}, tau);
  CHECK(r.anchors == 2);
  CHECK(r.loss == doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-9));
  CHECK(r.loss == doctest::Approx(4.54e-5).epsilon(1e-3));

  CHECK_THROWS_WITH_AS(supcon_loss(three, 2, std::vector<int>{1, 2, 3}, tau),
                       doctest::Contains("degenerate batch"), std::invalid_argument);
}

TEST_CASE("supcon matches the naive oracle and is permutation and rotation invariant") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 8, dim = 5;
    const auto e = random_unit_rows(n, dim, rng);
    std::vector<int> ids{0, 0, 1, 1, 1, 2, 3, 3};
    const double loss = supcon_loss(e, dim, ids, 0.1).loss;
    CHECK(loss >= 0.0);
    CHECK(loss == doctest::Approx(naive_supcon(e, dim, ids, 0.1)).epsilon(1e-9));

    // Reverse order.
    std::vector<double> pe(e.size());
    std::vector<int> pids(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(e.begin() + (n - 1 - i) * dim, e.begin() + (n - i) * dim, pe.begin() + i * dim);
      pids[i] = ids[n - 1 - i];
    }
    CHECK(supcon_loss(pe, dim, pids, 0.1).loss == doctest::Approx(loss).epsilon(1e-9));

    // Rotation in the (0, 1) plane.
    const double c = std::cos(0.7), s = std::sin(0.7);
    auto re = e;
    for (std::size_t i = 0; i < n; ++i) {
      re[i * dim] = c * e[i * dim] - s * e[i * dim + 1];
      re[i * dim + 1] = s * e[i * dim] + c * e[i * dim + 1];
    }
    CHECK(supcon_loss(re, dim, ids, 0.1).loss == doctest::Approx(loss).epsilon(1e-9));
  }
}

TEST_CASE("supcon gradient w.r.t. embeddings matches central differences") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 6, dim = 4;
    auto e = random_unit_rows(n, dim, rng);
    const std::vector<int> ids{0, 0, 1, 1, 2, 2};
    const auto r = supcon_loss(e, dim, ids, 0.1);
    const double h = 1e-6;
    for (std::size_t k = 0; k < e.size(); ++k) {
      const double keep = e[k];
      e[k] = keep + h;
      const double up = supcon_loss(e, dim, ids, 0.1).loss;
      e[k] = keep - h;
      const double down = supcon_loss(e, dim, ids, 0.1).loss;
      e[k] = keep;
      const double numeric = (up - down) / (2 * h);
      if (!close(r.grad[k], numeric)) FAIL("component " << k << ": " << r.grad[k] << " vs " << numeric);
    }
  }
}

TEST_CASE("projection head: unit outputs and parameter gradient") {
  std::mt19937_64 rng(8);
  ProjectionHead head(10, 12, 5, 3);
  CHECK(head.params().size() == 12 * 10 + 12 + 5 * 12 + 5);
  const float bound = 1.0f / std::sqrt(10.0f);
  for (std::size_t i = 0; i < 120; ++i) CHECK(std::fabs(head.params()[i]) <= bound);

  Matrix x(6, 10);
  std::normal_distribution<float> g;
  for (auto& v : x.data) v = g(rng);
  const std::vector<int> ids{0, 0, 1, 1, 2, 2};
  const auto cache = head.forward(x);
  for (std::size_t i = 0; i < 6; ++i) {
    double norm = 0.0;
    for (float v : cache.embeddings.row(i)) norm += double(v) * v;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
  }
  const auto loss = supcon_loss(cache.unit, 5, ids, 0.1);
  const auto grad = head.backward(cache, loss.grad);
  REQUIRE(grad.size() == head.params().size());

  auto eval = [&](const ProjectionHead& h) { return supcon_loss(h.forward(x).unit, 5, ids, 0.1).loss; };
  int bad = 0;
  for (std::size_t k = 0; k < grad.size(); ++k) {
    ProjectionHead up = head, down = head;
    const float p = head.params()[k];
    up.params()[k] = p + 1e-3f;
    down.params()[k] = p - 1e-3f;
    const double step = double(up.params()[k]) - double(down.params()[k]);
    const double numeric = (eval(up) - eval(down)) / step;
    if (!close(grad[k], numeric, 1e-4, 1e-6)) {
      ++bad;
      MESSAGE("param " << k << ": analytic " << grad[k] << " numeric " << numeric);
    }
  }
  CHECK(bad == 0);
}

TEST_CASE("sample_batch") {
  TubeSet two;
  for (int t = 0; t < 2; ++t) {
    Tube tube{t, 0, {}};
    for (int f = 0; f < 10; ++f) tube.entries.push_back({f, t});
    two.tubes.push_back(tube);
  }
  Rng rng = make_rng(1, 2);
  const auto batch = sample_batch(two, SamplerConfig{8, 50, 2.0}, rng);
  REQUIRE(batch.size() == 8);
  std::map<int, int> per_tube;
  for (const auto& b : batch) ++per_tube[b.tube];
  CHECK(per_tube.size() == 2);
  for (const auto& [id, n] : per_tube) CHECK(n == 4);
  // Entries of a tube are distinct when it has at least four.
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i + 1; j < 8; ++j)
      if (batch[i].tube == batch[j].tube) CHECK_FALSE(batch[i].entry == batch[j].entry);

  TubeSet singles;
  for (int t = 0; t < 5; ++t) singles.tubes.push_back(Tube{t, 0, {{t, 0}}});
  CHECK_THROWS_AS(sample_batch(singles, SamplerConfig{}, rng), std::invalid_argument);

  // Short tubes are sampled with replacement.
  TubeSet short_tubes;
  short_tubes.tubes.push_back(Tube{0, 0, {{0, 0}, {1, 0}}});
  short_tubes.tubes.push_back(Tube{1, 1, {{0, 0}, {1, 0}, {2, 0}}});
  CHECK(sample_batch(short_tubes, SamplerConfig{8, 50, 2.0}, rng).size() == 8);
}

TEST_CASE("sampler draws co-occurring tubes at twice the baseline rate") {
  // A and B share frames; C and D live in other sequences. After A is
  // drawn first, B carries weight 2 and C, D weight 1.
  TubeSet set;
  auto make = [](int id, int seq, int first) {
    Tube t{id, seq, {}};
    for (int f = first; f < first + 10; ++f) t.entries.push_back({f, id});
    return t;
  };
  set.tubes = {make(0, 0, 0), make(1, 0, 0), make(2, 1, 100), make(3, 2, 200)};
  Rng rng = make_rng(9, 9);
  std::map<int, int> second_after_a;
  for (int b = 0; b < 10000; ++b) {
    const auto batch = sample_batch(set, SamplerConfig{8, 50, 2.0}, rng);
    if (batch[0].tube == 0) ++second_after_a[batch[4].tube];
  }
  const double baseline = 0.5 * (second_after_a[2] + second_after_a[3]);
  const double ratio = second_after_a[1] / baseline;
  INFO("co-occurrence ratio " << ratio);
  CHECK(ratio == doctest::Approx(2.0).epsilon(0.15));

  // Same-sequence tubes closer than t_far and not co-occurring are never
  // paired while another choice exists.
  TubeSet near;
  near.tubes = {make(0, 0, 0), make(1, 0, 20), make(2, 1, 0)};
  for (int b = 0; b < 500; ++b) {
    const auto batch = sample_batch(near, SamplerConfig{8, 50, 2.0}, rng);
    const int a = batch[0].tube, c = batch[4].tube;
    CHECK_FALSE(((a == 0 && c == 1) || (a == 1 && c == 0)));
  }
}

namespace {

struct TubeData {
  Matrix x;
  Standardizer st;
  TubeSet tubes;
  std::vector<std::vector<std::size_t>> rows_per_tube;
};

// GT instances of consecutive seeds, one tube per physical tool.
TubeData tube_data(std::uint64_t first_seed, int sequences, const Standardizer* st) {
  std::vector<float> rows;
  TubeData d;
  std::size_t row = 0;
  for (int s = 0; s < sequences; ++s) {
    const auto seq = gen_sequence(SimConfig{}, first_seed + static_cast<std::uint64_t>(s));
    std::map<int, std::size_t> tube_of_tool;
    for (int t = 0; t < seq.n_frames(); t += 2) {
      const auto& set = seq.instance_masks[t];
      for (std::size_t i = 0; i < set.count(); ++i) {
        const auto f = extract_descriptor(seq.frames[t], set.masks[i]);
        rows.insert(rows.end(), f.begin(), f.end());
        const int tool = seq.tool_ids[t][i];
        if (!tube_of_tool.count(tool)) {
          tube_of_tool[tool] = d.tubes.tubes.size();
          d.tubes.tubes.push_back(Tube{static_cast<int>(d.tubes.tubes.size()), s, {}});
          d.rows_per_tube.emplace_back();
        }
        const auto k = tube_of_tool[tool];
        d.tubes.tubes[k].entries.push_back({s * 100 + t, static_cast<int>(i)});
        d.rows_per_tube[k].push_back(row++);
      }
    }
  }
  d.x = Matrix(row, kDescriptorDim);
  d.x.data = rows;
  d.st = st ? *st : Standardizer::fit(d.x);
  d.x = d.st.apply(d.x);
  return d;
}

}  // namespace

TEST_CASE("feature head training") {
  const auto d = tube_data(700, 2, nullptr);
  const Matrix& x = d.x;
  const TubeSet& tubes = d.tubes;
  auto rows_per_tube = d.rows_per_tube;

  FeatureTrainConfig cfg;
  cfg.epochs = 0;
  const auto zero = detail::train_feature_head_rows(x, tubes, rows_per_tube, cfg);
  CHECK(zero.head == ProjectionHead(kDescriptorDim, cfg.hidden, cfg.embed_dim, cfg.seed));
  CHECK(zero.loss_history.size() == 1);

  cfg.epochs = 30;
  const auto a = detail::train_feature_head_rows(x, tubes, rows_per_tube, cfg);
  const auto b = detail::train_feature_head_rows(x, tubes, rows_per_tube, cfg);
  CHECK(a.head == b.head);
  CHECK(a.loss_history == b.loss_history);
  CHECK(a.loss_history.back() < a.loss_history.front());

  Matrix bad = x;
  bad(0, 0) = std::numeric_limits<float>::quiet_NaN();
  for (auto& r : rows_per_tube)
    for (auto& v : r) v = 0;  // every sample reads the NaN row
  cfg.epochs = 1;
  CHECK_THROWS_AS(detail::train_feature_head_rows(bad, tubes, rows_per_tube, cfg), std::runtime_error);
}

TEST_CASE("trained embeddings separate held-out tubes") {
  const auto train = tube_data(710, 4, nullptr);
  FeatureTrainConfig cfg;  // defaults: 80 epochs
  const auto r = detail::train_feature_head_rows(train.x, train.tubes, train.rows_per_tube, cfg);

  // Held-out rows use the training standardization.
  const auto held = tube_data(720, 2, &train.st);
  const Matrix e = r.head.embed(held.x);
  double intra = 0.0, inter = 0.0;
  std::size_t ni = 0, nx = 0;
  std::vector<int> tube_of_row(e.rows, -1);
  for (std::size_t t = 0; t < held.rows_per_tube.size(); ++t)
    for (auto row : held.rows_per_tube[t]) tube_of_row[row] = static_cast<int>(t);
  for (std::size_t i = 0; i < e.rows; ++i)
    for (std::size_t j = i + 1; j < e.rows; ++j) {
      double c = 0.0;
      for (std::size_t k = 0; k < e.cols; ++k) c += double(e(i, k)) * e(j, k);
      if (tube_of_row[i] == tube_of_row[j]) {
        intra += c;
        ++ni;
      } else {
        inter += c;
        ++nx;
      }
    }
  const double margin = intra / ni - inter / nx;
  INFO("intra " << intra / ni << " inter " << inter / nx);
  CHECK(margin >= 0.2);
}
