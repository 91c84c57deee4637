// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "saflab/eval_metrics.hpp"
#include "saflab/features.hpp"
#include "saflab/instantiate.hpp"
#include "saflab/pipeline.hpp"
#include "saflab/scene_sim.hpp"
#include "saflab/tubes.hpp"
#include "saflab/weak_classify.hpp"

using namespace saflab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const fs::path& work_root() {
  static const fs::path root = fs::temp_directory_path() / "saflab_acceptance";
  return root;
}

// 1. extract_instances(fabricate_field(cc_label(mask))) on separated layouts.
Outcome instantiation_round_trip() {
  SimConfig cfg;
  cfg.max_instances_per_frame = 3;
  cfg.overlap_probability = 0.0;
  const InferenceParams params;
  const double square = static_cast<double>(cfg.size.width) / params.grid_squares_per_side;
  const double min_sep = 2.0 * square * std::sqrt(2.0);

  std::vector<InstanceMaskSet> gts;
  for (std::uint64_t seed = 100; gts.size() < 100; ++seed) {
    const auto seq = gen_sequence(cfg, seed);
    for (int t = 0; t < seq.n_frames() && gts.size() < 100; t += 7) {
      const auto& gt = seq.instance_masks[static_cast<std::size_t>(t)];
      if (gt.count() == 0) continue;
      bool separated = true;
      for (std::size_t i = 0; i < gt.count(); ++i)
        for (std::size_t j = i + 1; j < gt.count(); ++j) {
          const auto a = mask_centroid(gt.masks[i]), b = mask_centroid(gt.masks[j]);
          separated &= std::hypot(a.x - b.x, a.y - b.y) > min_sep;
        }
      if (separated) gts.push_back(gt);
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<FrameDetections> preds;
  for (const auto& gt : gts) {
    const Mask binary = gt.union_mask();
    const auto ex = extract_instances_detailed(fabricate_field(cc_label(binary)), binary, params);
    FrameDetections dets;
    for (std::size_t k = 0; k < ex.instances.count(); ++k) dets.push_back({ex.instances.masks[k], {}, ex.scores[k]});
    preds.push_back(std::move(dets));
  }
  const double ap = ap_class_agnostic(preds, gts, 0.95);
  const double secs = seconds_since(t0);
  return {ap == 1.0 && secs < 10.0, "AP@0.95 = " + fmt(ap) + " on " + std::to_string(gts.size()) + " frames, " +
                                        fmt(secs, 2) + " s"};
}

// 2. Pasted overlaps split into >= 2 centroid regions; full-width components
// are exactly the flagged ones.
Outcome overlap_and_paste() {
  const SimConfig cfg;
  const auto seq = gen_sequence(cfg, 200);
  const auto donors = gen_sequence(cfg, 201);
  const InferenceParams params;
  std::mt19937_64 rng(202);

  const double square_area = std::pow(static_cast<double>(cfg.size.width) / params.grid_squares_per_side, 2);
  int trials = 0, split = 0, attempts = 0, small_piece = 0, merged_centroids = 0;
  std::size_t components = 0, flag_errors = 0, full_width = 0;
  while (trials < 200 && attempts < 20000) {
    ++attempts;
    const auto t = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(seq.n_frames()));
    const auto d = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(donors.n_frames()));
    const auto& target = seq.instance_masks[t];
    const auto& donor_set = donors.instance_masks[d];
    if (target.count() == 0 || donor_set.count() == 0) continue;
    const Mask& donor_mask = donor_set.masks[rng() % donor_set.count()];
    if (cc_label(donor_mask).count() != 1) continue;

    const Mask binary = target.union_mask();
    const auto cc = cc_label(binary);
    const auto r = augm_paste(seq.frames[t], binary, fabricate_field(cc), PasteDonor{donors.frames[d], donor_mask}, rng());
    if (!r.applied) continue;

    // Full-width flagging on the augmented mask.
    const auto after = cc_label(r.mask);
    const Mask flagged = detect_overlap(after, cfg.size.width);
    for (const auto& comp : after.masks) {
      bool left = false, right = false, any_flag = false, all_flag = true;
      for (int y = 0; y < cfg.size.height; ++y) {
        left |= comp.at(0, y) != 0;
        right |= comp.at(cfg.size.width - 1, y) != 0;
      }
      for (std::size_t i = 0; i < comp.pixels().size(); ++i) {
        if (!comp[i]) continue;
        any_flag |= flagged[i] != 0;
        all_flag &= flagged[i] != 0;
      }
      ++components;
      full_width += left && right;
      if ((left && right) ? !all_flag : any_flag) ++flag_errors;
    }

    // Overlapping configuration: a component holding both pasted and original pixels.
    const Mask* merged = nullptr;
    for (const auto& comp : after.masks) {
      bool has_pasted = false, has_original = false;
      for (std::size_t i = 0; i < comp.pixels().size(); ++i) {
        if (!comp[i]) continue;
        has_pasted |= r.pasted[i] != 0;
        has_original |= r.pasted[i] == 0;
      }
      if (has_pasted && has_original) merged = &comp;
    }
    if (!merged) continue;
    ++trials;
    const auto ex = extract_instances(r.field, r.mask, params);
    int regions = 0;
    for (const auto& m : ex.masks) {
      bool touches = false;
      for (std::size_t i = 0; i < m.pixels().size() && !touches; ++i) touches = m[i] && (*merged)[i];
      regions += touches;
    }
    if (regions >= 2) {
      ++split;
      continue;
    }
    // Failure cause: a piece too small to pass eps_c on its own, or two
    // centroids that land in touching squares.
    std::size_t pasted_px = 0, original_px = 0;
    for (std::size_t i = 0; i < merged->pixels().size(); ++i) {
      if (!(*merged)[i]) continue;
      (r.pasted[i] ? pasted_px : original_px) += 1;
    }
    const double vote_floor = params.eps_c * square_area;
    if (static_cast<double>(std::min(pasted_px, original_px)) <= vote_floor) ++small_piece;
    else ++merged_centroids;
  }
  const double rate = trials ? static_cast<double>(split) / trials : 0.0;
  return {trials == 200 && rate >= 0.95 && flag_errors == 0,
          std::to_string(split) + "/" + std::to_string(trials) + " overlaps split (" + fmt(100 * rate, 1) + "%; unsplit: " +
              std::to_string(small_piece) + " with a piece not above eps_c x square area, " +
              std::to_string(merged_centroids) + " with merged centroid squares); " +
              std::to_string(flag_errors) + " flagging errors over " + std::to_string(components) + " components (" +
              std::to_string(full_width) + " full-width)"};
}

// 3. Loss oracles and SupCon gradient.
Outcome loss_correctness() {
  std::mt19937_64 rng(300);
  std::uniform_real_distribution<float> u(-20.0f, 20.0f), p01(0.0f, 1.0f);
  auto rel = [](double a, double b) { return std::fabs(a - b) / std::max(std::fabs(b), 1e-300); };
  double worst_loss = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Size size{31, 23};
    DisplacementField a(size), b(size);
    for (auto& v : a.vectors()) v = {u(rng), u(rng)};
    for (auto& v : b.vectors()) v = {u(rng), u(rng)};
    Mask ov(size), target(size);
    std::vector<float> probs(size.area());
    for (std::size_t i = 0; i < size.area(); ++i) {
      ov[i] = rng() % 3 == 0;
      target[i] = rng() % 2;
      probs[i] = p01(rng);
    }
    double l1_all = 0.0, l1_kept = 0.0, bce = 0.0;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < size.area(); ++i) {
      const double l = std::fabs(double(a[i].dx) - b[i].dx) + std::fabs(double(a[i].dy) - b[i].dy);
      l1_all += l;
      if (!ov[i]) {
        l1_kept += l;
        ++kept;
      }
      const double p = std::clamp(double(probs[i]), 1e-7, 1.0 - 1e-7);
      bce -= target[i] ? std::log(p) : std::log(1.0 - p);
    }
    const double fs_oracle = l1_all / (2.0 * static_cast<double>(size.area()));
    const double inst_oracle = l1_kept / (2.0 * static_cast<double>(kept)) + bce / static_cast<double>(size.area());
    worst_loss = std::max({worst_loss, rel(loss_fs(a, b), fs_oracle),
                           rel(loss_instantiation(a, b, ov, target, probs), inst_oracle)});
  }

  double worst_grad = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 6, dim = 16;
    std::vector<int> ids{0, 0, 1, 1, 2, 2};
    std::shuffle(ids.begin(), ids.end(), rng);
    std::normal_distribution<double> g;
    std::vector<double> e(n * dim);
    for (std::size_t i = 0; i < n; ++i) {
      double norm = 0.0;
      for (std::size_t k = 0; k < dim; ++k) norm += (e[i * dim + k] = g(rng)) * e[i * dim + k];
      for (std::size_t k = 0; k < dim; ++k) e[i * dim + k] /= std::sqrt(norm);
    }
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
      // Components below 1e-2 in magnitude are held to an absolute 1e-6.
      const double err = std::fabs(r.grad[k] - numeric) / std::max({std::fabs(numeric), std::fabs(r.grad[k]), 1e-2});
      worst_grad = std::max(worst_grad, err);
    }
  }
  return {worst_loss <= 1e-6 && worst_grad <= 1e-4,
          "max loss rel err " + fmt(worst_loss * 1e9, 3) + "e-9; max SupCon grad rel err " +
              fmt(worst_grad * 1e6, 3) + "e-6"};
}

// 4. Matcher against exhaustive argmin; enumeration counts.
Outcome matcher_equivalence() {
  std::mt19937_64 rng(400);
  std::gamma_distribution<double> gamma(0.5);
  int agree = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 4, nw = 1 + rng() % 5, classes = 6;
    std::vector<int> all{0, 1, 2, 3, 4, 5};
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<int> weak(all.begin(), all.begin() + static_cast<long>(nw));
    std::sort(weak.begin(), weak.end());
    Matrix probs(n, classes);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      std::vector<double> row(classes);
      for (auto& v : row) s += (v = gamma(rng) + 1e-12);
      for (std::size_t j = 0; j < classes; ++j) probs(i, j) = static_cast<float>(row[j] / s);
    }
    std::vector<int> best;
    double best_cost = std::numeric_limits<double>::infinity();
    for (const auto& t : oracle::brute_force_tuples(n, weak)) {
      const double c = oracle::tuple_cost(probs, t);
      if (c < best_cost) {
        best_cost = c;
        best = t;
      }
    }
    agree += match_weak_labels(probs, weak) == best;
  }
  int count_errors = 0;
  for (std::size_t k = 1; k <= 5; ++k) {
    std::vector<int> labels(k);
    for (std::size_t i = 0; i < k; ++i) labels[i] = static_cast<int>(i);
    for (std::size_t n = 1; n <= 5; ++n) {
      std::size_t closed = 1;
      for (std::size_t i = 0; i < n; ++i) closed *= n <= k ? k - i : k;
      count_errors += enumerate_label_sets(n, labels).size() != closed;
    }
  }
  return {agree == 1000 && count_errors == 0,
          std::to_string(agree) + "/1000 argmin agreements; " + std::to_string(count_errors) +
              " cardinality mismatches over n, N_W <= 5"};
}

// 5. Tube purity over the default benchmark sequences.
Outcome tube_purity_check() {
  const SimConfig cfg;
  std::size_t entries_gt = 0, pure_gt = 0, entries_bm = 0, pure_bm = 0;
  for (int s = 0; s < 4; ++s) {
    const auto seq = gen_sequence(cfg, sequence_seed(0, s));
    std::vector<FrameInstances> frames;
    for (const auto& set : seq.instance_masks) {
      FrameInstances f;
      for (const auto& m : set.masks) {
        f.centroids.push_back(mask_centroid(m));
        f.masks.push_back(&m);
      }
      frames.push_back(std::move(f));
    }
    std::vector<FlowField> bm;
    for (int t = 0; t + 1 < seq.n_frames(); ++t)
      bm.push_back(block_match_flow(seq.frames[static_cast<std::size_t>(t)], seq.frames[static_cast<std::size_t>(t + 1)]));
    auto identity = [&](int f, int i) { return seq.tool_ids[static_cast<std::size_t>(f)][static_cast<std::size_t>(i)]; };
    auto tally = [&](const TubeSet& tubes, std::size_t& total, std::size_t& pure) {
      for (const auto& tube : tubes.tubes) {
        std::map<int, std::size_t> votes;
        for (const auto& e : tube.entries) ++votes[identity(e.frame, e.instance)];
        std::size_t best = 0;
        for (const auto& [id, c] : votes) best = std::max(best, c);
        total += tube.entries.size();
        pure += best;
      }
    };
    tally(build_tubes(frames, seq.flows, 40.0), entries_gt, pure_gt);
    tally(build_tubes(frames, bm, 40.0), entries_bm, pure_bm);
  }
  const double gt = static_cast<double>(pure_gt) / static_cast<double>(entries_gt);
  const double bm = static_cast<double>(pure_bm) / static_cast<double>(entries_bm);
  return {gt == 1.0 && bm >= 0.95, "GT flow purity " + fmt(gt) + ", block-match purity " + fmt(bm)};
}

PipelineConfig benchmark(const std::string& name) {
  PipelineConfig cfg;
  cfg.output_dir = work_root() / name;
  fs::remove_all(cfg.output_dir);
  return cfg;
}

struct Runs {
  RunReport fw, sw, gt;
  PipelineConfig fw_cfg;
};

Runs& runs() {
  static Runs r = [] {
    Runs out;
    out.fw_cfg = benchmark("frame_wise");
    out.fw = run_pipeline(out.fw_cfg);
    auto sw = benchmark("sequence_wise");
    sw.weak_mode = WeakMode::sequence_wise;
    out.sw = run_pipeline(sw);
    auto gt = benchmark("gt_fields");
    gt.field_source = FieldSource::gt;
    out.gt = run_pipeline(gt);
    return out;
  }();
  return r;
}

// 6. End-to-end ordering.
Outcome end_to_end_ordering() {
  const auto& r = runs();
  const double bin = r.fw.metrics.at("binary_iou");
  const double fw_s = r.fw.metrics.at("challenge_iou"), fw_t = r.fw.metrics.at("teacher_iou");
  const double sw_s = r.sw.metrics.at("challenge_iou"), sw_t = r.sw.metrics.at("teacher_iou");
  const double ap_noisy = r.fw.metrics.at("ap50"), ap_gt = r.gt.metrics.at("ap50");
  const bool calibrated = std::fabs(bin - 0.83) <= 0.03;
  const bool a = fw_s >= fw_t && sw_s >= sw_t;
  const bool b = std::fabs(fw_s - sw_s) <= 0.05;
  const bool c = ap_gt >= ap_noisy;
  return {calibrated && a && b && c,
          "binary IoU " + fmt(bin) + "; (a) FW student " + fmt(fw_s) + " vs teacher " + fmt(fw_t) + ", SW student " +
              fmt(sw_s) + " vs teacher " + fmt(sw_t) + "; (b) |FW-SW| " + fmt(std::fabs(fw_s - sw_s)) +
              "; (c) AP@0.5 GT " + fmt(ap_gt) + " vs noisy " + fmt(ap_noisy)};
}

// 7. Grid x eps_c sweep: the best cell lies in the interior and both corners
// fall below it.
Outcome ablation_shape() {
  const std::vector<int> grids{8, 16, 32, 64, 128};
  const std::vector<double> eps{1, 3, 5, 7, 10};
  const auto cells = sweep_inference(runs().fw_cfg, grids, eps);
  std::map<std::pair<int, double>, double> ap;
  double global = 0.0, interior = 0.0;
  for (const auto& c : cells) {
    ap[{c.grid, c.eps_c}] = c.ap50;
    global = std::max(global, c.ap50);
    const bool inner = c.grid >= 16 && c.grid <= 64 && c.eps_c >= 3 && c.eps_c <= 7;
    if (inner) interior = std::max(interior, c.ap50);
  }
  std::ostringstream table;
  table << "\n    grid\\eps     1      3      5      7     10";
  for (int g : grids) {
    table << "\n    " << std::string(g < 10 ? 6 : g < 100 ? 5 : 4, ' ') << g << "  ";
    for (double e : eps) table << " " << fmt(ap.at({g, e}), 3);
  }
  const double low_corner = ap.at({8, 10.0}), high_corner = ap.at({128, 1.0});
  const bool pass = interior == global && low_corner < global && high_corner < global;
  return {pass, "max " + fmt(global) + ", interior max " + fmt(interior) + ", corner (8, 10) " + fmt(low_corner) +
                    ", corner (128, 1) " + fmt(high_corner) + table.str()};
}

// 8. Repeated run: every artifact byte-identical except timing.json.
Outcome determinism() {
  const auto& first = runs().fw_cfg;
  auto again = benchmark("frame_wise_repeat");
  run_pipeline(again);
  std::size_t files = 0, differ = 0;
  std::set<fs::path> a_files, b_files;
  for (const auto& e : fs::recursive_directory_iterator(first.output_dir))
    if (e.is_regular_file()) a_files.insert(fs::relative(e.path(), first.output_dir));
  for (const auto& e : fs::recursive_directory_iterator(again.output_dir))
    if (e.is_regular_file()) b_files.insert(fs::relative(e.path(), again.output_dir));
  for (const auto& rel : a_files) {
    if (rel == "timing.json") continue;
    ++files;
    if (!b_files.count(rel) || bytes(first.output_dir / rel) != bytes(again.output_dir / rel)) ++differ;
  }
  const bool same_set = a_files == b_files;
  return {same_set && differ == 0 && files > 0,
          std::to_string(files - differ) + "/" + std::to_string(files) + " artifacts identical" +
              (same_set ? "" : "; file sets differ")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 instantiation round-trip", instantiation_round_trip},
      {"2 overlap rule and AugmPaste", overlap_and_paste},
      {"3 loss correctness", loss_correctness},
      {"4 matcher oracle equivalence", matcher_equivalence},
      {"5 tube purity", tube_purity_check},
      {"6 end-to-end ordering", end_to_end_ordering},
      {"7 ablation shape", ablation_shape},
      {"8 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = check();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << name << ": " << o.detail << " [" << fmt(seconds_since(t0), 1)
              << " s]" << std::endl;
  }
  fs::remove_all(work_root());
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
