#include "saflab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "saflab/eval_metrics.hpp"
#include "saflab/io.hpp"
#include "saflab/rng.hpp"

namespace saflab {

using ojson = nlohmann::ordered_json;

FieldSource parse_field_source(const std::string& name) {
  if (name == "gt") return FieldSource::gt;
  if (name == "noisy_oracle") return FieldSource::noisy_oracle;
  if (name == "external") return FieldSource::external;
  throw std::invalid_argument("unknown field source: " + name);
}

std::string to_string(FieldSource s) {
  switch (s) {
    case FieldSource::gt: return "gt";
    case FieldSource::noisy_oracle: return "noisy_oracle";
    case FieldSource::external: return "external";
  }
  return "?";
}

LabelMode parse_label_mode(const std::string& name) {
  if (name == "auto") return LabelMode::automatic;
  if (name == "human") return LabelMode::human;
  throw std::invalid_argument("unknown label mode: " + name);
}

std::string to_string(LabelMode m) { return m == LabelMode::automatic ? "auto" : "human"; }

void PipelineConfig::validate() const {
  sim.validate();
  inference.validate(sim.size);
  if (train_sequences < 1) throw std::invalid_argument("config: train_sequences must be at least 1");
  if (test_sequences < 1) throw std::invalid_argument("config: test_sequences must be at least 1");
  if (noise.sigma_px < 0 || noise.boundary_iters < 0) throw std::invalid_argument("config: noise must be nonnegative");
  if (!(max_dist > 0)) throw std::invalid_argument("config: max_dist must be positive");
  if (n_km < 1) throw std::invalid_argument("config: n_km must be positive");
  if (features.epochs < 0 || teacher.epochs < 0 || student.epochs < 0) {
    throw std::invalid_argument("config: epochs must be nonnegative");
  }
  if (field_source == FieldSource::external && external_dir.empty()) {
    throw std::invalid_argument("config: external field source needs external_dir");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw std::invalid_argument("config: bad value for " + key + ": " + value);
  return v;
}

void apply_classifier(ClassifierTrainConfig& c, const std::string& key, const std::string& field,
                      const std::string& value) {
  if (field == "epochs") c.epochs = parse_number<int>(key, value);
  else if (field == "lr") c.lr = parse_number<double>(key, value);
  else if (field == "batch") c.batch = parse_number<std::size_t>(key, value);
  else if (field == "hidden") c.hidden = parse_number<std::size_t>(key, value);
  else throw std::invalid_argument("config: unknown key " + key);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return splitmix64(seed ^ splitmix64(tag)); }

// Stream tags for derived seeds.
constexpr std::uint64_t kTagNoise = 0x4E01;
constexpr std::uint64_t kTagFeatures = 0xFEA7;
constexpr std::uint64_t kTagKmeans = 0xC105;
constexpr std::uint64_t kTagTeacher = 0x7EAC;
constexpr std::uint64_t kTagStudent = 0x57D7;

}  // namespace

void apply_setting(PipelineConfig& cfg, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  std::string value = trim(raw_value);
  if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);

  if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "output_dir") cfg.output_dir = value;
  else if (key == "train_sequences") cfg.train_sequences = parse_number<int>(key, value);
  else if (key == "test_sequences") cfg.test_sequences = parse_number<int>(key, value);
  else if (key == "sim.width") cfg.sim.size.width = parse_number<int>(key, value);
  else if (key == "sim.height") cfg.sim.size.height = parse_number<int>(key, value);
  else if (key == "sim.n_classes") cfg.sim.n_classes = parse_number<int>(key, value);
  else if (key == "sim.n_frames") cfg.sim.n_frames = parse_number<int>(key, value);
  else if (key == "sim.max_instances_per_frame") cfg.sim.max_instances_per_frame = parse_number<int>(key, value);
  else if (key == "sim.overlap_probability") cfg.sim.overlap_probability = parse_number<double>(key, value);
  else if (key == "sim.motion_px_per_frame") cfg.sim.motion_px_per_frame = parse_number<double>(key, value);
  else if (key == "sim.absent_class_fraction") cfg.sim.absent_class_fraction = parse_number<double>(key, value);
  else if (key == "field_source") cfg.field_source = parse_field_source(value);
  else if (key == "sigma_px" || key == "noise.sigma_px") cfg.noise.sigma_px = parse_number<double>(key, value);
  else if (key == "boundary_iters" || key == "noise.boundary_iters") cfg.noise.boundary_iters = parse_number<int>(key, value);
  else if (key == "noise.seed") cfg.noise.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "external_dir") cfg.external_dir = value;
  else if (key == "grid" || key == "inference.grid") cfg.inference.grid_squares_per_side = parse_number<int>(key, value);
  else if (key == "eps_c" || key == "inference.eps_c") cfg.inference.eps_c = parse_number<double>(key, value);
  else if (key == "flow") cfg.flow = parse_flow_method(value);
  else if (key == "max_dist") cfg.max_dist = parse_number<double>(key, value);
  else if (key == "features.epochs") cfg.features.epochs = parse_number<int>(key, value);
  else if (key == "features.lr") cfg.features.lr = parse_number<double>(key, value);
  else if (key == "features.batch") cfg.features.batch = parse_number<std::size_t>(key, value);
  else if (key == "features.tau") cfg.features.tau = parse_number<double>(key, value);
  else if (key == "features.t_far") cfg.features.t_far = parse_number<int>(key, value);
  else if (key == "features.hidden") cfg.features.hidden = parse_number<std::size_t>(key, value);
  else if (key == "features.embed_dim") cfg.features.embed_dim = parse_number<std::size_t>(key, value);
  else if (key == "n_km") cfg.n_km = parse_number<int>(key, value);
  else if (key == "weak_mode") cfg.weak_mode = parse_weak_mode(value);
  else if (key == "label_mode") cfg.label_mode = parse_label_mode(value);
  else if (key == "session_file") cfg.session_file = value;
  else if (key.rfind("teacher.", 0) == 0) apply_classifier(cfg.teacher, key, key.substr(8), value);
  else if (key.rfind("student.", 0) == 0) apply_classifier(cfg.student, key, key.substr(8), value);
  else throw std::invalid_argument("config: unknown key " + key);
}

void load_config_file(PipelineConfig& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path.string());
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    apply_setting(cfg, section.empty() ? key : section + "." + key, line.substr(eq + 1));
  }
}

fs::path default_output_root() {
  if (const char* env = std::getenv("SAF_LAB_DATA"); env != nullptr && *env != '\0') return env;
  return "saf_out";
}

Layout Layout::under(const fs::path& root) {
  Layout l;
  l.root = root;
  l.sim = root / "sim";
  l.fields = root / "fields";
  l.instances = root / "instances";
  l.tubes = root / "tubes";
  l.features = root / "features";
  l.prototypes = root / "prototypes";
  l.teacher = root / "teacher";
  l.match = root / "match";
  l.student = root / "student";
  l.eval = root / "eval";
  return l;
}

fs::path Layout::sequence_dir(const fs::path& stage, int s) const {
  char name[32];
  std::snprintf(name, sizeof name, "seq_%03d", s);
  return stage / name;
}

StageError::StageError(const std::string& stage_name, const fs::path& last_good_state, const std::string& what)
    : std::runtime_error("stage '" + stage_name + "' failed: " + what + " (last good state: " +
                         (last_good_state.empty() ? std::string("none") : last_good_state.string()) + ")"),
      stage(stage_name),
      last_good(last_good_state) {}

std::uint64_t sequence_seed(std::uint64_t seed, int sequence) {
  return derive_seed(seed, 0x5E0000ULL + static_cast<std::uint64_t>(sequence));
}

fs::path session_path(const Layout& out) { return out.prototypes / "session.jsonl"; }

namespace {

std::string frame_png(int t) {
  char name[32];
  std::snprintf(name, sizeof name, "mask_%04d.png", t);
  return name;
}

ojson read_json(const fs::path& path) {
  try {
    return ojson::parse(read_text(path));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
}

void write_json(const fs::path& path, const ojson& j) { write_text(path, j.dump(1) + "\n"); }

ojson optional_labels(const std::vector<std::optional<int>>& v) {
  ojson out = ojson::array();
  for (const auto& l : v) out.push_back(l ? ojson(*l) : ojson(nullptr));
  return out;
}

std::vector<std::optional<int>> parse_optional_labels(const ojson& j) {
  std::vector<std::optional<int>> out;
  for (const auto& e : j) out.push_back(e.is_null() ? std::nullopt : std::optional<int>(e.get<int>()));
  return out;
}

struct SequenceMeta {
  int n_frames = 0;
  std::vector<std::vector<int>> classes;  // per frame, per GT instance
  std::vector<std::vector<int>> presence_fw;
  std::vector<int> presence_sw;
};

SequenceMeta read_meta(const Layout& out, int s) {
  const auto j = read_json(out.sequence_dir(out.sim, s) / "meta.json");
  SequenceMeta m;
  m.n_frames = j.at("n_frames").get<int>();
  m.classes = j.at("classes").get<std::vector<std::vector<int>>>();
  m.presence_fw = j.at("presence_fw").get<std::vector<std::vector<int>>>();
  m.presence_sw = j.at("presence_sw").get<std::vector<int>>();
  return m;
}

std::vector<InstanceMaskSet> read_gt(const Layout& out, int s, const SequenceMeta& meta) {
  std::vector<InstanceMaskSet> gt;
  const fs::path dir = out.sequence_dir(out.sim, s) / "gt";
  for (int t = 0; t < meta.n_frames; ++t) {
    auto set = read_label_png(dir / frame_png(t));
    const auto& cls = meta.classes[static_cast<std::size_t>(t)];
    if (cls.size() != set.count()) throw FormatError("meta.json class list does not match " + frame_png(t));
    set.class_ids.assign(cls.begin(), cls.end());
    gt.push_back(std::move(set));
  }
  return gt;
}

struct FrameDetail {
  InstanceMaskSet instances;
  std::vector<double> scores;
  std::vector<Point2> centroids;
};

std::vector<FrameDetail> read_instances(const Layout& out, int s) {
  const fs::path dir = out.sequence_dir(out.instances, s);
  const auto j = read_json(dir / "instances.json");
  std::vector<FrameDetail> frames;
  int t = 0;
  for (const auto& f : j.at("frames")) {
    FrameDetail d;
    d.instances = read_label_png(dir / frame_png(t));
    d.scores = f.at("scores").get<std::vector<double>>();
    for (const auto& c : f.at("centroids")) d.centroids.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    if (d.scores.size() != d.instances.count() || d.centroids.size() != d.instances.count()) {
      throw FormatError("instances.json does not match " + frame_png(t));
    }
    frames.push_back(std::move(d));
    ++t;
  }
  return frames;
}

// Row index of the feature matrices: one row per extracted instance, in
// (sequence, frame, instance) order.
struct RowIndex {
  struct Row {
    int sequence, frame, instance;  // frame is global
  };
  std::vector<Row> rows;
  std::size_t train_rows = 0;
  int frames_per_sequence = 0;

  [[nodiscard]] std::map<std::pair<int, int>, std::size_t> lookup() const {
    std::map<std::pair<int, int>, std::size_t> m;
    for (std::size_t r = 0; r < rows.size(); ++r) m[{rows[r].frame, rows[r].instance}] = r;
    return m;
  }
};

RowIndex read_index(const Layout& out) {
  const auto j = read_json(out.features / "index.json");
  RowIndex idx;
  idx.train_rows = j.at("train_rows").get<std::size_t>();
  idx.frames_per_sequence = j.at("frames_per_sequence").get<int>();
  for (const auto& r : j.at("rows")) idx.rows.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>()});
  return idx;
}

Matrix take_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather_rows(m, idx);
}

ClusterModel read_clusters(const Layout& out) {
  ClusterModel m;
  m.centroids = read_matrix(out.prototypes / "centroids.saft");
  const auto j = read_json(out.prototypes / "assignment.json");
  m.assignment = j.at("assignment").get<std::vector<int>>();
  m.inertia = j.at("inertia").get<double>();
  m.iterations = j.at("iterations").get<int>();
  return m;
}

// Class of the ground-truth instance with maximum IoU, if any overlaps.
std::optional<int> gt_class_of(const Mask& pred, const InstanceMaskSet& gt) {
  double best = 0.0;
  std::optional<int> cls;
  for (std::size_t g = 0; g < gt.count(); ++g) {
    const double v = iou(pred, gt.masks[g]);
    if (v > best) {
      best = v;
      cls = gt.class_ids[g];
    }
  }
  return cls;
}

}  // namespace

void stage_simulate(const PipelineConfig& cfg, const Layout& out) {
  cfg.sim.validate();
  for (int s = 0; s < cfg.total_sequences(); ++s) {
    const auto seq = gen_sequence(cfg.sim, sequence_seed(cfg.seed, s));
    const fs::path dir = out.sequence_dir(out.sim, s);
    fs::create_directories(dir / "gt");
    write_frames(dir / "frames.saft", seq.frames);
    write_fields<FlowTag>(dir / "flows.saft", seq.flows);
    ojson classes = ojson::array(), tools = ojson::array(), fw = ojson::array();
    for (int t = 0; t < seq.n_frames(); ++t) {
      const auto& set = seq.instance_masks[static_cast<std::size_t>(t)];
      write_label_png(dir / "gt" / frame_png(t), set);
      ojson c = ojson::array();
      for (const auto& id : set.class_ids) c.push_back(*id);
      classes.push_back(c);
      tools.push_back(seq.tool_ids[static_cast<std::size_t>(t)]);
      fw.push_back(std::vector<int>(seq.presence_fw[static_cast<std::size_t>(t)].begin(),
                                    seq.presence_fw[static_cast<std::size_t>(t)].end()));
    }
    ojson meta;
    meta["v"] = 1;
    meta["seed"] = seq.seed;
    meta["split"] = s < cfg.train_sequences ? "train" : "test";
    meta["n_frames"] = seq.n_frames();
    meta["width"] = cfg.sim.size.width;
    meta["height"] = cfg.sim.size.height;
    meta["classes"] = classes;
    meta["tools"] = tools;
    meta["presence_fw"] = fw;
    meta["presence_sw"] = std::vector<int>(seq.presence_sw.begin(), seq.presence_sw.end());
    write_json(dir / "meta.json", meta);
  }
}

void stage_fields(const PipelineConfig& cfg, const Layout& out) {
  for (int s = 0; s < cfg.total_sequences(); ++s) {
    const auto meta = read_meta(out, s);
    std::vector<DisplacementField> fields;
    std::vector<Mask> masks;
    if (cfg.field_source == FieldSource::external) {
      const fs::path src = out.sequence_dir(cfg.external_dir, s);
      fields = read_fields<DisplacementTag>(src / "field.saft");
      masks = read_masks(src / "mask.saft");
      if (static_cast<int>(fields.size()) != meta.n_frames || masks.size() != fields.size()) {
        throw FormatError("external fields do not match the simulated frame count: " + src.string());
      }
      for (std::size_t t = 0; t < fields.size(); ++t) {
        require_same_size(fields[t].size(), cfg.sim.size, "external field");
        require_same_size(masks[t].size(), cfg.sim.size, "external mask");
      }
    } else {
      const auto gt = read_gt(out, s, meta);
      for (int t = 0; t < meta.n_frames; ++t) {
        const auto& set = gt[static_cast<std::size_t>(t)];
        const auto field = gt_displacement(set);
        const Mask mask = set.union_mask();
        if (cfg.field_source == FieldSource::gt) {
          fields.push_back(field);
          masks.push_back(mask);
        } else {
          NoiseConfig nc = cfg.noise;
          nc.seed = derive_seed(cfg.seed ^ cfg.noise.seed,
                                kTagNoise * 1'000'003ULL + static_cast<std::uint64_t>(s) * 100'000ULL +
                                    static_cast<std::uint64_t>(t));
          auto noisy = noisy_oracle(field, mask, nc);
          fields.push_back(std::move(noisy.field));
          masks.push_back(std::move(noisy.mask));
        }
      }
    }
    const fs::path dir = out.sequence_dir(out.fields, s);
    write_fields<DisplacementTag>(dir / "field.saft", fields);
    write_masks(dir / "mask.saft", masks);
  }
  ojson meta;
  meta["v"] = 1;
  meta["source"] = to_string(cfg.field_source);
  meta["sigma_px"] = cfg.noise.sigma_px;
  meta["boundary_iters"] = cfg.noise.boundary_iters;
  meta["seed"] = cfg.seed;
  write_json(out.fields / "meta.json", meta);
}

void stage_instantiate(const PipelineConfig& cfg, const Layout& out) {
  cfg.inference.validate(cfg.sim.size);
  for (int s = 0; s < cfg.total_sequences(); ++s) {
    const fs::path src = out.sequence_dir(out.fields, s);
    const auto fields = read_fields<DisplacementTag>(src / "field.saft");
    const auto masks = read_masks(src / "mask.saft");
    const fs::path dir = out.sequence_dir(out.instances, s);
    fs::create_directories(dir);
    ojson frames = ojson::array();
    for (std::size_t t = 0; t < fields.size(); ++t) {
      const auto ex = extract_instances_detailed(fields[t], masks[t], cfg.inference);
      write_label_png(dir / frame_png(static_cast<int>(t)), ex.instances);
      ojson centroids = ojson::array();
      for (std::size_t k = 0; k < ex.instances.count(); ++k) {
        const Point2 c = ex.regions.size() == ex.instances.count() ? ex.regions[k].position
                                                                   : mask_centroid(ex.instances.masks[k]);
        centroids.push_back({c.x, c.y});
      }
      frames.push_back({{"scores", ex.scores}, {"centroids", centroids}, {"fallback", ex.fallback}});
    }
    ojson j;
    j["v"] = 1;
    j["grid"] = cfg.inference.grid_squares_per_side;
    j["eps_c"] = cfg.inference.eps_c;
    j["frames"] = frames;
    write_json(dir / "instances.json", j);
  }
}

void stage_track(const PipelineConfig& cfg, const Layout& out) {
  TubeSet all;
  const int T = cfg.sim.n_frames;
  for (int s = 0; s < cfg.train_sequences; ++s) {
    const auto frames = read_instances(out, s);
    std::vector<FlowField> flows;
    if (cfg.flow == FlowMethod::gt) {
      flows = read_fields<FlowTag>(out.sequence_dir(out.sim, s) / "flows.saft");
    } else {
      const auto images = read_frames(out.sequence_dir(out.sim, s) / "frames.saft");
      for (std::size_t t = 0; t + 1 < images.size(); ++t) {
        flows.push_back(estimate_flow(images[t], images[t + 1], cfg.flow));
      }
    }
    std::vector<FrameInstances> fi(frames.size());
    for (std::size_t t = 0; t < frames.size(); ++t) {
      fi[t].centroids = frames[t].centroids;
      for (const auto& m : frames[t].instances.masks) fi[t].masks.push_back(&m);
    }
    const auto set = build_tubes(fi, flows, cfg.max_dist, s * T, static_cast<int>(all.tubes.size()), s);
    all.tubes.insert(all.tubes.end(), set.tubes.begin(), set.tubes.end());
  }
  write_tubes(out.tubes / "tubes.jsonl", all);
  ojson meta;
  meta["v"] = 1;
  meta["flow"] = to_string(cfg.flow);
  meta["max_dist"] = cfg.max_dist;
  meta["n_tubes"] = all.tubes.size();
  write_json(out.tubes / "meta.json", meta);
}

void stage_features(const PipelineConfig& cfg, const Layout& out) {
  const int T = cfg.sim.n_frames;
  RowIndex index;
  index.frames_per_sequence = T;
  std::vector<FeatureVector> descriptors;
  for (int s = 0; s < cfg.total_sequences(); ++s) {
    if (s == cfg.train_sequences) index.train_rows = index.rows.size();
    const auto images = read_frames(out.sequence_dir(out.sim, s) / "frames.saft");
    const auto frames = read_instances(out, s);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      for (std::size_t i = 0; i < frames[t].instances.count(); ++i) {
        descriptors.push_back(extract_descriptor(images[t], frames[t].instances.masks[i]));
        index.rows.push_back({s, s * T + static_cast<int>(t), static_cast<int>(i)});
      }
    }
  }
  if (index.train_rows < 2) throw std::runtime_error("too few training instances for feature learning");

  Matrix raw(descriptors.size(), kDescriptorDim);
  for (std::size_t r = 0; r < descriptors.size(); ++r) std::copy(descriptors[r].begin(), descriptors[r].end(), raw.row(r).begin());
  const Standardizer standardizer = Standardizer::fit(take_rows(raw, 0, index.train_rows));
  const Matrix standardized = standardizer.apply(raw);

  const TubeSet tubes = read_tubes(out.tubes / "tubes.jsonl", T);
  const auto lookup = index.lookup();
  FeatureTrainConfig fcfg = cfg.features;
  fcfg.seed = derive_seed(cfg.seed, kTagFeatures);
  const auto trained = train_feature_head(standardized, tubes, fcfg, [&](const TubeEntry& e) {
    return lookup.at({e.frame, e.instance});
  });
  const Matrix embeddings = trained.head.embed(standardized);

  write_matrix(out.features / "descriptors.saft", raw);
  write_standardizer(out.features / "standardizer.json", standardizer);
  write_head(out.features / "head.bin", trained.head);
  write_matrix(out.features / "embeddings.saft", embeddings);
  ojson rows = ojson::array();
  for (const auto& r : index.rows) rows.push_back({r.sequence, r.frame, r.instance});
  ojson j;
  j["v"] = 1;
  j["frames_per_sequence"] = T;
  j["train_rows"] = index.train_rows;
  j["rows"] = rows;
  write_json(out.features / "index.json", j);
  ojson meta;
  meta["v"] = 1;
  meta["seed"] = fcfg.seed;
  meta["loss_history"] = trained.loss_history;
  write_json(out.features / "meta.json", meta);
}

void stage_prototypes(const PipelineConfig& cfg, const Layout& out) {
  const RowIndex index = read_index(out);
  const Matrix train = take_rows(read_matrix(out.features / "embeddings.saft"), 0, index.train_rows);
  const std::uint64_t kseed = derive_seed(cfg.seed, kTagKmeans);
  const ClusterModel model = kmeans_pp(train, cfg.n_km, kseed);
  PrototypeSet prototypes = select_prototypes(model, train);

  if (cfg.label_mode == LabelMode::automatic) {
    // Ground truth and predicted masks of each prototype's frame.
    std::map<int, std::vector<FrameDetail>> inst;
    std::map<int, std::vector<InstanceMaskSet>> gts;
    std::vector<const Mask*> predicted;
    std::vector<const InstanceMaskSet*> truth;
    for (const auto& p : prototypes) {
      const auto& row = index.rows[p.instance];
      if (!inst.count(row.sequence)) {
        inst[row.sequence] = read_instances(out, row.sequence);
        gts[row.sequence] = read_gt(out, row.sequence, read_meta(out, row.sequence));
      }
    }
    for (const auto& p : prototypes) {
      const auto& row = index.rows[p.instance];
      const auto t = static_cast<std::size_t>(row.frame - row.sequence * index.frames_per_sequence);
      predicted.push_back(&inst[row.sequence][t].instances.masks[static_cast<std::size_t>(row.instance)]);
      truth.push_back(&gts[row.sequence][t]);
    }
    prototypes = auto_label_prototypes(prototypes, predicted, truth);
  }

  std::vector<SessionEntry> session;
  for (const auto& p : prototypes) {
    const auto& row = index.rows[p.instance];
    session.push_back({p.cluster_id, row.frame, row.instance, p.label});
  }
  if (cfg.label_mode == LabelMode::human && !cfg.session_file.empty()) {
    const auto given = read_session(cfg.session_file);
    if (given.size() != session.size()) throw std::runtime_error("labelling session does not match the prototypes");
    for (std::size_t k = 0; k < session.size(); ++k) {
      const auto& g = given[k];
      if (g.cluster_id != session[k].cluster_id || g.frame_index != session[k].frame_index ||
          g.instance_index != session[k].instance_index) {
        throw std::runtime_error("labelling session does not match the prototypes");
      }
      session[k].label = g.label;
    }
  }
  fs::create_directories(out.prototypes);
  write_matrix(out.prototypes / "centroids.saft", model.centroids);
  ojson j;
  j["v"] = 1;
  j["seed"] = kseed;
  j["n_km"] = cfg.n_km;
  j["inertia"] = model.inertia;
  j["iterations"] = model.iterations;
  j["assignment"] = model.assignment;
  write_json(out.prototypes / "assignment.json", j);
  write_session(session_path(out), session);
}

void stage_teach(const PipelineConfig& cfg, const Layout& out) {
  const RowIndex index = read_index(out);
  const Matrix train = take_rows(read_matrix(out.features / "embeddings.saft"), 0, index.train_rows);
  const ClusterModel model = read_clusters(out);
  if (model.assignment.size() != index.train_rows) throw FormatError("cluster assignment does not match features");
  const auto session = read_session(session_path(out));
  const auto lookup = index.lookup();
  PrototypeSet prototypes;
  for (const auto& e : session) {
    if (cfg.label_mode == LabelMode::human && !e.label) {
      throw std::runtime_error("labelling session incomplete: cluster " + std::to_string(e.cluster_id) + " has no label");
    }
    if (e.label && (*e.label < 0 || *e.label >= cfg.sim.n_classes)) {
      throw std::runtime_error("labelling session: label outside class range");
    }
    prototypes.push_back({e.cluster_id, lookup.at({e.frame_index, e.instance_index}), e.label});
  }
  const auto labels = propagate_labels(model, prototypes);
  ClassifierTrainConfig tcfg = cfg.teacher;
  tcfg.seed = derive_seed(cfg.seed, kTagTeacher);
  const auto result = train_teacher(train, labels, static_cast<std::size_t>(cfg.sim.n_classes), tcfg);
  write_classifier(out.teacher / "teacher.bin", result.model);
  ojson j;
  j["v"] = 1;
  j["seed"] = tcfg.seed;
  j["loss_history"] = result.loss_history;
  j["labels"] = optional_labels(labels);
  write_json(out.teacher / "labels.json", j);
}

void stage_match(const PipelineConfig& cfg, const Layout& out) {
  const RowIndex index = read_index(out);
  const Matrix train = take_rows(read_matrix(out.features / "embeddings.saft"), 0, index.train_rows);
  const ClassifierMLP teacher = read_classifier(out.teacher / "teacher.bin");
  std::vector<std::optional<int>> matched(index.train_rows);
  std::size_t r = 0;
  std::size_t skipped = 0;
  for (int s = 0; s < cfg.train_sequences; ++s) {
    const auto meta = read_meta(out, s);
    while (r < index.train_rows && index.rows[r].sequence == s) {
      const int frame = index.rows[r].frame;
      std::vector<std::size_t> rows;
      while (r < index.train_rows && index.rows[r].frame == frame) rows.push_back(r++);
      const int t = frame - s * index.frames_per_sequence;
      const auto& weak = cfg.weak_mode == WeakMode::frame_wise ? meta.presence_fw[static_cast<std::size_t>(t)]
                                                              : meta.presence_sw;
      if (weak.empty()) {
        skipped += rows.size();
        continue;
      }
      const auto tuple = match_weak_labels(teacher, gather_rows(train, rows), weak);
      for (std::size_t i = 0; i < rows.size(); ++i) matched[rows[i]] = tuple[i];
    }
  }
  ojson j;
  j["v"] = 1;
  j["weak_mode"] = to_string(cfg.weak_mode);
  j["skipped_instances"] = skipped;
  j["matched"] = optional_labels(matched);
  write_json(out.match / "matched.json", j);
}

void stage_student(const PipelineConfig& cfg, const Layout& out) {
  const RowIndex index = read_index(out);
  const Matrix train = take_rows(read_matrix(out.features / "embeddings.saft"), 0, index.train_rows);
  const auto matched = parse_optional_labels(read_json(out.match / "matched.json").at("matched"));
  if (matched.size() != index.train_rows) throw FormatError("matched labels do not match features");
  ClassifierTrainConfig scfg = cfg.student;
  scfg.seed = derive_seed(cfg.seed, kTagStudent);
  const auto result = train_classifier(train, matched, static_cast<std::size_t>(cfg.sim.n_classes), scfg);
  write_classifier(out.student / "student.bin", result.model);
  ojson j;
  j["v"] = 1;
  j["seed"] = scfg.seed;
  j["loss_history"] = result.loss_history;
  write_json(out.student / "meta.json", j);
}

void stage_eval(const PipelineConfig& cfg, const Layout& out) {
  const RowIndex index = read_index(out);
  const Matrix embeddings = read_matrix(out.features / "embeddings.saft");
  const ClassifierMLP teacher = read_classifier(out.teacher / "teacher.bin");
  const ClassifierMLP student = read_classifier(out.student / "student.bin");
  const ClusterModel clusters = read_clusters(out);
  const auto session = read_session(session_path(out));
  std::map<int, std::optional<int>> cluster_label;
  for (const auto& e : session) cluster_label[e.cluster_id] = e.label;

  const Matrix p_teacher = teacher.predict_proba(embeddings);
  const Matrix p_student = student.predict_proba(embeddings);
  auto argmax_row = [](const Matrix& p, std::size_t r) { return argmax_lowest(p.row(r)); };
  auto kmeans_label = [&](std::size_t r) -> std::optional<int> {
    double best = std::numeric_limits<double>::infinity();
    int c = 0;
    for (std::size_t k = 0; k < clusters.centroids.rows; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < embeddings.cols; ++j) {
        const double x = static_cast<double>(embeddings(r, j)) - clusters.centroids(k, j);
        d += x * x;
      }
      if (d < best) {
        best = d;
        c = static_cast<int>(k);
      }
    }
    const auto it = cluster_label.find(c);
    return it == cluster_label.end() ? std::nullopt : it->second;
  };

  std::vector<FrameDetections> detections;
  std::vector<InstanceMaskSet> gts;
  std::vector<ClassMap> gt_maps, student_maps, teacher_maps, kmeans_maps;
  double binary_sum = 0.0;
  std::size_t n_frames = 0;
  std::size_t test_with_gt = 0, student_correct = 0, teacher_correct = 0, kmeans_correct = 0;
  std::size_t r = index.train_rows;
  for (int s = cfg.train_sequences; s < cfg.total_sequences(); ++s) {
    const auto meta = read_meta(out, s);
    const auto gt = read_gt(out, s, meta);
    const auto frames = read_instances(out, s);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      FrameDetections st, te, km;
      for (std::size_t i = 0; i < frames[t].instances.count(); ++i, ++r) {
        const Mask& m = frames[t].instances.masks[i];
        const double score = frames[t].scores[i];
        st.push_back({m, argmax_row(p_student, r), score});
        te.push_back({m, argmax_row(p_teacher, r), score});
        km.push_back({m, kmeans_label(r), score});
        if (const auto g = gt_class_of(m, gt[t])) {
          ++test_with_gt;
          student_correct += *st.back().class_id == *g;
          teacher_correct += *te.back().class_id == *g;
          kmeans_correct += km.back().class_id == g;
        }
      }
      gt_maps.push_back(class_map(gt[t]));
      student_maps.push_back(class_map(cfg.sim.size, st));
      teacher_maps.push_back(class_map(cfg.sim.size, te));
      kmeans_maps.push_back(class_map(cfg.sim.size, km));
      binary_sum += binary_iou(frames[t].instances.union_mask(), gt[t].union_mask());
      ++n_frames;
      detections.push_back(std::move(st));
      gts.push_back(gt[t]);
    }
  }
  if (r != index.rows.size()) throw FormatError("feature index does not match test instances");

  const auto student_iou = challenge_iou(student_maps, gt_maps);
  ojson metrics;
  metrics["ap50"] = ap_class_agnostic(detections, gts, 0.5);
  metrics["ap70"] = ap_class_agnostic(detections, gts, 0.7);
  metrics["challenge_iou"] = student_iou.mean;
  metrics["binary_iou"] = binary_sum / static_cast<double>(n_frames);
  metrics["teacher_iou"] = challenge_iou(teacher_maps, gt_maps).mean;
  metrics["kmeans_iou"] = challenge_iou(kmeans_maps, gt_maps).mean;
  ojson per_class = ojson::object();
  for (const auto& [c, v] : student_iou.per_class) per_class[std::to_string(c)] = v;
  metrics["per_class"] = per_class;

  // Training-split diagnostics against ground truth.
  const auto labels = parse_optional_labels(read_json(out.teacher / "labels.json").at("labels"));
  const auto matched = parse_optional_labels(read_json(out.match / "matched.json").at("matched"));
  std::size_t with_gt = 0, prop_ok = 0, match_ok = 0, teacher_agree = 0, labelled = 0;
  std::size_t proto_ok = 0, proto_labelled = 0;
  std::map<std::pair<int, int>, std::optional<int>> gt_class_at;
  for (int s = 0; s < cfg.train_sequences; ++s) {
    const auto gt = read_gt(out, s, read_meta(out, s));
    const auto frames = read_instances(out, s);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      for (std::size_t i = 0; i < frames[t].instances.count(); ++i) {
        gt_class_at[{s * index.frames_per_sequence + static_cast<int>(t), static_cast<int>(i)}] =
            gt_class_of(frames[t].instances.masks[i], gt[t]);
      }
    }
  }
  for (std::size_t k = 0; k < index.train_rows; ++k) {
    const auto g = gt_class_at.at({index.rows[k].frame, index.rows[k].instance});
    if (labels[k]) {
      ++labelled;
      teacher_agree += argmax_row(p_teacher, k) == *labels[k];
    }
    if (!g) continue;
    ++with_gt;
    prop_ok += labels[k] == g;
    match_ok += matched[k] == g;
  }
  for (const auto& e : session) {
    if (!e.label) continue;
    ++proto_labelled;
    proto_ok += gt_class_at.at({e.frame_index, e.instance_index}) == e.label;
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  ojson diag;
  diag["prototype_label_accuracy"] = ratio(proto_ok, proto_labelled);
  diag["propagation_accuracy"] = ratio(prop_ok, with_gt);
  diag["teacher_train_agreement"] = ratio(teacher_agree, labelled);
  diag["matched_label_accuracy"] = ratio(match_ok, with_gt);
  diag["test_student_accuracy"] = ratio(student_correct, test_with_gt);
  diag["test_teacher_accuracy"] = ratio(teacher_correct, test_with_gt);
  diag["test_kmeans_accuracy"] = ratio(kmeans_correct, test_with_gt);
  diag["train_instances"] = index.train_rows;
  diag["test_instances"] = index.rows.size() - index.train_rows;
  diag["test_frames"] = n_frames;
  diag["evaluable_frames"] = student_iou.frames;
  const auto fmeta = read_json(out.features / "meta.json");
  diag["feature_loss_first"] = fmeta.at("loss_history").front();
  diag["feature_loss_last"] = fmeta.at("loss_history").back();
  diag["n_tubes"] = read_json(out.tubes / "meta.json").at("n_tubes");

  ojson config;
  config["seed"] = cfg.seed;
  config["train_sequences"] = cfg.train_sequences;
  config["test_sequences"] = cfg.test_sequences;
  config["sim"] = {{"width", cfg.sim.size.width},
                   {"height", cfg.sim.size.height},
                   {"n_classes", cfg.sim.n_classes},
                   {"n_frames", cfg.sim.n_frames},
                   {"max_instances_per_frame", cfg.sim.max_instances_per_frame},
                   {"overlap_probability", cfg.sim.overlap_probability},
                   {"motion_px_per_frame", cfg.sim.motion_px_per_frame},
                   {"absent_class_fraction", cfg.sim.absent_class_fraction}};
  config["field_source"] = to_string(cfg.field_source);
  config["noise"] = {{"sigma_px", cfg.noise.sigma_px}, {"boundary_iters", cfg.noise.boundary_iters},
                     {"seed", cfg.noise.seed}};
  config["inference"] = {{"grid", cfg.inference.grid_squares_per_side}, {"eps_c", cfg.inference.eps_c}};
  config["flow"] = to_string(cfg.flow);
  config["max_dist"] = cfg.max_dist;
  config["features"] = {{"epochs", cfg.features.epochs}, {"lr", cfg.features.lr},
                        {"batch", cfg.features.batch},   {"tau", cfg.features.tau},
                        {"t_far", cfg.features.t_far},   {"hidden", cfg.features.hidden},
                        {"embed_dim", cfg.features.embed_dim}};
  config["n_km"] = cfg.n_km;
  config["weak_mode"] = to_string(cfg.weak_mode);
  config["label_mode"] = to_string(cfg.label_mode);
  auto classifier = [](const ClassifierTrainConfig& c) {
    return ojson{{"epochs", c.epochs}, {"lr", c.lr}, {"batch", c.batch}, {"hidden", c.hidden}};
  };
  config["teacher"] = classifier(cfg.teacher);
  config["student"] = classifier(cfg.student);

  ojson report;
  report["v"] = 1;
  report["seed"] = cfg.seed;
  report["metrics"] = metrics;
  report["diagnostics"] = diag;
  report["config"] = config;
  write_json(out.eval / "metrics.json", metrics);
  write_json(out.eval / "report.json", report);
}

RunReport read_report(const fs::path& eval_dir) {
  RunReport r;
  r.json = read_text(eval_dir / "report.json");
  const auto j = ojson::parse(r.json);
  for (const auto& [k, v] : j.at("metrics").items()) {
    if (k == "per_class") {
      for (const auto& [c, x] : v.items()) r.per_class[std::stoi(c)] = x.get<double>();
    } else {
      r.metrics[k] = v.get<double>();
    }
  }
  for (const auto& [k, v] : j.at("diagnostics").items()) r.diagnostics[k] = v.get<double>();
  return r;
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"simulate", "fields",  "instantiate", "track", "features",
                                              "prototypes", "teach", "match",       "student", "eval"};
  return names;
}

void run_stage(const std::string& name, const PipelineConfig& cfg, const Layout& out) {
  static const std::map<std::string, std::function<void(const PipelineConfig&, const Layout&)>> table{
      {"simulate", stage_simulate}, {"fields", stage_fields},         {"instantiate", stage_instantiate},
      {"track", stage_track},       {"features", stage_features},     {"prototypes", stage_prototypes},
      {"teach", stage_teach},       {"match", stage_match},           {"student", stage_student},
      {"eval", stage_eval}};
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown stage: " + name);
  const Layout stage_dirs = out;
  auto dir_of = [&](const std::string& n) -> fs::path {
    if (n == "simulate") return stage_dirs.sim;
    if (n == "fields") return stage_dirs.fields;
    if (n == "instantiate") return stage_dirs.instances;
    if (n == "track") return stage_dirs.tubes;
    if (n == "features") return stage_dirs.features;
    if (n == "prototypes") return stage_dirs.prototypes;
    if (n == "teach") return stage_dirs.teacher;
    if (n == "match") return stage_dirs.match;
    if (n == "student") return stage_dirs.student;
    return stage_dirs.eval;
  };
  try {
    it->second(cfg, out);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& ex) {
    const auto& names = stage_names();
    const auto pos = std::find(names.begin(), names.end(), name);
    const fs::path last = pos == names.begin() ? fs::path() : dir_of(*(pos - 1));
    throw StageError(name, last, ex.what());
  }
}

RunReport run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  if (cfg.label_mode == LabelMode::human && cfg.session_file.empty()) {
    throw std::invalid_argument("human label mode requires a completed labelling session file");
  }
  const Layout out = Layout::under(cfg.output_dir);
  fs::create_directories(out.root);
  ojson timing = ojson::object();
  for (const auto& name : stage_names()) {
    const auto t0 = std::chrono::steady_clock::now();
    run_stage(name, cfg, out);
    timing[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  fs::copy_file(out.eval / "report.json", out.root / "report.json", fs::copy_options::overwrite_existing);
  write_json(out.root / "timing.json", timing);
  return read_report(out.eval);
}

namespace {

// Swallows std::clog output for the lifetime of the guard.
class ClogMute {
 public:
  ClogMute() : old_(std::clog.rdbuf(&null_)) {}
  ~ClogMute() { std::clog.rdbuf(old_); }
  ClogMute(const ClogMute&) = delete;
  ClogMute& operator=(const ClogMute&) = delete;

 private:
  struct NullBuf : std::streambuf {
    int overflow(int c) override { return c; }
  } null_;
  std::streambuf* old_;
};

}  // namespace

std::vector<SweepCell> sweep_inference(const PipelineConfig& cfg, const std::vector<int>& grids,
                                       const std::vector<double>& eps_values) {
  const Layout out = Layout::under(cfg.output_dir);
  std::vector<std::vector<DisplacementField>> fields;
  std::vector<std::vector<Mask>> masks;
  std::vector<InstanceMaskSet> gts;
  for (int s = cfg.train_sequences; s < cfg.total_sequences(); ++s) {
    const fs::path dir = out.sequence_dir(out.fields, s);
    fields.push_back(read_fields<DisplacementTag>(dir / "field.saft"));
    masks.push_back(read_masks(dir / "mask.saft"));
    const auto gt = read_gt(out, s, read_meta(out, s));
    gts.insert(gts.end(), gt.begin(), gt.end());
  }
  std::vector<SweepCell> cells;
  ClogMute mute;
  for (int g : grids) {
    for (double e : eps_values) {
      const InferenceParams params{g, e};
      params.validate(cfg.sim.size);
      std::vector<FrameDetections> preds;
      std::size_t n_inst = 0, n_fallback = 0;
      for (std::size_t s = 0; s < fields.size(); ++s) {
        for (std::size_t t = 0; t < fields[s].size(); ++t) {
          const auto ex = extract_instances_detailed(fields[s][t], masks[s][t], params);
          FrameDetections d;
          for (std::size_t k = 0; k < ex.instances.count(); ++k) d.push_back({ex.instances.masks[k], std::nullopt, ex.scores[k]});
          n_inst += d.size();
          n_fallback += ex.fallback;
          preds.push_back(std::move(d));
        }
      }
      SweepCell c;
      c.grid = g;
      c.eps_c = e;
      c.ap50 = ap_class_agnostic(preds, gts, 0.5);
      c.mean_instances = static_cast<double>(n_inst) / static_cast<double>(preds.size());
      c.fallback_rate = static_cast<double>(n_fallback) / static_cast<double>(preds.size());
      cells.push_back(c);
    }
  }
  return cells;
}

std::vector<std::pair<int, RunReport>> sweep_n_km(const PipelineConfig& cfg, const std::vector<int>& values) {
  const Layout base = Layout::under(cfg.output_dir);
  std::vector<std::pair<int, RunReport>> out;
  for (int k : values) {
    PipelineConfig c = cfg;
    c.n_km = k;
    c.validate();
    Layout l = base;
    const fs::path root = base.root / "sweep_nkm" / ("nkm_" + std::to_string(k));
    l.prototypes = root / "prototypes";
    l.teacher = root / "teacher";
    l.match = root / "match";
    l.student = root / "student";
    l.eval = root / "eval";
    for (const char* name : {"prototypes", "teach", "match", "student", "eval"}) run_stage(name, c, l);
    out.emplace_back(k, read_report(l.eval));
  }
  return out;
}

std::vector<PrototypeView> load_prototype_views(const PipelineConfig& cfg, const Layout& out) {
  const auto session = read_session(session_path(out));
  const int T = cfg.sim.n_frames;
  std::map<int, std::vector<RgbImage>> images;
  std::map<int, std::vector<FrameDetail>> instances;
  std::vector<PrototypeView> views;
  for (const auto& e : session) {
    const int s = e.frame_index / T;
    const auto t = static_cast<std::size_t>(e.frame_index % T);
    if (!images.count(s)) {
      images[s] = read_frames(out.sequence_dir(out.sim, s) / "frames.saft");
      instances[s] = read_instances(out, s);
    }
    const auto& set = instances[s].at(t).instances;
    if (e.instance_index < 0 || static_cast<std::size_t>(e.instance_index) >= set.count()) {
      throw FormatError("session entry refers to a missing instance");
    }
    views.push_back({e, images[s].at(t), set.masks[static_cast<std::size_t>(e.instance_index)]});
  }
  return views;
}

}  // namespace saflab
