#pragma once

// Stage wiring for the full run. Every stage reads the artifacts of the
// previous stages from disk and writes its own under the output directory.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "saflab/features.hpp"
#include "saflab/instantiate.hpp"
#include "saflab/io.hpp"
#include "saflab/scene_sim.hpp"
#include "saflab/tubes.hpp"
#include "saflab/weak_classify.hpp"

namespace saflab {

namespace fs = std::filesystem;

enum class FieldSource { gt, noisy_oracle, external };
enum class LabelMode { automatic, human };

FieldSource parse_field_source(const std::string& name);
std::string to_string(FieldSource s);
LabelMode parse_label_mode(const std::string& name);
std::string to_string(LabelMode m);

struct PipelineConfig {
  SimConfig sim;
  int train_sequences = 4;
  int test_sequences = 2;
  std::uint64_t seed = 0;

  FieldSource field_source = FieldSource::noisy_oracle;
  NoiseConfig noise{5.0, 7, 0};
  fs::path external_dir;  // seq_XXX/field.saft + seq_XXX/mask.saft
  InferenceParams inference;

  FlowMethod flow = FlowMethod::gt;
  double max_dist = 40.0;

  FeatureTrainConfig features;
  int n_km = 8;
  WeakMode weak_mode = WeakMode::frame_wise;
  LabelMode label_mode = LabelMode::automatic;
  fs::path session_file;  // human mode: completed labelling session
  ClassifierTrainConfig teacher;
  ClassifierTrainConfig student;

  fs::path output_dir = "saf_out";

  void validate() const;
  [[nodiscard]] int total_sequences() const { return train_sequences + test_sequences; }
};

/// Applies one `key = value` setting; throws on unknown keys or bad values.
void apply_setting(PipelineConfig& cfg, const std::string& key, const std::string& value);

/// TOML-style file of `key = value` lines; `#` starts a comment, `[section]`
/// headers prefix the keys that follow with `section.`.
void load_config_file(PipelineConfig& cfg, const fs::path& path);

/// Default output root: $SAF_LAB_DATA when set, else ./saf_out.
fs::path default_output_root();

/// Directory per stage.
struct Layout {
  fs::path root, sim, fields, instances, tubes, features, prototypes, teacher, match, student, eval;
  static Layout under(const fs::path& root);
  [[nodiscard]] fs::path sequence_dir(const fs::path& stage, int s) const;
};

struct StageError : std::runtime_error {
  StageError(const std::string& stage, const fs::path& last_good, const std::string& what);
  std::string stage;
  fs::path last_good;
};

std::uint64_t sequence_seed(std::uint64_t seed, int sequence);

void stage_simulate(const PipelineConfig& cfg, const Layout& out);
void stage_fields(const PipelineConfig& cfg, const Layout& out);
void stage_instantiate(const PipelineConfig& cfg, const Layout& out);
void stage_track(const PipelineConfig& cfg, const Layout& out);
void stage_features(const PipelineConfig& cfg, const Layout& out);
void stage_prototypes(const PipelineConfig& cfg, const Layout& out);
void stage_teach(const PipelineConfig& cfg, const Layout& out);
void stage_match(const PipelineConfig& cfg, const Layout& out);
void stage_student(const PipelineConfig& cfg, const Layout& out);
void stage_eval(const PipelineConfig& cfg, const Layout& out);

struct RunReport {
  std::map<std::string, double> metrics;  // ap50, ap70, challenge_iou, teacher_iou, kmeans_iou, binary_iou
  std::map<int, double> per_class;
  std::map<std::string, double> diagnostics;
  std::string json;                       // exact report.json content
};

RunReport read_report(const fs::path& eval_dir);

/// All stages in order; writes report.json (deterministic) and timing.json.
/// With `human` label mode, `session_file` must hold a label for every
/// prototype.
RunReport run_pipeline(const PipelineConfig& cfg);

/// Named stage list for the CLI, in execution order.
const std::vector<std::string>& stage_names();
void run_stage(const std::string& name, const PipelineConfig& cfg, const Layout& out);

struct SweepCell {
  int grid = 0;
  double eps_c = 0.0;
  double ap50 = 0.0;
  double mean_instances = 0.0;
  double fallback_rate = 0.0;
};

/// AP@0.5 of extract_instances on the test split for every (grid, eps_c)
/// pair, using the fields already written by stage_fields.
std::vector<SweepCell> sweep_inference(const PipelineConfig& cfg, const std::vector<int>& grids,
                                       const std::vector<double>& eps_values);

/// Re-runs prototypes -> eval per N_km value in `root/sweep_nkm/nkm_<k>`,
/// reusing the upstream artifacts of `cfg.output_dir`.
std::vector<std::pair<int, RunReport>> sweep_n_km(const PipelineConfig& cfg, const std::vector<int>& values);

/// Session entries of the prototypes stage (labels may be null).
fs::path session_path(const Layout& out);

/// Frame and predicted mask of one prototype, for display.
struct PrototypeView {
  SessionEntry entry;
  RgbImage frame;
  Mask mask;
};

std::vector<PrototypeView> load_prototype_views(const PipelineConfig& cfg, const Layout& out);

}  // namespace saflab
