#include <doctest.h>

#include <fstream>

#include "saflab/io.hpp"
#include "saflab/pipeline.hpp"

using namespace saflab;

namespace {

PipelineConfig small_config(const std::string& name) {
  PipelineConfig cfg;
  cfg.sim.size = {128, 128};
  cfg.sim.n_frames = 30;
  cfg.train_sequences = 3;
  cfg.test_sequences = 1;
  cfg.field_source = FieldSource::gt;
  cfg.features.epochs = 5;
  cfg.seed = 7;
  cfg.output_dir = fs::temp_directory_path() / ("saflab_test_pipeline_" + name);
  fs::remove_all(cfg.output_dir);
  return cfg;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("config settings and files") {
  PipelineConfig cfg;
  apply_setting(cfg, "n_km", "6");
  apply_setting(cfg, "weak_mode", "sequence_wise");
  apply_setting(cfg, "sim.width", "200");
  apply_setting(cfg, "eps_c", "3.5");
  CHECK(cfg.n_km == 6);
  CHECK(cfg.weak_mode == WeakMode::sequence_wise);
  CHECK(cfg.sim.size.width == 200);
  CHECK(cfg.inference.eps_c == 3.5);
  CHECK_THROWS_AS(apply_setting(cfg, "n_kmeans", "6"), std::invalid_argument);
  CHECK_THROWS_AS(apply_setting(cfg, "n_km", "six"), std::invalid_argument);
  CHECK_THROWS_AS(apply_setting(cfg, "field_source", "magic"), std::invalid_argument);

  const fs::path file = fs::temp_directory_path() / "saflab_test_config.toml";
  write_text(file, "# comment\nseed = 11\n\n[inference]\ngrid = 64\n[noise]\nsigma_px = 2.5  # trailing\n");
  PipelineConfig from_file;
  load_config_file(from_file, file);
  CHECK(from_file.seed == 11);
  CHECK(from_file.inference.grid_squares_per_side == 64);
  CHECK(from_file.noise.sigma_px == 2.5);
  write_text(file, "seed 11\n");
  CHECK_THROWS_AS(load_config_file(from_file, file), std::invalid_argument);
  fs::remove(file);

  PipelineConfig bad;
  bad.n_km = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = PipelineConfig{};
  bad.field_source = FieldSource::external;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = PipelineConfig{};
  bad.label_mode = LabelMode::human;
  CHECK_THROWS_AS(run_pipeline(bad), std::invalid_argument);
}

TEST_CASE("small run is deterministic and resumable") {
  auto a = small_config("a"), b = small_config("b");
  const auto ra = run_pipeline(a);
  const auto rb = run_pipeline(b);
  CHECK(bytes(a.output_dir / "report.json") == bytes(b.output_dir / "report.json"));
  CHECK(bytes(a.output_dir / "report.json") == ra.json);
  for (const char* key : {"ap50", "ap70", "challenge_iou", "teacher_iou", "binary_iou"}) {
    REQUIRE(ra.metrics.count(key) == 1);
    CHECK(ra.metrics.at(key) >= 0.0);
    CHECK(ra.metrics.at(key) <= 1.0);
  }
  CHECK(fs::exists(a.output_dir / "timing.json"));

  SUBCASE("a stage reruns from disk alone") {
    const Layout out = Layout::under(a.output_dir);
    const std::string student = bytes(out.student / "student.bin");
    fs::remove(out.student / "student.bin");
    run_stage("student", a, out);
    CHECK(bytes(out.student / "student.bin") == student);
  }

  SUBCASE("a failing stage names itself and the last good artifacts") {
    const Layout out = Layout::under(a.output_dir);
    fs::remove(out.features / "embeddings.saft");
    try {
      run_stage("prototypes", a, out);
      FAIL("expected a StageError");
    } catch (const StageError& e) {
      CHECK(e.stage == "prototypes");
      CHECK(e.last_good == out.features);
    }
    CHECK_THROWS_AS(run_stage("polish", a, out), std::invalid_argument);
  }

  fs::remove_all(a.output_dir);
  fs::remove_all(b.output_dir);
}

TEST_CASE("human labels equal to the automatic ones give identical results") {
  auto automatic = small_config("auto");
  run_pipeline(automatic);
  const Layout aout = Layout::under(automatic.output_dir);
  const auto session = read_session(session_path(aout));

  // Stand in for the operator: answer every prototype with its automatic label,
  // or class 0 where the automatic labeller abstained.
  std::vector<SessionEntry> answered = session;
  for (auto& e : answered) e.label = e.label.value_or(0);
  const fs::path labels_file = automatic.output_dir / "human_session.jsonl";
  write_session(labels_file, answered);

  auto human = small_config("human");
  human.label_mode = LabelMode::human;
  human.session_file = labels_file;
  run_pipeline(human);
  const Layout hout = Layout::under(human.output_dir);

  const bool abstained = std::any_of(session.begin(), session.end(), [](const SessionEntry& e) { return !e.label; });
  if (!abstained) {
    CHECK(bytes(aout.teacher / "teacher.bin") == bytes(hout.teacher / "teacher.bin"));
    CHECK(bytes(aout.student / "student.bin") == bytes(hout.student / "student.bin"));
    CHECK(bytes(aout.eval / "metrics.json") == bytes(hout.eval / "metrics.json"));
  }
  // Replaying the human session in automatic mode from the prototypes stage
  // reproduces the human run exactly.
  write_session(session_path(aout), answered);
  for (const char* stage : {"teach", "match", "student", "eval"}) run_stage(stage, automatic, aout);
  CHECK(bytes(aout.teacher / "teacher.bin") == bytes(hout.teacher / "teacher.bin"));
  CHECK(bytes(aout.student / "student.bin") == bytes(hout.student / "student.bin"));
  CHECK(bytes(aout.eval / "metrics.json") == bytes(hout.eval / "metrics.json"));

  // An incomplete session is rejected.
  answered[0].label.reset();
  write_session(labels_file, answered);
  auto partial = small_config("partial");
  partial.label_mode = LabelMode::human;
  partial.session_file = labels_file;
  CHECK_THROWS_AS(run_pipeline(partial), StageError);

  fs::remove_all(automatic.output_dir);
  fs::remove_all(human.output_dir);
  fs::remove_all(partial.output_dir);
}

TEST_CASE("ground-truth fields: the student beats the teacher") {
  PipelineConfig cfg;
  cfg.field_source = FieldSource::gt;
  cfg.output_dir = fs::temp_directory_path() / "saflab_test_pipeline_gt";
  fs::remove_all(cfg.output_dir);
  const auto r = run_pipeline(cfg);
  MESSAGE("student " << r.metrics.at("challenge_iou") << " teacher " << r.metrics.at("teacher_iou"));
  CHECK(r.metrics.at("ap50") > 0.95);
  CHECK(r.metrics.at("challenge_iou") >= r.metrics.at("teacher_iou"));
  fs::remove_all(cfg.output_dir);
}

TEST_CASE("external fields reproduce the run they were exported from") {
  auto source = small_config("export");
  run_pipeline(source);
  const Layout sout = Layout::under(source.output_dir);

  auto ext = small_config("external");
  ext.field_source = FieldSource::external;
  ext.external_dir = sout.fields;  // seq_XXX/field.saft + seq_XXX/mask.saft
  run_pipeline(ext);
  CHECK(bytes(sout.eval / "metrics.json") == bytes(Layout::under(ext.output_dir).eval / "metrics.json"));

  auto short_run = small_config("external_short");
  short_run.field_source = FieldSource::external;
  short_run.external_dir = sout.fields;
  short_run.sim.n_frames = 20;
  try {
    run_pipeline(short_run);
    FAIL("expected a StageError");
  } catch (const StageError& e) {
    CHECK(e.stage == "fields");
    CHECK(std::string(e.what()).find("frame count") != std::string::npos);
  }

  fs::remove_all(source.output_dir);
  fs::remove_all(ext.output_dir);
  fs::remove_all(short_run.output_dir);
}
