// Command-line front end: one verb per pipeline stage plus `run`, `sweep`
// and `serve-labels`.

#include <csignal>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "saflab/label_service.hpp"
#include "saflab/pipeline.hpp"

namespace {

using namespace saflab;

struct CommonFlags {
  std::string config_file;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<int> grid;
  std::optional<double> eps_c;
  std::optional<int> n_km;
  std::optional<std::string> weak_mode;
  std::optional<std::string> label_mode;
  std::optional<double> sigma_px;
  std::optional<int> boundary_iters;
  std::optional<std::string> flow;
  std::optional<std::string> field_source;
  std::optional<std::string> session;
  std::vector<std::string> settings;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_file, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("-o,--output", f.output, "output directory (default: $SAF_LAB_DATA or ./saf_out)");
  app->add_option("--seed", f.seed, "master seed");
  app->add_option("--grid", f.grid, "grid squares per side");
  app->add_option("--eps-c", f.eps_c, "convergence threshold");
  app->add_option("--n-km", f.n_km, "number of clusters");
  app->add_option("--weak-mode", f.weak_mode, "frame_wise | sequence_wise");
  app->add_option("--label-mode", f.label_mode, "auto | human");
  app->add_option("--sigma-px", f.sigma_px, "noisy oracle vector noise");
  app->add_option("--boundary-iters", f.boundary_iters, "noisy oracle boundary steps");
  app->add_option("--flow", f.flow, "gt | block_match");
  app->add_option("--field-source", f.field_source, "gt | noisy_oracle | external");
  app->add_option("--session", f.session, "completed labelling session (human mode)");
  app->add_option("--set", f.settings, "extra key=value setting, repeatable");
}

PipelineConfig build_config(const CommonFlags& f) {
  PipelineConfig cfg;
  cfg.output_dir = default_output_root();
  if (!f.config_file.empty()) load_config_file(cfg, f.config_file);
  for (const auto& kv : f.settings) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + kv);
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!f.output.empty()) cfg.output_dir = f.output;
  if (f.seed) cfg.seed = *f.seed;
  if (f.grid) cfg.inference.grid_squares_per_side = *f.grid;
  if (f.eps_c) cfg.inference.eps_c = *f.eps_c;
  if (f.n_km) cfg.n_km = *f.n_km;
  if (f.weak_mode) cfg.weak_mode = parse_weak_mode(*f.weak_mode);
  if (f.label_mode) cfg.label_mode = parse_label_mode(*f.label_mode);
  if (f.sigma_px) cfg.noise.sigma_px = *f.sigma_px;
  if (f.boundary_iters) cfg.noise.boundary_iters = *f.boundary_iters;
  if (f.flow) cfg.flow = parse_flow_method(*f.flow);
  if (f.field_source) cfg.field_source = parse_field_source(*f.field_source);
  if (f.session) cfg.session_file = *f.session;
  cfg.validate();
  return cfg;
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream in(item);
    T v{};
    if (!(in >> v)) throw std::invalid_argument("bad list item: " + item);
    out.push_back(v);
  }
  return out;
}

void print_metrics(const RunReport& r) {
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& [k, v] : r.metrics) std::cout << k << " " << v << "\n";
  for (const auto& [c, v] : r.per_class) std::cout << "class_" << c << "_iou " << v << "\n";
}

LabelService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"saflab: synthetic data, instantiation, tube features, weak-label classification"};
  app.require_subcommand(1);

  struct Verb {
    const char* name;
    const char* help;
    std::vector<std::string> stages;
  };
  const std::vector<Verb> verbs{
      {"simulate", "generate synthetic sequences", {"simulate"}},
      {"instantiate", "produce fields and extract instances", {"fields", "instantiate"}},
      {"track", "build instance tubes", {"track"}},
      {"features", "extract descriptors and train the projection head", {"features"}},
      {"prototypes", "cluster embeddings and write the labelling session", {"prototypes"}},
      {"teach", "train the teacher on propagated prototype labels", {"teach"}},
      {"match", "match instances to weak labels with the teacher", {"match"}},
      {"student", "train the student on matched labels", {"student"}},
      {"eval", "evaluate on the test split and write the report", {"eval"}},
  };
  std::map<std::string, CommonFlags> flags;
  std::map<std::string, CLI::App*> subs;
  for (const auto& v : verbs) {
    subs[v.name] = app.add_subcommand(v.name, v.help);
    add_common(subs[v.name], flags[v.name]);
  }

  CommonFlags run_flags;
  std::vector<std::string> run_sweep;
  auto* run = app.add_subcommand("run", "run every stage and write report.json");
  add_common(run, run_flags);
  run->add_option("--sweep", run_sweep, "after the run, sweep grid=... eps=... n_km=...");

  CommonFlags sweep_flags;
  std::string sweep_grids, sweep_eps, sweep_nkm;
  auto* sweep = app.add_subcommand("sweep", "grid x eps_c inference sweep and/or N_km sweep");
  add_common(sweep, sweep_flags);
  sweep->add_option("--grids", sweep_grids, "comma-separated grid sizes, e.g. 8,16,32,64,128");
  sweep->add_option("--eps-list", sweep_eps, "comma-separated eps_c values, e.g. 1,3,5,7,10");
  sweep->add_option("--n-km-list", sweep_nkm, "comma-separated N_km values");
  std::vector<std::string> sweep_specs;
  sweep->add_option("specs", sweep_specs, "grid=8,16,... eps=1,3,... n_km=4,8,...");
  bool sweep_prepare = false;
  sweep->add_flag("--prepare", sweep_prepare, "run simulate/fields first");

  CommonFlags serve_flags;
  std::string host = "127.0.0.1", static_dir, classes;
  int port = 8080;
  auto* serve = app.add_subcommand("serve-labels", "serve the prototype labelling session over HTTP");
  add_common(serve, serve_flags);
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "bind port (0 = any)");
  serve->add_option("--static-dir", static_dir, "frontend bundle served at /");
  serve->add_option("--classes", classes, "comma-separated class names");

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& v : verbs) {
      if (!subs[v.name]->parsed()) continue;
      const auto cfg = build_config(flags[v.name]);
      const Layout out = Layout::under(cfg.output_dir);
      for (const auto& s : v.stages) run_stage(s, cfg, out);
      if (std::string(v.name) == "eval") print_metrics(read_report(out.eval));
      return 0;
    }
    auto apply_specs = [&](const std::vector<std::string>& specs) {
      for (const auto& spec : specs) {
        const auto eq = spec.find('=');
        const std::string key = spec.substr(0, eq), value = eq == std::string::npos ? "" : spec.substr(eq + 1);
        if (key == "grid") sweep_grids = value;
        else if (key == "eps" || key == "eps_c") sweep_eps = value;
        else if (key == "n_km") sweep_nkm = value;
        else throw std::invalid_argument("unknown sweep axis: " + spec);
      }
    };
    auto do_sweep = [&](const PipelineConfig& cfg) {
      const Layout out = Layout::under(cfg.output_dir);
      nlohmann::ordered_json result = nlohmann::ordered_json::object();
      if (!sweep_grids.empty() || !sweep_eps.empty()) {
        const auto grids = sweep_grids.empty() ? std::vector<int>{cfg.inference.grid_squares_per_side}
                                               : parse_list<int>(sweep_grids);
        const auto eps = sweep_eps.empty() ? std::vector<double>{cfg.inference.eps_c} : parse_list<double>(sweep_eps);
        const auto cells = sweep_inference(cfg, grids, eps);
        std::cout << "AP@0.5 (rows: grid, columns: eps_c)\n" << std::setw(6) << "grid";
        for (double e : eps) std::cout << std::setw(8) << e;
        std::cout << "\n" << std::fixed << std::setprecision(3);
        nlohmann::ordered_json table = nlohmann::ordered_json::array();
        for (std::size_t g = 0; g < grids.size(); ++g) {
          std::cout << std::setw(6) << grids[g];
          for (std::size_t e = 0; e < eps.size(); ++e) {
            const auto& c = cells[g * eps.size() + e];
            std::cout << std::setw(8) << c.ap50;
            table.push_back({{"grid", c.grid}, {"eps_c", c.eps_c}, {"ap50", c.ap50},
                             {"mean_instances", c.mean_instances}, {"fallback_rate", c.fallback_rate}});
          }
          std::cout << "\n";
        }
        result["grid_eps"] = table;
      }
      if (!sweep_nkm.empty()) {
        nlohmann::ordered_json table = nlohmann::ordered_json::array();
        std::cout << std::fixed << std::setprecision(4);
        for (const auto& [k, r] : sweep_n_km(cfg, parse_list<int>(sweep_nkm))) {
          std::cout << "n_km " << k << " student_iou " << r.metrics.at("challenge_iou") << " teacher_iou "
                    << r.metrics.at("teacher_iou") << " kmeans_iou " << r.metrics.at("kmeans_iou") << "\n";
          table.push_back({{"n_km", k}, {"challenge_iou", r.metrics.at("challenge_iou")},
                           {"teacher_iou", r.metrics.at("teacher_iou")}, {"kmeans_iou", r.metrics.at("kmeans_iou")}});
        }
        result["n_km"] = table;
      }
      write_text(out.root / "sweep.json", result.dump(1) + "\n");
    };
    if (run->parsed()) {
      const auto cfg = build_config(run_flags);
      print_metrics(run_pipeline(cfg));
      std::cout << "report: " << (cfg.output_dir / "report.json").string() << "\n";
      if (!run_sweep.empty()) {
        apply_specs(run_sweep);
        do_sweep(cfg);
      }
      return 0;
    }
    if (sweep->parsed()) {
      const auto cfg = build_config(sweep_flags);
      apply_specs(sweep_specs);
      if (sweep_prepare) {
        const Layout out = Layout::under(cfg.output_dir);
        run_stage("simulate", cfg, out);
        run_stage("fields", cfg, out);
      }
      do_sweep(cfg);
      return 0;
    }
    if (serve->parsed()) {
      const auto cfg = build_config(serve_flags);
      const Layout out = Layout::under(cfg.output_dir);
      LabelServiceOptions opts;
      opts.session_file = session_path(out);
      opts.static_dir = static_dir;
      if (!classes.empty()) {
        std::stringstream ss(classes);
        for (std::string c; std::getline(ss, c, ',');) opts.classes.push_back(c);
      } else {
        for (int c = 0; c < cfg.sim.n_classes; ++c) opts.classes.push_back("class_" + std::to_string(c));
      }
      std::vector<LabelCard> cards;
      for (auto& v : load_prototype_views(cfg, out)) cards.push_back({v.entry, render_overlay_png(v.frame, v.mask)});
      LabelService service(opts, std::move(cards));
      const int bound = service.bind(host, port);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving " << service.total() << " prototypes on http://" << host << ":" << bound << "/" << std::endl;
      service.serve();
      g_service = nullptr;
      std::cout << "labelled " << service.labelled() << "/" << service.total() << "\n";
      return 0;
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
