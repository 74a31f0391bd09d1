// Command-line front end: data generation, rendering, training, evaluation,
// metrics and feature export. Exit codes: 0 ok, 1 user error, 2 internal error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cmgr/cmgr.hpp"

namespace fs = std::filesystem;
using namespace cmgr;

namespace {

using Real = float;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string method_file(const std::string& stem, Method m, const std::string& ext) {
  return stem + "_" + to_string(m) + ext;
}

// FNV-1a over relative paths and contents of every regular file, sorted.
std::uint64_t directory_checksum(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    h = fnv1a(fs::relative(f, dir).generic_string(), h);
    std::ifstream in(f, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    h = fnv1a(ss.str(), h);
  }
  return h;
}

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing", path.string());
  out << body;
  if (!out) throw IoError("failed writing", path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open", path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_predictions(const std::vector<PredictionRecord>& log, const fs::path& path) {
  std::ostringstream os;
  os << "id,label,predicted,route,bnd_score\n";
  for (const auto& p : log) {
    os << p.id << ',' << p.label << ',' << p.predicted << ',' << to_string(p.route) << ',' << format_double(p.bnd_score)
       << '\n';
  }
  write_text(path, os.str());
}

std::vector<Method> parse_methods(const std::string& s) {
  if (s == "both") return {Method::cmgr, Method::finetune};
  return {parse_method(s)};
}

Dataset dataset_for(const ExperimentConfig& cfg, const std::string& data_dir) {
  return data_dir.empty() ? generate_dataset(cfg.data.synthetic()) : load_dataset(data_dir);
}

// --- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  std::size_t classes = 12;
  std::vector<std::string> class_list;
  std::size_t per_class = 100;
  std::size_t test_per_class = 20;
  Index points = 512;
  double jitter = 0.01;
  std::uint64_t seed = 7;
  std::string out;
};

int gen_data(const GenDataArgs& a) {
  SyntheticDataSpec spec;
  if (!a.class_list.empty()) {
    spec.classes = a.class_list;
  } else {
    const auto& cat = class_catalog();
    if (a.classes < 1 || a.classes > cat.size()) {
      throw InvalidArgument("--classes must be between 1 and " + std::to_string(cat.size()));
    }
    for (std::size_t i = 0; i < a.classes; ++i) spec.classes.push_back(cat[i].name);
  }
  spec.train_per_class = a.per_class;
  spec.test_per_class = a.test_per_class;
  spec.points = a.points;
  spec.jitter = a.jitter;
  spec.seed = a.seed;
  if (a.points < 1) throw InvalidArgument("--points must be >= 1");
  const Dataset ds = generate_dataset(spec);
  fs::create_directories(a.out);
  write_dataset(ds, a.out);
  std::cout << "wrote " << ds.samples.size() << " samples of " << spec.classes.size() << " classes to " << a.out << '\n';
  std::cout << "checksum " << RunManifest::hex64(directory_checksum(a.out)) << '\n';
  return 0;
}

// --- render-depth -------------------------------------------------------------

struct RenderArgs {
  std::string input;
  std::string shape;
  Index points = 512;
  std::uint64_t seed = 0;
  std::size_t views = 4;
  Index size = 64;
  Index splat = 3;
  std::vector<double> color;
  std::string out;
};

int render_depth_cmd(const RenderArgs& a) {
  if (a.input.empty() == a.shape.empty()) throw UsageError("give exactly one of --input or --shape");
  PointCloud pc;
  if (!a.input.empty()) {
    pc = normalize_unit_sphere(load_xyz(a.input));
  } else {
    const ClassSpec& spec = find_class_spec(a.shape);
    pc = generate_class_sample(spec, make_sample_id(a.shape, "render", 0), a.points, a.seed, 0.01);
  }
  if (!a.color.empty() && a.color.size() != 3) throw InvalidArgument("--color needs three values r,g,b");
  fs::create_directories(a.out);
  const auto maps = render_views(pc, camera_views(a.views), a.size, a.size, a.splat);
  for (std::size_t v = 0; v < maps.size(); ++v) {
    const std::string stem = "view" + std::to_string(v);
    export_image(maps[v], fs::path(a.out) / (stem + "_depth.pgm"));
    if (!a.color.empty()) {
      const auto img = compose_enhanced(maps[v], detect_background(maps[v]), {a.color[0], a.color[1], a.color[2]});
      export_image(img, fs::path(a.out) / (stem + "_enhanced.ppm"));
    }
  }
  std::cout << "rendered " << maps.size() << " views to " << a.out << '\n';
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string method = "both";
  std::string data;
  std::string out;
  bool quiet = false;
};

ExperimentConfig build_config(const TrainArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (a.seed) {
    cfg.train.seed = *a.seed;
    cfg.data.seed = *a.seed;
  }
  cfg.validate();
  return cfg;
}

int train_cmd(const TrainArgs& a) {
  ExperimentConfig cfg = build_config(a);
  const auto methods = parse_methods(a.method);
  const Dataset data = dataset_for(cfg, a.data);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text(out / "config.cfg", config_text(cfg));

  ExperimentHooks<Real> hooks;
  if (!a.quiet) hooks.progress = [](const std::string& s) { std::cerr << s << '\n'; };
  hooks.task_done = [&](Method m, std::size_t t, const RunState<Real>& st) {
    const auto ck = make_checkpoint(st, config_text(cfg));
    save_checkpoint(ck, out / (method_file("checkpoint", m, "") + "_task" + std::to_string(t) + ".ckpt"));
  };
  const auto res = run_experiment<Real>(cfg, methods, &data, hooks);

  for (const auto& mr : res.methods) {
    write_text(out / method_file("manifest", mr.method, ".txt"), mr.manifest.text());
    write_report(mr.report, out / method_file("report", mr.method, ".csv"), ReportFormat::csv);
    write_predictions(mr.final_eval.predictions, out / method_file("predictions", mr.method, ".csv"));
    const std::size_t last = mr.acc.size() - 1;
    // the final per-task archive doubles as the run checkpoint
    const Method owner = last > 0 ? mr.method : Method::cmgr;
    fs::copy_file(out / (method_file("checkpoint", owner, "") + "_task" + std::to_string(last) + ".ckpt"),
                  out / method_file("checkpoint", mr.method, ".ckpt"), fs::copy_options::overwrite_existing);
    if (mr.bnd) {
      write_histogram_csv(mr.bnd->histogram, out / "bnd_histogram.csv");
      std::ostringstream sweep;
      sweep << "threshold,routing_accuracy\n";
      for (const auto& [h, acc] : mr.bnd->sweep) sweep << format_double(h) << ',' << format_double(acc) << '\n';
      write_text(out / "bnd_sweep.csv", sweep.str());
    }
    std::cout << to_string(mr.method) << ": acc";
    for (double v : mr.acc) std::cout << ' ' << format_fixed(v);
    std::cout << "  AA " << format_fixed(mr.report.aa) << "  delta_A " << format_fixed(mr.report.delta_a) << '\n';
  }
  std::cout << "frozen components unchanged: " << (res.before == res.after ? "yes" : "no") << '\n';
  std::cout << "run written to " << out.string() << " (" << format_fixed(res.seconds) << " s)\n";
  return 0;
}

// --- eval / dump-features ---------------------------------------------------

struct RunArgs {
  std::string run;
  std::string method = "cmgr";
  std::string data;
  std::string out;
};

// A finished run rebuilt from its directory: config, data, and final state.
struct LoadedRun {
  ExperimentConfig cfg;
  Dataset data;
  IncrementalSchedule schedule;
  std::unique_ptr<FrozenModels<Real>> frozen;
  std::unique_ptr<SampleCache<Real>> cache;
  std::unique_ptr<RunContext<Real>> ctx;
  RunState<Real> state;
};

bool has_prefix(const Checkpoint& ck, const std::string& prefix) {
  for (const auto& e : ck.entries) {
    if (e.name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

std::unique_ptr<LoadedRun> load_run(const RunArgs& a) {
  auto r = std::make_unique<LoadedRun>();
  const fs::path dir(a.run);
  const Method m = parse_method(a.method);
  r->cfg = parse_config(read_text(dir / "config.cfg"));
  r->data = dataset_for(r->cfg, a.data);
  r->schedule = make_schedule(r->data, r->cfg);
  r->frozen = std::make_unique<FrozenModels<Real>>(r->cfg.model);
  r->cache = std::make_unique<SampleCache<Real>>(r->cfg.model, *r->frozen);
  r->ctx = std::make_unique<RunContext<Real>>(
      make_context(r->data, r->schedule, *r->frozen, *r->cache, r->cfg.train, r->cfg.loss, r->cfg.bnd));
  const Checkpoint ck = load_checkpoint(dir / method_file("checkpoint", m, ".ckpt"));
  r->state = init_run<Real>(r->cfg.model, r->cfg.train, m);
  load_store(ck, r->state.net.store, "net/");
  if (has_prefix(ck, "net_b/")) {
    r->state.net_b = r->state.net;
    load_store(ck, r->state.net_b->store, "net_b/");
    r->state.net_b->store.freeze_all();
    r->state.net_b_checksum = r->state.net_b->store.checksum();
  }
  if (has_prefix(ck, "bnd/")) {
    Rng rng(0);
    r->state.disc = Discriminator<Real>::create(r->cfg.model.encoder.dim, rng);
    load_store(ck, r->state.disc->store, "bnd/");
  }
  r->state.tasks_done = r->schedule.task_count();
  return r;
}

int eval_cmd(const RunArgs& a) {
  auto r = load_run(a);
  const std::size_t last = r->schedule.task_count() - 1;
  const auto ev = evaluate(*r->ctx, r->state, last);
  std::cout << "task " << last << " accuracy " << format_fixed(ev.accuracy, 2) << " over " << ev.predictions.size()
            << " test samples\n";
  const auto manifest = read_text(fs::path(a.run) / method_file("manifest", parse_method(a.method), ".txt"));
  const std::string key = "acc." + std::to_string(last) + " = ";
  const auto pos = manifest.find(key);
  if (pos != std::string::npos) {
    const std::string recorded = manifest.substr(pos + key.size(), manifest.find('\n', pos) - pos - key.size());
    std::cout << "recorded " << format_fixed(std::stod(recorded), 2) << " ("
              << (std::stod(recorded) == ev.accuracy ? "identical" : "differs") << ")\n";
  }
  if (!a.out.empty()) write_predictions(ev.predictions, a.out);
  return 0;
}

int dump_features_cmd(const RunArgs& a) {
  if (a.out.empty()) throw UsageError("--out is required");
  auto r = load_run(a);
  const auto& net = r->state.net;
  const Index d = net.config.encoder.dim;
  std::ostringstream os;
  os << "id,label";
  for (Index j = 0; j < d; ++j) os << ",fp" << j;
  for (Index j = 0; j < d; ++j) os << ",fhat" << j;
  os << '\n';
  std::size_t n = 0;
  for (const auto& cls : r->schedule.classes_upto(r->schedule.task_count() - 1)) {
    for (const auto& id : r->data.test.at(cls)) {
      const auto& in = r->cache->get(r->data, id);
      Tape<Real> tape;
      ParamBinding<Real> pb(tape, net.store);
      const auto f = net.forward(pb, in, nullptr);
      os << id << ',' << cls;
      for (Index j = 0; j < d; ++j) os << ',' << f.fp.value()(0, j);
      for (Index j = 0; j < d; ++j) os << ',' << f.f_hat.value()(0, j);
      os << '\n';
      ++n;
    }
  }
  write_text(a.out, os.str());
  std::cout << "wrote features of " << n << " test samples to " << a.out << '\n';
  return 0;
}

// --- metrics ----------------------------------------------------------------

struct MetricsArgs {
  std::vector<double> acc;
  std::vector<std::size_t> classes;
  std::string report;
  std::string format = "csv";
  std::string out;
};

int metrics_cmd(const MetricsArgs& a) {
  if (a.acc.empty() == a.report.empty()) throw UsageError("give exactly one of --acc or --report");
  const ReportFormat fmt = parse_report_format(a.format);
  const MetricsReport r = a.acc.empty() ? read_report(a.report, fmt) : make_report(a.acc, a.classes);
  std::cout << "AA = " << format_fixed(r.aa) << '\n';
  if (r.task_count() >= 2) std::cout << "delta_A = " << format_fixed(r.delta_a) << '\n';
  if (!a.out.empty()) write_report(r, a.out, fmt);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cmgr: few-shot class-incremental point cloud classification"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic point cloud dataset");
  c_gen->add_option("--classes", gd.classes, "Use the first N catalog classes");
  c_gen->add_option("--class-list", gd.class_list, "Explicit class names")->delimiter(',');
  c_gen->add_option("--per-class", gd.per_class, "Training samples per class");
  c_gen->add_option("--test-per-class", gd.test_per_class, "Test samples per class");
  c_gen->add_option("--points", gd.points, "Points per cloud");
  c_gen->add_option("--jitter", gd.jitter, "Surface noise standard deviation");
  c_gen->add_option("--seed", gd.seed, "Random seed");
  c_gen->add_option("--out", gd.out, "Output directory")->required();

  RenderArgs ra;
  auto* c_render = app.add_subcommand("render-depth", "Render depth maps (and colored images) of one cloud");
  c_render->add_option("--input", ra.input, "Point cloud file (.xyz)");
  c_render->add_option("--shape", ra.shape, "Catalog class to generate instead of --input");
  c_render->add_option("--points", ra.points, "Points when generating");
  c_render->add_option("--seed", ra.seed, "Seed when generating");
  c_render->add_option("--views", ra.views, "Number of views");
  c_render->add_option("--size", ra.size, "Image height and width");
  c_render->add_option("--splat", ra.splat, "Splat size in pixels");
  c_render->add_option("--color", ra.color, "Background color r,g,b in [0,1]")->delimiter(',');
  c_render->add_option("--out", ra.out, "Output directory")->required();

  TrainArgs ta;
  auto* c_train = app.add_subcommand("train", "Run base and incremental training");
  c_train->add_option("--config", ta.config, "Config file (section.key = value lines)");
  c_train->add_option("--set", ta.sets, "Override a config key: key=value (repeatable)");
  c_train->add_option("--seed", ta.seed, "Seed for data, schedule and training");
  c_train->add_option("--method", ta.method, "cmgr, finetune or both")
      ->check(CLI::IsMember({"cmgr", "finetune", "both"}));
  c_train->add_option("--data", ta.data, "Dataset directory (default: generate from config)");
  c_train->add_option("--out", ta.out, "Run directory")->required();
  c_train->add_flag("--quiet", ta.quiet, "No progress output");

  RunArgs ea;
  auto* c_eval = app.add_subcommand("eval", "Re-evaluate a finished run from its checkpoint");
  c_eval->add_option("--run", ea.run, "Run directory written by train")->required();
  c_eval->add_option("--method", ea.method, "cmgr or finetune")->check(CLI::IsMember({"cmgr", "finetune"}));
  c_eval->add_option("--data", ea.data, "Dataset directory used for training, if any");
  c_eval->add_option("--out", ea.out, "Write per-sample predictions (CSV)");

  RunArgs da;
  auto* c_dump = app.add_subcommand("dump-features", "Export point and rectified features of test samples");
  c_dump->add_option("--run", da.run, "Run directory written by train")->required();
  c_dump->add_option("--method", da.method, "cmgr or finetune")->check(CLI::IsMember({"cmgr", "finetune"}));
  c_dump->add_option("--data", da.data, "Dataset directory used for training, if any");
  c_dump->add_option("--out", da.out, "Output CSV")->required();

  MetricsArgs ma;
  auto* c_metrics = app.add_subcommand("metrics", "Average accuracy and relative degradation");
  c_metrics->add_option("--acc", ma.acc, "Per-task accuracies in percent")->delimiter(',');
  c_metrics->add_option("--classes", ma.classes, "Classes per task")->delimiter(',');
  c_metrics->add_option("--report", ma.report, "Read accuracies from a report file");
  c_metrics->add_option("--format", ma.format, "csv or text")->check(CLI::IsMember({"csv", "text", "structured-text"}));
  c_metrics->add_option("--out", ma.out, "Write a report file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_gen->parsed()) return gen_data(gd);
    if (c_render->parsed()) return render_depth_cmd(ra);
    if (c_train->parsed()) return train_cmd(ta);
    if (c_eval->parsed()) return eval_cmd(ea);
    if (c_dump->parsed()) return dump_features_cmd(da);
    if (c_metrics->parsed()) return metrics_cmd(ma);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n' << app.help();
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << " (line " << e.line() << ")\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << " [" << e.path() << "]\n";
    return 1;
  } catch (const DivisionByZero& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DegenerateInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
