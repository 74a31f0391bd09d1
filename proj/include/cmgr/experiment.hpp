#pragma once

// End-to-end runs: data generation, schedule, base training shared between
// methods, incremental tasks, metrics and the manifest.

#include <chrono>
#include <map>
#include <string>
#include <vector>

#include "cmgr/checkpoint.hpp"
#include "cmgr/config.hpp"
#include "cmgr/metrics.hpp"

namespace cmgr {

struct FrozenChecksums {
  std::uint64_t depth = 0;
  std::uint64_t vision = 0;
  std::uint64_t prototypes = 0;
  std::uint64_t net_b = 0;

  bool operator==(const FrozenChecksums&) const = default;
};

struct BndSummary {
  double binary_accuracy = 0.0;  // percent, at the configured threshold
  std::vector<std::pair<double, double>> sweep;  // (h, routing accuracy percent)
  std::vector<std::size_t> histogram;            // ten bins over [0, 1]
  double outer_mass = 0.0;                       // fraction in the first and last bins
};

struct MethodResult {
  Method method = Method::cmgr;
  std::vector<double> acc;
  MetricsReport report;
  EvalResult final_eval;
  std::optional<BndSummary> bnd;
  RunManifest manifest;
};

struct ExperimentResult {
  std::vector<MethodResult> methods;
  FrozenChecksums before;
  FrozenChecksums after;
  double seconds = 0.0;

  const MethodResult& get(Method m) const {
    for (const auto& r : methods) {
      if (r.method == m) return r;
    }
    throw InvalidArgument("method not part of this experiment");
  }
};

template <typename T>
FrozenChecksums frozen_checksums(const FrozenModels<T>& frozen, const PrototypeMatrix& prototypes,
                                 std::uint64_t net_b) {
  return {frozen.depth.checksum(), frozen.vision.checksum(), prototypes.checksum(), net_b};
}

inline BndSummary summarize_bnd(const std::vector<PredictionRecord>& log, double threshold) {
  BndSummary s;
  std::vector<double> scores;
  auto routing_accuracy = [&](double h) {
    std::size_t ok = 0;
    for (const auto& p : log) ok += (route(p.bnd_score, h) == Route::base) == p.base_label ? 1 : 0;
    return 100.0 * static_cast<double>(ok) / static_cast<double>(log.size());
  };
  for (const auto& p : log) scores.push_back(p.bnd_score);
  s.binary_accuracy = routing_accuracy(threshold);
  for (int i = 0; i <= 9; ++i) {
    const double h = 0.05 + 0.05 * i;
    s.sweep.emplace_back(h, routing_accuracy(h));
  }
  s.histogram = score_histogram(scores, 10);
  s.outer_mass = static_cast<double>(s.histogram.front() + s.histogram.back()) / static_cast<double>(scores.size());
  return s;
}

inline std::vector<ClassSamples> class_samples(const Dataset& data, const std::vector<std::string>& classes) {
  std::vector<ClassSamples> out;
  for (const auto& c : classes) {
    auto it = data.train.find(c);
    if (it == data.train.end()) throw InvalidArgument("dataset has no class '" + c + "'");
    out.push_back({c, it->second});
  }
  return out;
}

inline IncrementalSchedule make_schedule(const Dataset& data, const ExperimentConfig& cfg) {
  return build_schedule(class_samples(data, cfg.data.classes), cfg.data.base_classes, cfg.data.tasks, cfg.data.shots,
                        fnv1a("schedule", cfg.train.seed), cfg.data.ways);
}

namespace detail {

template <typename T>
RunManifest build_manifest(const ExperimentConfig& cfg, Method method, const IncrementalSchedule& schedule,
                           const RunState<T>& st, const FrozenChecksums& before, const FrozenChecksums& after,
                           const MetricsReport& report) {
  RunManifest m;
  ExperimentConfig echo = cfg;
  echo.method = method;
  for (const auto& [k, v] : config_entries(echo)) m.add("config." + k, v);
  m.add("seed.train", format_double(static_cast<double>(cfg.train.seed)));
  m.add("seed.data", format_double(static_cast<double>(cfg.data.seed)));
  for (std::size_t t = 0; t < schedule.task_count(); ++t) m.add("schedule.task." + std::to_string(t), join(schedule.tasks[t].classes));
  m.add("checksum.depth_stub", RunManifest::hex64(before.depth));
  m.add("checksum.vision_stub", RunManifest::hex64(before.vision));
  m.add("checksum.prototypes", RunManifest::hex64(before.prototypes));
  m.add("checksum.net_b", RunManifest::hex64(st.net_b_checksum));
  m.add("checksum.net", RunManifest::hex64(st.net.store.checksum()));
  m.add("checksum.frozen_unchanged", before == after ? "true" : "false");
  for (std::size_t t = 0; t < report.acc.size(); ++t) m.add("acc." + std::to_string(t), format_double(report.acc[t]));
  m.add("metrics.AA", format_fixed(report.aa));
  m.add("metrics.delta_A", format_fixed(report.delta_a));
  return m;
}

}  // namespace detail

template <typename T>
struct ExperimentHooks {
  std::function<void(const std::string&)> progress;
  // Called after every completed task of every method (the base task once, as cmgr).
  std::function<void(Method, std::size_t task, const RunState<T>&)> task_done;
};

// Net, Net_B and the discriminator of a run state, entry names prefixed
// net/, net_b/ and bnd/.
template <typename T>
Checkpoint make_checkpoint(const RunState<T>& st, const std::string& manifest) {
  Checkpoint ck;
  ck.manifest = manifest;
  add_store(ck, st.net.store, "net/");
  if (st.net_b) add_store(ck, st.net_b->store, "net_b/");
  if (st.disc) add_store(ck, st.disc->store, "bnd/");
  return ck;
}

// Runs the requested methods on one seed. Methods share the base task: the
// state after base training is copied for each method.
template <typename T = float>
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::vector<Method>& methods,
                                const Dataset* dataset = nullptr, const ExperimentHooks<T>& hooks = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  auto say = [&](const std::string& s) {
    if (hooks.progress) hooks.progress(s);
  };
  Dataset generated;
  if (!dataset) {
    generated = generate_dataset(cfg.data.synthetic());
    dataset = &generated;
  }
  const IncrementalSchedule schedule = make_schedule(*dataset, cfg);
  FrozenModels<T> frozen(cfg.model);
  SampleCache<T> cache(cfg.model, frozen);
  auto ctx = make_context(*dataset, schedule, frozen, cache, cfg.train, cfg.loss, cfg.bnd);

  ExperimentResult res;
  res.before = frozen_checksums(frozen, ctx.prototypes, 0);

  RunState<T> base = init_run<T>(cfg.model, cfg.train, Method::cmgr);
  train_base(ctx, base);
  res.before.net_b = base.net_b_checksum;
  if (hooks.task_done) hooks.task_done(Method::cmgr, 0, base);
  say("base task: acc " + format_fixed(base.acc.back()));

  std::vector<RunState<T>> states;
  for (Method m : methods) {
    RunState<T> st = base;
    st.method = m;
    for (std::size_t t = 1; t < schedule.task_count(); ++t) {
      train_incremental(ctx, st, t);
      if (hooks.task_done) hooks.task_done(m, t, st);
      say(to_string(m) + " task " + std::to_string(t) + ": acc " + format_fixed(st.acc.back()));
    }
    states.push_back(std::move(st));
  }
  res.after = frozen_checksums(frozen, frozen.vision.prototypes(schedule.classes_upto(schedule.task_count() - 1)),
                               states.empty() ? base.net_b->store.checksum() : states.front().net_b->store.checksum());
  for (const auto& st : states) {
    if (st.net_b->store.checksum() != res.before.net_b) res.after.net_b = st.net_b->store.checksum();
  }
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const auto& st = states[i];
    MethodResult mr;
    mr.method = methods[i];
    mr.acc = st.acc;
    std::vector<std::size_t> ncls;
    for (std::size_t t = 0; t < schedule.task_count(); ++t) ncls.push_back(schedule.classes_upto(t).size());
    mr.report = make_report(st.acc, ncls);
    mr.final_eval = st.last_eval;
    if (methods[i] == Method::cmgr && schedule.task_count() > 1) mr.bnd = summarize_bnd(st.last_eval.predictions, cfg.bnd.threshold);
    mr.manifest = detail::build_manifest(cfg, methods[i], schedule, st, res.before, res.after, mr.report);
    res.methods.push_back(std::move(mr));
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace cmgr
