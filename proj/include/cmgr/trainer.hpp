#pragma once

// Base and incremental training, discriminator side-training, evaluation over
// the cumulative test pool and the run manifest.

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cmgr/bnd.hpp"
#include "cmgr/core/optim.hpp"
#include "cmgr/model.hpp"

namespace cmgr {

struct TrainConfig {
  std::size_t base_epochs = 10;
  std::size_t inc_epochs = 20;
  double lr_start = 1e-3;
  double lr_end = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  bool replay = true;

  void validate() const {
    if (base_epochs < 1 || inc_epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
    if (batch < 1) throw InvalidArgument("train: batch must be >= 1");
    if (!(lr_end > 0.0) || lr_start < lr_end) throw InvalidArgument("train: need lr_start >= lr_end > 0");
    if (weight_decay < 0.0) throw InvalidArgument("train: weight_decay must be >= 0");
  }
};

// cmgr: discriminator routing between Net_B and Net with exemplar replay.
// finetune: the same network trained on each task alone, scored over all seen classes.
enum class Method { cmgr, finetune };

inline std::string to_string(Method m) { return m == Method::cmgr ? "cmgr" : "finetune"; }

inline Method parse_method(const std::string& s) {
  if (s == "cmgr") return Method::cmgr;
  if (s == "finetune") return Method::finetune;
  throw InvalidArgument("unknown method '" + s + "'");
}

struct PredictionRecord {
  std::string id;
  std::string label;
  std::string predicted;
  Route route = Route::novel;
  double bnd_score = 0.0;
  bool base_label = false;
};

struct EvalResult {
  double accuracy = 0.0;  // percent
  std::vector<PredictionRecord> predictions;
};

// Recount of a prediction log: correct / total as a percentage.
inline double micro_accuracy(const std::vector<PredictionRecord>& log) {
  if (log.empty()) throw InvalidArgument("micro_accuracy: empty prediction log");
  std::size_t ok = 0;
  for (const auto& p : log) ok += p.label == p.predicted ? 1 : 0;
  return 100.0 * static_cast<double>(ok) / static_cast<double>(log.size());
}

template <typename T>
struct RoutedPrediction {
  Route route = Route::novel;
  double bnd_score = 0.0;
  LogitsBundle logits;
};

template <typename T>
struct RunState {
  Method method = Method::cmgr;
  CmgrNet<T> net;
  std::optional<CmgrNet<T>> net_b;
  std::optional<Discriminator<T>> disc;
  ExemplarStore exemplars;
  std::vector<double> acc;
  std::size_t tasks_done = 0;
  Rng rng{0};
  std::uint64_t net_b_checksum = 0;
  std::vector<std::vector<double>> epoch_loss;  // per task, per epoch
  std::vector<double> bnd_final_loss;
  EvalResult last_eval;
};

// Parameter-independent inputs for every sample a run touches.
template <typename T>
class SampleCache {
 public:
  SampleCache(const ModelConfig& cfg, const FrozenModels<T>& frozen) : cfg_(cfg), frozen_(&frozen) {}

  const SampleInputs<T>& get(const Dataset& data, const std::string& id) {
    auto it = cache_.find(id);
    if (it == cache_.end()) it = cache_.emplace(id, prepare_sample(data.at(id), cfg_, *frozen_)).first;
    return it->second;
  }

  std::size_t size() const { return cache_.size(); }

 private:
  ModelConfig cfg_;
  const FrozenModels<T>* frozen_;
  std::map<std::string, SampleInputs<T>> cache_;
};

// Everything a run reads but never writes.
template <typename T>
struct RunContext {
  const Dataset& data;
  const IncrementalSchedule& schedule;
  const FrozenModels<T>& frozen;
  SampleCache<T>& cache;
  PrototypeMatrix prototypes;  // every class of the schedule, schedule order
  TrainConfig train;
  LossConfig loss;
  BndConfig bnd;

  PrototypeMatrix classes(const std::vector<std::string>& names) const { return prototypes.subset(names); }
};

template <typename T>
RunContext<T> make_context(const Dataset& data, const IncrementalSchedule& schedule, const FrozenModels<T>& frozen,
                           SampleCache<T>& cache, const TrainConfig& train, const LossConfig& loss,
                           const BndConfig& bnd) {
  train.validate();
  bnd.validate();
  if (schedule.tasks.empty()) throw InvalidArgument("schedule has no tasks");
  return RunContext<T>{data,  schedule, frozen, cache, frozen.vision.prototypes(schedule.classes_upto(schedule.task_count() - 1)),
                       train, loss,     bnd};
}

namespace detail {

// One epoch over `items` in the given order, batched.
template <typename T>
double run_epoch(RunContext<T>& ctx, CmgrNet<T>& net, Adam<T>& opt, const std::vector<std::string>& ids,
                 const PrototypeMatrix& classes, double lr, bool use_lc) {
  double total = 0.0;
  for (std::size_t start = 0; start < ids.size(); start += ctx.train.batch) {
    const std::size_t end = std::min(ids.size(), start + ctx.train.batch);
    std::vector<const SampleInputs<T>*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&ctx.cache.get(ctx.data, ids[i]));
    net.store.zero_grad();
    Tape<T> tape;
    ParamBinding<T> pb(tape, net.store);
    auto loss = batch_loss(pb, net, batch, classes, ctx.frozen.vision, ctx.loss, use_lc);
    tape.backward(loss.total);
    opt.step(net.store, lr);
    total += static_cast<double>(loss.total.scalar()) * static_cast<double>(end - start);
  }
  return total / static_cast<double>(ids.size());
}

template <typename T>
void check_finite(const CmgrNet<T>& net) {
  if (!net.store.all_finite()) throw Error("training diverged: non-finite parameters");
}

template <typename T>
std::vector<std::pair<std::string, RowVec<T>>> class_features(RunContext<T>& ctx, const CmgrNet<T>& net,
                                                              const std::vector<std::string>& ids) {
  std::vector<std::pair<std::string, RowVec<T>>> out;
  for (const auto& id : ids) out.emplace_back(id, point_feature(net, ctx.cache.get(ctx.data, id)));
  return out;
}

template <typename T>
void add_exemplars(RunContext<T>& ctx, RunState<T>& st, const Task& task) {
  std::map<std::string, std::vector<std::pair<std::string, RowVec<T>>>> feats;
  for (const auto& cls : task.classes) feats[cls] = class_features(ctx, st.net, task.samples.at(cls));
  auto picked = select_exemplars(feats, st.exemplars.per_class);
  for (auto& [cls, ids] : picked.exemplars) st.exemplars.exemplars[cls] = ids;
}

}  // namespace detail

template <typename T>
RunState<T> init_run(const ModelConfig& model, const TrainConfig& train, Method method) {
  RunState<T> st;
  st.method = method;
  st.net = CmgrNet<T>::create(model, fnv1a("net", train.seed));
  st.rng = Rng(train.seed);
  return st;
}

// Scores one sample. Task 0, and every task of the fine-tune method, use Net
// over all classes seen so far. Otherwise the discriminator sends the sample
// to Net_B over base classes or to Net over the novel classes.
template <typename T>
RoutedPrediction<T> predict_with_routing(RunContext<T>& ctx, const RunState<T>& st, const SampleInputs<T>& in,
                                         std::size_t upto_task) {
  RoutedPrediction<T> p;
  if (st.method == Method::finetune || upto_task == 0) {
    p.logits = infer(st.net, in, ctx.frozen.vision, ctx.classes(ctx.schedule.classes_upto(upto_task))).logits;
    p.route = upto_task == 0 ? Route::base : Route::novel;
    return p;
  }
  if (!st.net_b) throw StateError("predict_with_routing: no frozen base network");
  if (!st.disc) throw StateError("predict_with_routing: discriminator not trained");
  const RowVec<T> fp = point_feature(*st.net_b, in);
  p.bnd_score = st.disc->score(fp);
  p.route = route(p.bnd_score, ctx.bnd.threshold);
  if (p.route == Route::base) {
    p.logits = infer(*st.net_b, in, ctx.frozen.vision, ctx.classes(ctx.schedule.tasks.front().classes)).logits;
  } else {
    p.logits = infer(st.net, in, ctx.frozen.vision, ctx.classes(ctx.schedule.novel_classes_upto(upto_task))).logits;
  }
  return p;
}

// Micro-accuracy over the pooled test split of every class seen up to `upto_task`.
template <typename T>
EvalResult evaluate(RunContext<T>& ctx, const RunState<T>& st, std::size_t upto_task) {
  if (upto_task >= st.tasks_done) throw StateError("evaluate: task not trained yet");
  const auto& base = ctx.schedule.tasks.front().classes;
  const std::set<std::string> base_set(base.begin(), base.end());
  EvalResult r;
  for (const auto& cls : ctx.schedule.classes_upto(upto_task)) {
    auto it = ctx.data.test.find(cls);
    if (it == ctx.data.test.end() || it->second.empty()) {
      throw InvalidArgument("evaluate: no test split for class '" + cls + "'");
    }
    for (const auto& id : it->second) {
      const auto& in = ctx.cache.get(ctx.data, id);
      auto p = predict_with_routing(ctx, st, in, upto_task);
      r.predictions.push_back({id, in.label, p.logits.predicted(), p.route, p.bnd_score, base_set.count(cls) != 0});
    }
  }
  r.accuracy = micro_accuracy(r.predictions);
  return r;
}

template <typename T>
void train_base(RunContext<T>& ctx, RunState<T>& st) {
  if (st.tasks_done != 0) throw StateError("train_base: base task already trained");
  const Task& base = ctx.schedule.tasks.front();
  if (base.sample_count() == 0) throw InvalidArgument("train_base: empty base task");
  std::vector<std::string> ids;
  for (const auto& cls : base.classes) {
    for (const auto& id : base.samples.at(cls)) ids.push_back(id);
  }
  const auto classes = ctx.classes(base.classes);
  Adam<T> opt(ctx.train.weight_decay);
  Rng rng = st.rng.fork(0xBA5E);
  std::vector<double> losses;
  const std::size_t E = ctx.train.base_epochs;
  for (std::size_t e = 0; e < E; ++e) {
    rng.shuffle(ids);
    const double lr = cosine_lr(e, std::max<std::size_t>(1, E - 1), ctx.train.lr_start, ctx.train.lr_end);
    losses.push_back(detail::run_epoch(ctx, st.net, opt, ids, classes, lr, true));
    detail::check_finite(st.net);
  }
  st.epoch_loss.push_back(losses);
  st.net_b = st.net;
  st.net_b->store.freeze_all();
  st.net_b_checksum = st.net_b->store.checksum();
  detail::add_exemplars(ctx, st, base);
  st.tasks_done = 1;
  st.last_eval = evaluate(ctx, st, 0);
  st.acc.push_back(st.last_eval.accuracy);
}

// Negatives: the task's novel samples plus exemplars of earlier novel
// classes, each with `replicas - 1` augmented copies. Positives: augmented
// copies of the base exemplars, cycled until both sides are the same size.
// Features come from Net_B.
template <typename T>
void train_discriminator(RunContext<T>& ctx, RunState<T>& st, std::size_t task_index) {
  if (!st.net_b) throw StateError("train_discriminator: no frozen base network");
  std::vector<std::string> neg;
  const Task& task = ctx.schedule.tasks.at(task_index);
  for (const auto& cls : task.classes) {
    for (const auto& id : task.samples.at(cls)) neg.push_back(id);
  }
  for (const auto& cls : ctx.schedule.novel_classes_upto(task_index - 1)) {
    for (const auto& id : st.exemplars.exemplars.at(cls)) neg.push_back(id);
  }
  std::vector<std::string> pos;
  for (const auto& cls : ctx.schedule.tasks.front().classes) {
    for (const auto& id : st.exemplars.exemplars.at(cls)) pos.push_back(id);
  }
  Rng rng = st.rng.fork(0xB0D0 + task_index);
  const std::size_t reps = ctx.bnd.replicas;
  const std::size_t n_side = std::max(neg.size() * reps, pos.size());
  const Index d = st.net.config.encoder.dim;
  Mat<T> x(static_cast<Index>(2 * n_side), d);
  std::vector<int> y;
  Index r = 0;
  // Copy k of a sample: k == 0 is the stored sample itself.
  auto add = [&](const std::string& id, std::size_t k, int label) {
    if (k == 0) {
      x.row(r++) = point_feature(*st.net_b, ctx.cache.get(ctx.data, id));
    } else {
      PointCloud pc = augment_cloud(ctx.data.at(id), rng);
      x.row(r++) = point_feature(*st.net_b, prepare_sample(pc, st.net.config, ctx.frozen));
    }
    y.push_back(label);
  };
  for (std::size_t i = 0; i < n_side; ++i) add(neg[i % neg.size()], i / neg.size(), 0);
  for (std::size_t i = 0; i < n_side; ++i) add(pos[i % pos.size()], i / pos.size(), 1);
  st.disc = Discriminator<T>::create(d, rng);
  auto log = train_bnd(*st.disc, x, y, ctx.bnd, rng);
  st.bnd_final_loss.push_back(log.epoch_loss.back());
}

template <typename T>
void train_incremental(RunContext<T>& ctx, RunState<T>& st, std::size_t task_index) {
  if (task_index == 0 || task_index != st.tasks_done) {
    throw StateError("train_incremental: expected task " + std::to_string(st.tasks_done) + ", got " +
                     std::to_string(task_index));
  }
  if (task_index >= ctx.schedule.task_count()) throw InvalidArgument("train_incremental: no such task");
  const Task& task = ctx.schedule.tasks[task_index];
  if (st.method == Method::cmgr) train_discriminator(ctx, st, task_index);

  std::vector<std::string> novel;
  for (const auto& cls : task.classes) {
    for (const auto& id : task.samples.at(cls)) novel.push_back(id);
  }
  std::vector<std::string> replay;
  if (st.method == Method::cmgr && ctx.train.replay) {
    for (const auto& cls : ctx.schedule.classes_upto(task_index - 1)) {
      for (const auto& id : st.exemplars.exemplars.at(cls)) replay.push_back(id);
    }
  }
  const auto classes = ctx.classes(ctx.schedule.classes_upto(task_index));
  Adam<T> opt(ctx.train.weight_decay);
  Rng rng = st.rng.fork(0x1C00 + task_index);
  std::vector<double> losses;
  const std::size_t E = ctx.train.inc_epochs;
  std::size_t cursor = 0;
  for (std::size_t e = 0; e < E; ++e) {
    rng.shuffle(novel);
    std::vector<std::string> ids;
    // Alternate novel samples with exemplars, cycling through the exemplars.
    for (const auto& id : novel) {
      ids.push_back(id);
      if (!replay.empty()) {
        if (cursor % replay.size() == 0) rng.shuffle(replay);
        ids.push_back(replay[cursor++ % replay.size()]);
      }
    }
    const double lr = cosine_lr(e, std::max<std::size_t>(1, E - 1), ctx.train.lr_start, ctx.train.lr_end);
    losses.push_back(detail::run_epoch(ctx, st.net, opt, ids, classes, lr, ctx.loss.lc_incremental));
    detail::check_finite(st.net);
  }
  st.epoch_loss.push_back(losses);
  detail::add_exemplars(ctx, st, task);
  st.tasks_done = task_index + 1;
  st.last_eval = evaluate(ctx, st, task_index);
  st.acc.push_back(st.last_eval.accuracy);
}

// --- manifest -------------------------------------------------------------

struct ManifestEntry {
  std::string key;
  std::string value;
};

struct RunManifest {
  std::vector<ManifestEntry> entries;

  void add(const std::string& key, const std::string& value) { entries.push_back({key, value}); }

  std::string body() const {
    std::ostringstream os;
    for (const auto& e : entries) os << e.key << " = " << e.value << '\n';
    return os.str();
  }

  std::uint64_t checksum() const { return fnv1a(body()); }

  // Body followed by a checksum line covering it.
  std::string text() const {
    std::ostringstream os;
    os << body() << "manifest.checksum = " << hex64(checksum()) << '\n';
    return os.str();
  }

  static std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
  }
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace cmgr
