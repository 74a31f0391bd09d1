#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace cmgr;
using cmgr::testing::random_mat;

namespace {

TEST(Relabel, Mapping) {
  const std::set<std::string> base{"a", "b"}, novel{"c", "d"};
  EXPECT_EQ(relabel_binary({"a", "b", "a"}, base, novel), (std::vector<int>{1, 1, 1}));
  EXPECT_EQ(relabel_binary({"c", "d"}, base, novel), (std::vector<int>{0, 0}));
  EXPECT_EQ(relabel_binary({"d", "a", "c", "b"}, base, novel), (std::vector<int>{0, 1, 0, 1}));
  EXPECT_THROW(relabel_binary({"e"}, base, novel), InvalidArgument);
}

TEST(BndLoss, ClosedForms) {
  EXPECT_NEAR(bnd_loss<double>({0.5, 0.5}, {1, 0}), std::log(2.0), 1e-15);
  EXPECT_LT(bnd_loss<double>({1.0 - 1e-9, 1e-9}, {1, 0}), 1e-6);
  EXPECT_NEAR(bnd_loss<double>({0.2, 0.7}, {1, 1}), -(std::log(0.2) + std::log(0.7)) / 2.0, 1e-15);
  EXPECT_THROW(bnd_loss<double>({0.0, 0.5}, {1, 0}), InvalidArgument);
  EXPECT_THROW(bnd_loss<double>({1.0}, {1}), InvalidArgument);
  EXPECT_THROW(bnd_loss<double>({0.5}, {2}), InvalidArgument);
  EXPECT_THROW(bnd_loss<double>({0.5, 0.5}, {1}), InvalidArgument);
}

TEST(BndLoss, OracleAndGradient) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Mat<double> s(8, 1);
    std::vector<int> y;
    double oracle = 0.0;
    for (Index i = 0; i < 8; ++i) {
      s(i, 0) = rng.uniform(0.02, 0.98);
      y.push_back(static_cast<int>(rng.index(2)));
      oracle -= y.back() ? std::log(s(i, 0)) : std::log(1.0 - s(i, 0));
    }
    oracle /= 8.0;
    std::vector<double> sv(s.data(), s.data() + 8);
    const double l = bnd_loss(sv, y);
    EXPECT_NEAR(l, oracle, 1e-7);
    EXPECT_GE(l, 0.0);
    auto f = [&](Tape<double>&, Var<double> v) { return bnd_loss(v, y); };
    EXPECT_LT(cmgr::testing::check_input_gradient(f, s, 1e-6).rel_error, 1e-5);
  }
}

TEST(Route, StrictThreshold) {
  EXPECT_EQ(route(0.1, 0.1), Route::novel);
  EXPECT_EQ(route(0.99, 0.1), Route::base);
  EXPECT_EQ(route(std::nextafter(0.1, 1.0), 0.1), Route::base);
  EXPECT_EQ(route(0.0, 0.1), Route::novel);
  EXPECT_EQ(to_string(Route::base), "base");
}

TEST(Discriminator, TapeMatchesPlainScore) {
  Rng rng(2);
  auto d = Discriminator<double>::create(6, rng);
  const Mat<double> x = random_mat(5, 6, rng, 2.0);
  d.fit_input_scaling(x);
  Tape<double> tape;
  ParamBinding<double> pb(tape, static_cast<const ParamStore<double>&>(d.store));
  const Mat<double> s = d(pb, tape.constant(x)).value();
  const auto plain = d.score(x);
  for (Index i = 0; i < 5; ++i) {
    EXPECT_NEAR(s(i, 0), plain[static_cast<std::size_t>(i)], 1e-12);
    EXPECT_GT(plain[static_cast<std::size_t>(i)], 0.0);
    EXPECT_LT(plain[static_cast<std::size_t>(i)], 1.0);
  }
  const Mat<double> z = d.scale_inputs(x);
  EXPECT_LT(z.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((z.array().square().colwise().mean() - 1.0).abs().maxCoeff(), 1e-9);
  EXPECT_TRUE(d.store.frozen(d.input_mean));
  EXPECT_TRUE(d.store.frozen(d.input_scale));
}

TEST(Discriminator, FullGradient) {
  Rng rng(3);
  auto d = Discriminator<double>::create(6, rng);
  const Mat<double> x = random_mat(8, 6, rng);
  const std::vector<int> y{1, 0, 1, 1, 0, 0, 1, 0};
  auto f = [&](ParamBinding<double>& pb) { return bnd_loss(d(pb, pb.tape().constant(x)), y); };
  EXPECT_LT(cmgr::testing::check_param_gradient(f, d.store, d.l1.weight).rel_error, 1e-5);
  EXPECT_LT(cmgr::testing::check_param_gradient(f, d.store, d.l2.bias).rel_error, 1e-5);
}

// Two Gaussian clusters: a trained discriminator separates them and its
// routing accuracy barely moves over a wide threshold range.
TEST(TrainBnd, ToyThresholdSweepIsFlat) {
  Rng rng(4);
  const Index n = 200, dim = 8;
  Mat<double> x(2 * n, dim);
  std::vector<int> y;
  for (Index i = 0; i < 2 * n; ++i) {
    const int label = i < n ? 1 : 0;
    for (Index j = 0; j < dim; ++j) x(i, j) = rng.normal() + (label ? 1.5 : -1.5);
    y.push_back(label);
  }
  auto d = Discriminator<double>::create(dim, rng);
  BndConfig cfg;
  cfg.epochs = 60;
  cfg.lr = 1e-2;
  const auto log = train_bnd(d, x, y, cfg, rng);
  ASSERT_EQ(log.epoch_loss.size(), 60u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
  const auto scores = d.score(x);
  auto acc = [&](double h) {
    int ok = 0;
    for (std::size_t i = 0; i < y.size(); ++i) ok += (route(scores[i], h) == Route::base) == (y[i] == 1);
    return 100.0 * ok / static_cast<double>(y.size());
  };
  const double ref = acc(0.1);
  EXPECT_GE(ref, 99.0);
  for (double h = 0.05; h <= 0.5 + 1e-12; h += 0.05) EXPECT_NEAR(acc(h), ref, 1.0) << "h=" << h;
  const auto hist = score_histogram(scores, 10);
  EXPECT_EQ(std::accumulate(hist.begin(), hist.end(), std::size_t{0}), scores.size());
  EXPECT_GE(static_cast<double>(hist.front() + hist.back()) / static_cast<double>(scores.size()), 0.9);
}

TEST(TrainBnd, DeterministicAndTouchesOnlyItsStore) {
  Rng data(5);
  const Mat<double> x = random_mat(20, 4, data);
  std::vector<int> y;
  for (int i = 0; i < 20; ++i) y.push_back(i % 2);
  BndConfig cfg;
  Rng r1(6), r2(6);
  auto a = Discriminator<double>::create(4, r1);
  auto b = Discriminator<double>::create(4, r2);
  const auto la = train_bnd(a, x, y, cfg, r1);
  const auto lb = train_bnd(b, x, y, cfg, r2);
  EXPECT_EQ(la.epoch_loss, lb.epoch_loss);
  EXPECT_EQ(a.store.checksum(), b.store.checksum());
  cfg.replicas = 0;
  EXPECT_THROW(train_bnd(a, x, y, cfg, r1), InvalidArgument);
  cfg = BndConfig{};
  EXPECT_THROW(train_bnd(a, x, std::vector<int>(3, 1), cfg, r1), InvalidArgument);
}

TEST(Histogram, BinsAndCsv) {
  const auto h = score_histogram({0.0, 0.05, 0.1, 0.55, 0.999, 1.0}, 10);
  EXPECT_EQ(h, (std::vector<std::size_t>{2, 1, 0, 0, 0, 1, 0, 0, 0, 2}));
  cmgr::testing::TempDir dir("hist");
  write_histogram_csv(h, dir.path() / "h.csv");
  std::ifstream in(dir.path() / "h.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "bin,count");
  std::getline(in, line);
  EXPECT_EQ(line, "0,2");
  EXPECT_THROW(write_histogram_csv(h, dir.path() / "missing" / "h.csv"), IoError);
}

using FeatureMap = std::map<std::string, std::vector<std::pair<std::string, RowVec<double>>>>;

TEST(SelectExemplars, HandCases) {
  FeatureMap one;
  one["a"] = {{"only", RowVec<double>::Ones(3)}};
  EXPECT_EQ(select_exemplars(one, 1).exemplars.at("a"), (std::vector<std::string>{"only"}));
  FeatureMap three;
  RowVec<double> p(2), q(2), m(2);
  p << 0, 0;
  q << 2, 2;
  m << 1, 1;
  three["b"] = {{"p", p}, {"q", q}, {"m", m}};
  EXPECT_EQ(select_exemplars(three, 1).exemplars.at("b"), (std::vector<std::string>{"m"}));
  FeatureMap empty;
  empty["c"] = {};
  EXPECT_THROW(select_exemplars(empty, 1), InvalidArgument);
  EXPECT_THROW(select_exemplars(one, 2), InvalidArgument);
  EXPECT_THROW(select_exemplars(one, 0), InvalidArgument);
}

TEST(SelectExemplars, MatchesNearestMeanScan) {
  Rng rng(7);
  FeatureMap fm;
  for (int c = 0; c < 5; ++c) {
    auto& items = fm["class" + std::to_string(c)];
    for (int i = 0; i < 12; ++i) items.emplace_back("s" + std::to_string(c) + "_" + std::to_string(i), random_mat(1, 6, rng));
  }
  const auto store = select_exemplars(fm, 1);
  for (const auto& [cls, items] : fm) {
    RowVec<double> mean = RowVec<double>::Zero(6);
    for (const auto& it : items) mean += it.second;
    mean /= 12.0;
    std::string best;
    double bd = 1e300;
    for (const auto& it : items) {
      const double d = (it.second - mean).norm();
      if (d < bd) {
        bd = d;
        best = it.first;
      }
    }
    EXPECT_EQ(store.exemplars.at(cls), (std::vector<std::string>{best}));
  }
  // Deterministic, and k picks are distinct.
  const auto k3 = select_exemplars(fm, 3);
  EXPECT_EQ(k3.exemplars, select_exemplars(fm, 3).exemplars);
  for (const auto& [cls, ids] : k3.exemplars) EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), 3u);
}

// Routing with a discriminator forced to one side.
class Routing : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    world = new cmgr::testing::TinyWorld();
    state = new RunState<double>(init_run<double>(world->cfg.model, world->cfg.train, Method::cmgr));
    train_base(world->ctx, *state);
  }
  static void TearDownTestSuite() {
    delete state;
    delete world;
  }
  static void force(RunState<double>& st, double bias) {
    Rng rng(1);
    st.disc = Discriminator<double>::create(st.net.config.encoder.dim, rng);
    st.disc->store.value(st.disc->l2.weight).setZero();
    st.disc->store.value(st.disc->l2.bias).setConstant(bias);
  }
  static cmgr::testing::TinyWorld* world;
  static RunState<double>* state;
};

cmgr::testing::TinyWorld* Routing::world = nullptr;
RunState<double>* Routing::state = nullptr;

TEST_F(Routing, ForcedBase) {
  RunState<double> st = *state;
  force(st, 30.0);
  const auto& base = world->schedule.tasks.front().classes;
  for (const auto& cls : world->schedule.classes_upto(1)) {
    for (const auto& id : world->data.test.at(cls)) {
      const auto p = predict_with_routing(world->ctx, st, world->cache.get(world->data, id), 1);
      EXPECT_EQ(p.route, Route::base);
      EXPECT_EQ(p.logits.class_order, base);
      // Identical to Net_B scored directly.
      const auto direct = infer(*st.net_b, world->cache.get(world->data, id), world->frozen.vision,
                                world->ctx.classes(base));
      EXPECT_EQ(p.logits.total, direct.logits.total);
    }
  }
}

TEST_F(Routing, ForcedNovel) {
  RunState<double> st = *state;
  force(st, -30.0);
  const auto novel = world->schedule.novel_classes_upto(2);
  for (const auto& id : world->data.test.at(world->schedule.tasks.front().classes.front())) {
    const auto p = predict_with_routing(world->ctx, st, world->cache.get(world->data, id), 2);
    EXPECT_EQ(p.route, Route::novel);
    EXPECT_EQ(p.logits.class_order, novel);
    EXPECT_EQ(p.logits.total.cols(), 4);
  }
}

TEST_F(Routing, MissingComponents) {
  RunState<double> st = *state;
  st.disc.reset();
  const auto& in = world->cache.get(world->data, world->data.test.begin()->second.front());
  EXPECT_THROW(predict_with_routing(world->ctx, st, in, 1), StateError);
  force(st, 0.0);
  st.net_b.reset();
  EXPECT_THROW(predict_with_routing(world->ctx, st, in, 1), StateError);
}

TEST_F(Routing, DiscriminatorTrainingLeavesNetworksAlone) {
  RunState<double> st = *state;
  const auto net = st.net.store.checksum();
  train_discriminator(world->ctx, st, 1);
  ASSERT_TRUE(st.disc.has_value());
  EXPECT_EQ(st.net.store.checksum(), net);
  EXPECT_EQ(st.net_b->store.checksum(), st.net_b_checksum);
  EXPECT_EQ(st.bnd_final_loss.size(), 1u);
  for (std::size_t i = 0; i < st.disc->store.size(); ++i) {
    if (i != st.disc->input_mean && i != st.disc->input_scale) {
      EXPECT_FALSE(st.disc->store.frozen(i));
    }
  }
}

}  // namespace
