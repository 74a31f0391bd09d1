#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_support.hpp"

using namespace cmgr;
using cmgr::testing::mc_oracle;
using cmgr::testing::random_mat;

namespace {

// Two-loop softmax(Q K^T / sqrt(d)) V.
Mat<double> attention_oracle(const Mat<double>& q, const Mat<double>& k, const Mat<double>& v, Mat<double>* R) {
  Mat<double> r(q.rows(), k.rows());
  for (Index i = 0; i < q.rows(); ++i) {
    double mx = -1e300;
    for (Index j = 0; j < k.rows(); ++j) {
      double s = 0.0;
      for (Index c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      r(i, j) = s / std::sqrt(static_cast<double>(q.cols()));
      mx = std::max(mx, r(i, j));
    }
    double z = 0.0;
    for (Index j = 0; j < k.rows(); ++j) z += (r(i, j) = std::exp(r(i, j) - mx));
    for (Index j = 0; j < k.rows(); ++j) r(i, j) /= z;
  }
  if (R) *R = r;
  Mat<double> out = Mat<double>::Zero(q.rows(), v.cols());
  for (Index i = 0; i < q.rows(); ++i)
    for (Index j = 0; j < k.rows(); ++j)
      for (Index c = 0; c < v.cols(); ++c) out(i, c) += r(i, j) * v(j, c);
  return out;
}

TEST(Attention, SingleKey) {
  Rng rng(1);
  const Mat<double> q = random_mat(5, 4, rng), k = random_mat(1, 4, rng), v = random_mat(1, 3, rng);
  const auto a = attention(q, k, v);
  EXPECT_EQ(a.R, Mat<double>::Ones(5, 1));
  for (Index i = 0; i < 5; ++i) EXPECT_EQ(RowVec<double>(a.output.row(i)), RowVec<double>(v.row(0)));
}

TEST(Attention, ZeroScoresUniform) {
  Mat<double> q = Mat<double>::Zero(3, 2);
  q.col(0).setOnes();
  Mat<double> k = Mat<double>::Zero(4, 2);
  k.col(1).setOnes();
  Rng rng(2);
  const auto a = attention(q, k, random_mat(4, 2, rng));
  for (Index i = 0; i < a.R.size(); ++i) EXPECT_DOUBLE_EQ(a.R.data()[i], 0.25);
}

TEST(Attention, MatchesLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat<double> q = random_mat(4, 4, rng), k = random_mat(4, 4, rng), v = random_mat(4, 4, rng);
    Mat<double> R;
    const Mat<double> out = attention_oracle(q, k, v, &R);
    const auto a = attention(q, k, v);
    EXPECT_LT((a.R - R).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((a.output - out).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((a.R.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-5);
    EXPECT_EQ(a.output, a.R * v);
  }
}

TEST(Attention, Errors) {
  EXPECT_THROW(attention(Mat<double>(2, 3), Mat<double>(2, 4), Mat<double>(2, 4)), InvalidArgument);
  EXPECT_THROW(attention(Mat<double>(2, 3), Mat<double>(2, 3), Mat<double>(3, 4)), InvalidArgument);
}

TEST(Mask, RankOneAtFullRatio) {
  Mat<double> R(1, 4);
  R << 0.4, 0.3, 0.2, 0.1;
  const auto m = masked_attention(R, Mat<double>(Mat<double>::Identity(4, 4)), 1.0);
  Mat<double> expect(1, 4);
  expect << 0.0, 0.3, 0.2, 0.1;
  EXPECT_EQ(m.RM, expect);
  EXPECT_EQ(m.FMU, expect);
}

TEST(Mask, TiesAreAllZeroed) {
  const Mat<double> R = Mat<double>::Constant(1, 4, 0.25);
  const auto m = masked_attention(R, Mat<double>(Mat<double>::Identity(4, 4)), 0.9);
  EXPECT_EQ(m.RM, Mat<double>::Zero(1, 4));
}

TEST(Mask, CountMatchesSortOracleFuzz) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const Index k = 2 + static_cast<Index>(rng.index(30));
    const double ratio = rng.uniform(0.05, 1.0);
    Mat<double> R(1, k);
    for (Index c = 0; c < k; ++c) R(0, c) = rng.uniform() + 1e-3;
    R /= R.sum();
    const auto m = masked_attention(R, Mat<double>(Mat<double>::Identity(k, k)), ratio);
    // Oracle: sort descending, zero the first ceil((1-M_R) k) (at least one).
    std::vector<std::pair<double, Index>> order;
    for (Index c = 0; c < k; ++c) order.emplace_back(R(0, c), c);
    std::sort(order.begin(), order.end(), std::greater<>());
    const auto want = std::max<Index>(1, static_cast<Index>(std::ceil((1.0 - ratio) * static_cast<double>(k) - 1e-9)));
    Mat<double> expect = R;
    for (Index i = 0; i < want; ++i) expect(0, order[static_cast<std::size_t>(i)].second) = 0.0;
    EXPECT_EQ(m.RM, expect) << "k=" << k << " ratio=" << ratio;
    EXPECT_EQ((m.RM.array() == 0.0).count(), want);
    EXPECT_TRUE((m.RM.array() <= R.array()).all());
  }
}

TEST(Mask, ZeroedKeysContributeNothing) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat<double> q = random_mat(6, 4, rng), k = random_mat(8, 4, rng);
    Mat<double> v = random_mat(8, 3, rng);
    const auto a = attention(q, k, v);
    const auto m = masked_attention(a.R, v, 0.7);
    // Perturb V at masked key indices, keeping rows that some query still uses.
    Mat<double> v2 = v;
    for (Index j = 0; j < 8; ++j) {
      if ((m.RM.col(j).array() == 0.0).all()) v2.row(j).setConstant(1e6);
    }
    EXPECT_EQ(masked_attention(a.R, v2, 0.7).FMU, m.FMU);
  }
}

TEST(Mask, KeepTopDirection) {
  Mat<double> R(1, 10);
  R << 0.19, 0.17, 0.15, 0.13, 0.11, 0.09, 0.07, 0.05, 0.03, 0.01;
  const auto keep = attention_mask(R, 0.9, MaskDirection::keep_top);
  EXPECT_EQ(keep.sum(), 1.0);  // ceil(0.9 * 10) = 9 zeroed
  EXPECT_EQ(keep(0, 9), 1.0);
  EXPECT_EQ(attention_mask(R, 0.9).sum(), 9.0);
}

TEST(Mask, RatioValidation) {
  EXPECT_THROW(masked_count(4, 0.0), InvalidArgument);
  EXPECT_THROW(masked_count(4, 1.1), InvalidArgument);
  EXPECT_EQ(masked_count(10, 0.9), 1);
  EXPECT_EQ(masked_count(10, 0.5), 5);
  EXPECT_EQ(masked_count(4, 1.0), 1);
}

TEST(McLoss, ZeroCases) {
  Rng rng(6);
  const Mat<double> U = random_mat(4, 5, rng);
  EXPECT_NEAR(mc_loss(U, U), 0.0, 1e-15);
  EXPECT_NEAR(mc_loss(Mat<double>(random_mat(1, 5, rng)), Mat<double>(random_mat(1, 5, rng))), 0.0, 1e-15);
  EXPECT_THROW(mc_loss(U, Mat<double>(random_mat(3, 5, rng))), InvalidArgument);
}

TEST(McLoss, OracleGradientSymmetry) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const Mat<double> U = random_mat(3, 6, rng), MU = random_mat(3, 6, rng);
    const double l = mc_loss(U, MU);
    EXPECT_NEAR(l, mc_oracle(U, MU), 1e-6);
    EXPECT_GE(l, 0.0);
    auto f = [&](Tape<double>& t, Var<double> u) { return mc_loss(u, t.constant(MU)); };
    const auto g = cmgr::testing::check_input_gradient(f, U);
    EXPECT_LT(g.rel_error, 1e-4);
    auto fm = [&](Tape<double>& t, Var<double> mu) { return mc_loss(t.constant(U), mu); };
    EXPECT_LT(cmgr::testing::check_input_gradient(fm, MU).rel_error, 1e-4);
    // Same permutation applied to both batches.
    Eigen::PermutationMatrix<Eigen::Dynamic> p(3);
    p.indices() << 2, 0, 1;
    EXPECT_NEAR(mc_loss(Mat<double>(p * U), Mat<double>(p * MU)), l, 1e-12);
  }
}

struct Fixture {
  ParamStore<double> store;
  TransformerBlock block;
  CrossProjections cross;
  RectifyConfig cfg;
  Fixture() {
    Rng rng(8);
    block = TransformerBlock::create(store, "b", 8, 2, 16, rng, 0.5);
    cfg.layers = {3};
    cross = CrossProjections::create(store, cfg, 8, rng);
  }
};

TEST(FuseLayer, UnrectifiedIsSelfAttention) {
  Fixture fx;
  Rng rng(9);
  const Mat<double> x = random_mat(6, 8, rng);
  Tape<double> tape;
  ParamBinding<double> pb(tape, static_cast<const ParamStore<double>&>(fx.store));
  Var<double> xv = tape.constant(x);
  EXPECT_EQ(fuse_layer(pb, fx.block, xv, static_cast<const Var<double>*>(nullptr), 2, fx.cfg, fx.cross).value(), fx.block.forward(pb, xv).value());
  EXPECT_THROW(fuse_layer(pb, fx.block, xv, static_cast<const Var<double>*>(nullptr), 3, fx.cfg, fx.cross), StateError);
}

TEST(FuseLayer, SubstitutionEqualsSelfBranch) {
  Fixture fx;
  fx.cross.kv[0] = fx.block.self_projection();
  Rng rng(10);
  Tape<double> tape;
  ParamBinding<double> pb(tape, static_cast<const ParamStore<double>&>(fx.store));
  Var<double> xv = tape.constant(random_mat(6, 8, rng));
  const Mat<double> self = fx.block.forward(pb, xv).value();
  EXPECT_EQ(fuse_layer(pb, fx.block, xv, &xv, 3, fx.cfg, fx.cross).value(), self);
  // Same values held by a different node: equal to rounding.
  Var<double> copy = tape.constant(xv.value());
  EXPECT_LT((fuse_layer(pb, fx.block, xv, &copy, 3, fx.cfg, fx.cross).value() - self).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FuseLayer, CrossAttendsOverDepthTokens) {
  Fixture fx;
  Rng rng(11);
  Tape<double> tape;
  ParamBinding<double> pb(tape, static_cast<const ParamStore<double>&>(fx.store));
  Var<double> xv = tape.constant(random_mat(6, 8, rng));
  Var<double> dv = tape.constant(random_mat(10, 8, rng));
  std::vector<Var<double>> probs;
  const Mat<double> y = fuse_layer(pb, fx.block, xv, &dv, 3, fx.cfg, fx.cross, &probs).value();
  ASSERT_EQ(probs.size(), 2u);
  for (const auto& p : probs) {
    EXPECT_EQ(p.rows(), 6);
    EXPECT_EQ(p.cols(), 10);
    EXPECT_LT((p.value().rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-5);
  }
  EXPECT_GT((y - fx.block.forward(pb, xv).value()).norm(), 1e-6);
  Var<double> bad = tape.constant(random_mat(10, 4, rng));
  EXPECT_THROW(fuse_layer(pb, fx.block, xv, &bad, 3, fx.cfg, fx.cross), InvalidArgument);
}

TEST(FuseLayer, EmptyLayerSetCollapsesToBaseline) {
  auto mc = cmgr::testing::small_model();
  mc.sagr.layers = {};
  FrozenModels<double> frozen(mc);
  const auto net = CmgrNet<double>::create(mc, 5);
  const auto in = prepare_sample(cmgr::testing::fixture_cloud("torus", 0), mc, frozen);
  Tape<double> tape;
  ParamBinding<double> pb(tape, net.store);
  const auto rect = net.encode(pb, in);
  const auto base = net.encoder.encode(pb, in.groups);
  ASSERT_EQ(rect.intermediates.size(), base.intermediates.size());
  for (std::size_t i = 0; i < rect.intermediates.size(); ++i) {
    EXPECT_LE((rect.intermediates[i].value() - base.intermediates[i].value()).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_LE((rect.final.value() - base.final.value()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FuseLayer, RectifiedForwardRecordsStochasticRows) {
  auto mc = cmgr::testing::small_model();
  FrozenModels<double> frozen(mc);
  const auto net = CmgrNet<double>::create(mc, 5);
  for (int i = 0; i < 3; ++i) {
    const auto in = prepare_sample(cmgr::testing::fixture_cloud("cone", i), mc, frozen);
    Tape<double> tape;
    ParamBinding<double> pb(tape, net.store);
    const auto f = net.forward(pb, in, nullptr, true);
    // two rectified layers, two heads each
    ASSERT_EQ(f.cross_probs.size(), 4u);
    for (const auto& p : f.cross_probs) EXPECT_LT((p.value().rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-5);
  }
}

TEST(SelfMasking, RecordInvariants) {
  ParamStore<double> store;
  Rng rng(12);
  const auto layer = SelfMaskingLayer::create(store, "m", 8, rng);
  RectifyConfig cfg;
  Tape<double> tape;
  ParamBinding<double> pb(tape, static_cast<const ParamStore<double>&>(store));
  Var<double> x = tape.constant(random_mat(10, 8, rng));
  const auto o = layer(pb, x, cfg);
  ASSERT_TRUE(o.FMU.has_value());
  const Mat<double> R = o.R.value();
  const Mat<double> V = layer.value.apply(store, Mat<double>(layer.norm(pb, x).value()));
  EXPECT_LT((o.FU.value() - R * V).cwiseAbs().maxCoeff(), 1e-12);
  const auto m = masked_attention(R, V, cfg.mask_ratio);
  EXPECT_LT((o.FMU->value() - m.FMU).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(o.next.value(), Mat<double>(x.value() + o.FU.value()));
  cfg.masked_branch = false;
  EXPECT_FALSE(layer(pb, x, cfg).FMU.has_value());
}

class AggregateTest : public ::testing::Test {
 protected:
  ParamStore<double> store;
  CrossViewAggregator agg;
  RowVec<double> fp, fu, fd;
  void SetUp() override {
    Rng rng(13);
    RectifyConfig cfg;
    agg = CrossViewAggregator::create(store, cfg, 6, rng);
    store.value(agg.f_prime.bias) = random_mat(1, 6, rng);
    store.value(agg.f.bias) = random_mat(1, 6, rng);
    store.value(agg.lambda) = random_mat(1, 6, rng);
    fp = random_mat(1, 6, rng);
    fu = random_mat(1, 6, rng);
    fd = random_mat(1, 6, rng);
  }
  Mat<double> run() {
    Tape<double> tape;
    ParamBinding<double> pb(tape, static_cast<const ParamStore<double>&>(store));
    return agg(pb, tape.constant(fp), tape.constant(fu), tape.constant(fd)).value();
  }
};

TEST_F(AggregateTest, TermElimination) {
  agg.w = 0.0;
  store.value(agg.lambda).setOnes();
  store.value(agg.f.weight).setIdentity();
  store.value(agg.f.bias).setZero();
  RowVec<double> cat(12);
  cat << fp, fu;
  const Mat<double> expect = cat * store.value(agg.f_prime.weight) + store.value(agg.f_prime.bias);
  EXPECT_LT((run() - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(AggregateTest, ZeroGateGivesBias) {
  store.value(agg.lambda).setZero();
  EXPECT_EQ(run(), store.value(agg.f.bias));
}

TEST_F(AggregateTest, MatrixOracle) {
  agg.w = 0.7;
  RowVec<double> cat(12);
  cat << fp, fu;
  const Mat<double>& Wp = store.value(agg.f_prime.weight);
  const Mat<double>& Wf = store.value(agg.f.weight);
  RowVec<double> mixed(6), out(6);
  for (Index j = 0; j < 6; ++j) {
    double s = store.value(agg.f_prime.bias)(0, j);
    for (Index i = 0; i < 12; ++i) s += cat(i) * Wp(i, j);
    mixed(j) = (s + 0.7 * fd(j)) * store.value(agg.lambda)(0, j);
  }
  for (Index j = 0; j < 6; ++j) {
    double s = store.value(agg.f.bias)(0, j);
    for (Index i = 0; i < 6; ++i) s += mixed(i) * Wf(i, j);
    out(j) = s;
  }
  EXPECT_LT((run() - Mat<double>(out)).cwiseAbs().maxCoeff(), 1e-6);
  Tape<double> tape;
  ParamBinding<double> pb(tape, static_cast<const ParamStore<double>&>(store));
  EXPECT_THROW(agg(pb, tape.constant(Mat<double>(1, 5)), tape.constant(fu), tape.constant(fd)), InvalidArgument);
}

TEST(RectifyConfig, Validation) {
  RectifyConfig c;
  EXPECT_NO_THROW(c.validate(12));
  EXPECT_THROW(c.validate(8), InvalidArgument);
  c.mask_ratio = 0.0;
  EXPECT_THROW(c.validate(12), InvalidArgument);
  c = RectifyConfig{};
  c.sa_layers = 0;
  EXPECT_THROW(c.validate(12), InvalidArgument);
  EXPECT_EQ(parse_mask_direction(to_string(MaskDirection::keep_top)), MaskDirection::keep_top);
  EXPECT_THROW(parse_mask_direction("sideways"), InvalidArgument);
}

}  // namespace
