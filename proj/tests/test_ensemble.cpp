#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "oracles.hpp"
#include "test_support.hpp"

using namespace tal;
using tal::testing::bit_equal;
using tal::testing::random_image;
using tal::testing::small_model;

namespace {

struct Zoo {
  Model a = small_model(Arch::cnn_a, 101);
  Model b = small_model(Arch::mlp2, 102);
  Model c = small_model(Arch::cnn_pool, 103);
  Model d = small_model(Arch::cnn_b, 104);
  std::vector<const Model*> all() const { return {&a, &b, &c, &d}; }
};

FusionView binary_zero_view() { return {{Tensor({2}), Tensor({2})}, 0}; }

double chi_square_quantile_99_df5() { return 15.086; }

}  // namespace

TEST(Fusion, SymmetricBinaryLogitsGiveLnTwo) {
  const FusionView v = binary_zero_view();
  for (Fusion f : {Fusion::logit, Fusion::prediction}) {
    EXPECT_NEAR(fuse_outputs(v, f, {0.5, 0.5}).loss, std::log(2.0), 1e-15) << to_string(f);
  }
  // loss fusion sums the per-model losses.
  EXPECT_NEAR(fuse_outputs(v, Fusion::loss, {0.5, 0.5}).loss, 2.0 * std::log(2.0), 1e-15);
}

TEST(Fusion, SingleModelCollapses) {
  Rng rng(1);
  const FusionView v{{tal::testing::random_tensor({5}, rng, -2.0, 2.0)}, 3};
  const double l = fuse_outputs(v, Fusion::loss, {1.0}).loss;
  EXPECT_DOUBLE_EQ(fuse_outputs(v, Fusion::logit, {1.0}).loss, l);
  EXPECT_NEAR(fuse_outputs(v, Fusion::prediction, {1.0}).loss, l, 1e-12);
}

TEST(Fusion, IdenticalLogitsAverageToSingleModel) {
  Rng rng(2);
  const Tensor z = tal::testing::random_tensor({6}, rng, -2.0, 2.0);
  const double single = fuse_outputs(FusionView{{z}, 1}, Fusion::logit, {1.0}).loss;
  EXPECT_NEAR(fuse_outputs(FusionView{{z, z}, 1}, Fusion::logit, {0.5, 0.5}).loss, single, 1e-14);
}

TEST(Fusion, WeightMismatchIsConfigError) {
  EXPECT_THROW(fuse_outputs(binary_zero_view(), Fusion::logit, {1.0}), ConfigError);
  EXPECT_THROW(fuse_outputs(binary_zero_view(), Fusion::longitude, {0.5, 0.5}), ConfigError);
}

TEST(Fusion, ClosedFormExamples) {
  const FusionView v = binary_zero_view();
  const auto loss = analytic_fusion_gradient(v, Fusion::loss);
  const auto logit = analytic_fusion_gradient(v, Fusion::logit);
  const auto pred = analytic_fusion_gradient(v, Fusion::prediction);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_DOUBLE_EQ(loss[k][0], -0.5);
    EXPECT_DOUBLE_EQ(logit[k][0], -0.5);
    EXPECT_DOUBLE_EQ(pred[k][0], -0.125);
  }
  EXPECT_THROW(analytic_fusion_gradient(v, Fusion::logit, {0.3, 0.7}), UnsupportedError);
}

TEST(Fusion, SingleModelClosedFormsCoincide) {
  Rng rng(3);
  const FusionView v{{tal::testing::random_tensor({7}, rng, -3.0, 3.0)}, 4};
  const auto a = analytic_fusion_gradient(v, Fusion::loss);
  const auto b = analytic_fusion_gradient(v, Fusion::logit);
  EXPECT_TRUE(bit_equal(a[0], b[0]));
}

TEST(Fusion, LossClosedFormAndExactFormsMatchAutodiff) {
  const auto r = oracle::fusion_oracle(1000, 11);
  EXPECT_EQ(r.instances, 1000u);
  EXPECT_LE(r.closed_form_error[0], 1e-6);
  for (double e : r.exact_error) EXPECT_LE(e, 1e-6);
}

TEST(Fusion, ExactFormsHandleNonUniformWeights) {
  Rng rng(4);
  for (int n = 0; n < 200; ++n) {
    const std::size_t k = 2 + rng.below(3), c = 2 + rng.below(8);
    FusionView v;
    for (std::size_t m = 0; m < k; ++m) v.logits.push_back(tal::testing::random_tensor({c}, rng, -4.0, 4.0));
    v.label = rng.below(c);
    std::vector<double> w(k);
    double total = 0.0;
    for (double& x : w) total += (x = rng.uniform(0.1, 1.0));
    for (double& x : w) x /= total;
    for (Fusion f : {Fusion::loss, Fusion::logit, Fusion::prediction}) {
      const auto exact = exact_fusion_gradient(v, f, w);
      const auto autodiff = fuse_outputs(v, f, w).logit_grads;
      for (std::size_t m = 0; m < k; ++m)
        for (std::size_t j = 0; j < c; ++j) EXPECT_NEAR(exact[m][j], autodiff[m][j], 1e-12);
    }
  }
}

TEST(Alignment, HandGramSchmidtExample) {
  const Tensor g1({2}, {1.0, -1.0}), g2({2}, {-1.0, 0.0});
  const auto out = align_gradients({g1, g2}, 0.1);
  EXPECT_EQ(out[0][0], 0.0);
  EXPECT_EQ(out[0][1], -1.0);
  EXPECT_NEAR(dot(out[1], g1), 0.0, 1e-15);
}

TEST(Alignment, NoConflictLeavesInputsBitIdentical) {
  Rng rng(5);
  const Tensor g = tal::testing::random_tensor({9}, rng);
  const auto same = align_gradients({g, g, g}, 0.1);
  for (const Tensor& t : same) EXPECT_TRUE(bit_equal(t, g));
  const Tensor a({2}, {1.0, 0.0}), b({2}, {0.0, 1.0});
  const auto orth = align_gradients({a, b}, 0.0);
  EXPECT_TRUE(bit_equal(orth[0], a));
  EXPECT_TRUE(bit_equal(orth[1], b));
}

TEST(Alignment, ZeroAverageSkips) {
  const Tensor a({2}, {1.0, 2.0}), z({2});
  const auto out = align_gradients({a, z}, 0.1);
  EXPECT_TRUE(bit_equal(out[0], a));
  EXPECT_THROW(align_gradients({a}, 0.1), ConfigError);
}

TEST(Alignment, ConflictedOutputsAreOrthogonalAndStable) {
  Rng rng(6);
  std::size_t conflicts = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(3);
    std::vector<Tensor> gs;
    for (std::size_t i = 0; i < k; ++i) gs.push_back(tal::testing::random_tensor({12}, rng));
    for (ConflictRule rule : {ConflictRule::cosine, ConflictRule::sign}) {
      const auto out = align_gradients(gs, 0.1, rule);
      Tensor total = Tensor::zeros_like(gs[0]);
      for (const Tensor& g : gs) total += g;
      for (std::size_t n = 0; n < k; ++n) {
        Tensor avg = total - gs[n];
        for (double& v : avg.data()) v /= static_cast<double>(k - 1);
        if (bit_equal(out[n], gs[n])) continue;
        ++conflicts;
        EXPECT_LE(std::abs(dot(out[n], avg)), 1e-9);
        // Projecting again against the same direction changes nothing.
        Tensor again = out[n];
        axpy(again, -dot(out[n], avg) / dot(avg, avg), avg);
        EXPECT_LE(linf_norm(again - out[n]), 1e-9);
      }
    }
  }
  EXPECT_GT(conflicts, 50u);
}

TEST(Alignment, SignRuleCountsAgreement) {
  // cos > 0.1 but most signs disagree.
  const Tensor g1({4}, {10.0, -0.1, -0.1, -0.1}), g2({4}, {10.0, 0.1, 0.1, 0.1});
  const auto cos_out = align_gradients({g1, g2}, 0.1, ConflictRule::cosine);
  EXPECT_TRUE(bit_equal(cos_out[0], g1));
  const auto sign_out = align_gradients({g1, g2}, 0.1, ConflictRule::sign);
  EXPECT_FALSE(bit_equal(sign_out[0], g1));
}

TEST(Ait, AssignmentsAreSeededDraws) {
  const std::vector<AitKind> pool(std::begin(kAllAitKinds), std::end(kAllAitKinds));
  Rng a(9), b(9), replay(9);
  for (int it = 0; it < 10; ++it) {
    const auto x = assign_async_transforms(pool, 4, a);
    EXPECT_EQ(x, assign_async_transforms(pool, 4, b));
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(x[k], pool[replay.below(pool.size())]);
  }
  Rng c(1);
  const auto single = assign_async_transforms({AitKind::rotate}, 4, c);
  EXPECT_EQ(single, std::vector<AitKind>(4, AitKind::rotate));
  const auto aligned = assign_aligned_transforms(pool, 4, c);
  EXPECT_TRUE(std::all_of(aligned.begin(), aligned.end(), [&](AitKind k) { return k == aligned[0]; }));
  EXPECT_THROW(assign_async_transforms({}, 2, c), ConfigError);
}

TEST(Ait, TransformsKeepShapeAndStayFinite) {
  Rng rng(10);
  for (AitKind k : kAllAitKinds) {
    const auto map = instantiate_ait(k, {1, 10, 10}, 16.0 / 255.0, rng);
    ComputeGraph g;
    const Tensor x = random_image({1, 10, 10}, rng);
    const Tensor y = g.value(g.affine(g.input(x, false), map));
    EXPECT_EQ(y.shape(), x.shape()) << to_string(k);
    EXPECT_TRUE(y.all_finite()) << to_string(k);
  }
}

TEST(Ensemble, LossFusionSumsMemberGradients) {
  Zoo z;
  Rng rng(11);
  const Tensor x = random_image({1, 10, 10}, rng);
  EnsembleSpec spec;
  spec.models = z.all();
  spec.fusion = Fusion::loss;
  const Tensor g = EnsembleGradient(spec).gradient(x, 2, rng);
  Tensor want = Tensor::zeros_like(x);
  for (const Model* m : spec.models) want += evaluate_with_gradient(*m, x, 2).grad;
  EXPECT_TRUE(bit_equal(g, want));
}

TEST(Ensemble, SpecValidation) {
  Zoo z;
  EnsembleSpec s;
  EXPECT_THROW(s.validate(), ConfigError);
  s.models = {&z.a, &z.b};
  s.weights = {0.5};
  EXPECT_THROW(s.validate(), ConfigError);
  s.weights = {0.5, 0.6};
  EXPECT_THROW(s.validate(), ConfigError);
  s.weights = {};
  s.ait = AitMode::async;
  s.ait_pool = {};
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(parse_fusion("median"), ConfigError);
}

TEST(Longitude, SingleModelEqualsPlainAttack) {
  Zoo z;
  Rng rng(12);
  const Tensor x = random_image({1, 10, 10}, rng);
  EnsembleSpec spec;
  spec.models = {&z.c};
  spec.fusion = Fusion::longitude;
  spec.ms_enabled = true;
  for (Method m : kIterativeMethods) {
    AttackConfig c;
    c.method = m;
    c.params.vmi_samples = 3;
    EXPECT_TRUE(bit_equal(longitude_attack(spec, x, 1, c, 8), run_attack(c, z.c, x, 1, 8))) << to_string(m);
  }
}

TEST(Longitude, ShuffledOrdersReplayAndCoverThePool) {
  Zoo z;
  Rng rng(13);
  const Tensor x = random_image({1, 10, 10}, rng);
  EnsembleSpec spec;
  spec.models = {&z.a, &z.b, &z.c};
  spec.fusion = Fusion::longitude;
  spec.ms_enabled = true;
  std::vector<std::vector<std::size_t>> visited;
  std::size_t steps = 0;
  longitude_attack(spec, x, 0, AttackConfig{}, 21, [&](std::string_view role, const Tensor&) { steps += role == "main"; },
                   &visited);
  ASSERT_EQ(visited.size(), 10u);
  EXPECT_EQ(steps, 30u);
  Rng replay(derive_seed(21, stream::order));
  for (const auto& order : visited) {
    EXPECT_EQ(order, replay.permutation(3));
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2}));
  }
  spec.ms_enabled = false;
  visited.clear();
  longitude_attack(spec, x, 0, AttackConfig{}, 21, {}, &visited);
  for (const auto& order : visited) EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Longitude, ShuffleIsUniformOverPermutations) {
  Rng rng(2718);
  const auto orders = longitude_orders(3, 6000, true, rng);
  std::map<std::vector<std::size_t>, int> counts;
  for (const auto& o : orders) ++counts[o];
  ASSERT_EQ(counts.size(), 6u);
  double chi2 = 0.0;
  for (const auto& [order, n] : counts) chi2 += (n - 1000.0) * (n - 1000.0) / 1000.0;
  EXPECT_LT(chi2, chi_square_quantile_99_df5());
}

TEST(Longitude, RejectsDualExamples) {
  Zoo z;
  EnsembleSpec spec;
  spec.models = {&z.a, &z.b};
  spec.fusion = Fusion::longitude;
  AttackConfig c;
  c.dual_copies = 2;
  EXPECT_THROW(longitude_attack(spec, Tensor({1, 10, 10}, 0.5), 0, c, 1), UnsupportedError);
  EXPECT_THROW(EnsembleGradient(spec, c.eps), ConfigError);
  spec.fusion = Fusion::logit;
  EXPECT_THROW(longitude_attack(spec, Tensor({1, 10, 10}, 0.5), 0, AttackConfig{}, 1), ConfigError);
}

TEST(Replay, GradientAlignmentAttack) {
  Zoo z;
  Rng rng(14);
  std::size_t conflicts = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Tensor x = random_image({1, 10, 10}, rng);
    EnsembleSpec spec;
    spec.models = z.all();
    spec.fusion = Fusion::loss;
    spec.ga_enabled = true;
    spec.conflict_rule = ConflictRule::sign;
    AttackConfig c;
    c.method = Method::ifgsm;
    const Tensor replay = oracle::replay_alignment(spec.models, x, seed % 4, 10, c.eps, &conflicts);
    EXPECT_TRUE(bit_equal(ensemble_attack(spec, x, seed % 4, c, seed), replay));
  }
  EXPECT_GT(conflicts, 0u);
}

TEST(Ensemble, EveryStrategyStaysInsideTheBall) {
  Zoo z;
  Rng rng(15);
  const Tensor x = random_image({1, 10, 10}, rng);
  for (Fusion f : {Fusion::loss, Fusion::logit, Fusion::prediction, Fusion::longitude})
    for (AitMode ait : {AitMode::off, AitMode::async, AitMode::aligned})
      for (bool ga : {false, true}) {
        EnsembleSpec spec;
        spec.models = z.all();
        spec.fusion = f;
        spec.ait = ait;
        spec.ga_enabled = ga && f != Fusion::longitude;
        spec.ms_enabled = f == Fusion::longitude;
        AttackConfig c;
        const Tensor d = ensemble_attack(spec, x, 3, c, 5, [&](std::string_view role, const Tensor& it) {
          EXPECT_TRUE(within_threat_model(x, it, c.eps)) << to_string(f) << " " << role;
        });
        EXPECT_GT(linf_norm(d), 0.0);
        EXPECT_TRUE(bit_equal(d, ensemble_attack(spec, x, 3, c, 5)));
      }
}
