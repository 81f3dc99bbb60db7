#include <gtest/gtest.h>

#include <numeric>

#include "test_support.hpp"

using namespace tal;
using tal::testing::bit_equal;
using tal::testing::random_image;
using tal::testing::small_model;

namespace {

TransformSpec spec_of(TransformKind k) {
  TransformSpec s;
  s.kind = k;
  return s;
}

AdmixPool make_pool() {
  const Dataset d = tal::testing::small_dataset(3, 12);
  return {d.images, d.labels};
}

// Mean per-coordinate variance of `draws` gradient estimates.
double empirical_variance(const std::vector<Tensor>& draws) {
  const Tensor mean = mean_of(draws);
  double v = 0.0;
  for (const Tensor& d : draws)
    for (std::size_t i = 0; i < d.size(); ++i) v += (d[i] - mean[i]) * (d[i] - mean[i]);
  return v / static_cast<double>(draws.size() * mean.size());
}

}  // namespace

TEST(Mask, SpecExampleFourByFour) {
  const FrequencyMask m = highfreq_mask(4, 4, 0.2);
  EXPECT_EQ(m.count(), 4u);
  EXPECT_TRUE(m.at(3, 3));
  EXPECT_TRUE(m.at(3, 2));
  EXPECT_TRUE(m.at(2, 3));
  EXPECT_TRUE(m.at(3, 1));
  EXPECT_FALSE(m.at(2, 2));
  EXPECT_FALSE(m.at(1, 3));
}

TEST(Mask, Extremes) {
  EXPECT_EQ(highfreq_mask(5, 7, 1.0).count(), 35u);
  const FrequencyMask tiny = highfreq_mask(5, 7, 1e-9);
  EXPECT_EQ(tiny.count(), 1u);
  EXPECT_TRUE(tiny.at(4, 6));
  EXPECT_THROW(highfreq_mask(4, 4, 0.0), ConfigError);
  EXPECT_THROW(highfreq_mask(4, 4, 1.5), ConfigError);
}

TEST(Mask, CountIsCeilAndNested) {
  for (double rho : {0.05, 0.1, 0.2, 0.33, 0.5}) {
    const FrequencyMask m = highfreq_mask(16, 16, rho);
    EXPECT_EQ(m.count(), static_cast<std::size_t>(std::ceil(rho * 256.0 - 1e-12))) << rho;
    const FrequencyMask bigger = highfreq_mask(16, 16, rho + 0.1);
    for (std::size_t i = 0; i < m.selected.size(); ++i)
      if (m.selected[i]) {
        EXPECT_TRUE(bigger.selected[i]);
      }
  }
}

TEST(SpectralOps, ScaleHalvesMaskedCoefficient) {
  const FrequencyMask m = highfreq_mask(4, 4, 0.2);
  Tensor coeffs({1, 4, 4}, 2.0);
  coeffs[0] = 0.3;
  Rng rng(1);
  const Tensor out = apply_spectral_op(coeffs, m, SpectralOpKind::scale, 0.5, rng);
  for (std::size_t i = 0; i < 16; ++i) {
    if (m.selected[i]) {
      EXPECT_EQ(out[i], 1.0);
    } else {
      EXPECT_EQ(out[i], coeffs[i]);
    }
  }
}

TEST(SpectralOps, DropoutZeroesTenPercentOfMask) {
  const FrequencyMask m = highfreq_mask(10, 10, 0.4);
  ASSERT_EQ(m.count(), 40u);
  const Tensor coeffs({2, 10, 10}, 1.0);
  Rng rng(2);
  const Tensor out = apply_spectral_op(coeffs, m, SpectralOpKind::dropout, 0.10, rng);
  for (std::size_t c = 0; c < 2; ++c) {
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < 100; ++i) {
      const double v = out[c * 100 + i];
      if (!m.selected[i]) {
        EXPECT_EQ(v, 1.0);
      }
      zeros += v == 0.0;
    }
    EXPECT_EQ(zeros, 4u);
  }
}

TEST(SpectralOps, NoiseStaysOnMask) {
  const FrequencyMask m = highfreq_mask(6, 6, 0.3);
  const Tensor coeffs({1, 6, 6}, 0.25);
  Rng rng(3);
  const Tensor out = apply_spectral_op(coeffs, m, SpectralOpKind::noise, 0.1, rng);
  for (std::size_t i = 0; i < 36; ++i) {
    if (m.selected[i]) {
      EXPECT_LE(std::abs(out[i] - 0.25), 0.1);
    } else {
      EXPECT_EQ(out[i], 0.25);
    }
  }
}

TEST(SpectralOps, HighFrequencyEditsPassLowFrequenciesThrough) {
  Rng rng(4);
  const Tensor x = random_image({2, 8, 8}, rng);
  const auto plan = shared_plan(8, 8);
  const Tensor X = plan->forward(x);
  for (TransformKind k : {TransformKind::ssa_h, TransformKind::ssa_plus}) {
    const TransformSpec s = spec_of(k);
    const FrequencyMask m = highfreq_mask(8, 8, s.rho);
    for (int trial = 0; trial < 10; ++trial) {
      const SpectralEdit e = draw_spectral_edit(s, x.shape(), rng);
      const Tensor Y = e.apply(X);
      for (std::size_t i = 0; i < Y.size(); ++i)
        if (!m.selected[i % 64]) {
          EXPECT_EQ(Y[i], X[i]) << to_string(k);
        }
      // Same at image level, up to transform roundoff.
      Rng replay = rng;
      const Tensor t = apply_transform(s, x, replay);
      const Tensor T = plan->forward(t);
      Rng again = rng;
      const Tensor expected = draw_spectral_edit(s, x.shape(), again).apply(X);
      for (std::size_t i = 0; i < T.size(); ++i) EXPECT_NEAR(T[i], expected[i], 1e-12);
    }
  }
}

TEST(SpectralOps, FullSsaTouchesEveryCoefficient) {
  Rng rng(5);
  const TransformSpec s = spec_of(TransformKind::ssa);
  const SpectralEdit e = draw_spectral_edit(s, {1, 6, 6}, rng);
  std::size_t edited = 0;
  for (std::size_t i = 0; i < e.factor.size(); ++i) edited += e.factor[i] != 1.0 || e.offset[i] != 0.0;
  EXPECT_EQ(edited, 36u);
  EXPECT_THROW(draw_spectral_edit(spec_of(TransformKind::dim), {1, 6, 6}, rng), ConfigError);
}

TEST(Transforms, SimHalvesSecondCopy) {
  Rng rng(1);
  const Tensor out = apply_transform(spec_of(TransformKind::sim), Tensor({1, 3, 3}, 0.8), rng, {1, nullptr});
  for (double v : out.data()) EXPECT_EQ(v, 0.4);
}

TEST(Transforms, AdmixMixesScaledPartner) {
  Rng rng(1);
  const Tensor partner({1, 2, 2}, 0.5);
  TransformSpec s = spec_of(TransformKind::admix);
  const Tensor out = apply_transform(s, Tensor({1, 2, 2}, 0.8), rng, {2, &partner});
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.25 * (0.8 + 0.2 * 0.5));
  EXPECT_THROW(apply_transform(s, Tensor({1, 2, 2}, 0.8), rng), ConfigError);
}

TEST(Transforms, DimKeepsExtentsAndIsSometimesIdentity) {
  Rng rng(6);
  const Tensor x = random_image({2, 16, 16}, rng);
  TransformSpec s = spec_of(TransformKind::dim);
  std::size_t identical = 0;
  for (int i = 0; i < 40; ++i) {
    const Tensor t = apply_transform(s, x, rng);
    EXPECT_EQ(t.shape(), x.shape());
    EXPECT_TRUE(t.all_finite());
    identical += bit_equal(t, x);
  }
  EXPECT_GT(identical, 5u);
  EXPECT_LT(identical, 35u);
  for (double pad : {2.0, 3.0}) {
    s.dim_pad = pad;
    s.dim_prob = 1.0;
    EXPECT_EQ(apply_transform(s, x, rng).shape(), x.shape());
  }
}

TEST(Transforms, EveryKindIsFinite) {
  Rng rng(7);
  const Tensor x = random_image({1, 10, 10}, rng);
  const Tensor partner = random_image({1, 10, 10}, rng);
  for (TransformKind k : {TransformKind::none, TransformKind::dim, TransformKind::tim, TransformKind::sim,
                          TransformKind::admix, TransformKind::ssa, TransformKind::ssa_h, TransformKind::ssa_plus}) {
    for (std::size_t i = 0; i < 6; ++i) {
      const Tensor t = apply_transform(spec_of(k), x, rng, {i, &partner});
      EXPECT_EQ(t.shape(), x.shape()) << to_string(k);
      EXPECT_TRUE(t.all_finite()) << to_string(k);
    }
  }
}

TEST(Transforms, SpecValidation) {
  TransformSpec s;
  s.copies = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.tim_kernel = 4;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.dim_pad = 0.9;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.rho = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(parse_transform_kind("cutmix"), ConfigError);
}

TEST(Tim, KernelOneIsIdentity) {
  Rng rng(2);
  const Tensor g = tal::testing::random_tensor({2, 7, 7}, rng);
  EXPECT_TRUE(bit_equal(tim_smooth_gradient(g, 1, 1.5), g));
}

TEST(Tim, ConstantGradientUnchanged) {
  const Tensor g({1, 6, 6}, 0.3);
  const Tensor s = tim_smooth_gradient(g, 5, 1.5);
  for (double v : s.data()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Tim, ImpulseGivesCentredKernel) {
  Tensor g({1, 9, 9});
  g.at(0, 4, 4) = 1.0;
  const Tensor s = tim_smooth_gradient(g, 5, 1.5);
  const auto ker = gaussian_kernel(5, 1.5);
  EXPECT_NEAR(std::accumulate(ker.begin(), ker.end(), 0.0), 1.0, 1e-15);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      const bool inside = i >= 2 && i <= 6 && j >= 2 && j <= 6;
      const double want = inside ? ker[(4 - (i - 2)) * 5 + (4 - (j - 2))] : 0.0;
      EXPECT_NEAR(s.at(0, i, j), want, 1e-15);
    }
}

TEST(AveragedGradient, NoneIsPlainGradient) {
  const Model m = small_model(Arch::cnn_a, 3);
  Rng rng(9);
  const Tensor x = random_image({1, 10, 10}, rng);
  for (std::size_t c : {1u, 7u})
    EXPECT_TRUE(bit_equal(averaged_transformed_gradient(m, x, 1, spec_of(TransformKind::none), c, rng),
                          evaluate_with_gradient(m, x, 1).grad));
}

TEST(AveragedGradient, VarianceShrinksWithCopies) {
  const Model m = small_model(Arch::cnn_pool, 3);
  Rng rng(10);
  const Tensor x = random_image({1, 10, 10}, rng);
  const AdmixPool pool = make_pool();
  for (TransformKind k : {TransformKind::dim, TransformKind::ssa, TransformKind::ssa_plus, TransformKind::admix}) {
    std::vector<Tensor> one, twenty;
    for (int r = 0; r < 30; ++r) {
      one.push_back(averaged_transformed_gradient(m, x, 0, spec_of(k), 1, rng, &pool));
      twenty.push_back(averaged_transformed_gradient(m, x, 0, spec_of(k), 20, rng, &pool));
    }
    EXPECT_LT(empirical_variance(twenty), empirical_variance(one)) << to_string(k);
  }
}

TEST(AveragedGradient, CopyGradientsMatchFiniteDifferences) {
  const Model m = small_model(Arch::mlp2, 4);
  Rng rng(11);
  const Tensor x = random_image({1, 10, 10}, rng);
  const Tensor partner = random_image({1, 10, 10}, rng);
  for (TransformKind k : {TransformKind::dim, TransformKind::sim, TransformKind::admix, TransformKind::ssa,
                          TransformKind::ssa_h, TransformKind::ssa_plus}) {
    TransformSpec s = spec_of(k);
    s.dim_prob = 1.0;
    const CopyContext ctx{1, &partner};
    const Rng start = rng;
    Rng r1 = start;
    const Tensor g = transformed_copy_gradient(m, x, 2, s, ctx, r1);
    std::vector<std::size_t> coords;
    for (int i = 0; i < 12; ++i) coords.push_back(rng.below(x.size()));
    const auto fd = finite_difference_gradient(
        [&](const Tensor& t) {
          Rng r = start;  // same draw for every evaluation
          ComputeGraph gr;
          const NodeId in = gr.input(t, false);
          return gr.value(gr.cross_entropy(m.forward(gr, transform_node(gr, in, s, ctx, r)), 2))[0];
        },
        x, 1e-5, coords);
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const double a = g[coords[i]], n = fd[i];
      EXPECT_LE(std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}), 1e-4) << to_string(k);
    }
  }
}

TEST(AveragedGradient, AdmixNeedsOtherClassImages) {
  const Model m = small_model(Arch::mlp2, 4);
  Rng rng(12);
  const Tensor x = random_image({1, 10, 10}, rng);
  EXPECT_THROW(averaged_transformed_gradient(m, x, 0, spec_of(TransformKind::admix), 3, rng), ConfigError);
  AdmixPool same{{x, x}, {0, 0}};
  EXPECT_THROW(averaged_transformed_gradient(m, x, 0, spec_of(TransformKind::admix), 3, rng, &same), ConfigError);
}

TEST(TransformAttack, StaysInsideTheBall) {
  const Model m = small_model(Arch::cnn_a, 5);
  Rng rng(13);
  const Tensor x = random_image({1, 10, 10}, rng);
  const AdmixPool pool = make_pool();
  for (TransformKind k : {TransformKind::dim, TransformKind::tim, TransformKind::sim, TransformKind::admix,
                          TransformKind::ssa, TransformKind::ssa_h, TransformKind::ssa_plus}) {
    TransformSpec s = spec_of(k);
    s.copies = 3;
    AttackConfig c;
    const Tensor d = run_attack(c, TransformedGradient(m, s, &pool), x, 0, 4, [&](std::string_view, const Tensor& it) {
      EXPECT_TRUE(within_threat_model(x, it, c.eps)) << to_string(k);
    });
    EXPECT_GT(linf_norm(d), 0.0) << to_string(k);
  }
}
