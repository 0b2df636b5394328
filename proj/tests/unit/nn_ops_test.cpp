#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qghc/nn_ops.hpp"

namespace qghc {
namespace {

using VarF = Var<float>;
using VarD = Var<double>;

// Direct nested-loop convolution, zero padding, any stride.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, const ConvSpec& s) {
  const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3), G = s.groups;
  const std::size_t cin = s.in_channels / G, cout = s.out_channels / G, ks = s.kernel;
  const long pad = static_cast<long>(s.pad());
  const std::size_t Ho = (H + 2 * s.pad() - ks) / s.stride + 1, Wo = (W + 2 * s.pad() - ks) / s.stride + 1;
  Tensor<double> out({B, s.out_channels, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
      const std::size_t g = oc / cout;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0;
          for (std::size_t ic = 0; ic < cin; ++ic)
            for (std::size_t ky = 0; ky < ks; ++ky)
              for (std::size_t kx = 0; kx < ks; ++kx) {
                const long iy = static_cast<long>(oy * s.stride + ky) - pad;
                const long ix = static_cast<long>(ox * s.stride + kx) - pad;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += k.at({oc, ic, ky, kx}) * x.at({b, g * cin + ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)});
              }
          out.at({b, oc, oy, ox}) = acc;
        }
    }
  return out;
}

// Full (G=1) kernel with the grouped kernel's blocks on the diagonal.
Tensor<double> block_diagonal(const Tensor<double>& k, const ConvSpec& s) {
  const std::size_t G = s.groups, cin = s.in_channels / G, cout = s.out_channels / G, ks = s.kernel;
  Tensor<double> full({s.out_channels, s.in_channels, ks, ks});
  for (std::size_t oc = 0; oc < s.out_channels; ++oc)
    for (std::size_t ic = 0; ic < cin; ++ic)
      for (std::size_t y = 0; y < ks; ++y)
        for (std::size_t x = 0; x < ks; ++x) full.at({oc, (oc / cout) * cin + ic, y, x}) = k.at({oc, ic, y, x});
  return full;
}

TEST(Conv2d, IdentityOneByOneGroups) {
  ConvSpec s{4, 4, 4, 1, 1};
  Rng r(1);
  auto x = uniform_tensor<float>({2, 4, 3, 3}, -1, 1, r);
  auto y = conv2d_grouped(VarF::constant(x), VarF::constant(Tensor<float>::ones(s.kernel_shape())), s);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, AllOnesKernelOnTwoByTwo) {
  ConvSpec s{1, 1, 1, 3, 1};
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  auto y = conv2d_grouped(VarF::constant(x), VarF::constant(Tensor<float>::ones({1, 1, 3, 3})), s);
  EXPECT_EQ(y.value(), Tensor<float>({1, 1, 2, 2}, 10.0f));
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng r(2);
  for (ConvSpec s : {ConvSpec{4, 6, 2, 3, 1}, ConvSpec{6, 6, 3, 1, 1}, ConvSpec{3, 4, 1, 3, 2}, ConvSpec{8, 8, 4, 3, 1}}) {
    auto x = uniform_tensor<double>({2, s.in_channels, 5, 5}, -1, 1, r);
    auto k = uniform_tensor<double>(s.kernel_shape(), -1, 1, r);
    auto y = conv2d_grouped(VarD::constant(x), VarD::constant(k), s);
    EXPECT_LT(max_abs_diff(y.value(), conv_oracle(x, k, s)), 1e-12);
  }
}

TEST(Conv2d, GroupedEqualsBlockDiagonalFull) {
  Rng r(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t G = 1 + r.below(4);
    const std::size_t cin = G * (1 + r.below(8 / G)), cout = G * (1 + r.below(8 / G));
    const std::size_t ks = r.below(2) ? 3 : 1, B = 1 + r.below(2), H = 1 + r.below(5), W = 1 + r.below(5);
    ConvSpec s{cin, cout, G, ks, 1};
    ConvSpec full{cin, cout, 1, ks, 1};
    auto x = uniform_tensor<float>({B, cin, H, W}, -1, 1, r);
    auto k = uniform_tensor<double>(s.kernel_shape(), -1, 1, r);
    auto yg = conv2d_grouped(VarF::constant(x), VarF::constant(k.cast<float>()), s);
    auto yf = conv2d_grouped(VarF::constant(x), VarF::constant(block_diagonal(k, s).cast<float>()), full);
    EXPECT_LT(max_abs_diff(yg.value(), yf.value()), 1e-6f) << "trial " << trial;
  }
}

TEST(Conv2d, PerSampleKernelsMatchSeparateCalls) {
  Rng r(4);
  ConvSpec s{4, 4, 2, 3, 1};
  auto x = uniform_tensor<double>({2, 4, 4, 4}, -1, 1, r);
  auto k = uniform_tensor<double>({2, 4, 2, 3, 3}, -1, 1, r);
  auto y = conv2d_grouped(VarD::constant(x), VarD::constant(k), s);
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor<double> xb({1, 4, 4, 4}, std::vector<double>(x.vec().begin() + b * 64, x.vec().begin() + (b + 1) * 64));
    Tensor<double> kb(s.kernel_shape(), std::vector<double>(k.vec().begin() + b * 72, k.vec().begin() + (b + 1) * 72));
    auto ref = conv_oracle(xb, kb, s);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(y.value()[b * 64 + i], ref[i], 1e-12);
  }
}

TEST(Conv2d, ShapeErrors) {
  EXPECT_THROW((ConvSpec{6, 4, 4, 3, 1}.validate()), ShapeError);
  EXPECT_THROW((ConvSpec{4, 4, 2, 5, 1}.validate()), ConfigError);
  ConvSpec s{4, 4, 2, 3, 1};
  auto x = VarF::constant(Tensor<float>({1, 4, 3, 3}));
  EXPECT_THROW(conv2d_grouped(x, VarF::constant(Tensor<float>({4, 4, 3, 3})), s), ShapeError);
  EXPECT_THROW(conv2d_grouped(VarF::constant(Tensor<float>({1, 3, 3, 3})), VarF::constant(Tensor<float>(s.kernel_shape())), s),
               ShapeError);
}

// Reshape (g, C/g) -> transpose -> flatten, written out independently.
std::vector<std::size_t> shuffle_oracle(std::size_t C, std::size_t g) {
  std::vector<std::vector<std::size_t>> grid(g, std::vector<std::size_t>(C / g));
  for (std::size_t c = 0; c < C; ++c) grid[c / (C / g)][c % (C / g)] = c;
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < C / g; ++j)
    for (std::size_t i = 0; i < g; ++i) out.push_back(grid[i][j]);
  return out;
}

TEST(ChannelShuffle, Examples) {
  EXPECT_EQ(shuffle_permutation(6, 2), (std::vector<std::size_t>{0, 3, 1, 4, 2, 5}));
  std::vector<std::size_t> id(5);
  std::iota(id.begin(), id.end(), 0);
  EXPECT_EQ(shuffle_permutation(5, 1), id);
  EXPECT_THROW(shuffle_permutation(6, 4), ShapeError);
}

TEST(ChannelShuffle, MatchesReshapeTransposeOracleForAllSmallC) {
  for (std::size_t C = 1; C <= 24; ++C)
    for (std::size_t g = 1; g <= C; ++g) {
      if (C % g) continue;
      EXPECT_EQ(shuffle_permutation(C, g), shuffle_oracle(C, g)) << "C=" << C << " g=" << g;
    }
}

TEST(ChannelShuffle, MovesWholePlanesAndInverts) {
  Rng r(5);
  auto x = uniform_tensor<float>({2, 4, 2, 2}, -1, 1, r);
  auto once = channel_shuffle(VarF::constant(x), 2);
  EXPECT_EQ(channel_shuffle(once, 2).value(), x);  // C=4, g=2 twice
  auto y = channel_shuffle(VarF::constant(x), 2).value();
  const auto src = shuffle_permutation(4, 2);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[(b * 4 + c) * 4 + i], x[(b * 4 + src[c]) * 4 + i]);
}

TEST(ChannelShuffle, BijectionAndComplementaryInverse) {
  for (std::size_t C = 1; C <= 24; ++C)
    for (std::size_t g = 1; g <= C; ++g) {
      if (C % g) continue;
      auto p = shuffle_permutation(C, g);
      auto sorted = p;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < C; ++i) ASSERT_EQ(sorted[i], i);
      // shuffle(g) then shuffle(C/g) composes to the identity.
      auto q = shuffle_permutation(C, C / g);
      for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(p[q[c]], c);
    }
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Registry<float> reg;
  auto st = BatchNormState<float>::make(reg, "bn", 2);
  st.beta.mutable_value() = Tensor<float>({2}, std::vector<float>{0.5f, -2.0f});
  Tensor<float> x({3, 2, 2, 2});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = (i / 4) % 2 ? 7.0f : -3.0f;
  auto y = batch_norm(VarF::constant(x), st, Mode::train).value();
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_FLOAT_EQ(y[i], (i / 4) % 2 ? -2.0f : 0.5f);
}

TEST(BatchNorm, EvalWithDefaultsIsIdentityUpToEps) {
  Registry<double> reg;
  auto st = BatchNormState<double>::make(reg, "bn", 3);
  Rng r(6);
  auto x = uniform_tensor<double>({2, 3, 2, 2}, -1, 1, r);
  auto y = batch_norm(VarD::constant(x), st, Mode::eval).value();
  EXPECT_LT(max_abs_diff(y, x), 1e-5);
}

TEST(BatchNorm, TrainStatistics) {
  Registry<double> reg;
  auto st = BatchNormState<double>::make(reg, "bn", 3);
  Rng r(7);
  auto x = uniform_tensor<double>({4, 3, 3, 3}, -2, 5, r);
  auto y = batch_norm(VarD::constant(x), st, Mode::train).value();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) {
        const double v = y[(b * 3 + c) * 9 + i];
        s += v;
        sq += v * v;
      }
    EXPECT_LT(std::abs(s / 36), 1e-5);
    EXPECT_NEAR(sq / 36, 1.0, 1e-3);
  }
}

TEST(BatchNorm, RunningStatsUseMomentumAndUnbiasedVariance) {
  Registry<double> reg;
  auto st = BatchNormState<double>::make(reg, "bn", 1);
  Tensor<double> x({4, 1}, std::vector<double>{1, 2, 3, 6});
  batch_norm(VarD::constant(x), st, Mode::train);
  // mean 3, unbiased variance 14/3.
  EXPECT_NEAR(st.running_mean.value()[0], 0.1 * 3.0, 1e-12);
  EXPECT_NEAR(st.running_var.value()[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
}

TEST(BatchNorm, EvalIsPerChannelAffine) {
  Registry<double> reg;
  auto st = BatchNormState<double>::make(reg, "bn", 2);
  st.running_mean.mutable_value() = Tensor<double>({2}, std::vector<double>{0.3, -1.0});
  st.running_var.mutable_value() = Tensor<double>({2}, std::vector<double>{2.0, 0.5});
  st.gamma.mutable_value() = Tensor<double>({2}, std::vector<double>{1.5, -0.5});
  st.beta.mutable_value() = Tensor<double>({2}, std::vector<double>{0.1, 0.2});
  Rng r(8);
  auto x = uniform_tensor<double>({3, 2, 2, 2}, -1, 1, r);
  auto y = batch_norm(VarD::constant(x), st, Mode::eval).value();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = (i / 4) % 2;
    const double a = st.gamma.value()[c] / std::sqrt(st.running_var.value()[c] + 1e-5);
    const double b = st.beta.value()[c] - a * st.running_mean.value()[c];
    EXPECT_NEAR(y[i], a * x[i] + b, 1e-12);
  }
}

TEST(BatchNorm, TrainNeedsTwoValuesPerChannel) {
  Registry<float> reg;
  auto st = BatchNormState<float>::make(reg, "bn", 2);
  EXPECT_THROW(batch_norm(VarF::constant(Tensor<float>({1, 2, 1, 1})), st, Mode::train), ShapeError);
  EXPECT_NO_THROW(batch_norm(VarF::constant(Tensor<float>({1, 2, 1, 1})), st, Mode::eval));
}

TEST(WeightNorm, Examples) {
  Tensor<double> v({1, 2}, std::vector<double>{3, 4});
  auto w = weight_normalize(VarD::constant(v), VarD::constant(Tensor<double>::scalar(2.0))).value();
  EXPECT_NEAR(w[0], 1.2, 1e-12);
  EXPECT_NEAR(w[1], 1.6, 1e-12);

  Tensor<double> unit({2, 2}, std::vector<double>{0.6, 0.8, 1.0, 0.0});
  EXPECT_LT(max_abs_diff(weight_normalize(VarD::constant(unit)).value(), unit), 1e-15);

  Rng r(9);
  auto u = uniform_tensor<double>({3, 2, 3, 3}, -1, 1, r);
  auto u5 = u;
  for (auto& v : u5.data()) v *= 5.0;
  EXPECT_LT(max_abs_diff(weight_normalize(VarD::constant(u)).value(), weight_normalize(VarD::constant(u5)).value()), 1e-15);
}

TEST(WeightNorm, RowNormsEqualAbsGain) {
  Rng r(10);
  auto v = uniform_tensor<float>({4, 3, 3, 3}, -1, 1, r);
  Tensor<float> gain({4}, std::vector<float>{0.5f, -2.0f, 1.0f, 3.0f});
  auto w = weight_normalize(VarF::constant(v), VarF::constant(gain)).value();
  for (std::size_t c = 0; c < 4; ++c) {
    double n = 0;
    for (std::size_t i = 0; i < 27; ++i) n += double(w[c * 27 + i]) * w[c * 27 + i];
    EXPECT_NEAR(std::sqrt(n), std::abs(gain[c]), 1e-6);
  }
}

TEST(WeightNorm, ZeroSliceIsGuarded) {
  auto w = weight_normalize(VarF::constant(Tensor<float>::zeros({2, 3}))).value();
  EXPECT_TRUE(w.all_finite());
  EXPECT_EQ(w, Tensor<float>::zeros({2, 3}));
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(VarF::constant(Tensor<float>::ones({1, 2, 3, 3}))).value(), Tensor<float>::ones({1, 2}));
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{0, 2, 4, 6});
  EXPECT_EQ(global_avg_pool(VarF::constant(x)).value().item(), 3.0f);
  Tensor<float> y({2, 3, 1, 1}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(global_avg_pool(VarF::constant(y)).value(), y.reshape({2, 3}));
}

TEST(Linear, Examples) {
  Rng r(11);
  auto x = uniform_tensor<float>({3, 4}, -1, 1, r);
  EXPECT_EQ(linear(VarF::constant(x), VarF::constant(Tensor<float>::identity(4)), VarF::constant(Tensor<float>::zeros({4}))).value(), x);
  auto y = linear(VarF::constant(Tensor<float>({1, 2}, std::vector<float>{1, 2})),
                  VarF::constant(Tensor<float>({2, 1}, std::vector<float>{1, 1})), VarF::constant(Tensor<float>::scalar(1)));
  EXPECT_EQ(y.value().item(), 4.0f);
  Tensor<float> b({2}, std::vector<float>{0.5f, -1.5f});
  auto z = linear(VarF::constant(Tensor<float>::zeros({3, 4})), VarF::constant(Tensor<float>::ones({4, 2})), VarF::constant(b));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(z.value()[2 * i], 0.5f);
    EXPECT_EQ(z.value()[2 * i + 1], -1.5f);
  }
  EXPECT_THROW(linear(VarF::constant(x), VarF::constant(Tensor<float>::ones({3, 2}))), ShapeError);
}

TEST(Embedding, GatherAndGradientCounts) {
  auto table = VarD::leaf(Tensor<double>({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  std::vector<std::size_t> toks{0, 2, 0};
  auto e = embedding_lookup<double>(toks, table);
  EXPECT_EQ(e.value(), Tensor<double>({3, 2}, std::vector<double>{1, 2, 5, 6, 1, 2}));
  backward(sum(e));
  EXPECT_EQ(table.grad(), Tensor<double>({3, 2}, std::vector<double>{2, 2, 0, 0, 1, 1}));
  std::vector<std::size_t> bad{3};
  EXPECT_THROW(embedding_lookup<double>(bad, table), IndexError);
}

TEST(Gru, ZeroWeightsGiveZeroState) {
  Registry<double> reg;
  Rng r(12);
  auto p = GruParams<double>::make(reg, "gru", 3, 4, r);
  for (auto prm : reg.parameters()) prm.var.mutable_value().fill(0.0);
  auto h = gru_encode(VarD::constant(uniform_tensor<double>({5, 3}, -1, 1, r)), p);
  EXPECT_EQ(h.value(), Tensor<double>::zeros({1, 4}));
}

TEST(Gru, RecurrenceAppliedOncePerStep) {
  Registry<double> reg;
  Rng r(13);
  auto p = GruParams<double>::make(reg, "gru", 3, 4, r);
  auto tok = uniform_tensor<double>({1, 3}, -1, 1, r);
  Tensor<double> twice({2, 3});
  std::copy_n(tok.data().data(), 3, twice.data().data());
  std::copy_n(tok.data().data(), 3, twice.data().data() + 3);
  auto h1 = gru_encode(VarD::constant(tok), p);
  auto h2 = gru_encode(VarD::constant(twice), p);
  // Step-count probe: two steps equal one cell applied to the one-step state.
  auto manual = gru_cell(VarD::constant(tok), h1, p);
  EXPECT_GT(max_abs_diff(h1.value(), h2.value()), 1e-6);
  EXPECT_LT(max_abs_diff(manual.value(), h2.value()), 1e-15);
}

TEST(Gru, BatchedMatchesPerSequenceWithLengths) {
  Registry<double> reg;
  Rng r(14);
  auto p = GruParams<double>::make(reg, "gru", 3, 4, r);
  auto seqA = uniform_tensor<double>({3, 3}, -1, 1, r);
  auto seqB = uniform_tensor<double>({1, 3}, -1, 1, r);
  std::vector<VarD> steps;
  for (std::size_t t = 0; t < 3; ++t) {
    Tensor<double> s({2, 3});
    std::copy_n(seqA.data().data() + t * 3, 3, s.data().data());
    if (t == 0) std::copy_n(seqB.data().data(), 3, s.data().data() + 3);
    steps.push_back(VarD::constant(s));
  }
  auto h = gru_encode_batch(steps, {3, 1}, p).value();
  auto ha = gru_encode(VarD::constant(seqA), p).value();
  auto hb = gru_encode(VarD::constant(seqB), p).value();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(h[i], ha[i], 1e-15);
    EXPECT_NEAR(h[4 + i], hb[i], 1e-15);
  }
  EXPECT_THROW(gru_encode_batch<double>({}, {}, p), ShapeError);
}

TEST(SoftmaxAndWeightedSum, RowsSumToOne) {
  Rng r(15);
  auto s = softmax_rows(VarD::constant(uniform_tensor<double>({3, 7}, -5, 5, r))).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double t = 0;
    for (std::size_t j = 0; j < 7; ++j) t += s[i * 7 + j];
    EXPECT_NEAR(t, 1.0, 1e-12);
  }
}

}  // namespace
}  // namespace qghc
