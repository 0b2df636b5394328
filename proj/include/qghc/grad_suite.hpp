#pragma once

// The finite-difference suite: one small 64-bit instance per differentiable
// op, plus the end-to-end hybrid path. Each case projects its output onto a
// fixed random tensor so every output element carries a generic gradient.

#include <functional>
#include <string>
#include <vector>

#include "qghc/grad_check.hpp"
#include "qghc/training.hpp"

namespace qghc {

struct GradCase {
  std::string op;
  std::function<GradCheckReport(Rng&, double tol)> run;
};

struct GradCaseResult {
  std::string op;
  double max_rel_err = 0;
  std::size_t checked = 0;
  bool passed = false;
};

namespace detail {

using D = double;

inline Var<D> rand_leaf(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Var<D>::leaf(uniform_tensor<D>(std::move(s), lo, hi, rng));
}

// Values in [-1,-0.2] U [0.2,1]: keeps kinks further than eps away.
inline Var<D> rand_leaf_away_from_zero(Shape s, Rng& rng) {
  Tensor<D> t = uniform_tensor<D>(std::move(s), 0.2, 1.0, rng);
  for (auto& v : t.vec())
    if (rng.uniform() < 0.5) v = -v;
  return Var<D>::leaf(std::move(t));
}

// sum(out * R) for a random R drawn once per case.
inline std::function<Var<D>()> projected(std::function<Var<D>()> f, Rng& rng) {
  Tensor<D> probe = f().value();
  auto r = std::make_shared<Var<D>>(Var<D>::constant(uniform_tensor<D>(probe.shape(), -1.0, 1.0, rng)));
  return [f = std::move(f), r] { return sum(f() * *r); };
}

inline constexpr double kEps = 1e-5;
inline constexpr std::size_t kSamples = 24;

inline GradCheckReport check(std::function<Var<D>()> f, std::vector<NamedVar> params, Rng& rng, double tol,
                             bool project = true) {
  auto g = project ? projected(std::move(f), rng) : std::move(f);
  return finite_diff_check(g, params, kEps, tol, kSamples, rng);
}

inline std::vector<NamedVar> named(const Registry<D>& reg) {
  std::vector<NamedVar> out;
  for (const auto& p : reg.parameters()) out.push_back({p.name, p.var});
  return out;
}

}  // namespace detail

inline std::vector<GradCase> grad_cases() {
  using detail::D;
  using detail::check;
  using detail::rand_leaf;
  std::vector<GradCase> c;

  c.push_back({"add", [](Rng& rng, double tol) {
                 auto a = rand_leaf({3, 4}, rng), b = rand_leaf({3, 4}, rng);
                 return check([=] { return a + b; }, {{"a", a}, {"b", b}}, rng, tol);
               }});
  c.push_back({"sub", [](Rng& rng, double tol) {
                 auto a = rand_leaf({3, 4}, rng), b = rand_leaf({3, 4}, rng);
                 return check([=] { return a - b; }, {{"a", a}, {"b", b}}, rng, tol);
               }});
  c.push_back({"mul", [](Rng& rng, double tol) {
                 auto a = rand_leaf({3, 4}, rng), b = rand_leaf({3, 4}, rng);
                 return check([=] { return a * b; }, {{"a", a}, {"b", b}}, rng, tol);
               }});
  c.push_back({"scale", [](Rng& rng, double tol) {
                 auto a = rand_leaf({3, 4}, rng);
                 return check([=] { return scale(a, 1.7); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"relu", [](Rng& rng, double tol) {
                 auto a = detail::rand_leaf_away_from_zero({4, 5}, rng);
                 return check([=] { return relu(a); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"sigmoid", [](Rng& rng, double tol) {
                 auto a = rand_leaf({4, 5}, rng, -3, 3);
                 return check([=] { return sigmoid(a); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"tanh", [](Rng& rng, double tol) {
                 auto a = rand_leaf({4, 5}, rng, -3, 3);
                 return check([=] { return tanh(a); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"matmul", [](Rng& rng, double tol) {
                 auto a = rand_leaf({3, 4}, rng), b = rand_leaf({4, 5}, rng);
                 return check([=] { return matmul(a, b); }, {{"a", a}, {"b", b}}, rng, tol);
               }});
  c.push_back({"reduce_sum", [](Rng& rng, double tol) {
                 auto a = rand_leaf({2, 3, 4}, rng);
                 return check([=] { return reduce(a, {0, 2}, Reduce::sum); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"reduce_mean", [](Rng& rng, double tol) {
                 auto a = rand_leaf({2, 3, 4}, rng);
                 return check([=] { return reduce(a, {1}, Reduce::mean); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"reduce_max", [](Rng& rng, double tol) {
                 auto a = rand_leaf({2, 3, 4}, rng);
                 return check([=] { return reduce(a, {2}, Reduce::max); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"reshape", [](Rng& rng, double tol) {
                 auto a = rand_leaf({2, 6}, rng);
                 return check([=] { return reshape(a, {3, 4}); }, {{"a", a}}, rng, tol);
               }});
  c.push_back({"concat", [](Rng& rng, double tol) {
                 auto a = rand_leaf({2, 3, 2}, rng), b = rand_leaf({2, 1, 2}, rng);
                 return check([=] { return concat<D>({a, b}, 1); }, {{"a", a}, {"b", b}}, rng, tol);
               }});
  c.push_back({"conv2d_grouped", [](Rng& rng, double tol) {
                 ConvSpec s{4, 6, 2, 3, 1};
                 auto x = rand_leaf({2, 4, 5, 5}, rng), w = rand_leaf(s.kernel_shape(), rng);
                 return check([=] { return conv2d_grouped(x, w, s); }, {{"input", x}, {"kernel", w}}, rng, tol);
               }});
  c.push_back({"conv2d_strided", [](Rng& rng, double tol) {
                 ConvSpec s{3, 4, 1, 3, 2};
                 auto x = rand_leaf({2, 3, 5, 5}, rng), w = rand_leaf(s.kernel_shape(), rng);
                 return check([=] { return conv2d_grouped(x, w, s); }, {{"input", x}, {"kernel", w}}, rng, tol);
               }});
  c.push_back({"conv2d_per_sample", [](Rng& rng, double tol) {
                 ConvSpec s{4, 4, 2, 3, 1};
                 Shape ks = s.kernel_shape();
                 ks.insert(ks.begin(), 2);
                 auto x = rand_leaf({2, 4, 4, 4}, rng), w = rand_leaf(ks, rng);
                 return check([=] { return conv2d_grouped(x, w, s); }, {{"input", x}, {"kernel", w}}, rng, tol);
               }});
  c.push_back({"channel_shuffle", [](Rng& rng, double tol) {
                 auto x = rand_leaf({2, 6, 2, 2}, rng);
                 return check([=] { return channel_shuffle(x, 3); }, {{"input", x}}, rng, tol);
               }});
  c.push_back({"batch_norm_train", [](Rng& rng, double tol) {
                 Registry<D> reg;
                 auto st = std::make_shared<BatchNormState<D>>(BatchNormState<D>::make(reg, "bn", 3));
                 st->gamma.mutable_value() = uniform_tensor<D>({3}, 0.5, 1.5, rng);
                 st->beta.mutable_value() = uniform_tensor<D>({3}, -0.5, 0.5, rng);
                 auto x = rand_leaf({3, 3, 2, 2}, rng);
                 return check([=] { return batch_norm(x, *st, Mode::train); },
                              {{"input", x}, {"gamma", st->gamma}, {"beta", st->beta}}, rng, tol);
               }});
  c.push_back({"batch_norm_eval", [](Rng& rng, double tol) {
                 Registry<D> reg;
                 auto st = std::make_shared<BatchNormState<D>>(BatchNormState<D>::make(reg, "bn", 3));
                 st->gamma.mutable_value() = uniform_tensor<D>({3}, 0.5, 1.5, rng);
                 st->running_mean.mutable_value() = uniform_tensor<D>({3}, -0.5, 0.5, rng);
                 st->running_var.mutable_value() = uniform_tensor<D>({3}, 0.5, 2.0, rng);
                 auto x = rand_leaf({2, 3, 2, 2}, rng);
                 return check([=] { return batch_norm(x, *st, Mode::eval); },
                              {{"input", x}, {"gamma", st->gamma}, {"beta", st->beta}}, rng, tol);
               }});
  c.push_back({"weight_normalize", [](Rng& rng, double tol) {
                 auto v = rand_leaf({3, 2, 3, 3}, rng), g = rand_leaf({3}, rng, 0.5, 2.0);
                 return check([=] { return weight_normalize(v, g); }, {{"v", v}, {"gain", g}}, rng, tol);
               }});
  c.push_back({"global_avg_pool", [](Rng& rng, double tol) {
                 auto x = rand_leaf({2, 3, 3, 3}, rng);
                 return check([=] { return global_avg_pool(x); }, {{"input", x}}, rng, tol);
               }});
  c.push_back({"linear", [](Rng& rng, double tol) {
                 auto x = rand_leaf({3, 4}, rng), w = rand_leaf({4, 5}, rng), b = rand_leaf({5}, rng);
                 return check([=] { return linear(x, w, b); }, {{"x", x}, {"W", w}, {"b", b}}, rng, tol);
               }});
  c.push_back({"embedding_lookup", [](Rng& rng, double tol) {
                 auto table = rand_leaf({5, 3}, rng);
                 std::vector<std::size_t> tokens{1, 4, 1, 0, 2, 4};
                 return check([=] { return embedding_lookup<D>(tokens, table); }, {{"table", table}}, rng, tol);
               }});
  c.push_back({"slice_cols", [](Rng& rng, double tol) {
                 auto x = rand_leaf({3, 6}, rng);
                 return check([=] { return slice_cols(x, 2, 3); }, {{"x", x}}, rng, tol);
               }});
  c.push_back({"slice_rows", [](Rng& rng, double tol) {
                 auto x = rand_leaf({5, 2}, rng);
                 return check([=] { return slice_rows(x, 1, 3); }, {{"x", x}}, rng, tol);
               }});
  c.push_back({"gru_cell", [](Rng& rng, double tol) {
                 auto reg = std::make_shared<Registry<D>>();
                 auto p = GruParams<D>::make(*reg, "gru", 3, 4, rng);
                 p.b_ih.mutable_value() = uniform_tensor<D>({12}, -0.5, 0.5, rng);
                 p.b_hh.mutable_value() = uniform_tensor<D>({12}, -0.5, 0.5, rng);
                 auto x = rand_leaf({2, 3}, rng), h = rand_leaf({2, 4}, rng);
                 auto params = detail::named(*reg);
                 params.push_back({"x", x});
                 params.push_back({"h", h});
                 return check([=] { return gru_cell(x, h, p); }, params, rng, tol);
               }});
  c.push_back({"gru_encode_batch", [](Rng& rng, double tol) {
                 auto reg = std::make_shared<Registry<D>>();
                 auto p = GruParams<D>::make(*reg, "gru", 3, 4, rng);
                 std::vector<Var<D>> steps;
                 auto params = detail::named(*reg);
                 for (int t = 0; t < 3; ++t) {
                   steps.push_back(rand_leaf({3, 3}, rng));
                   params.push_back({"step" + std::to_string(t), steps.back()});
                 }
                 return check([=] { return gru_encode_batch(steps, {3, 1, 2}, p); }, params, rng, tol);
               }});
  c.push_back({"add_channel_bias", [](Rng& rng, double tol) {
                 auto f = rand_leaf({2, 3, 2, 2}, rng), v = rand_leaf({2, 3}, rng);
                 return check([=] { return add_channel_bias(f, v); }, {{"f", f}, {"v", v}}, rng, tol);
               }});
  c.push_back({"softmax_rows", [](Rng& rng, double tol) {
                 auto x = rand_leaf({3, 5}, rng, -2, 2);
                 return check([=] { return softmax_rows(x); }, {{"x", x}}, rng, tol);
               }});
  c.push_back({"weighted_spatial_sum", [](Rng& rng, double tol) {
                 auto f = rand_leaf({2, 3, 2, 2}, rng), w = rand_leaf({2, 4}, rng, 0, 1);
                 return check([=] { return weighted_spatial_sum(f, w); }, {{"f", f}, {"w", w}}, rng, tol);
               }});
  c.push_back({"predict_kernels", [](Rng& rng, double tol) {
                 auto reg = std::make_shared<Registry<D>>();
                 KernelPredictor<D> pred(*reg, "pred", 5, 6, 2, 2, rng);
                 auto fq = rand_leaf({2, 5}, rng);
                 auto params = detail::named(*reg);
                 params.push_back({"f_q", fq});
                 return check([=] { return pred.predict(fq).values; }, params, rng, tol);
               }});
  c.push_back({"assemble_group_kernels", [](Rng& rng, double tol) {
                 auto dyn = rand_leaf({2, 2, 2, 3, 3}, rng);
                 auto f0 = rand_leaf({2, 2, 3, 3}, rng), f1 = rand_leaf({2, 2, 3, 3}, rng);
                 return check([=] { return assemble_group_kernels<D>(dyn, {f0, f1}, {1}, 3, 2); },
                              {{"dynamic", dyn}, {"free0", f0}, {"free1", f1}}, rng, tol);
               }});
  c.push_back({"attention_pool", [](Rng& rng, double tol) {
                 auto reg = std::make_shared<Registry<D>>();
                 auto head = AttentionHead<D>::make(*reg, 3, 4, rng);
                 auto f = rand_leaf({2, 3, 2, 2}, rng), fq = rand_leaf({2, 4}, rng);
                 auto params = detail::named(*reg);
                 params.push_back({"f", f});
                 params.push_back({"f_q", fq});
                 return check([=] { return attention_pool(f, fq, head); }, params, rng, tol);
               }});
  c.push_back({"cross_entropy", [](Rng& rng, double tol) {
                 auto logits = rand_leaf({4, 5}, rng, -2, 2);
                 std::vector<std::size_t> targets{0, 3, 4, 3};
                 return check([=] { return cross_entropy(logits, targets); }, {{"logits", logits}}, rng, tol, false);
               }});
  // predictor -> dynamic kernel -> grouped conv -> shuffle -> residual ->
  // pooled logits -> loss, every parameter of the module included.
  c.push_back({"qghc_hybrid_path", [](Rng& rng, double tol) {
                 auto reg = std::make_shared<Registry<D>>();
                 QGHCConfig cfg;
                 cfg.in_channels = cfg.out_channels = 8;
                 cfg.groups = 2;
                 cfg.dynamic_groups = 1;
                 cfg.question_dim = 5;
                 cfg.hidden = 6;
                 cfg.modules = 1;
                 auto mod = std::make_shared<QGHCModule<D>>(*reg, "qghc.0", cfg, std::vector<std::size_t>{0}, rng);
                 auto head_w = reg->add_parameter("head.weight", uniform_tensor<D>({8, 3}, -1, 1, rng), Role::qi_free);
                 auto x = rand_leaf({3, 8, 4, 4}, rng), fq = rand_leaf({3, 5}, rng);
                 auto params = detail::named(*reg);
                 params.push_back({"input", x});
                 params.push_back({"f_q", fq});
                 std::vector<std::size_t> targets{0, 2, 1};
                 return check(
                     [=] {
                       Var<D> y = mod->forward(x, fq, Mode::train);
                       return cross_entropy(matmul(global_avg_pool(y), head_w), targets);
                     },
                     params, rng, tol, false);
               }});
  return c;
}

// Runs every case with its own stream derived from `seed`.
inline std::vector<GradCaseResult> run_grad_suite(std::uint64_t seed, double tol) {
  std::vector<GradCaseResult> out;
  const auto cases = grad_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Rng rng = Rng::derive(seed, i);
    const GradCheckReport rep = cases[i].run(rng, tol);
    out.push_back({cases[i].op, rep.max_rel_err, rep.entries.size(), rep.passed});
  }
  return out;
}

}  // namespace qghc
