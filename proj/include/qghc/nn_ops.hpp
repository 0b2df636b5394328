#pragma once

// Differentiable neural-network building blocks: grouped convolution (shared
// or per-sample kernels), channel shuffle, batch and weight normalization,
// pooling, linear, embedding, GRU, and the spatial-softmax pieces of the
// attention head.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qghc/autodiff.hpp"
#include "qghc/detail/conv_impl.hpp"

namespace qghc {

enum class Mode { train, eval };

// Stride is 1 everywhere except the toy image encoder.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t groups = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;

  std::size_t pad() const { return (kernel - 1) / 2; }
  Shape kernel_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }
  std::size_t fan_in() const { return (in_channels / groups) * kernel * kernel; }

  void validate() const {
    if (kernel != 1 && kernel != 3) throw ConfigError("conv kernel must be 1x1 or 3x3");
    if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0)
      throw ShapeError("conv: channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                       " not divisible by groups " + std::to_string(groups));
    if (stride != 1 && stride != 2) throw ConfigError("conv stride must be 1 or 2");
  }
};

// kernels: (C_out, C_in/G, k, k) shared by the batch, or
//          (B, C_out, C_in/G, k, k) with one kernel set per sample.
template <class T>
Var<T> conv2d_grouped(const Var<T>& input, const Var<T>& kernels, const ConvSpec& spec) {
  spec.validate();
  const Shape& xs = input.shape();
  if (xs.size() != 4 || xs[1] != spec.in_channels)
    throw ShapeError("conv2d: input " + shape_str(xs) + " does not match in_channels " +
                     std::to_string(spec.in_channels));
  const std::size_t B = xs[0];
  const bool per_sample = kernels.shape().size() == 5;
  Shape expect = spec.kernel_shape();
  if (per_sample) expect.insert(expect.begin(), B);
  if (kernels.shape() != expect)
    throw ShapeError("conv2d: kernel shape " + shape_str(kernels.shape()) + ", expected " + shape_str(expect));

  const std::size_t G = spec.groups;
  detail::ConvGeom g{spec.in_channels / G,
                     spec.out_channels / G,
                     xs[2],
                     xs[3],
                     (xs[2] + 2 * spec.pad() - spec.kernel) / spec.stride + 1,
                     (xs[3] + 2 * spec.pad() - spec.kernel) / spec.stride + 1,
                     spec.kernel,
                     spec.kernel,
                     spec.stride,
                     spec.pad()};
  const std::size_t R = g.rows(), J = g.cols();
  const std::size_t wg = g.cout * R;  // weights per group
  const std::size_t wsample = G * wg;

  auto cols = std::make_shared<std::vector<T>>(B * G * R * J);
  Tensor<T> out({B, spec.out_channels, g.Ho, g.Wo});
  const T* X = input.value().data().data();
  const T* K = kernels.value().data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gi = 0; gi < G; ++gi) {
      T* c = cols->data() + (b * G + gi) * R * J;
      detail::im2col(X + (b * spec.in_channels + gi * g.cin) * g.H * g.W, g, c);
      const T* w = K + (per_sample ? b * wsample : 0) + gi * wg;
      detail::conv_forward(c, w, g, out.data().data() + (b * spec.out_channels + gi * g.cout) * J);
    }

  return make_result<T>(
      std::move(out), {input, kernels},
      [cols, g, G, B, per_sample, wg, wsample, spec](Node<T>& self) {
        const std::size_t R = g.rows(), J = g.cols();
        const T* GO = self.grad.data().data();
        const T* K = self.parents[1]->value.data().data();
        if (self.parent_needs_grad(0)) {
          Tensor<T> gin(self.parents[0]->value.shape());
          std::vector<T> gcols(R * J);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t gi = 0; gi < G; ++gi) {
              const T* w = K + (per_sample ? b * wsample : 0) + gi * wg;
              detail::conv_backward_cols(GO + (b * spec.out_channels + gi * g.cout) * J, w, g, gcols.data());
              detail::col2im_add(gcols.data(), g, gin.data().data() + (b * spec.in_channels + gi * g.cin) * g.H * g.W);
            }
          self.parents[0]->accumulate(gin);
        }
        if (self.parent_needs_grad(1)) {
          Tensor<T> gk(self.parents[1]->value.shape());
          std::vector<T> scratch;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t gi = 0; gi < G; ++gi) {
              T* gw = gk.data().data() + (per_sample ? b * wsample : 0) + gi * wg;
              detail::conv_backward_weight(GO + (b * spec.out_channels + gi * g.cout) * J,
                                           cols->data() + (b * G + gi) * R * J, g, gw, scratch);
            }
          self.parents[1]->accumulate(gk);
        }
      },
      "conv2d_grouped");
}

// Output channel j*g + i takes input channel i*(C/g) + j.
inline std::vector<std::size_t> shuffle_permutation(std::size_t channels, std::size_t groups) {
  if (groups == 0 || channels % groups != 0)
    throw ShapeError("channel_shuffle: " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(groups));
  const std::size_t per = channels / groups;
  std::vector<std::size_t> src(channels);
  for (std::size_t i = 0; i < groups; ++i)
    for (std::size_t j = 0; j < per; ++j) src[j * groups + i] = i * per + j;
  return src;
}

template <class T>
Var<T> channel_shuffle(const Var<T>& input, std::size_t groups) {
  const Shape& s = input.shape();
  if (s.size() != 4) throw ShapeError("channel_shuffle expects (B,C,H,W)");
  const std::size_t B = s[0], C = s[1], HW = s[2] * s[3];
  auto src = shuffle_permutation(C, groups);
  Tensor<T> out(s);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(input.value().data().data() + (b * C + src[c]) * HW, HW, out.data().data() + (b * C + c) * HW);
  return make_result<T>(
      std::move(out), {input},
      [src, B, C, HW](Node<T>& self) {
        Tensor<T> g(self.value.shape());
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            std::copy_n(self.grad.data().data() + (b * C + c) * HW, HW, g.data().data() + (b * C + src[c]) * HW);
        self.parents[0]->accumulate(g);
      },
      "channel_shuffle");
}

template <class T>
struct BatchNormState {
  Var<T> gamma, beta;                 // trainable affine
  Var<T> running_mean, running_var;   // buffers
  T momentum = T(0.1);
  T eps = T(1e-5);

  std::size_t channels() const { return gamma.numel(); }

  static BatchNormState make(Registry<T>& reg, const std::string& prefix, std::size_t channels) {
    BatchNormState st;
    st.gamma = reg.add_parameter(prefix + ".gamma", Tensor<T>::ones({channels}), Role::qi_free);
    st.beta = reg.add_parameter(prefix + ".beta", Tensor<T>::zeros({channels}), Role::qi_free);
    st.running_mean = reg.add_buffer(prefix + ".running_mean", Tensor<T>::zeros({channels}));
    st.running_var = reg.add_buffer(prefix + ".running_var", Tensor<T>::ones({channels}));
    return st;
  }
};

// Input (B,C,H,W) or (B,C). Train mode normalises with batch statistics over
// (B,H,W) and updates the running estimates (unbiased variance); eval mode
// uses the running estimates.
template <class T>
Var<T> batch_norm(const Var<T>& input, BatchNormState<T>& st, Mode mode) {
  const Shape& s = input.shape();
  if (s.size() != 4 && s.size() != 2) throw ShapeError("batch_norm expects (B,C,H,W) or (B,C)");
  const std::size_t B = s[0], C = s[1], S = s.size() == 4 ? s[2] * s[3] : 1;
  if (C != st.channels()) throw ShapeError("batch_norm: channel mismatch");
  const std::size_t count = B * S;
  const T* X = input.value().data().data();
  const T* gamma = st.gamma.value().data().data();
  const T* beta = st.beta.value().data().data();

  auto xhat = std::make_shared<Tensor<T>>(s);
  auto inv_std = std::make_shared<std::vector<T>>(C);
  Tensor<T> out(s);

  if (mode == Mode::train) {
    if (count < 2) throw ShapeError("batch_norm: train mode needs B*H*W >= 2");
    auto& rm = st.running_mean.mutable_value();
    auto& rv = st.running_var.mutable_value();
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = X + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) m += p[i];
      }
      m /= static_cast<double>(count);
      double v = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = X + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / static_cast<double>(count);
      (*inv_std)[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(st.eps)));
      rm[c] = (T{1} - st.momentum) * rm[c] + st.momentum * static_cast<T>(m);
      rv[c] = (T{1} - st.momentum) * rv[c] + st.momentum * static_cast<T>(v / static_cast<double>(count - 1));
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const T xh = static_cast<T>((X[off + i] - m) * (*inv_std)[c]);
          (*xhat)[off + i] = xh;
          out[off + i] = gamma[c] * xh + beta[c];
        }
      }
    }
  } else {
    const auto& rm = st.running_mean.value();
    const auto& rv = st.running_var.value();
    for (std::size_t c = 0; c < C; ++c) {
      (*inv_std)[c] = T{1} / std::sqrt(rv[c] + st.eps);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const T xh = (X[off + i] - rm[c]) * (*inv_std)[c];
          (*xhat)[off + i] = xh;
          out[off + i] = gamma[c] * xh + beta[c];
        }
      }
    }
  }

  return make_result<T>(
      std::move(out), {input, st.gamma, st.beta},
      [xhat, inv_std, B, C, S, count, mode](Node<T>& self) {
        const T* G = self.grad.data().data();
        const T* gamma = self.parents[1]->value.data().data();
        Tensor<T> dgamma({C}), dbeta({C});
        Tensor<T> dx(self.value.shape());
        for (std::size_t c = 0; c < C; ++c) {
          T sg{0}, sgx{0};
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
              sg += G[off + i];
              sgx += G[off + i] * (*xhat)[off + i];
            }
          }
          dgamma[c] = sgx;
          dbeta[c] = sg;
          const T k = gamma[c] * (*inv_std)[c];
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
              if (mode == Mode::train)
                dx[off + i] = k * (G[off + i] - sg / n - (*xhat)[off + i] * sgx / n);
              else
                dx[off + i] = k * G[off + i];
            }
          }
        }
        if (self.parent_needs_grad(0)) self.parents[0]->accumulate(dx);
        if (self.parent_needs_grad(1)) self.parents[1]->accumulate(dgamma);
        if (self.parent_needs_grad(2)) self.parents[2]->accumulate(dbeta);
      },
      "batch_norm");
}

inline constexpr double kWeightNormEps = 1e-8;

// w[c] = gain[c] * v[c] / max(||v[c]||, 1e-8), slices taken along axis 0.
// An undefined `gain` means a fixed gain of 1.
template <class T>
Var<T> weight_normalize(const Var<T>& v, const Var<T>& gain = {}) {
  const std::size_t rows = v.dim(0), cols = v.numel() / rows;
  if (gain.defined() && gain.shape() != Shape{rows})
    throw ShapeError("weight_normalize: gain shape " + shape_str(gain.shape()));
  const T* V = v.value().data().data();
  auto denom = std::make_shared<std::vector<T>>(rows);
  auto clamped = std::make_shared<std::vector<bool>>(rows);
  Tensor<T> out(v.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T ss{0};
    for (std::size_t c = 0; c < cols; ++c) ss += V[r * cols + c] * V[r * cols + c];
    const T norm = std::sqrt(ss);
    (*clamped)[r] = norm <= static_cast<T>(kWeightNormEps);
    (*denom)[r] = (*clamped)[r] ? static_cast<T>(kWeightNormEps) : norm;
    const T gr = gain.defined() ? gain.value()[r] : T{1};
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = gr * V[r * cols + c] / (*denom)[r];
  }
  std::vector<Var<T>> parents{v};
  if (gain.defined()) parents.push_back(gain);
  const bool has_gain = gain.defined();
  return make_result<T>(
      std::move(out), parents,
      [rows, cols, denom, clamped, has_gain](Node<T>& self) {
        const T* V = self.parents[0]->value.data().data();
        const T* G = self.grad.data().data();
        Tensor<T> dv(self.parents[0]->value.shape());
        Tensor<T> dg({rows});
        for (std::size_t r = 0; r < rows; ++r) {
          const T gr = has_gain ? self.parents[1]->value[r] : T{1};
          const T d = (*denom)[r];
          T dot{0};  // sum_c G * v / d
          for (std::size_t c = 0; c < cols; ++c) dot += G[r * cols + c] * V[r * cols + c] / d;
          dg[r] = dot;
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            dv[i] = (*clamped)[r] ? gr * G[i] / d : gr / d * (G[i] - V[i] / d * dot);
          }
        }
        if (self.parent_needs_grad(0)) self.parents[0]->accumulate(dv);
        if (has_gain && self.parent_needs_grad(1)) self.parents[1]->accumulate(dg);
      },
      "weight_normalize");
}

template <class T>
Var<T> global_avg_pool(const Var<T>& input) {
  const Shape& s = input.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool expects (B,C,H,W)");
  return reshape(reduce(input, {2, 3}, Reduce::mean), {s[0], s[1]});
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& W, const Var<T>& b = {}) {
  if (x.shape().size() != 2 || W.shape().size() != 2 || x.dim(1) != W.dim(0))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(W.shape()));
  const std::size_t B = x.dim(0), Dout = W.dim(1);
  Tensor<T> y = matmul(x.value(), W.value());
  if (b.defined()) {
    if (b.shape() != Shape{Dout}) throw ShapeError("linear: bias shape " + shape_str(b.shape()));
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < Dout; ++j) y[i * Dout + j] += b.value()[j];
  }
  std::vector<Var<T>> parents{x, W};
  if (b.defined()) parents.push_back(b);
  return make_result<T>(
      std::move(y), parents,
      [B, Dout](Node<T>& self) {
        if (self.parent_needs_grad(0))
          self.parents[0]->accumulate(matmul(self.grad, transpose2d(self.parents[1]->value)));
        if (self.parent_needs_grad(1))
          self.parents[1]->accumulate(matmul(transpose2d(self.parents[0]->value), self.grad));
        if (self.parent_needs_grad(2)) {
          Tensor<T> gb({Dout});
          for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < Dout; ++j) gb[j] += self.grad[i * Dout + j];
          self.parents[2]->accumulate(gb);
        }
      },
      "linear");
}

// Gathers rows of `table` (V,E); output (T,E).
template <class T>
Var<T> embedding_lookup(std::span<const std::size_t> tokens, const Var<T>& table) {
  if (tokens.empty()) throw ShapeError("embedding_lookup: empty token sequence");
  const std::size_t V = table.dim(0), E = table.dim(1);
  Tensor<T> out({tokens.size(), E});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= V)
      throw IndexError("embedding_lookup: token " + std::to_string(tokens[t]) + " >= vocab " + std::to_string(V));
    std::copy_n(table.value().data().data() + tokens[t] * E, E, out.data().data() + t * E);
  }
  std::vector<std::size_t> toks(tokens.begin(), tokens.end());
  return make_result<T>(
      std::move(out), {table},
      [toks = std::move(toks), E](Node<T>& self) {
        Tensor<T> g(self.parents[0]->value.shape());
        for (std::size_t t = 0; t < toks.size(); ++t)
          for (std::size_t e = 0; e < E; ++e) g[toks[t] * E + e] += self.grad[t * E + e];
        self.parents[0]->accumulate(g);
      },
      "embedding_lookup");
}

// Columns [start, start+len) of a (B,D) tensor.
template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t len) {
  if (x.shape().size() != 2 || start + len > x.dim(1)) throw ShapeError("slice_cols out of range");
  const std::size_t B = x.dim(0), D = x.dim(1);
  Tensor<T> out({B, len});
  for (std::size_t i = 0; i < B; ++i) std::copy_n(x.value().data().data() + i * D + start, len, out.data().data() + i * len);
  return make_result<T>(
      std::move(out), {x},
      [B, D, start, len](Node<T>& self) {
        Tensor<T> g(self.parents[0]->value.shape());
        for (std::size_t i = 0; i < B; ++i)
          std::copy_n(self.grad.data().data() + i * len, len, g.data().data() + i * D + start);
        self.parents[0]->accumulate(g);
      },
      "slice_cols");
}

// Gate layout along the 3*D axis is (reset, update, candidate).
template <class T>
struct GruParams {
  Var<T> w_ih;  // (E, 3D)
  Var<T> w_hh;  // (D, 3D)
  Var<T> b_ih;  // (3D)
  Var<T> b_hh;  // (3D)

  std::size_t hidden() const { return w_hh.dim(0); }
  std::size_t input() const { return w_ih.dim(0); }

  static GruParams make(Registry<T>& reg, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
    GruParams p;
    p.w_ih = reg.add_parameter(prefix + ".w_ih", init_kaiming_uniform<T>({in, 3 * hidden}, in, rng), Role::qi_free);
    p.w_hh = reg.add_parameter(prefix + ".w_hh", init_kaiming_uniform<T>({hidden, 3 * hidden}, hidden, rng),
                               Role::qi_free);
    p.b_ih = reg.add_parameter(prefix + ".b_ih", Tensor<T>::zeros({3 * hidden}), Role::qi_free);
    p.b_hh = reg.add_parameter(prefix + ".b_hh", Tensor<T>::zeros({3 * hidden}), Role::qi_free);
    return p;
  }
};

// One recurrence step:
//   r = s(x Wr + h Ur + b), z = s(x Wz + h Uz + b),
//   c = tanh(x Wc + b + r * (h Uc + b)),  h' = c + z * (h - c)
template <class T>
Var<T> gru_cell(const Var<T>& x, const Var<T>& h, const GruParams<T>& p) {
  const std::size_t D = p.hidden();
  Var<T> gi = linear(x, p.w_ih, p.b_ih);
  Var<T> gh = linear(h, p.w_hh, p.b_hh);
  Var<T> r = sigmoid(slice_cols(gi, 0, D) + slice_cols(gh, 0, D));
  Var<T> z = sigmoid(slice_cols(gi, D, D) + slice_cols(gh, D, D));
  Var<T> c = tanh(slice_cols(gi, 2 * D, D) + r * slice_cols(gh, 2 * D, D));
  return c + z * (h - c);
}

// Batched encoder over per-step inputs (each (B,E)). Sample b stops updating
// after lengths[b] steps, so the result is its own final hidden state.
template <class T>
Var<T> gru_encode_batch(const std::vector<Var<T>>& steps, const std::vector<std::size_t>& lengths,
                        const GruParams<T>& p) {
  if (steps.empty()) throw ShapeError("gru_encode: empty sequence");
  const std::size_t B = steps[0].dim(0), D = p.hidden();
  if (lengths.size() != B) throw ShapeError("gru_encode: lengths size mismatch");
  for (auto L : lengths)
    if (L == 0 || L > steps.size()) throw ShapeError("gru_encode: sequence length out of range");
  Var<T> h = Var<T>::constant(Tensor<T>({B, D}));
  for (std::size_t t = 0; t < steps.size(); ++t) {
    Var<T> hn = gru_cell(steps[t], h, p);
    bool all = true, none = true;
    Tensor<T> mask({B, D});
    for (std::size_t b = 0; b < B; ++b) {
      const bool on = t < lengths[b];
      all = all && on;
      none = none && !on;
      if (on) std::fill_n(mask.data().data() + b * D, D, T{1});
    }
    if (all)
      h = hn;
    else if (!none)
      h = h + Var<T>::constant(std::move(mask)) * (hn - h);
  }
  return h;
}

// Single sequence (T,E) -> (1,D).
template <class T>
Var<T> gru_encode(const Var<T>& tokens, const GruParams<T>& p) {
  if (tokens.shape().size() != 2 || tokens.dim(0) == 0) throw ShapeError("gru_encode: expects (T,E)");
  const std::size_t Tn = tokens.dim(0), E = tokens.dim(1);
  std::vector<Var<T>> steps;
  for (std::size_t t = 0; t < Tn; ++t) steps.push_back(reshape(slice_rows(tokens, t, 1), {1, E}));
  return gru_encode_batch(steps, {Tn}, p);
}

// Rows [start, start+len) of a rank>=1 tensor, along axis 0.
template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t len) {
  const std::size_t R = x.dim(0);
  if (len == 0 || start + len > R) throw ShapeError("slice_rows out of range");
  const std::size_t inner = x.numel() / R;
  Shape s = x.shape();
  s[0] = len;
  Tensor<T> out(s);
  std::copy_n(x.value().data().data() + start * inner, len * inner, out.data().data());
  return make_result<T>(
      std::move(out), {x},
      [start, inner](Node<T>& self) {
        Tensor<T> g(self.parents[0]->value.shape());
        std::copy(self.grad.data().begin(), self.grad.data().end(), g.data().begin() + start * inner);
        self.parents[0]->accumulate(g);
      },
      "slice_rows");
}

// f (B,C,H,W) + v (B,C) broadcast over space.
template <class T>
Var<T> add_channel_bias(const Var<T>& f, const Var<T>& v) {
  const Shape& s = f.shape();
  if (s.size() != 4 || v.shape() != Shape{s[0], s[1]}) throw ShapeError("add_channel_bias: shape mismatch");
  const std::size_t BC = s[0] * s[1], S = s[2] * s[3];
  Tensor<T> out = f.value();
  for (std::size_t i = 0; i < BC; ++i)
    for (std::size_t k = 0; k < S; ++k) out[i * S + k] += v.value()[i];
  return make_result<T>(
      std::move(out), {f, v},
      [BC, S](Node<T>& self) {
        if (self.parent_needs_grad(0)) self.parents[0]->accumulate(self.grad);
        if (self.parent_needs_grad(1)) {
          Tensor<T> g(self.parents[1]->value.shape());
          for (std::size_t i = 0; i < BC; ++i)
            for (std::size_t k = 0; k < S; ++k) g[i] += self.grad[i * S + k];
          self.parents[1]->accumulate(g);
        }
      },
      "add_channel_bias");
}

// Row-wise softmax of a (B,K) tensor.
template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  if (x.shape().size() != 2) throw ShapeError("softmax_rows expects (B,K)");
  const std::size_t B = x.dim(0), K = x.dim(1);
  Tensor<T> y({B, K});
  for (std::size_t b = 0; b < B; ++b) {
    const T* r = x.value().data().data() + b * K;
    const T m = *std::max_element(r, r + K);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += (y[b * K + k] = std::exp(r[k] - m));
    for (std::size_t k = 0; k < K; ++k) y[b * K + k] /= s;
  }
  return make_result<T>(
      std::move(y), {x},
      [B, K](Node<T>& self) {
        Tensor<T> g({B, K});
        for (std::size_t b = 0; b < B; ++b) {
          T dot{0};
          for (std::size_t k = 0; k < K; ++k) dot += self.grad[b * K + k] * self.value[b * K + k];
          for (std::size_t k = 0; k < K; ++k) g[b * K + k] = self.value[b * K + k] * (self.grad[b * K + k] - dot);
        }
        self.parents[0]->accumulate(g);
      },
      "softmax_rows");
}

// out[b,c] = sum_s w[b,s] * f[b,c,s]  for f (B,C,H,W), w (B,H*W).
template <class T>
Var<T> weighted_spatial_sum(const Var<T>& f, const Var<T>& w) {
  const Shape& s = f.shape();
  const std::size_t B = s[0], C = s[1], S = s[2] * s[3];
  if (s.size() != 4 || w.shape() != Shape{B, S}) throw ShapeError("weighted_spatial_sum: shape mismatch");
  Tensor<T> out({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T acc{0};
      for (std::size_t k = 0; k < S; ++k) acc += w.value()[b * S + k] * f.value()[(b * C + c) * S + k];
      out[b * C + c] = acc;
    }
  return make_result<T>(
      std::move(out), {f, w},
      [B, C, S](Node<T>& self) {
        const auto& F = self.parents[0]->value;
        const auto& Wt = self.parents[1]->value;
        if (self.parent_needs_grad(0)) {
          Tensor<T> gf(F.shape());
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t k = 0; k < S; ++k) gf[(b * C + c) * S + k] = self.grad[b * C + c] * Wt[b * S + k];
          self.parents[0]->accumulate(gf);
        }
        if (self.parent_needs_grad(1)) {
          Tensor<T> gw(Wt.shape());
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t k = 0; k < S; ++k) gw[b * S + k] += self.grad[b * C + c] * F[(b * C + c) * S + k];
          self.parents[1]->accumulate(gw);
        }
      },
      "weighted_spatial_sum");
}

}  // namespace qghc
