#pragma once

// Question-guided hybrid convolution: a kernel predictor maps the question
// feature to n group kernels of the 3x3 stage, the remaining N-n groups keep
// freely trained kernels, and the module wraps them in a grouped
// 1x1 / 3x3 / 1x1 residual block with channel shuffle.

#include <algorithm>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qghc/nn_ops.hpp"

namespace qghc {

enum class Variant { hybrid, naive, full, group };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::hybrid: return "hybrid";
    case Variant::naive: return "naive";
    case Variant::full: return "full";
    case Variant::group: return "group";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "hybrid" || s == "qghc") return Variant::hybrid;
  if (s == "naive") return Variant::naive;
  if (s == "full") return Variant::full;
  if (s == "group") return Variant::group;
  throw ConfigError("unknown variant '" + s + "' (expected hybrid, naive, full, group)");
}

struct QGHCConfig {
  std::size_t in_channels = 512;   // C_i
  std::size_t out_channels = 512;  // C_o
  std::size_t groups = 8;          // N
  std::size_t dynamic_groups = 1;  // n
  std::size_t mid_per_group = 0;   // m; 0 means C_i / (2N)
  std::size_t question_dim = 2400; // d_q
  std::size_t hidden = 198;        // h
  std::size_t modules = 3;         // K
  std::vector<std::size_t> dynamic_group_indices;  // empty: {0, ..., n-1}
  std::optional<std::uint64_t> index_seed;         // draw the indices instead

  std::size_t mid() const { return mid_per_group ? mid_per_group : in_channels / (2 * groups); }
  std::size_t mid_channels() const { return groups * mid(); }
  std::size_t dynamic_kernel_elems() const { return dynamic_groups * 9 * mid() * mid(); }

  void validate() const {
    if (groups == 0 || in_channels == 0 || out_channels == 0) throw ConfigError("qghc: zero extent in config");
    if (mid_per_group == 0 && in_channels % (2 * groups) != 0)
      throw ConfigError("qghc: C_i=" + std::to_string(in_channels) + " not divisible by 2N=" +
                        std::to_string(2 * groups));
    if (in_channels % groups != 0) throw ConfigError("qghc: C_i not divisible by N");
    if (out_channels % groups != 0) throw ConfigError("qghc: C_o not divisible by N");
    if (mid() == 0) throw ConfigError("qghc: zero mid channels");
    if (dynamic_groups > groups) throw ConfigError("qghc: n > N");
    if (modules == 0) throw ConfigError("qghc: zero modules");
    if (question_dim == 0 || hidden == 0) throw ConfigError("qghc: zero predictor width");
    if (!dynamic_group_indices.empty()) {
      std::set<std::size_t> s(dynamic_group_indices.begin(), dynamic_group_indices.end());
      if (s.size() != dynamic_group_indices.size() || dynamic_group_indices.size() != dynamic_groups ||
          *s.rbegin() >= groups)
        throw ConfigError("qghc: dynamic_group_indices must be n distinct slots below N");
    }
  }
};

// Per-forward predicted kernels; never persisted.
template <class T>
struct DynamicKernels {
  Var<T> values;    // (B, rows, in_per_row, 3, 3), unit norm per row
  Var<T> question;  // the f_q that produced them
};

// Two FC layers with a ReLU between them; the output is reshaped into `rows`
// kernels of shape (in_per_row, 3, 3) and weight-normalised with gain 1.
template <class T>
class KernelPredictor {
 public:
  KernelPredictor() = default;
  KernelPredictor(Registry<T>& reg, const std::string& prefix, std::size_t question_dim, std::size_t hidden,
                  std::size_t rows, std::size_t in_per_row, Rng& rng)
      : rows_(rows), in_per_row_(in_per_row) {
    const std::size_t out = rows * in_per_row * 9;
    w1_ = reg.add_parameter(prefix + ".fc1.weight", init_kaiming_uniform<T>({question_dim, hidden}, question_dim, rng),
                            Role::qd_predictor);
    b1_ = reg.add_parameter(prefix + ".fc1.bias", Tensor<T>::zeros({hidden}), Role::qd_predictor);
    w2_ = reg.add_parameter(prefix + ".fc2.weight", init_kaiming_uniform<T>({hidden, out}, hidden, rng),
                            Role::qd_predictor);
    b2_ = reg.add_parameter(prefix + ".fc2.bias", Tensor<T>::zeros({out}), Role::qd_predictor);
  }

  std::size_t question_dim() const { return w1_.dim(0); }
  std::size_t output_elems() const { return w2_.dim(1); }
  std::size_t rows() const { return rows_; }
  std::size_t in_per_row() const { return in_per_row_; }
  const Var<T>& fc1_weight() const { return w1_; }
  const Var<T>& fc2_weight() const { return w2_; }

  DynamicKernels<T> predict(const Var<T>& fq) const {
    if (fq.shape().size() != 2 || fq.dim(1) != question_dim())
      throw ShapeError("predict_kernels: question feature " + shape_str(fq.shape()) + ", predictor expects width " +
                       std::to_string(question_dim()));
    const std::size_t B = fq.dim(0);
    Var<T> flat = linear(relu(linear(fq, w1_, b1_)), w2_, b2_);
    if (flat.dim(1) != rows_ * in_per_row_ * 9) throw ConfigError("predict_kernels: reshape size mismatch");
    Var<T> k = weight_normalize(reshape(flat, {B * rows_, in_per_row_, 3, 3}));
    return {reshape(k, {B, rows_, in_per_row_, 3, 3}), fq};
  }

 private:
  std::size_t rows_ = 0, in_per_row_ = 0;
  Var<T> w1_, b1_, w2_, b2_;
};

// Places per-sample dynamic group kernels and shared free group kernels into
// one (B, N*rows, in, k, k) tensor, group g taking rows [g*rows, (g+1)*rows).
template <class T>
Var<T> assemble_group_kernels(const Var<T>& dynamic, const std::vector<Var<T>>& free_kernels,
                              const std::vector<std::size_t>& dynamic_slots, std::size_t groups, std::size_t batch) {
  if (dynamic_slots.size() + free_kernels.size() != groups) throw ConfigError("assemble: group count mismatch");
  const Shape& ks = dynamic.defined() ? Shape(dynamic.shape().begin() + 1, dynamic.shape().end())
                                      : free_kernels.at(0).shape();
  const std::size_t per_group_rows = dynamic.defined() ? ks[0] / dynamic_slots.size() : ks[0];
  const std::size_t row_elems = shape_numel(ks) / ks[0];
  const std::size_t gsize = per_group_rows * row_elems;
  // slot -> (is_dynamic, position in its list)
  std::vector<std::pair<bool, std::size_t>> src(groups);
  std::vector<bool> is_dyn(groups, false);
  for (std::size_t i = 0; i < dynamic_slots.size(); ++i) {
    is_dyn.at(dynamic_slots[i]) = true;
    src[dynamic_slots[i]] = {true, i};
  }
  for (std::size_t g = 0, f = 0; g < groups; ++g)
    if (!is_dyn[g]) src[g] = {false, f++};
  for (const auto& fk : free_kernels)
    if (fk.numel() != gsize) throw ShapeError("assemble: free kernel size mismatch");

  Shape out_shape{batch, groups * per_group_rows};
  out_shape.insert(out_shape.end(), ks.begin() + 1, ks.end());
  Tensor<T> out(out_shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      const T* s = src[g].first ? dynamic.value().data().data() + (b * dynamic_slots.size() + src[g].second) * gsize
                                : free_kernels[src[g].second].value().data().data();
      std::copy_n(s, gsize, out.data().data() + (b * groups + g) * gsize);
    }

  std::vector<Var<T>> parents{dynamic.defined() ? dynamic : Var<T>::constant(Tensor<T>::scalar(T{0}))};
  parents.insert(parents.end(), free_kernels.begin(), free_kernels.end());
  const std::size_t ndyn = dynamic_slots.size();
  return make_result<T>(
      std::move(out), parents,
      [src, batch, groups, gsize, ndyn](Node<T>& self) {
        Tensor<T> gd = self.parent_needs_grad(0) ? Tensor<T>(self.parents[0]->value.shape()) : Tensor<T>();
        std::vector<Tensor<T>> gf;
        for (std::size_t i = 1; i < self.parents.size(); ++i) gf.emplace_back(self.parents[i]->value.shape());
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t g = 0; g < groups; ++g) {
            const T* s = self.grad.data().data() + (b * groups + g) * gsize;
            if (src[g].first) {
              if (!gd.empty()) std::copy_n(s, gsize, gd.data().data() + (b * ndyn + src[g].second) * gsize);
            } else {
              T* d = gf[src[g].second].data().data();
              for (std::size_t i = 0; i < gsize; ++i) d[i] += s[i];
            }
          }
        if (!gd.empty()) self.parents[0]->accumulate(gd);
        for (std::size_t i = 1; i < self.parents.size(); ++i)
          if (self.parent_needs_grad(i)) self.parents[i]->accumulate(gf[i - 1]);
      },
      "assemble_group_kernels");
}

template <class T>
class FusionBlock {
 public:
  virtual ~FusionBlock() = default;
  virtual Var<T> forward(const Var<T>& x, const Var<T>& fq, Mode mode) = 0;
  virtual std::size_t in_channels() const = 0;
  virtual std::size_t out_channels() const = 0;
  virtual const KernelPredictor<T>* predictor() const = 0;
};

template <class T>
class QGHCModule final : public FusionBlock<T> {
 public:
  QGHCModule(Registry<T>& reg, const std::string& prefix, const QGHCConfig& cfg, std::vector<std::size_t> dyn_slots,
             Rng& rng)
      : cfg_(cfg), dyn_slots_(std::move(dyn_slots)) {
    cfg_.validate();
    std::sort(dyn_slots_.begin(), dyn_slots_.end());
    const std::size_t N = cfg_.groups, m = cfg_.mid(), Cm = N * m;
    const std::size_t Ci = cfg_.in_channels, Co = cfg_.out_channels;
    s1_ = {Ci, Cm, N, 1, 1};
    s2_ = {Cm, Cm, N, 3, 1};
    s3_ = {Cm, Co, N, 1, 1};
    sc_ = {Ci, Co, 1, 1, 1};
    w1_ = reg.add_parameter(prefix + ".stage1.weight", init_kaiming_uniform<T>(s1_.kernel_shape(), s1_.fan_in(), rng),
                            Role::qi_free);
    bn1_ = BatchNormState<T>::make(reg, prefix + ".stage1.bn", Cm);
    std::vector<bool> dyn(N, false);
    for (auto s : dyn_slots_) dyn.at(s) = true;
    for (std::size_t g = 0; g < N; ++g) {
      if (dyn[g]) continue;
      const std::string name = prefix + ".stage2.free." + std::to_string(g);
      free_v_.push_back(reg.add_parameter(name, init_kaiming_uniform<T>({m, m, 3, 3}, m * 9, rng), Role::qi_free));
      free_gain_.push_back(reg.add_parameter(name + ".gain", Tensor<T>::ones({m}), Role::qi_free));
    }
    if (!dyn_slots_.empty())
      predictor_ = KernelPredictor<T>(reg, prefix + ".predictor", cfg_.question_dim, cfg_.hidden,
                                      dyn_slots_.size() * m, m, rng);
    bn2_ = BatchNormState<T>::make(reg, prefix + ".stage2.bn", Cm);
    w3_ = reg.add_parameter(prefix + ".stage3.weight", init_kaiming_uniform<T>(s3_.kernel_shape(), s3_.fan_in(), rng),
                            Role::qi_free);
    bn3_ = BatchNormState<T>::make(reg, prefix + ".stage3.bn", Co);
    ws_ = reg.add_parameter(prefix + ".shortcut.weight", init_kaiming_uniform<T>(sc_.kernel_shape(), sc_.fan_in(), rng),
                            Role::qi_free);
  }

  Var<T> forward(const Var<T>& x, const Var<T>& fq, Mode mode) override {
    if (x.shape().size() != 4 || x.dim(1) != cfg_.in_channels)
      throw ShapeError("qghc module: input " + shape_str(x.shape()) + ", expected C_i=" +
                       std::to_string(cfg_.in_channels));
    if (x.dim(2) == 0 || x.dim(3) == 0) throw ShapeError("qghc module: empty spatial extent " + shape_str(x.shape()));
    if (fq.shape().size() != 2 || fq.dim(1) != cfg_.question_dim || fq.dim(0) != x.dim(0))
      throw ShapeError("qghc module: question feature " + shape_str(fq.shape()) + ", expected width " +
                       std::to_string(cfg_.question_dim));
    const std::size_t B = x.dim(0), N = cfg_.groups;

    Var<T> y = relu(batch_norm(conv2d_grouped(x, w1_, s1_), bn1_, mode));

    std::vector<Var<T>> free;
    for (std::size_t i = 0; i < free_v_.size(); ++i) free.push_back(weight_normalize(free_v_[i], free_gain_[i]));
    Var<T> kernels;
    if (dyn_slots_.empty()) {
      kernels = concat(free, 0);
    } else {
      kernels = assemble_group_kernels(predictor_.predict(fq).values, free, dyn_slots_, N, B);
    }
    y = relu(batch_norm(conv2d_grouped(y, kernels, s2_), bn2_, mode));
    y = channel_shuffle(y, N);
    y = batch_norm(conv2d_grouped(y, w3_, s3_), bn3_, mode);
    return relu(y + conv2d_grouped(x, ws_, sc_));
  }

  std::size_t in_channels() const override { return cfg_.in_channels; }
  std::size_t out_channels() const override { return cfg_.out_channels; }
  const KernelPredictor<T>* predictor() const override { return dyn_slots_.empty() ? nullptr : &predictor_; }

  const QGHCConfig& config() const { return cfg_; }
  const std::vector<std::size_t>& dynamic_slots() const { return dyn_slots_; }
  const std::vector<Var<T>>& free_kernels() const { return free_v_; }

 private:
  QGHCConfig cfg_;
  std::vector<std::size_t> dyn_slots_;
  ConvSpec s1_, s2_, s3_, sc_;
  Var<T> w1_, w3_, ws_;
  std::vector<Var<T>> free_v_, free_gain_;
  KernelPredictor<T> predictor_;
  BatchNormState<T> bn1_, bn2_, bn3_;
};

// A single ungrouped 3x3 convolution whose kernel is entirely predicted.
template <class T>
class NaiveModule final : public FusionBlock<T> {
 public:
  NaiveModule(Registry<T>& reg, const std::string& prefix, const QGHCConfig& cfg, Rng& rng)
      : cfg_(cfg),
        spec_{cfg.in_channels, cfg.out_channels, 1, 3, 1},
        predictor_(reg, prefix + ".predictor", cfg.question_dim, cfg.hidden, cfg.out_channels, cfg.in_channels, rng) {}

  Var<T> forward(const Var<T>& x, const Var<T>& fq, Mode) override {
    if (x.shape().size() != 4 || x.dim(1) != cfg_.in_channels) throw ShapeError("naive module: input shape");
    return conv2d_grouped(x, predictor_.predict(fq).values, spec_);
  }
  std::size_t in_channels() const override { return cfg_.in_channels; }
  std::size_t out_channels() const override { return cfg_.out_channels; }
  const KernelPredictor<T>* predictor() const override { return &predictor_; }

 private:
  QGHCConfig cfg_;
  ConvSpec spec_;
  KernelPredictor<T> predictor_;
};

inline std::vector<std::size_t> choose_dynamic_slots(const QGHCConfig& cfg, std::size_t module_index) {
  if (!cfg.dynamic_group_indices.empty()) return cfg.dynamic_group_indices;
  std::vector<std::size_t> slots(cfg.groups);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  if (cfg.index_seed) {
    Rng r = Rng::derive(*cfg.index_seed, module_index);
    r.shuffle(slots.begin(), slots.end());
  }
  slots.resize(cfg.dynamic_groups);
  std::sort(slots.begin(), slots.end());
  return slots;
}

// K chained blocks; every block sees the same question feature.
template <class T>
class QGHCStack {
 public:
  QGHCStack() = default;

  void push(std::unique_ptr<FusionBlock<T>> block) {
    if (!blocks_.empty() && blocks_.back()->out_channels() != block->in_channels())
      throw ShapeError("qghc stack: channel mismatch between consecutive modules");
    blocks_.push_back(std::shared_ptr<FusionBlock<T>>(std::move(block)));
  }

  Var<T> forward(const Var<T>& fv, const Var<T>& fq, Mode mode) {
    Var<T> x = fv;
    for (auto& b : blocks_) x = b->forward(x, fq, mode);
    return x;
  }

  std::size_t size() const { return blocks_.size(); }
  FusionBlock<T>& block(std::size_t i) { return *blocks_.at(i); }
  const FusionBlock<T>& block(std::size_t i) const { return *blocks_.at(i); }
  std::size_t out_channels() const { return blocks_.back()->out_channels(); }

 private:
  std::vector<std::shared_ptr<FusionBlock<T>>> blocks_;
};

// Per-module configuration a variant actually builds: `group` predicts all N
// groups, `full` is the ungrouped (N=1) block with its 3x3 kernel predicted.
inline QGHCConfig variant_module_config(Variant kind, const QGHCConfig& base) {
  QGHCConfig c = base;
  switch (kind) {
    case Variant::hybrid:
    case Variant::naive: break;
    case Variant::group:
      c.dynamic_groups = c.groups;
      c.dynamic_group_indices.clear();
      break;
    case Variant::full:
      c.groups = 1;
      c.dynamic_groups = 1;
      c.dynamic_group_indices.clear();
      c.mid_per_group = base.mid_per_group ? base.mid_per_group * base.groups : 0;
      break;
  }
  return c;
}

template <class T>
QGHCStack<T> make_variant(Variant kind, const QGHCConfig& config, Registry<T>& reg, Rng& rng,
                          const std::string& prefix = "qghc") {
  QGHCStack<T> stack;
  for (std::size_t k = 0; k < config.modules; ++k) {
    QGHCConfig c = variant_module_config(kind, config);
    if (k > 0) c.in_channels = config.out_channels;
    const std::string p = prefix + "." + std::to_string(k);
    if (kind == Variant::naive) {
      stack.push(std::make_unique<NaiveModule<T>>(reg, p, c, rng));
    } else {
      c.validate();
      stack.push(std::make_unique<QGHCModule<T>>(reg, p, c, choose_dynamic_slots(c, k), rng));
    }
  }
  return stack;
}

}  // namespace qghc
