#pragma once

// Answer models built around the QGHC stack: a toy convolutional image
// encoder, an embedding + GRU question encoder, a pooling or attention head,
// and a two-layer MLP classifier. Also hosts the baselines and class
// activation maps.

#include <algorithm>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qghc/qghc_module.hpp"
#include "qghc/synth_data.hpp"

namespace qghc {

enum class Fusion { qghc, qghc_concat, concat_baseline, blind };
enum class Head { gap, attention };

inline const char* fusion_name(Fusion f) {
  switch (f) {
    case Fusion::qghc: return "qghc";
    case Fusion::qghc_concat: return "qghc+concat";
    case Fusion::concat_baseline: return "concat-baseline";
    case Fusion::blind: return "blind";
  }
  return "?";
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "qghc") return Fusion::qghc;
  if (s == "qghc+concat") return Fusion::qghc_concat;
  if (s == "concat-baseline" || s == "concat") return Fusion::concat_baseline;
  if (s == "blind") return Fusion::blind;
  throw ConfigError("unknown fusion '" + s + "'");
}

inline QGHCConfig toy_qghc() {
  QGHCConfig q;
  q.in_channels = q.out_channels = 32;
  q.groups = 4;
  q.question_dim = 64;
  return q;
}

struct ModelConfig {
  std::size_t enc1 = 8;  // image encoder widths before the C_i block
  std::size_t enc2 = 16;
  std::size_t vocab = 19;
  std::size_t embed = 32;
  std::size_t question_hidden = 128;  // D_q
  QGHCConfig qghc = toy_qghc();
  Variant variant = Variant::hybrid;
  Head head = Head::gap;
  Fusion fusion = Fusion::qghc;
  std::size_t answers = 13;

  bool uses_image() const { return fusion != Fusion::blind; }
  bool uses_stack() const { return fusion == Fusion::qghc || fusion == Fusion::qghc_concat; }

  void validate() const {
    if (answers < 2) throw ConfigError("model: need at least 2 answers");
    if (vocab < 2 || embed == 0 || question_hidden == 0) throw ConfigError("model: bad question encoder widths");
    if (uses_image() && (enc1 == 0 || enc2 == 0)) throw ConfigError("model: bad image encoder widths");
    if (uses_stack()) {
      QGHCConfig q = qghc;
      q.question_dim = question_hidden;
      variant_module_config(variant, q).validate();
    }
  }
};

struct ForwardResult {
  Var<float> logits;    // (B, A)
  Var<float> features;  // final feature map before the head, (B, C, H, W); undefined for blind
  Var<float> attention; // (B, H*W) when the attention head is used
  Var<float> question;  // (B, D_q)
};

// Minibatch view over dataset samples.
struct Batch {
  Tensor<float> images;  // (B, 3, 32, 32)
  std::vector<data::Tokens> tokens;
  std::vector<std::uint16_t> answers;

  std::size_t size() const { return tokens.size(); }

  static Batch gather(const std::vector<data::SyntheticSample>& samples, std::span<const std::size_t> idx,
                      bool with_images = true) {
    Batch b;
    const std::size_t n = idx.size();
    const std::size_t px = 3 * data::kImage * data::kImage;
    if (with_images) b.images = Tensor<float>({n, 3, data::kImage, data::kImage});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = samples.at(idx[i]);
      if (with_images) std::copy_n(s.image.data().data(), px, b.images.data().data() + i * px);
      b.tokens.push_back(s.tokens);
      b.answers.push_back(s.answer);
    }
    return b;
  }
};

template <class T>
struct ImageEncoder {
  ConvSpec c1, c2, c3;
  Var<T> w1, w2, w3;
  BatchNormState<T> bn1, bn2, bn3;

  static ImageEncoder make(Registry<T>& reg, std::size_t e1, std::size_t e2, std::size_t out, Rng& rng) {
    ImageEncoder e;
    e.c1 = {3, e1, 1, 3, 2};
    e.c2 = {e1, e2, 1, 3, 2};
    e.c3 = {e2, out, 1, 3, 1};
    e.w1 = reg.add_parameter("image.conv1.weight", init_kaiming_uniform<T>(e.c1.kernel_shape(), e.c1.fan_in(), rng),
                             Role::qi_free);
    e.bn1 = BatchNormState<T>::make(reg, "image.bn1", e1);
    e.w2 = reg.add_parameter("image.conv2.weight", init_kaiming_uniform<T>(e.c2.kernel_shape(), e.c2.fan_in(), rng),
                             Role::qi_free);
    e.bn2 = BatchNormState<T>::make(reg, "image.bn2", e2);
    e.w3 = reg.add_parameter("image.conv3.weight", init_kaiming_uniform<T>(e.c3.kernel_shape(), e.c3.fan_in(), rng),
                             Role::qi_free);
    e.bn3 = BatchNormState<T>::make(reg, "image.bn3", out);
    return e;
  }

  // (B,3,H,W) -> (B,C_i,H/4,W/4)
  Var<T> forward(const Var<T>& image, Mode mode) {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != 3) throw ShapeError("image encoder expects (B,3,H,W)");
    if (s[2] % 4 != 0 || s[3] % 4 != 0) throw ShapeError("image encoder: H and W must be divisible by 4");
    Var<T> x = relu(batch_norm(conv2d_grouped(image, w1, c1), bn1, mode));
    x = relu(batch_norm(conv2d_grouped(x, w2, c2), bn2, mode));
    return relu(batch_norm(conv2d_grouped(x, w3, c3), bn3, mode));
  }
};

template <class T>
struct QuestionEncoder {
  Var<T> table;  // (V, E)
  GruParams<T> gru;

  static QuestionEncoder make(Registry<T>& reg, std::size_t vocab, std::size_t embed, std::size_t hidden, Rng& rng) {
    QuestionEncoder q;
    Tensor<T> t = uniform_tensor<T>({vocab, embed}, -1.0, 1.0, rng);
    q.table = reg.add_parameter("question.embedding", std::move(t), Role::qi_free);
    q.gru = GruParams<T>::make(reg, "question.gru", embed, hidden, rng);
    return q;
  }

  Var<T> forward(const std::vector<data::Tokens>& tokens) const {
    const std::size_t B = tokens.size();
    std::vector<std::size_t> lengths(B);
    std::size_t L = 0;
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t n = 0;
      while (n < data::kMaxTokens && tokens[b][n] != 0) ++n;
      if (n == 0) throw ShapeError("question encoder: empty question");
      lengths[b] = n;
      L = std::max(L, n);
    }
    // Time-major gather so step t is a contiguous row block.
    std::vector<std::size_t> flat(L * B);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t b = 0; b < B; ++b) flat[t * B + b] = tokens[b][t];
    Var<T> emb = embedding_lookup<T>(flat, table);
    std::vector<Var<T>> steps;
    for (std::size_t t = 0; t < L; ++t) steps.push_back(slice_rows(emb, t * B, B));
    return gru_encode_batch(steps, lengths, gru);
  }
};

template <class T>
struct AttentionHead {
  ConvSpec score_spec;
  Var<T> score;  // (1, C, 1, 1)
  Var<T> proj_w, proj_b;

  static AttentionHead make(Registry<T>& reg, std::size_t channels, std::size_t qdim, Rng& rng) {
    AttentionHead h;
    h.score_spec = {channels, 1, 1, 1, 1};
    h.score = reg.add_parameter("head.score.weight",
                                init_kaiming_uniform<T>(h.score_spec.kernel_shape(), channels, rng), Role::qi_free);
    h.proj_w = reg.add_parameter("head.question_proj.weight", init_kaiming_uniform<T>({qdim, channels}, qdim, rng),
                                 Role::qi_free);
    h.proj_b = reg.add_parameter("head.question_proj.bias", Tensor<T>::zeros({channels}), Role::qi_free);
    return h;
  }
};

// f' = f + proj(f_q); weights = spatial softmax of a 1x1 conv of f';
// output = sum over locations of weights * f'.
template <class T>
Var<T> attention_pool(const Var<T>& f, const Var<T>& fq, const AttentionHead<T>& head, Var<T>* weights_out = nullptr) {
  const Shape& s = f.shape();
  if (s.size() != 4) throw ShapeError("attention_pool expects (B,C,H,W)");
  Var<T> fp = add_channel_bias(f, linear(fq, head.proj_w, head.proj_b));
  Var<T> scores = conv2d_grouped(fp, head.score, head.score_spec);
  Var<T> w = softmax_rows(reshape(scores, {s[0], s[2] * s[3]}));
  if (weights_out) *weights_out = w;
  return weighted_spatial_sum(fp, w);
}

// M[b,y,x] = sum_c w[c,a] * f[b,c,y,x]; `w` has at least C rows and A columns.
template <class T>
Tensor<T> cam_map(const Tensor<T>& f, const Tensor<T>& w, std::size_t answer) {
  if (f.rank() != 4) throw ShapeError("cam_map expects (B,C,H,W)");
  const std::size_t B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  if (w.rank() != 2 || w.dim(0) < C) throw ShapeError("cam_map: weight rows do not cover the feature channels");
  const std::size_t A = w.dim(1);
  if (answer >= A) throw IndexError("cam_map: answer index " + std::to_string(answer) + " out of range");
  Tensor<T> m({B, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T wc = w[c * A + answer];
      for (std::size_t i = 0; i < H * W; ++i) m[b * H * W + i] += wc * f[(b * C + c) * H * W + i];
    }
  return m;
}

// Per-image min-max scaling to [0,1]; a flat map becomes 0.5 everywhere.
template <class T>
Tensor<T> normalize_heatmap(const Tensor<T>& m) {
  const std::size_t B = m.dim(0), S = m.numel() / B;
  Tensor<T> out(m.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const T* p = m.data().data() + b * S;
    const auto [lo, hi] = std::minmax_element(p, p + S);
    for (std::size_t i = 0; i < S; ++i)
      out[b * S + i] = *hi > *lo ? (p[i] - *lo) / (*hi - *lo) : T(0.5);
  }
  return out;
}

class VqaModel {
 public:
  using T = float;

  VqaModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    cfg_.qghc.question_dim = cfg_.question_hidden;
    Rng rng(seed);
    question_ = QuestionEncoder<T>::make(reg_, cfg_.vocab, cfg_.embed, cfg_.question_hidden, rng);
    std::size_t pooled = 0;
    if (cfg_.uses_image()) image_ = ImageEncoder<T>::make(reg_, cfg_.enc1, cfg_.enc2, cfg_.qghc.in_channels, rng);
    if (cfg_.uses_stack()) {
      stack_ = make_variant<T>(cfg_.variant, cfg_.qghc, reg_, rng);
      pooled = stack_.out_channels();
      if (cfg_.head == Head::attention) attention_ = AttentionHead<T>::make(reg_, pooled, cfg_.question_hidden, rng);
    } else if (cfg_.fusion == Fusion::concat_baseline) {
      pooled = cfg_.qghc.in_channels;
    }
    feature_channels_ = pooled;
    std::size_t in = pooled;
    if (cfg_.fusion != Fusion::qghc) in += cfg_.question_hidden;
    const std::size_t hidden = 2 * cfg_.answers;
    fc1_w_ = reg_.add_parameter("classifier.fc1.weight", init_kaiming_uniform<T>({in, hidden}, in, rng), Role::qi_free);
    fc1_b_ = reg_.add_parameter("classifier.fc1.bias", Tensor<T>::zeros({hidden}), Role::qi_free);
    // Zero output layer: the untrained model predicts the uniform distribution.
    fc2_w_ = reg_.add_parameter("classifier.fc2.weight", Tensor<T>::zeros({hidden, cfg_.answers}), Role::qi_free);
    fc2_b_ = reg_.add_parameter("classifier.fc2.bias", Tensor<T>::zeros({cfg_.answers}), Role::qi_free);
  }

  VqaModel(const VqaModel&) = delete;
  VqaModel& operator=(const VqaModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  Registry<T>& registry() { return reg_; }
  const Registry<T>& registry() const { return reg_; }
  QGHCStack<T>& stack() { return stack_; }

  ForwardResult forward(const Batch& batch, Mode mode) {
    for (const auto& t : batch.tokens)
      for (auto w : t)
        if (w >= cfg_.vocab) throw IndexError("token " + std::to_string(w) + " outside vocabulary");
    ForwardResult r;
    r.question = question_.forward(batch.tokens);
    Var<T> pooled;
    if (cfg_.uses_image()) {
      if (batch.images.empty() || batch.images.dim(0) != batch.size())
        throw ShapeError("model: image batch does not match question batch");
      Var<T> fv = image_.forward(Var<T>::constant(batch.images), mode);
      if (cfg_.uses_stack()) {
        r.features = stack_.forward(fv, r.question, mode);
        pooled = cfg_.head == Head::attention ? attention_pool(r.features, r.question, attention_, &r.attention)
                                              : global_avg_pool(r.features);
      } else {
        r.features = fv;
        pooled = global_avg_pool(fv);
      }
    }
    Var<T> mlp_in;
    switch (cfg_.fusion) {
      case Fusion::qghc: mlp_in = pooled; break;
      case Fusion::qghc_concat:
      case Fusion::concat_baseline: mlp_in = concat<T>({pooled, r.question}, 1); break;
      case Fusion::blind: mlp_in = r.question; break;
    }
    r.logits = linear(relu(linear(mlp_in, fc1_w_, fc1_b_)), fc2_w_, fc2_b_);
    return r;
  }

  // Linearised classifier restricted to the pooled feature rows:
  // W_cam = W1[:C, :] * W2, shape (C, A). Exact CAM needs a single linear
  // classifier; with the hidden ReLU this is an approximation.
  Tensor<T> cam_weights() const {
    if (feature_channels_ == 0) throw ConfigError("cam: model has no image feature map");
    const auto& w1 = fc1_w_.value();
    const std::size_t H = w1.dim(1);
    Tensor<T> top({feature_channels_, H});
    std::copy_n(w1.data().data(), feature_channels_ * H, top.data().data());
    return matmul(top, fc2_w_.value());
  }

  std::size_t feature_channels() const { return feature_channels_; }

 private:
  ModelConfig cfg_;
  Registry<T> reg_;
  QuestionEncoder<T> question_;
  ImageEncoder<T> image_;
  QGHCStack<T> stack_;
  AttentionHead<T> attention_;
  std::size_t feature_channels_ = 0;
  Var<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

struct AnswerDistribution {
  Tensor<float> logits;
  Tensor<float> probabilities;
};

inline AnswerDistribution answer_distribution(const Tensor<float>& logits) {
  const std::size_t B = logits.dim(0), A = logits.dim(1);
  AnswerDistribution d{logits, Tensor<float>({B, A})};
  for (std::size_t b = 0; b < B; ++b) {
    const float* r = logits.data().data() + b * A;
    const float m = *std::max_element(r, r + A);
    double s = 0;
    for (std::size_t a = 0; a < A; ++a) s += std::exp(static_cast<double>(r[a] - m));
    for (std::size_t a = 0; a < A; ++a)
      d.probabilities[b * A + a] = static_cast<float>(std::exp(static_cast<double>(r[a] - m)) / s);
  }
  return d;
}

inline std::size_t argmax_row(const Tensor<float>& t, std::size_t row) {
  const std::size_t A = t.dim(1);
  const float* r = t.data().data() + row * A;
  return static_cast<std::size_t>(std::max_element(r, r + A) - r);
}

}  // namespace qghc
