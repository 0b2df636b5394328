#pragma once

// Cross-entropy, Adam, the epoch loop and evaluation.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "qghc/vqa_model.hpp"

namespace qghc {

// Mean over the batch of -log softmax(logits)[target], log-sum-exp stabilised.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.shape().size() != 2 || logits.dim(0) != targets.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets");
  const std::size_t B = logits.dim(0), A = logits.dim(1);
  auto probs = std::make_shared<Tensor<T>>(Shape{B, A});
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] >= A) throw IndexError("cross_entropy: target " + std::to_string(targets[b]) + " >= " + std::to_string(A));
    const T* r = logits.value().data().data() + b * A;
    const T m = *std::max_element(r, r + A);
    double s = 0;
    for (std::size_t a = 0; a < A; ++a) s += std::exp(static_cast<double>(r[a] - m));
    const double lse = static_cast<double>(m) + std::log(s);
    total += lse - static_cast<double>(r[targets[b]]);
    for (std::size_t a = 0; a < A; ++a) (*probs)[b * A + a] = static_cast<T>(std::exp(static_cast<double>(r[a]) - lse));
  }
  return make_result<T>(
      Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B))), {logits},
      [probs, targets, B, A](Node<T>& self) {
        Tensor<T> g = *probs;
        for (std::size_t b = 0; b < B; ++b) g[b * A + targets[b]] -= T{1};
        self.parents[0]->accumulate(scale(g, self.grad[0] / static_cast<T>(B)));
      },
      "cross_entropy");
}

template <class T>
struct AdamState {
  double lr = 5e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m, v;
};

// Standard bias-corrected Adam over every parameter of `reg`.
template <class T>
void adam_step(Registry<T>& reg, AdamState<T>& st) {
  const auto& params = reg.parameters();
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.var.shape());
      st.v.emplace_back(p.var.shape());
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam: state does not match parameter list");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<T> var = params[i].var;
    if (!var.has_grad()) continue;
    const Tensor<T>& g = var.node()->grad;
    if (g.shape() != st.m[i].shape()) throw ShapeError("adam: gradient shape mismatch for " + params[i].name);
    auto& w = var.mutable_value();
    for (std::size_t k = 0; k < g.numel(); ++k) {
      const double gk = g[k];
      const double mk = st.beta1 * st.m[i][k] + (1.0 - st.beta1) * gk;
      const double vk = st.beta2 * st.v[i][k] + (1.0 - st.beta2) * gk * gk;
      st.m[i][k] = static_cast<T>(mk);
      st.v[i][k] = static_cast<T>(vk);
      w[k] = static_cast<T>(w[k] - st.lr * (mk / c1) / (std::sqrt(vk / c2) + st.eps));
    }
  }
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 5e-4;
  std::uint64_t seed = 1;
  std::size_t eval_every = 1;  // epochs between validation passes
  bool log_timing = true;      // false writes 0 in the seconds column

  void validate() const {
    if (batch_size < 2) throw ConfigError("train: batch size must be >= 2");
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    if (!(lr >= 0)) throw ConfigError("train: lr must be >= 0");
  }
};

struct Metrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double seconds = 0;
  double accuracy = 0;  // evaluate(): overall
  std::array<double, 4> family_acc{};
  std::array<std::size_t, 4> family_count{};
  std::size_t samples = 0;
};

// Fixed per-epoch shuffle derived from (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, 0x5eed0000ULL + epoch);
  rng.shuffle(order.begin(), order.end());
  return order;
}

inline std::size_t eval_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("QGHC_THREADS")) {
    const long cap = std::atol(env);
    if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
  }
  return n;
}

// Exact-match accuracy of `preds` against the dataset answers, overall and
// per question family.
inline Metrics score_predictions(const data::Dataset& ds, const std::vector<std::uint16_t>& preds) {
  if (preds.size() != ds.size()) throw ShapeError("score: prediction count does not match dataset");
  Metrics m;
  m.samples = ds.size();
  if (ds.size() == 0) return m;
  std::size_t correct = 0;
  std::array<std::size_t, 4> fam_correct{};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    const auto f = static_cast<std::size_t>(data::family_of(s.tokens));
    ++m.family_count[f];
    if (preds[i] == s.answer) {
      ++correct;
      ++fam_correct[f];
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  for (std::size_t f = 0; f < 4; ++f)
    m.family_acc[f] = m.family_count[f] ? static_cast<double>(fam_correct[f]) / static_cast<double>(m.family_count[f]) : 0.0;
  return m;
}

// Eval-mode accuracy, overall and per question family. Batches may be spread
// over threads; per-batch results are combined in batch order.
inline Metrics evaluate(VqaModel& model, const data::Dataset& ds, std::size_t batch_size = 128,
                        std::size_t threads = 0) {
  if (ds.size() == 0) return score_predictions(ds, {});
  const bool images = model.config().uses_image();
  const std::size_t nb = (ds.size() + batch_size - 1) / batch_size;
  std::vector<std::vector<std::uint16_t>> preds(nb);
  auto run = [&](std::size_t first, std::size_t stride) {
    NoGradGuard ng;
    for (std::size_t bi = first; bi < nb; bi += stride) {
      std::vector<std::size_t> idx;
      for (std::size_t i = bi * batch_size; i < std::min(ds.size(), (bi + 1) * batch_size); ++i) idx.push_back(i);
      Batch batch = Batch::gather(ds.samples, idx, images);
      auto r = model.forward(batch, Mode::eval);
      for (std::size_t i = 0; i < idx.size(); ++i)
        preds[bi].push_back(static_cast<std::uint16_t>(argmax_row(r.logits.value(), i)));
    }
  };
  if (threads == 0) threads = eval_threads();
  threads = std::min(threads, nb);
  if (threads <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run, t, threads);
    for (auto& th : pool) th.join();
  }
  std::vector<std::uint16_t> flat;
  flat.reserve(ds.size());
  for (const auto& p : preds) flat.insert(flat.end(), p.begin(), p.end());
  return score_predictions(ds, flat);
}

// Holds the optimizer state that persists across epochs.
struct TrainState {
  AdamState<float> adam;
  std::size_t epoch = 0;
};

// One pass over `train` in the (seed, epoch) order; the trailing partial
// batch is dropped when it has fewer than 2 samples.
inline Metrics train_epoch(VqaModel& model, const data::Dataset& train, const TrainConfig& cfg, TrainState& state) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("train: empty dataset");
  const auto t0 = std::chrono::steady_clock::now();
  state.adam.lr = cfg.lr;
  const auto order = epoch_order(train.size(), cfg.seed, state.epoch);
  const bool images = model.config().uses_image();
  double loss_sum = 0;
  std::size_t seen = 0, correct = 0;
  for (std::size_t start = 0, bi = 0; start < order.size(); start += cfg.batch_size, ++bi) {
    const std::size_t n = std::min(cfg.batch_size, order.size() - start);
    if (n < 2) break;
    std::span<const std::size_t> idx(order.data() + start, n);
    Batch batch = Batch::gather(train.samples, idx, images);
    model.registry().zero_grad();
    ForwardResult r;
    Var<float> loss;
    try {
      r = model.forward(batch, Mode::train);
      std::vector<std::size_t> targets(batch.answers.begin(), batch.answers.end());
      loss = cross_entropy(r.logits, targets);
      backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(state.epoch + 1) + " batch " + std::to_string(bi) + ": " + e.what());
    }
    for (const auto& p : model.registry().parameters())
      if (p.var.has_grad() && !p.var.node()->grad.all_finite())
        throw NumericError("epoch " + std::to_string(state.epoch + 1) + " batch " + std::to_string(bi) +
                           ": non-finite gradient in " + p.name);
    adam_step(model.registry(), state.adam);
    loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) correct += argmax_row(r.logits.value(), i) == batch.answers[i];
    seen += n;
  }
  ++state.epoch;
  Metrics m;
  m.epoch = state.epoch;
  m.samples = seen;
  m.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
  m.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
  m.seconds = cfg.log_timing
                  ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                  : 0.0;
  return m;
}

inline std::string csv_header() { return "epoch,train_loss,train_acc,val_acc,seconds\n"; }

inline std::string csv_row(const Metrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.3f\n", m.epoch, m.train_loss, m.train_acc, m.val_acc,
                m.seconds);
  return buf;
}

// Runs cfg.epochs epochs, validating on `val` every cfg.eval_every epochs
// (and always after the last). `on_epoch` receives each epoch's metrics.
template <class OnEpoch>
std::vector<Metrics> train(VqaModel& model, const data::Dataset& train_set, const data::Dataset& val,
                           const TrainConfig& cfg, OnEpoch&& on_epoch) {
  TrainState st;
  std::vector<Metrics> out;
  double last_val = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    Metrics m = train_epoch(model, train_set, cfg, st);
    const bool do_eval = (cfg.eval_every && (e + 1) % cfg.eval_every == 0) || e + 1 == cfg.epochs;
    if (do_eval && val.size() > 0) {
      const auto t0 = std::chrono::steady_clock::now();
      last_val = evaluate(model, val).accuracy;
      if (cfg.log_timing) m.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    m.val_acc = last_val;
    on_epoch(m);
    out.push_back(m);
  }
  return out;
}

}  // namespace qghc
