#pragma once

// Windowed-MLP next-token model with exact hand-written gradients, an AdamW
// optimizer with cosine decay, and the per-seed training loop.
//
//   x      = [embed(c_1); ...; embed(c_W)]       last W context ids, left-padded
//   hidden = tanh(W1^T x + b1)
//   scores = W2^T hidden + b2

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sift/error.hpp"
#include "sift/lossmask.hpp"
#include "sift/rng.hpp"
#include "sift/tokenizer.hpp"

namespace sift {

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t embed = 16;
  std::size_t hidden = 64;
  std::size_t window = 16;

  bool operator==(const ModelDims&) const = default;
};

// Initialization half-widths: embeddings U(-kEmbedInit, kEmbedInit); weight
// matrices U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
inline constexpr double kEmbedInit = 0.5;

struct ModelParams {
  ModelDims dims;
  TokenId pad_id = 0;
  std::vector<double> embed;  // vocab x embed
  std::vector<double> w1;     // (window*embed) x hidden
  std::vector<double> b1;     // hidden
  std::vector<double> w2;     // hidden x vocab
  std::vector<double> b2;     // vocab

  std::array<std::vector<double>*, 5> tensors() { return {&embed, &w1, &b1, &w2, &b2}; }
  std::array<const std::vector<double>*, 5> tensors() const { return {&embed, &w1, &b1, &w2, &b2}; }

  std::size_t size() const {
    std::size_t n = 0;
    for (auto* t : tensors()) n += t->size();
    return n;
  }

  // Coordinate k across the concatenation of all tensors.
  double& at(std::size_t k) {
    for (auto* t : tensors()) {
      if (k < t->size()) return (*t)[k];
      k -= t->size();
    }
    fail(Errc::OutOfBounds, "parameter index");
  }

  bool operator==(const ModelParams&) const = default;
};

inline ModelParams zero_params(const ModelDims& dims, TokenId pad_id) {
  if (dims.vocab == 0 || dims.embed == 0 || dims.hidden == 0 || dims.window == 0)
    fail(Errc::BadDims, "all model dimensions must be positive");
  if (pad_id < 0 || static_cast<std::size_t>(pad_id) >= dims.vocab) fail(Errc::BadDims, "pad id outside vocabulary");
  ModelParams p;
  p.dims = dims;
  p.pad_id = pad_id;
  p.embed.assign(dims.vocab * dims.embed, 0.0);
  p.w1.assign(dims.window * dims.embed * dims.hidden, 0.0);
  p.b1.assign(dims.hidden, 0.0);
  p.w2.assign(dims.hidden * dims.vocab, 0.0);
  p.b2.assign(dims.vocab, 0.0);
  return p;
}

inline ModelParams init_params(const ModelDims& dims, TokenId pad_id, std::uint64_t seed) {
  ModelParams p = zero_params(dims, pad_id);
  Rng rng(seed);
  auto fill = [&](std::vector<double>& t, double a) {
    for (auto& v : t) v = (2.0 * rng.uniform() - 1.0) * a;
  };
  fill(p.embed, kEmbedInit);
  fill(p.w1, 1.0 / std::sqrt(static_cast<double>(dims.window * dims.embed)));
  fill(p.w2, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
  return p;
}

namespace detail {

struct Activations {
  std::vector<TokenId> window;  // W ids actually fed
  std::vector<double> x;        // W*d
  std::vector<double> hidden;   // h
  std::vector<double> scores;   // V
};

inline void forward_into(const ModelParams& p, std::span<const TokenId> context, Activations& a) {
  const auto& d = p.dims;
  a.window.assign(d.window, p.pad_id);
  const std::size_t take = std::min(d.window, context.size());
  std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
            a.window.end() - static_cast<std::ptrdiff_t>(take));
  a.x.resize(d.window * d.embed);
  for (std::size_t k = 0; k < d.window; ++k) {
    const TokenId id = a.window[k];
    if (id < 0 || static_cast<std::size_t>(id) >= d.vocab)
      fail(Errc::UnknownTokenId, "token id " + std::to_string(id) + " outside model vocabulary");
    std::copy_n(p.embed.begin() + static_cast<std::ptrdiff_t>(id * d.embed), d.embed,
                a.x.begin() + static_cast<std::ptrdiff_t>(k * d.embed));
  }
  a.hidden.assign(p.b1.begin(), p.b1.end());
  for (std::size_t i = 0; i < a.x.size(); ++i) {
    const double xi = a.x[i];
    if (xi == 0.0) continue;
    const double* row = &p.w1[i * d.hidden];
    for (std::size_t j = 0; j < d.hidden; ++j) a.hidden[j] += xi * row[j];
  }
  for (auto& h : a.hidden) h = std::tanh(h);
  a.scores.assign(p.b2.begin(), p.b2.end());
  for (std::size_t j = 0; j < d.hidden; ++j) {
    const double hj = a.hidden[j];
    const double* row = &p.w2[j * d.vocab];
    for (std::size_t v = 0; v < d.vocab; ++v) a.scores[v] += hj * row[v];
  }
}

// Accumulates d(-log softmax(scores)[target]) into `g`; returns that loss.
inline double backward_into(const ModelParams& p, const Activations& a, TokenId target, ModelParams& g) {
  const auto& d = p.dims;
  const double mx = *std::max_element(a.scores.begin(), a.scores.end());
  std::vector<double> dout(d.vocab);
  double z = 0.0;
  for (std::size_t v = 0; v < d.vocab; ++v) z += (dout[v] = std::exp(a.scores[v] - mx));
  const double loss = -(a.scores[static_cast<std::size_t>(target)] - mx - std::log(z));
  for (auto& v : dout) v /= z;
  dout[static_cast<std::size_t>(target)] -= 1.0;

  for (std::size_t v = 0; v < d.vocab; ++v) g.b2[v] += dout[v];
  std::vector<double> da(d.hidden, 0.0);
  for (std::size_t j = 0; j < d.hidden; ++j) {
    const double hj = a.hidden[j];
    const double* w2row = &p.w2[j * d.vocab];
    double* g2row = &g.w2[j * d.vocab];
    double dh = 0.0;
    for (std::size_t v = 0; v < d.vocab; ++v) {
      g2row[v] += hj * dout[v];
      dh += w2row[v] * dout[v];
    }
    da[j] = dh * (1.0 - hj * hj);
    g.b1[j] += da[j];
  }
  for (std::size_t i = 0; i < a.x.size(); ++i) {
    const double* w1row = &p.w1[i * d.hidden];
    double* g1row = &g.w1[i * d.hidden];
    const double xi = a.x[i];
    double dx = 0.0;
    for (std::size_t j = 0; j < d.hidden; ++j) {
      g1row[j] += xi * da[j];
      dx += w1row[j] * da[j];
    }
    const std::size_t k = i / d.embed;
    g.embed[static_cast<std::size_t>(a.window[k]) * d.embed + i % d.embed] += dx;
  }
  return loss;
}

}  // namespace detail

/// Scores for the token following `context` (last `window` ids are used).
inline std::vector<double> forward(const ModelParams& p, std::span<const TokenId> context) {
  if (context.empty()) fail(Errc::LengthMismatch, "forward needs a nonempty context");
  detail::Activations a;
  detail::forward_into(p, context, a);
  return a.scores;
}

/// Adapter so a model can drive constrained_sample.
struct ToyScorer {
  const ModelParams* params;
  std::vector<double> operator()(std::span<const TokenId> context) const { return forward(*params, context); }
};

/// A token sequence with its loss mask; position i (i >= 1) is predicted
/// from ids[0..i). Position 0 is never a target.
struct TrainExample {
  std::vector<TokenId> ids;
  LossMask mask;
};

inline std::size_t supervised_positions(const TrainExample& ex) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < ex.mask.size(); ++i) n += ex.mask[i];
  return n;
}

struct LossAndGrads {
  double loss = 0.0;
  std::size_t positions = 0;
  ModelParams grads;
};

/// Summed masked cross-entropy over the batch and its exact gradient.
inline LossAndGrads loss_and_grads(const ModelParams& p, std::span<const TrainExample> batch) {
  LossAndGrads out{0.0, 0, zero_params(p.dims, p.pad_id)};
  detail::Activations a;
  for (const auto& ex : batch) {
    if (ex.ids.size() != ex.mask.size()) fail(Errc::LengthMismatch, "ids and mask lengths differ");
    for (std::size_t i = 1; i < ex.ids.size(); ++i) {
      if (!ex.mask[i]) continue;
      detail::forward_into(p, std::span<const TokenId>(ex.ids.data(), i), a);
      out.loss += detail::backward_into(p, a, ex.ids[i], out.grads);
      ++out.positions;
    }
  }
  if (out.positions == 0) fail(Errc::EmptyMask, "batch has no supervised positions");
  return out;
}

/// Loss only (no gradient buffers).
inline double masked_loss(const ModelParams& p, std::span<const TrainExample> batch) {
  double loss = 0.0;
  std::size_t n = 0;
  detail::Activations a;
  for (const auto& ex : batch) {
    for (std::size_t i = 1; i < ex.ids.size(); ++i) {
      if (!ex.mask[i]) continue;
      detail::forward_into(p, std::span<const TokenId>(ex.ids.data(), i), a);
      loss -= log_softmax_at(a.scores, static_cast<std::size_t>(ex.ids[i]));
      ++n;
    }
  }
  if (n == 0) fail(Errc::EmptyMask, "batch has no supervised positions");
  return loss;
}

struct TrainConfig {
  double learning_rate = 2e-4;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
};

inline double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

inline double global_norm(const ModelParams& g) {
  double s = 0.0;
  for (auto* t : g.tensors())
    for (double v : *t) s += v * v;
  return std::sqrt(s);
}

/// Rescales `g` in place to norm `max_norm` if it is larger; returns the
/// norm before clipping.
inline double clip_grad_norm(ModelParams& g, double max_norm) {
  const double n = global_norm(g);
  if (max_norm > 0.0 && n > max_norm) {
    const double scale = max_norm / n;
    for (auto* t : g.tensors())
      for (double& v : *t) v *= scale;
  }
  return n;
}

/// Adam moments with decoupled weight decay. Decay applies to the weight
/// matrices and embeddings, not to biases.
class AdamW {
 public:
  AdamW(const ModelParams& like, const TrainConfig& cfg)
      : cfg_(cfg), m_(zero_params(like.dims, like.pad_id)), v_(zero_params(like.dims, like.pad_id)) {}

  void step(ModelParams& p, const ModelParams& g, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto pt = p.tensors();
    auto gt = g.tensors();
    auto mt = m_.tensors();
    auto vt = v_.tensors();
    for (std::size_t k = 0; k < pt.size(); ++k) {
      const bool decay = (k == 0 || k == 1 || k == 3);
      auto& P = *pt[k];
      const auto& G = *gt[k];
      auto& M = *mt[k];
      auto& V = *vt[k];
      for (std::size_t i = 0; i < P.size(); ++i) {
        M[i] = cfg_.beta1 * M[i] + (1.0 - cfg_.beta1) * G[i];
        V[i] = cfg_.beta2 * V[i] + (1.0 - cfg_.beta2) * G[i] * G[i];
        const double update = (M[i] / bc1) / (std::sqrt(V[i] / bc2) + cfg_.eps);
        if (decay) P[i] -= lr * cfg_.weight_decay * P[i];
        P[i] -= lr * update;
      }
    }
  }

 private:
  TrainConfig cfg_;
  ModelParams m_;
  ModelParams v_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::uint64_t seed = 0;
  ModelParams params;
  double initial_loss = 0.0;         // per supervised token, before any update
  std::vector<double> epoch_losses;  // per supervised token, mean over each epoch
  std::size_t steps = 0;
  double final_lr = 0.0;             // scheduler value after the last step
};

using EpochCallback = std::function<void(std::uint64_t seed, std::size_t epoch, double loss)>;

/// Trains one seed. Batches are left-padded through pad_batch exactly as a
/// collator would do; the last-epoch parameters are returned.
inline TrainResult train_seed(const std::vector<TrainExample>& data, const ModelDims& dims, TokenId pad_id,
                              const TrainConfig& cfg, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  if (data.empty()) fail(Errc::EmptyDataset, "no training examples");
  if (cfg.batch_size == 0 || cfg.learning_rate <= 0.0) fail(Errc::ConfigError, "batch size and lr must be positive");
  std::size_t total_positions = 0;
  for (const auto& ex : data) total_positions += supervised_positions(ex);
  if (total_positions == 0) fail(Errc::EmptyMask, "training data has no supervised positions");

  TrainResult res;
  res.seed = seed;
  res.params = init_params(dims, pad_id, seed);
  res.initial_loss = masked_loss(res.params, data) / static_cast<double>(total_positions);
  if (!std::isfinite(res.initial_loss)) fail(Errc::DivergenceDetected, "initial loss is not finite");

  AdamW opt(res.params, cfg);
  const std::size_t batches_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches_per_epoch * cfg.epochs;
  Rng shuffle_rng(seed ^ 0x5eed5eed5eed5eedULL);
  std::vector<std::size_t> order(data.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_positions = 0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      std::vector<TokenizedPrompt> rows;
      std::vector<LossMask> masks;
      for (std::size_t k = b * cfg.batch_size; k < std::min(order.size(), (b + 1) * cfg.batch_size); ++k) {
        TokenizedPrompt tp;
        tp.ids = data[order[k]].ids;
        tp.pad_id = pad_id;
        rows.push_back(std::move(tp));
        masks.push_back(data[order[k]].mask);
      }
      auto padded = pad_batch(rows, masks, pad_id);
      std::vector<TrainExample> batch;
      for (std::size_t r = 0; r < padded.ids.size(); ++r) batch.push_back({padded.ids[r], padded.masks[r]});

      std::size_t supervised = 0;
      for (const auto& ex : batch) supervised += supervised_positions(ex);
      if (supervised == 0) {
        ++res.steps;
        continue;
      }
      auto lg = loss_and_grads(res.params, batch);
      if (!std::isfinite(lg.loss))
        fail(Errc::DivergenceDetected, "seed " + std::to_string(seed) + " epoch " + std::to_string(epoch) +
                                           " batch " + std::to_string(b) + ": loss " + std::to_string(lg.loss));
      clip_grad_norm(lg.grads, cfg.grad_clip);
      opt.step(res.params, lg.grads, cosine_lr(cfg.learning_rate, res.steps, total_steps));
      ++res.steps;
      epoch_loss += lg.loss;
      epoch_positions += lg.positions;
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_positions, 1)));
    if (on_epoch) on_epoch(seed, epoch, res.epoch_losses.back());
  }
  res.final_lr = cosine_lr(cfg.learning_rate, res.steps, total_steps);
  return res;
}

inline std::vector<TrainResult> train(const std::vector<TrainExample>& data, const ModelDims& dims, TokenId pad_id,
                                      const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  std::vector<TrainResult> out;
  for (auto seed : cfg.seeds) out.push_back(train_seed(data, dims, pad_id, cfg, seed, on_epoch));
  return out;
}

/// Max relative error between analytic and central-difference gradients over
/// `coords` randomly chosen coordinates (all of them if the model is smaller).
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline double grad_check(ModelParams p, std::span<const TrainExample> batch, double eps = 1e-4,
                         std::size_t coords = 200, std::uint64_t seed = 0, double floor = 1e-8) {
  const auto analytic = loss_and_grads(p, batch).grads;
  ModelParams a_copy = analytic;
  std::vector<std::size_t> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (idx.size() > coords) {
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(coords);
  }
  double worst = 0.0;
  for (auto k : idx) {
    const double orig = p.at(k);
    p.at(k) = orig + eps;
    const double up = masked_loss(p, batch);
    p.at(k) = orig - eps;
    const double down = masked_loss(p, batch);
    p.at(k) = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = a_copy.at(k);
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

inline nlohmann::json params_to_json(const ModelParams& p) {
  return {{"dims", {{"vocab", p.dims.vocab}, {"embed", p.dims.embed}, {"hidden", p.dims.hidden}, {"window", p.dims.window}}},
          {"pad_id", p.pad_id},
          {"embed", p.embed},
          {"w1", p.w1},
          {"b1", p.b1},
          {"w2", p.w2},
          {"b2", p.b2}};
}

inline ModelParams params_from_json(const nlohmann::json& j) {
  const auto& d = j.at("dims");
  ModelDims dims{d.at("vocab").get<std::size_t>(), d.at("embed").get<std::size_t>(), d.at("hidden").get<std::size_t>(),
                 d.at("window").get<std::size_t>()};
  ModelParams p = zero_params(dims, j.at("pad_id").get<TokenId>());
  auto load = [&](const char* key, std::vector<double>& t) {
    auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != t.size()) fail(Errc::BadDims, std::string("checkpoint tensor '") + key + "' has wrong size");
    t = std::move(v);
  };
  load("embed", p.embed);
  load("w1", p.w1);
  load("b1", p.b1);
  load("w2", p.w2);
  load("b2", p.b2);
  return p;
}

}  // namespace sift
