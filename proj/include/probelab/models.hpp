#pragma once

// Sentence encoders (CBOW and BiLSTM), the entailment pair head and the MLP
// heads used as probe, adversary and attacker.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "probelab/errors.hpp"
#include "probelab/ops.hpp"
#include "probelab/random.hpp"
#include "probelab/tape.hpp"
#include "probelab/tensor.hpp"

namespace probelab {

inline constexpr std::size_t kAlphabetSize = 3;
inline constexpr std::size_t kNumClasses = 2;
inline constexpr std::size_t kDefaultEmbeddingDim = 16;

inline std::size_t symbol_index(char ch) {
  switch (ch) {
    case 'a':
      return 0;
    case 'b':
      return 1;
    case 'c':
      return 2;
    default:
      throw PreconditionError(std::string("symbol '") + ch + "' is outside {a,b,c}");
  }
}

enum class EncoderKind { kCbow, kBiLstm };

inline std::string_view encoder_name(EncoderKind k) {
  return k == EncoderKind::kCbow ? "cbow" : "bilstm";
}

inline EncoderKind parse_encoder(std::string_view s) {
  if (s == "cbow" || s == "CBOW") return EncoderKind::kCbow;
  if (s == "bilstm" || s == "BiLSTM" || s == "BILSTM") return EncoderKind::kBiLstm;
  throw ConfigError("unknown encoder '" + std::string(s) + "' (expected cbow or bilstm)");
}

inline std::string_view pooling_name(PoolMode m) {
  switch (m) {
    case PoolMode::kLast:
      return "last";
    case PoolMode::kMean:
      return "avg";
    case PoolMode::kMax:
      return "max";
  }
  return "?";
}

inline PoolMode parse_pooling(std::string_view s) {
  if (s == "last") return PoolMode::kLast;
  if (s == "avg" || s == "mean") return PoolMode::kMean;
  if (s == "max") return PoolMode::kMax;
  throw ConfigError("unknown pooling '" + std::string(s) + "' (expected last, avg or max)");
}

/// Uniform in +-sqrt(1/fan_in).
inline Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = uniform_real(rng, -bound, bound);
  return t;
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kBiLstm;
  PoolMode pooling = PoolMode::kLast;
  std::size_t hidden = 200;  // per direction
  std::size_t d_emb = kDefaultEmbeddingDim;

  std::size_t output_dim() const { return kind == EncoderKind::kCbow ? d_emb : 2 * hidden; }
};

/// Gate weights of one LSTM direction. Gate blocks in column order:
/// input, forget, output, candidate.
struct LstmDirection {
  Parameter w_x;
  Parameter w_h;
  Parameter bias;

  LstmDirection() = default;
  LstmDirection(const std::string& prefix, std::size_t d_in, std::size_t hidden, Rng& rng)
      : w_x(prefix + ".w_x", init_uniform({d_in, 4 * hidden}, d_in + hidden, rng)),
        w_h(prefix + ".w_h", init_uniform({hidden, 4 * hidden}, d_in + hidden, rng)),
        bias(prefix + ".bias", Tensor({4 * hidden})) {
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias.value[j] = 1.0;
  }
};

class Encoder {
 public:
  Encoder() = default;

  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.d_emb == 0) throw ConfigError("embedding dimension must be positive");
    if (cfg.kind == EncoderKind::kBiLstm && cfg.hidden == 0) {
      throw ConfigError("hidden size must be positive");
    }
    embedding_ = Parameter("embedding", Tensor({kAlphabetSize, cfg.d_emb}));
    for (double& v : embedding_.value.data()) v = uniform_real(rng, -1.0, 1.0);
    if (cfg.kind == EncoderKind::kBiLstm) {
      forward_ = LstmDirection("lstm.fwd", cfg.d_emb, cfg.hidden, rng);
      backward_ = LstmDirection("lstm.bwd", cfg.d_emb, cfg.hidden, rng);
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t output_dim() const { return cfg_.output_dim(); }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embedding_};
    if (cfg_.kind == EncoderKind::kBiLstm) {
      for (LstmDirection* d : {&forward_, &backward_}) {
        out.push_back(&d->w_x);
        out.push_back(&d->w_h);
        out.push_back(&d->bias);
      }
    }
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<Encoder*>(this)->parameters()) out.push_back(p);
    return out;
  }

  void set_frozen(bool frozen) {
    for (Parameter* p : parameters()) p->frozen = frozen;
  }

  /// Encodes a batch of strings into a [B x output_dim] matrix, rows in
  /// input order.
  Var encode_batch(Tape& tape, std::span<const std::string_view> texts) {
    if (texts.empty()) throw PreconditionError("encode: empty batch");
    for (std::string_view s : texts) {
      if (s.empty()) throw PreconditionError("encode: empty string");
    }
    return cfg_.kind == EncoderKind::kCbow ? encode_cbow(tape, texts) : encode_bilstm(tape, texts);
  }

  /// Representation of one string as a plain vector.
  Tensor encode(std::string_view text) {
    Tape tape(false);
    const std::string_view one[] = {text};
    return encode_batch(tape, one).value().reshaped({output_dim()});
  }

 private:
  Var encode_cbow(Tape& tape, std::span<const std::string_view> texts) {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> lengths;
    for (std::string_view s : texts) {
      for (char ch : s) ids.push_back(symbol_index(ch));
      lengths.push_back(s.size());
    }
    return segment_sum(gather_rows(tape.param(embedding_), std::move(ids)), lengths);
  }

  // Rows are processed sorted by descending length so the strings still
  // running at step t form a prefix of the batch; only that prefix goes
  // through the cell. Finished rows carry their state unchanged (forward
  // direction) or stay at the zero initial state until their first symbol
  // (backward direction).
  Var encode_bilstm(Tape& tape, std::span<const std::string_view> texts) {
    const std::size_t batch = texts.size();
    const std::size_t hidden = cfg_.hidden;
    std::vector<std::size_t> order(batch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return texts[a].size() > texts[b].size();
    });
    std::vector<std::size_t> lengths(batch);
    for (std::size_t k = 0; k < batch; ++k) lengths[k] = texts[order[k]].size();
    const std::size_t steps = lengths.front();
    const auto active = [&](std::size_t t) {
      return static_cast<std::size_t>(
          std::count_if(lengths.begin(), lengths.end(), [t](std::size_t len) { return len > t; }));
    };
    const auto symbols_at = [&](std::size_t t, std::size_t n) {
      std::vector<std::size_t> ids(n);
      for (std::size_t k = 0; k < n; ++k) ids[k] = symbol_index(texts[order[k]][t]);
      return ids;
    };

    const Var emb = tape.param(embedding_);
    const auto run = [&](LstmDirection& dir, bool reverse) {
      // Input projections of the three symbols, with the gate bias folded in.
      const Var proj = add_row(matmul(emb, tape.param(dir.w_x)), tape.param(dir.bias));
      const Var w_h = tape.param(dir.w_h);
      const Var zeros = tape.constant(Tensor({batch, hidden}));
      Var h = zeros;
      Var c = zeros;
      bool fresh = true;
      std::vector<Var> states(steps);
      for (std::size_t i = 0; i < steps; ++i) {
        const std::size_t t = reverse ? steps - 1 - i : i;
        const std::size_t n = active(t);
        const Var x_gates = gather_rows(proj, symbols_at(t, n));
        Var gates = x_gates;
        Var h_prev, c_prev;
        if (!fresh) {
          h_prev = n == batch ? h : slice_rows(h, 0, n);
          c_prev = n == batch ? c : slice_rows(c, 0, n);
          gates = add(matmul(h_prev, w_h), x_gates);
        }
        const Var c_new = fresh ? lstm_cell_state(gates) : lstm_cell_state(gates, c_prev);
        const Var h_new = lstm_hidden(gates, c_new);
        if (n == batch) {
          h = h_new;
          c = c_new;
        } else {
          h = concat({h_new, slice_rows(h, n, batch)}, 0);
          c = concat({c_new, slice_rows(c, n, batch)}, 0);
        }
        fresh = false;
        states[t] = h;
      }
      return states;
    };
    const std::vector<Var> fwd = run(forward_, false);
    const std::vector<Var> bwd = run(backward_, true);

    Var sorted_rep;
    if (cfg_.pooling == PoolMode::kLast) {
      // Forward final state (carried to the last step) and backward state at
      // the first symbol.
      sorted_rep = concat({fwd.back(), bwd.front()}, 1);
    } else {
      sorted_rep = concat({pool_steps(fwd, lengths, cfg_.pooling),
                           pool_steps(bwd, lengths, cfg_.pooling)},
                          1);
    }
    bool identity = true;
    std::vector<std::size_t> inverse(batch);
    for (std::size_t k = 0; k < batch; ++k) {
      inverse[order[k]] = k;
      identity = identity && order[k] == k;
    }
    return identity ? sorted_rep : gather_rows(sorted_rep, std::move(inverse));
  }

  EncoderConfig cfg_;
  Parameter embedding_;
  LstmDirection forward_;
  LstmDirection backward_;
};

/// concat(u, v, u*v, u-v) along the last axis.
inline Var pair_features(Var u, Var v) {
  if (u.shape() != v.shape()) {
    throw DimensionError("pair_features: " + shape_str(u.shape()) + " vs " +
                         shape_str(v.shape()));
  }
  return concat({u, v, mul(u, v), sub(u, v)}, u.value().rank() - 1);
}

/// tanh layer over pair features followed by a 2-way output layer. The tanh
/// layer is as wide as the sentence representation.
class PairHead {
 public:
  PairHead() = default;

  PairHead(std::size_t rep_dim, Rng& rng)
      : w1_("pair.w1", init_uniform({4 * rep_dim, rep_dim}, 4 * rep_dim, rng)),
        b1_("pair.b1", Tensor({rep_dim})),
        w2_("pair.w2", init_uniform({rep_dim, kNumClasses}, rep_dim, rng)),
        b2_("pair.b2", Tensor({kNumClasses})) {}

  std::size_t rep_dim() const { return w1_.value.cols(); }

  /// [B x d] premise and hypothesis representations -> [B x 2] logits.
  Var forward(Tape& tape, Var u, Var v) {
    const Var features = pair_features(u, v);
    if (features.value().cols() != w1_.value.rows()) {
      throw DimensionError("pair head expects representations of size " +
                           std::to_string(rep_dim()) + ", got " + shape_str(u.shape()));
    }
    const Var hidden = tanh(add_row(matmul(features, tape.param(w1_)), tape.param(b1_)));
    return add_row(matmul(hidden, tape.param(w2_)), tape.param(b2_));
  }

  std::vector<Parameter*> parameters() { return {&w1_, &b1_, &w2_, &b2_}; }

 private:
  Parameter w1_, b1_, w2_, b2_;
};

struct MlpConfig {
  std::size_t layers = 1;  // hidden tanh layers: 1 or 2
  std::size_t width = 200;
};

/// Probe / adversary / attacker: 1 or 2 tanh hidden layers of equal width
/// and a 2-way output layer.
class MlpHead {
 public:
  MlpHead() = default;

  MlpHead(std::size_t in_dim, const MlpConfig& cfg, Rng& rng, std::string prefix = "mlp")
      : cfg_(cfg) {
    if (cfg.layers != 1 && cfg.layers != 2) throw ConfigError("MLP layers must be 1 or 2");
    if (cfg.width == 0 || in_dim == 0) throw ConfigError("MLP dimensions must be positive");
    std::size_t fan_in = in_dim;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string n = prefix + ".l" + std::to_string(l);
      weights_.emplace_back(n + ".w", init_uniform({fan_in, cfg.width}, fan_in, rng));
      biases_.emplace_back(n + ".b", Tensor({cfg.width}));
      fan_in = cfg.width;
    }
    weights_.emplace_back(prefix + ".out.w", init_uniform({fan_in, kNumClasses}, fan_in, rng));
    biases_.emplace_back(prefix + ".out.b", Tensor({kNumClasses}));
  }

  const MlpConfig& config() const { return cfg_; }
  std::size_t in_dim() const { return weights_.front().value.rows(); }

  /// [B x in_dim] -> [B x 2] logits.
  Var forward(Tape& tape, Var x) {
    if (x.value().rank() != 2 || x.value().cols() != in_dim()) {
      throw DimensionError("MLP head expects [B x " + std::to_string(in_dim()) + "], got " +
                           shape_str(x.shape()));
    }
    Var h = x;
    for (std::size_t l = 0; l + 1 < weights_.size(); ++l) {
      h = tanh(add_row(matmul(h, tape.param(weights_[l])), tape.param(biases_[l])));
    }
    return add_row(matmul(h, tape.param(weights_.back())), tape.param(biases_.back()));
  }

  /// Logits for a single representation vector.
  Tensor logits(const Tensor& rep) {
    Tape tape(false);
    const Var x = tape.constant(rep.rank() == 1 ? rep.reshaped({1, rep.size()}) : rep);
    return forward(tape, x).value().reshaped({kNumClasses});
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(&weights_[l]);
      out.push_back(&biases_[l]);
    }
    return out;
  }

 private:
  MlpConfig cfg_;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
};

/// Entailment logits for aligned premise/hypothesis batches.
inline Var classify_pair(Tape& tape, Encoder& encoder, PairHead& head,
                         std::span<const std::string_view> premises,
                         std::span<const std::string_view> hypotheses) {
  if (premises.size() != hypotheses.size()) {
    throw DimensionError("classify_pair: premise and hypothesis batches differ in size");
  }
  std::vector<std::string_view> all(premises.begin(), premises.end());
  all.insert(all.end(), hypotheses.begin(), hypotheses.end());
  const Var reps = encoder.encode_batch(tape, all);
  const std::size_t b = premises.size();
  return head.forward(tape, slice_rows(reps, 0, b), slice_rows(reps, b, 2 * b));
}

}  // namespace probelab
