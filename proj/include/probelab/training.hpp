#pragma once

// Training loops: the entailment task, joint adversarial training through a
// gradient reversal layer, and probe/attacker training on frozen encoders.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "probelab/checkpoint.hpp"
#include "probelab/datagen.hpp"
#include "probelab/errors.hpp"
#include "probelab/models.hpp"
#include "probelab/ops.hpp"
#include "probelab/optim.hpp"
#include "probelab/random.hpp"

namespace probelab {

struct TrainConfig {
  std::size_t max_epochs = 10;
  std::size_t patience = 3;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double lambda = 0.0;  // adversarial training only

  void validate() const {
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning_rate must be finite and non-negative");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw ConfigError("lambda must be finite and non-negative");
    }
  }
};

struct MetricsRecord {
  std::optional<double> task_dev_acc;
  std::optional<double> probe_acc;
  std::optional<double> adversary_acc;
  std::optional<double> attacker_acc;
  std::optional<double> majority_task;
  std::optional<double> majority_probe;
  std::size_t epochs_run = 0;
};

/// Dev accuracy after every epoch, and which epoch's snapshot was kept.
struct TrainHistory {
  std::vector<double> dev_acc;
  std::size_t best_epoch = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Index of the largest logit; ties resolve to the lower class index.
inline std::size_t argmax(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

/// Fraction of rows whose argmax equals the label.
inline double accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (labels.empty()) throw PreconditionError("accuracy of an empty split");
  if (logits.rows() != labels.size()) {
    throw DimensionError("accuracy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) correct += argmax(logits.row(r)) == labels[r];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Frequency of the most common label.
template <typename T, typename Selector>
double majority_baseline(std::span<const T> split, Selector label) {
  if (split.empty()) throw PreconditionError("majority baseline of an empty split");
  std::vector<std::pair<decltype(label(split.front())), std::size_t>> counts;
  for (const T& ex : split) {
    const auto l = label(ex);
    auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == l; });
    if (it == counts.end()) counts.emplace_back(l, 1);
    else ++it->second;
  }
  std::size_t best = 0;
  for (const auto& c : counts) best = std::max(best, c.second);
  return static_cast<double>(best) / static_cast<double>(split.size());
}

namespace detail {

inline constexpr std::size_t kEvalBatch = 256;

inline void require_finite(const Var& loss, const std::string& context) {
  if (!std::isfinite(loss.value()[0])) {
    throw NonFiniteLossError("non-finite loss (" + context + ")");
  }
}

inline std::vector<Tensor> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Tensor> out;
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

inline void restore(const std::vector<Parameter*>& params, const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

template <typename F>
void for_each_batch(std::size_t n, std::size_t batch, F&& f) {
  for (std::size_t begin = 0; begin < n; begin += batch) f(begin, std::min(n, begin + batch));
}

}  // namespace detail

/// Representations of a list of strings as one [N x d] matrix, computed
/// without recording gradients.
inline Tensor encode_all(Encoder& encoder, std::span<const std::string_view> texts) {
  if (texts.empty()) throw PreconditionError("encode_all: no strings");
  const std::size_t d = encoder.output_dim();
  Tensor out({texts.size(), d});
  detail::for_each_batch(texts.size(), detail::kEvalBatch, [&](std::size_t b, std::size_t e) {
    Tape tape(false);
    const Tensor& reps = encoder.encode_batch(tape, texts.subspan(b, e - b)).value();
    std::copy(reps.data().begin(), reps.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(b * d));
  });
  return out;
}

/// Entailment accuracy of encoder + pair head on a list of pairs.
inline double evaluate_task(Encoder& encoder, PairHead& head, std::span<const ExamplePair> pairs) {
  if (pairs.empty()) throw PreconditionError("evaluate: empty split");
  std::size_t correct = 0;
  detail::for_each_batch(pairs.size(), detail::kEvalBatch, [&](std::size_t b, std::size_t e) {
    std::vector<std::string_view> p, h;
    for (std::size_t i = b; i < e; ++i) {
      p.push_back(pairs[i].premise.str());
      h.push_back(pairs[i].hypothesis.str());
    }
    Tape tape(false);
    const Tensor& logits = classify_pair(tape, encoder, head, p, h).value();
    for (std::size_t i = b; i < e; ++i) {
      correct += argmax(logits.row(i - b)) == static_cast<std::size_t>(pairs[i].entailed);
    }
  });
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

/// Accuracy of an MLP head predicting 'c'-presence of premises and
/// hypotheses (both sides pooled) on a list of pairs.
inline double evaluate_adversary(Encoder& encoder, MlpHead& adversary,
                                 std::span<const ExamplePair> pairs) {
  if (pairs.empty()) throw PreconditionError("evaluate: empty split");
  std::vector<std::string_view> texts;
  std::vector<std::size_t> labels;
  for (const ExamplePair& ex : pairs) {
    texts.push_back(ex.premise.str());
    labels.push_back(ex.premise_has_c);
  }
  for (const ExamplePair& ex : pairs) {
    texts.push_back(ex.hypothesis.str());
    labels.push_back(ex.hypothesis_has_c);
  }
  const Tensor reps = encode_all(encoder, texts);
  Tape tape(false);
  return accuracy(adversary.forward(tape, tape.constant(reps)).value(), labels);
}

// ---------------------------------------------------------------------------
// Task and adversarial training

namespace detail {

/// Shared loop for train_task (adversary == nullptr) and train_adversarial.
/// Per batch the loss is L_task + L_adv(premises) + L_adv(hypotheses), where
/// the adversary sees the representations through grad_reverse(., lambda).
inline TrainHistory train_pair_model(Encoder& encoder, PairHead& head, MlpHead* adversary,
                                     const DatasetSplits& splits, const TrainConfig& cfg) {
  cfg.validate();
  if (head.rep_dim() != encoder.output_dim()) {
    throw DimensionError("pair head expects representations of size " +
                         std::to_string(head.rep_dim()) + ", encoder produces " +
                         std::to_string(encoder.output_dim()));
  }
  if (adversary && adversary->in_dim() != encoder.output_dim()) {
    throw DimensionError("adversary input size does not match the encoder");
  }
  if (splits.train.empty() || splits.dev.empty()) {
    throw PreconditionError("training needs non-empty train and dev splits");
  }

  std::vector<Parameter*> params = encoder.parameters();
  for (Parameter* p : head.parameters()) params.push_back(p);
  if (adversary) {
    for (Parameter* p : adversary->parameters()) params.push_back(p);
  }
  Adam adam(params, AdamConfig{cfg.learning_rate});
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle/task"));

  TrainHistory history;
  std::vector<Tensor> best = snapshot(params);
  double best_acc = -1.0;
  std::size_t stale = 0;
  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), shuffle_rng);
    std::size_t batch_index = 0;
    for_each_batch(order.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
      const std::size_t n = e - b;
      std::vector<std::string_view> texts(2 * n);
      std::vector<std::size_t> y(n), zp(n), zh(n);
      for (std::size_t i = 0; i < n; ++i) {
        const ExamplePair& ex = splits.train[order[b + i]];
        texts[i] = ex.premise.str();
        texts[n + i] = ex.hypothesis.str();
        y[i] = ex.entailed;
        zp[i] = ex.premise_has_c;
        zh[i] = ex.hypothesis_has_c;
      }
      adam.zero_grad();
      Tape tape;
      const Var reps = encoder.encode_batch(tape, texts);
      const Var logits = head.forward(tape, slice_rows(reps, 0, n), slice_rows(reps, n, 2 * n));
      Var loss = softmax_cross_entropy(logits, y);
      if (adversary) {
        const Var adv = adversary->forward(tape, grad_reverse(reps, cfg.lambda));
        loss = add(loss, add(softmax_cross_entropy(slice_rows(adv, 0, n), zp),
                             softmax_cross_entropy(slice_rows(adv, n, 2 * n), zh)));
      }
      std::string context = "epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index);
      if (adversary) context += ", lambda " + std::to_string(cfg.lambda);
      require_finite(loss, context);
      tape.backward(loss);
      adam.step();
      ++batch_index;
    });

    const double dev = evaluate_task(encoder, head, splits.dev);
    history.dev_acc.push_back(dev);
    if (dev > best_acc) {
      best_acc = dev;
      best = snapshot(params);
      history.best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
    // A perfect dev score can never be strictly improved on, so the kept
    // snapshot is final.
    if (stale >= cfg.patience || best_acc >= 1.0) break;
  }
  restore(params, best);
  return history;
}

}  // namespace detail

struct TaskResult {
  MetricsRecord metrics;
  TrainHistory history;
};

/// Trains encoder + pair head on the entailment task with early stopping on
/// dev accuracy; leaves the best-dev snapshot in the models.
inline TaskResult train_task(Encoder& encoder, PairHead& head, const DatasetSplits& splits,
                             const TrainConfig& cfg) {
  TaskResult r;
  r.history = detail::train_pair_model(encoder, head, nullptr, splits, cfg);
  r.metrics.task_dev_acc = r.history.dev_acc[r.history.best_epoch];
  r.metrics.epochs_run = r.history.dev_acc.size();
  return r;
}

/// Joint training of encoder, pair head and adversary. The adversary
/// receives the plain gradient of its loss; the encoder receives the task
/// gradient plus the adversary gradient scaled by -lambda.
inline TaskResult train_adversarial(Encoder& encoder, PairHead& head, MlpHead& adversary,
                                    const DatasetSplits& splits, const TrainConfig& cfg) {
  TaskResult r;
  r.history = detail::train_pair_model(encoder, head, &adversary, splits, cfg);
  r.metrics.task_dev_acc = r.history.dev_acc[r.history.best_epoch];
  r.metrics.adversary_acc = evaluate_adversary(encoder, adversary, splits.dev);
  r.metrics.epochs_run = r.history.dev_acc.size();
  return r;
}

// ---------------------------------------------------------------------------
// Probing

struct ProbeResult {
  double test_acc = 0.0;
  TrainHistory history;
};

/// Trains an MLP head on fixed representation matrices with the same
/// early-stopping rule as the task, and reports test accuracy of the
/// best-dev snapshot.
inline ProbeResult train_head_on_features(MlpHead& head, const Tensor& train_x,
                                          std::span<const std::size_t> train_y,
                                          const Tensor& dev_x, std::span<const std::size_t> dev_y,
                                          const Tensor& test_x,
                                          std::span<const std::size_t> test_y,
                                          const TrainConfig& cfg, std::string_view stream) {
  cfg.validate();
  if (train_y.empty() || dev_y.empty() || test_y.empty()) {
    throw PreconditionError("probe training needs non-empty train, dev and test splits");
  }
  if (train_x.cols() != head.in_dim()) {
    throw DimensionError("probe input size " + std::to_string(head.in_dim()) +
                         " does not match representations " + shape_str(train_x.shape()));
  }
  const std::vector<Parameter*> params = head.parameters();
  Adam adam(params, AdamConfig{cfg.learning_rate});
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle/" + std::string(stream)));
  const auto eval = [&](const Tensor& x, std::span<const std::size_t> y) {
    Tape tape(false);
    return accuracy(head.forward(tape, tape.constant(x)).value(), y);
  };

  ProbeResult r;
  std::vector<Tensor> best = detail::snapshot(params);
  double best_acc = -1.0;
  std::size_t stale = 0;
  std::vector<std::size_t> order(train_y.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t d = train_x.cols();
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), shuffle_rng);
    std::size_t batch_index = 0;
    detail::for_each_batch(order.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
      Tensor x({e - b, d});
      std::vector<std::size_t> y(e - b);
      for (std::size_t i = b; i < e; ++i) {
        const auto src = train_x.row(order[i]);
        std::copy(src.begin(), src.end(), x.row(i - b).begin());
        y[i - b] = train_y[order[i]];
      }
      adam.zero_grad();
      Tape tape;
      const Var loss = softmax_cross_entropy(head.forward(tape, tape.constant(std::move(x))), y);
      detail::require_finite(loss, std::string(stream) + " epoch " + std::to_string(epoch) +
                                       ", batch " + std::to_string(batch_index++));
      tape.backward(loss);
      adam.step();
    });
    const double dev = eval(dev_x, dev_y);
    r.history.dev_acc.push_back(dev);
    if (dev > best_acc) {
      best_acc = dev;
      best = detail::snapshot(params);
      r.history.best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
    if (stale >= cfg.patience || best_acc >= 1.0) break;
  }
  detail::restore(params, best);
  r.test_acc = eval(test_x, test_y);
  return r;
}

/// Representations of the three probe splits under one frozen encoder.
/// Probes and the attacker train on the same matrices, so they are encoded once.
struct ProbeFeatures {
  Tensor train_x, dev_x, test_x;
  std::vector<std::size_t> train_y, dev_y, test_y;
  std::string encoder_digest;
};

inline ProbeFeatures encode_probe_features(Encoder& encoder, const ProbeDataset& data) {
  ProbeFeatures f;
  f.encoder_digest = parameter_digest(encoder.parameters());
  const auto encode = [&](const std::vector<ProbeExample>& split,
                          std::vector<std::size_t>& labels) {
    std::vector<std::string_view> texts;
    for (const ProbeExample& ex : split) {
      texts.push_back(ex.text.str());
      labels.push_back(ex.has_c);
    }
    return encode_all(encoder, texts);
  };
  f.train_x = encode(data.train, f.train_y);
  f.dev_x = encode(data.dev, f.dev_y);
  f.test_x = encode(data.test, f.test_y);
  if (parameter_digest(encoder.parameters()) != f.encoder_digest) {
    throw InvariantViolation("encoder parameters changed while encoding probe data");
  }
  return f;
}

inline ProbeResult train_head_on_features(MlpHead& head, const ProbeFeatures& f,
                                          const TrainConfig& cfg, std::string_view stream) {
  return train_head_on_features(head, f.train_x, f.train_y, f.dev_x, f.dev_y, f.test_x,
                                f.test_y, cfg, stream);
}

namespace detail {

inline ProbeResult train_on_frozen(Encoder& encoder, MlpHead& head, const ProbeDataset& data,
                                   const TrainConfig& cfg, std::string_view stream) {
  const ProbeFeatures f = encode_probe_features(encoder, data);
  ProbeResult r = train_head_on_features(head, f, cfg, stream);
  if (parameter_digest(encoder.parameters()) != f.encoder_digest) {
    throw InvariantViolation("encoder parameters changed during " + std::string(stream) +
                             " training");
  }
  return r;
}

}  // namespace detail

/// Trains only `probe` to predict 'c'-presence from frozen representations;
/// returns test accuracy. Throws InvariantViolation if the encoder changed.
inline ProbeResult train_probe(Encoder& frozen_encoder, MlpHead& probe, const ProbeDataset& data,
                               const TrainConfig& cfg) {
  return detail::train_on_frozen(frozen_encoder, probe, data, cfg, "probe");
}

/// The external attacker: same mechanics as the probe, run on a fresh head.
inline ProbeResult train_attacker(Encoder& frozen_encoder, MlpHead& attacker,
                                  const ProbeDataset& data, const TrainConfig& cfg) {
  return detail::train_on_frozen(frozen_encoder, attacker, data, cfg, "attacker");
}

}  // namespace probelab
