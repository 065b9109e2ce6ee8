#pragma once

// Central finite-difference gradient checks shared by the unit tests and the
// acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "probelab/models.hpp"
#include "probelab/ops.hpp"
#include "probelab/random.hpp"

namespace gradcheck {

using namespace probelab;

inline constexpr double kEps = 1e-4;
inline constexpr double kRelTol = 1e-4;
inline constexpr double kAbsTol = 1e-6;

inline Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform_real(rng, -1.0, 1.0);
  return t;
}

/// <x, w> for a fixed random w, so every output entry gets its own weight.
inline Var project(Var x, std::uint64_t seed = 99) {
  Rng rng(seed);
  const Tensor w = random_tensor(x.value().shape(), rng);
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.value()[i];
  return x.tape->record(Tensor::vector({s}), {x},
                        [id = x.id, w](Tape& t, const Tensor&, const Tensor& g) {
                          Tensor& gx = t.grad(id);
                          for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g[0] * w[i];
                        });
}

using LossFn = std::function<Var(Tape&)>;

struct Report {
  double worst_rel = 0.0;  // over entries whose absolute error exceeds kAbsTol
  std::size_t checked = 0;
  std::string worst;

  bool ok() const { return checked > 0 && worst_rel < kRelTol; }
};

inline bool close(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  return diff <= kAbsTol || diff / std::max(std::abs(analytic), std::abs(numeric)) < kRelTol;
}

/// Central-difference gradient of `loss` for every entry of every parameter.
inline std::vector<std::vector<double>> numeric_gradient(const std::vector<Parameter*>& params,
                                                         const LossFn& loss) {
  std::vector<std::vector<double>> out;
  for (Parameter* p : params) {
    out.emplace_back(p->value.size());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + kEps;
      Tape up(false);
      const double fu = loss(up).value()[0];
      p->value[i] = orig - kEps;
      Tape down(false);
      const double fd = loss(down).value()[0];
      p->value[i] = orig;
      out.back()[i] = (fu - fd) / (2 * kEps);
    }
  }
  return out;
}

/// Compares `analytic` (one tensor per parameter) with `numeric`.
inline void compare(const std::vector<Parameter*>& params, const std::vector<Tensor>& analytic,
                    const std::vector<std::vector<double>>& numeric, Report& r) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      const double a = analytic[k][i], n = numeric[k][i];
      const double diff = std::abs(a - n);
      const double rel = diff / std::max(std::abs(a), std::abs(n));
      ++r.checked;
      if (diff > kAbsTol && rel > r.worst_rel) {
        r.worst_rel = rel;
        r.worst = params[k]->name + "[" + std::to_string(i) + "] analytic " +
                  std::to_string(a) + " numeric " + std::to_string(n);
      }
    }
  }
}

/// Analytic gradients of `loss` against central differences for every entry
/// of every parameter.
inline Report check_gradients(const std::vector<Parameter*>& params, const LossFn& loss) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);
  Report r;
  compare(params, analytic, numeric_gradient(params, loss), r);
  return r;
}

/// Encoder gradients under L_task + L_adv(grad_reverse(reps, lambda)) must
/// equal FD(L_task) - lambda * FD(L_adv); adversary gradients equal FD(L_adv).
inline Report check_reversed_joint(EncoderKind kind, PoolMode pooling, double lambda,
                                   std::uint64_t seed = 9) {
  Rng rng(seed);
  Encoder enc(EncoderConfig{kind, pooling, 2, 3}, rng);
  PairHead head(enc.output_dim(), rng);
  MlpHead adv(enc.output_dim(), MlpConfig{2, 3}, rng, "adv");
  const std::vector<std::string_view> texts = {"abc", "ba", "bcab", "a"};
  const auto task_loss = [&](Tape& t, Var reps) {
    const Var logits = head.forward(t, slice_rows(reps, 0, 2), slice_rows(reps, 2, 4));
    return softmax_cross_entropy(logits, std::vector<std::size_t>{1, 0});
  };
  const auto adv_loss = [&](Tape& t, Var reps) {
    return softmax_cross_entropy(adv.forward(t, reps), std::vector<std::size_t>{1, 0, 1, 0});
  };
  const auto enc_params = enc.parameters();
  const auto adv_params = adv.parameters();
  std::vector<Parameter*> all = enc_params;
  for (Parameter* p : head.parameters()) all.push_back(p);
  for (Parameter* p : adv_params) all.push_back(p);

  for (Parameter* p : all) p->zero_grad();
  {
    Tape t;
    const Var reps = enc.encode_batch(t, texts);
    t.backward(add(task_loss(t, reps), adv_loss(t, grad_reverse(reps, lambda))));
  }
  std::vector<Tensor> enc_grads, adv_grads;
  for (Parameter* p : enc_params) enc_grads.push_back(p->grad);
  for (Parameter* p : adv_params) adv_grads.push_back(p->grad);

  const LossFn on_task = [&](Tape& t) { return task_loss(t, enc.encode_batch(t, texts)); };
  const LossFn on_adv = [&](Tape& t) { return adv_loss(t, enc.encode_batch(t, texts)); };
  auto want = numeric_gradient(enc_params, on_task);
  const auto g_adv_enc = numeric_gradient(enc_params, on_adv);
  for (std::size_t k = 0; k < want.size(); ++k) {
    for (std::size_t i = 0; i < want[k].size(); ++i) want[k][i] -= lambda * g_adv_enc[k][i];
  }
  Report r;
  compare(enc_params, enc_grads, want, r);
  compare(adv_params, adv_grads, numeric_gradient(adv_params, on_adv), r);
  return r;
}

struct NamedCheck {
  std::string name;
  std::function<Report()> run;
};

/// Every differentiable op plus the full models, as independent checks.
inline std::vector<NamedCheck> gradient_suite() {
  std::vector<NamedCheck> out;
  // Each check owns its parameters.
  const auto op = [&out](std::string name, std::vector<Shape> shapes,
                         std::function<Var(Tape&, const std::vector<Var>&)> f) {
    out.push_back({std::move(name), [shapes = std::move(shapes), f = std::move(f)] {
                     Rng rng(20240601);
                     std::vector<std::unique_ptr<Parameter>> owned;
                     std::vector<Parameter*> params;
                     for (std::size_t i = 0; i < shapes.size(); ++i) {
                       owned.push_back(std::make_unique<Parameter>(
                           "x" + std::to_string(i), random_tensor(shapes[i], rng)));
                       params.push_back(owned.back().get());
                     }
                     return check_gradients(params, [&](Tape& t) {
                       std::vector<Var> vars;
                       for (Parameter* p : params) vars.push_back(t.param(*p));
                       return f(t, vars);
                     });
                   }});
  };
  using V = const std::vector<Var>&;
  op("matmul", {{3, 4}, {4, 2}}, [](Tape&, V x) { return project(matmul(x[0], x[1])); });
  op("add_row", {{3, 4}, {4}}, [](Tape&, V x) { return project(add_row(x[0], x[1])); });
  op("add", {{2, 3}, {2, 3}}, [](Tape&, V x) { return project(add(x[0], x[1])); });
  op("sub", {{2, 3}, {2, 3}}, [](Tape&, V x) { return project(sub(x[0], x[1])); });
  op("mul", {{2, 3}, {2, 3}}, [](Tape&, V x) { return project(mul(x[0], x[1])); });
  op("mul_same_operand", {{5}}, [](Tape&, V x) { return project(mul(x[0], x[0])); });
  op("tanh", {{3, 3}}, [](Tape&, V x) { return project(tanh(x[0])); });
  op("sigmoid", {{3, 3}}, [](Tape&, V x) { return project(sigmoid(x[0])); });
  op("concat_cols", {{2, 3}, {2, 1}}, [](Tape&, V x) { return project(concat({x[0], x[1]}, 1)); });
  op("concat_rows", {{2, 3}, {4, 3}}, [](Tape&, V x) { return project(concat({x[0], x[1]}, 0)); });
  op("slice_rows", {{5, 4}}, [](Tape&, V x) { return project(slice_rows(x[0], 1, 4)); });
  op("slice_cols", {{5, 4}}, [](Tape&, V x) { return project(slice_cols(x[0], 2, 4)); });
  op("gather_rows", {{5, 4}},
     [](Tape&, V x) { return project(gather_rows(x[0], {4, 0, 4, 2, 1, 4})); });
  op("segment_sum", {{5, 4}}, [](Tape&, V x) { return project(segment_sum(x[0], {2, 1, 2})); });
  for (PoolMode m : {PoolMode::kLast, PoolMode::kMean, PoolMode::kMax}) {
    const std::string mode(pooling_name(m));
    op("pool_" + mode, {{5, 3}}, [m](Tape&, V x) { return project(pool(x[0], m)); });
    op("pool_steps_" + mode, {{3, 2}, {3, 2}, {3, 2}}, [m](Tape&, V x) {
      return project(pool_steps({x[0], x[1], x[2]}, {3, 2, 1}, m));
    });
  }
  op("cross_entropy_single", {{4}}, [](Tape&, V x) { return softmax_cross_entropy(x[0], 3); });
  op("cross_entropy_batch", {{3, 2}}, [](Tape&, V x) {
    return softmax_cross_entropy(x[0], std::vector<std::size_t>{1, 0, 1});
  });
  op("lstm_cell_state", {{3, 8}, {3, 2}},
     [](Tape&, V x) { return project(lstm_cell_state(x[0], x[1])); });
  op("lstm_cell_state_fresh", {{3, 8}}, [](Tape&, V x) { return project(lstm_cell_state(x[0])); });
  op("lstm_hidden", {{3, 8}, {3, 2}}, [](Tape&, V x) { return project(lstm_hidden(x[0], x[1])); });
  // The reversal layer is checked against the negated, scaled gradient of the
  // identity, which is what its definition requires.
  out.push_back({"grad_reverse", [] {
                   Rng rng(3);
                   Parameter a("a", random_tensor({2, 3}, rng));
                   Report r;
                   for (double lambda : {0.5, 1.0, 3.0}) {
                     const LossFn plain = [&](Tape& t) { return project(t.param(a)); };
                     auto want = numeric_gradient({&a}, plain);
                     for (double& v : want[0]) v *= -lambda;
                     a.zero_grad();
                     Tape t;
                     t.backward(project(grad_reverse(t.param(a), lambda)));
                     compare({&a}, {a.grad}, want, r);
                   }
                   return r;
                 }});

  struct ModelCase {
    EncoderKind kind;
    PoolMode pooling;
  };
  for (ModelCase mc : {ModelCase{EncoderKind::kCbow, PoolMode::kLast},
                       ModelCase{EncoderKind::kBiLstm, PoolMode::kLast},
                       ModelCase{EncoderKind::kBiLstm, PoolMode::kMean},
                       ModelCase{EncoderKind::kBiLstm, PoolMode::kMax}}) {
    const std::string tag = std::string(encoder_name(mc.kind)) + "_" +
                            std::string(pooling_name(mc.pooling));
    out.push_back({"model_" + tag, [mc] {
                     Rng rng(7);
                     Encoder enc(EncoderConfig{mc.kind, mc.pooling, 3, 4}, rng);
                     PairHead head(enc.output_dim(), rng);
                     auto params = enc.parameters();
                     for (Parameter* p : head.parameters()) params.push_back(p);
                     const std::vector<std::string_view> prem = {"abcab", "b", "acbbabab"};
                     const std::vector<std::string_view> hyp = {"ba", "bcaab", "a"};
                     return check_gradients(params, [&](Tape& t) {
                       return softmax_cross_entropy(classify_pair(t, enc, head, prem, hyp),
                                                    std::vector<std::size_t>{0, 1, 1});
                     });
                   }});
    out.push_back({"adversarial_" + tag,
                   [mc] { return check_reversed_joint(mc.kind, mc.pooling, 1.5); }});
  }
  for (std::size_t layers : {1u, 2u}) {
    out.push_back({"mlp_" + std::to_string(layers) + "_layers", [layers] {
                     Rng rng(12);
                     MlpHead head(4, MlpConfig{layers, 5}, rng);
                     Parameter x("x", random_tensor({3, 4}, rng));
                     auto params = head.parameters();
                     params.push_back(&x);
                     return check_gradients(params, [&](Tape& t) {
                       return softmax_cross_entropy(head.forward(t, t.param(x)),
                                                    std::vector<std::size_t>{0, 1, 1});
                     });
                   }});
  }
  return out;
}

}  // namespace gradcheck
