#pragma once

// Differentiable operations recorded on a Tape. Every op validates shapes
// eagerly and throws DimensionError naming the offending shapes.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "probelab/errors.hpp"
#include "probelab/tape.hpp"
#include "probelab/tensor.hpp"

namespace probelab {

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

inline ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

inline MatMap as_matrix(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(t.shape()));
  }
}

inline double sigmoid(double x) {
  // Split keeps exp() from overflowing for large |x|.
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] * [k x n] -> [m x n].
inline Var matmul(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) +
                         " x " + shape_str(bv.shape()));
  }
  Tensor out({av.rows(), bv.cols()});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  return tape.record(std::move(out), {a, b},
                     [ia = a.id, ib = b.id](Tape& t, const Tensor&, const Tensor& g) {
                       const auto gm = detail::as_matrix(g);
                       if (t.needs_grad(ib)) {
                         detail::as_matrix(t.grad(ib)).noalias() +=
                             detail::as_matrix(t.value(ia)).transpose() * gm;
                       }
                       if (t.needs_grad(ia)) {
                         detail::as_matrix(t.grad(ia)).noalias() +=
                             gm * detail::as_matrix(t.value(ib)).transpose();
                       }
                     });
}

/// Adds a bias row vector to every row of a matrix.
inline Var add_row(Var a, Var bias) {
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  detail::require_rank2(av, "add_row");
  if (bv.size() != av.cols()) {
    throw DimensionError("add_row: bias " + shape_str(bv.shape()) + " does not fit " +
                         shape_str(av.shape()));
  }
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return a.tape->record(std::move(out), {a, bias},
                        [ia = a.id, ib = bias.id](Tape& t, const Tensor&, const Tensor& g) {
                          if (t.needs_grad(ia)) t.grad(ia) += g;
                          if (t.needs_grad(ib)) {
                            Tensor& gb = t.grad(ib);
                            for (std::size_t r = 0; r < g.rows(); ++r) {
                              auto row = g.row(r);
                              for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { kAdd, kSub, kMul, kTanh, kSigmoid };

namespace detail {

inline Var binary(Var a, Var b, ElementwiseOp op, const char* name) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  av.require_same_shape(bv, name);
  Tensor out(av.shape());
  const std::size_t n = out.size();
  switch (op) {
    case ElementwiseOp::kAdd:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
      break;
    case ElementwiseOp::kSub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
      break;
    case ElementwiseOp::kMul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
      break;
    default:
      throw PreconditionError(std::string(name) + " is not a binary op");
  }
  return a.tape->record(
      std::move(out), {a, b},
      [ia = a.id, ib = b.id, op](Tape& t, const Tensor&, const Tensor& g) {
        const std::size_t n = g.size();
        if (t.needs_grad(ia)) {
          Tensor& ga = t.grad(ia);
          if (op == ElementwiseOp::kMul) {
            const Tensor& bv = t.value(ib);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
          } else {
            ga += g;
          }
        }
        if (t.needs_grad(ib)) {
          Tensor& gb = t.grad(ib);
          if (op == ElementwiseOp::kMul) {
            const Tensor& av = t.value(ia);
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
          } else if (op == ElementwiseOp::kSub) {
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
          } else {
            gb += g;
          }
        }
      });
}

}  // namespace detail

inline Var add(Var a, Var b) { return detail::binary(a, b, ElementwiseOp::kAdd, "add"); }
inline Var sub(Var a, Var b) { return detail::binary(a, b, ElementwiseOp::kSub, "sub"); }
inline Var mul(Var a, Var b) { return detail::binary(a, b, ElementwiseOp::kMul, "mul"); }

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  return a.tape->record(std::move(out), {a},
                        [ia = a.id](Tape& t, const Tensor& y, const Tensor& g) {
                          Tensor& ga = t.grad(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                          }
                        });
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = detail::sigmoid(v);
  return a.tape->record(std::move(out), {a},
                        [ia = a.id](Tape& t, const Tensor& y, const Tensor& g) {
                          Tensor& ga = t.grad(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                          }
                        });
}

/// Dispatching form; unary ops ignore `b` and binary ops require it.
inline Var elementwise(ElementwiseOp op, Var a, std::optional<Var> b = std::nullopt) {
  switch (op) {
    case ElementwiseOp::kTanh:
      return tanh(a);
    case ElementwiseOp::kSigmoid:
      return sigmoid(a);
    default:
      break;
  }
  if (!b) throw PreconditionError("binary elementwise op needs a second operand");
  return detail::binary(a, *b, op, "elementwise");
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenation along `axis`. Rank-1 parts only support axis 0; rank-2 parts
/// support 0 (stack rows) and 1 (join columns).
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw PreconditionError("concat: no parts");
  const Tensor& first = parts.front().value();
  const std::size_t rank = first.rank();
  if (axis >= rank) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(first.shape()));
  }
  for (const Var& p : parts) {
    const Shape& s = p.value().shape();
    bool ok = s.size() == rank;
    for (std::size_t d = 0; ok && d < rank; ++d) ok = d == axis || s[d] == first.shape()[d];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(first.shape()) + " and " +
                           shape_str(s) + " along axis " + std::to_string(axis));
    }
  }

  // A rank-1 tensor or axis-0 concat of rows is a flat append; axis 1 of a
  // matrix interleaves per row.
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    widths.push_back(p.value().shape()[axis]);
    total += widths.back();
  }
  Shape shape = first.shape();
  shape[axis] = total;
  Tensor out(shape);
  const bool flat = rank == 1 || axis == 0;
  if (flat) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const auto src = p.value().data();
      std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
      off += src.size();
    }
  } else {
    const std::size_t rows = first.rows();
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].value().row(r);
        std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(off));
        off += widths[k];
      }
    }
  }

  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts.front().tape->record(
      std::move(out), parts,
      [ids, widths, flat](Tape& t, const Tensor&, const Tensor& g) {
        if (flat) {
          std::size_t off = 0;
          for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t n = t.value(ids[k]).size();
            if (t.needs_grad(ids[k])) {
              Tensor& gk = t.grad(ids[k]);
              for (std::size_t i = 0; i < n; ++i) gk[i] += g[off + i];
            }
            off += n;
          }
          return;
        }
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const auto grow = g.row(r);
          std::size_t off = 0;
          for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.needs_grad(ids[k])) {
              auto dst = t.grad(ids[k]).row(r);
              for (std::size_t c = 0; c < widths[k]; ++c) dst[c] += grow[off + c];
            }
            off += widths[k];
          }
        }
      });
}

/// Rows [begin, end) of a matrix.
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "slice_rows");
  if (begin >= end || end > av.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(av.shape()));
  }
  const std::size_t c = av.cols();
  std::vector<double> data(av.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                           av.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return a.tape->record(Tensor({end - begin, c}, std::move(data)), {a},
                        [ia = a.id, off = begin * c](Tape& t, const Tensor&, const Tensor& g) {
                          Tensor& ga = t.grad(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
                        });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "slice_cols");
  if (begin >= end || end > av.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(av.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out({av.rows(), w});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const auto src = av.row(r).subspan(begin, w);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return a.tape->record(std::move(out), {a},
                        [ia = a.id, begin, w](Tape& t, const Tensor&, const Tensor& g) {
                          Tensor& ga = t.grad(ia);
                          for (std::size_t r = 0; r < g.rows(); ++r) {
                            auto dst = ga.row(r).subspan(begin, w);
                            const auto src = g.row(r);
                            for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
                          }
                        });
}

/// out[i] = table[indices[i]]; backward scatter-adds into the table.
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
  const Tensor& tv = table.value();
  detail::require_rank2(tv, "gather_rows");
  if (indices.empty()) throw PreconditionError("gather_rows: no indices");
  const std::size_t c = tv.cols();
  Tensor out({indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) +
                       " out of range for " + shape_str(tv.shape()));
    }
    const auto src = tv.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return table.tape->record(
      std::move(out), {table},
      [it = table.id, indices = std::move(indices)](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& gt = t.grad(it);
        for (std::size_t i = 0; i < indices.size(); ++i) {
          auto dst = gt.row(indices[i]);
          const auto src = g.row(i);
          for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
        }
      });
}

/// Sums consecutive row segments: segment b covers lengths[b] rows.
inline Var segment_sum(Var x, const std::vector<std::size_t>& lengths) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "segment_sum");
  std::size_t total = 0;
  for (std::size_t len : lengths) {
    if (len == 0) throw PreconditionError("segment_sum: empty segment");
    total += len;
  }
  if (total != xv.rows() || lengths.empty()) {
    throw DimensionError("segment_sum: segment lengths cover " + std::to_string(total) +
                         " rows of " + shape_str(xv.shape()));
  }
  const std::size_t c = xv.cols();
  Tensor out({lengths.size(), c});
  std::size_t r = 0;
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    auto dst = out.row(b);
    for (std::size_t k = 0; k < lengths[b]; ++k, ++r) {
      const auto src = xv.row(r);
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  }
  return x.tape->record(std::move(out), {x},
                        [ix = x.id, lengths](Tape& t, const Tensor&, const Tensor& g) {
                          Tensor& gx = t.grad(ix);
                          std::size_t r = 0;
                          for (std::size_t b = 0; b < lengths.size(); ++b) {
                            const auto src = g.row(b);
                            for (std::size_t k = 0; k < lengths[b]; ++k, ++r) {
                              auto dst = gx.row(r);
                              for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolMode { kLast, kMean, kMax };

/// Reduces a [T x d] sequence to [d]. Max ties go to the earliest step.
inline Var pool(Var seq, PoolMode mode) {
  const Tensor& sv = seq.value();
  if (sv.rank() != 2) {
    throw DimensionError("pool: expected [T x d], got " + shape_str(sv.shape()));
  }
  const std::size_t steps = sv.rows();
  const std::size_t d = sv.cols();
  Tensor out({d});
  std::vector<std::size_t> argmax;
  switch (mode) {
    case PoolMode::kLast:
      for (std::size_t j = 0; j < d; ++j) out[j] = sv.at(steps - 1, j);
      break;
    case PoolMode::kMean:
      for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t j = 0; j < d; ++j) out[j] += sv.at(t, j);
      for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(steps);
      break;
    case PoolMode::kMax:
      argmax.assign(d, 0);
      for (std::size_t j = 0; j < d; ++j) out[j] = sv.at(0, j);
      for (std::size_t t = 1; t < steps; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          if (sv.at(t, j) > out[j]) {
            out[j] = sv.at(t, j);
            argmax[j] = t;
          }
        }
      }
      break;
  }
  return seq.tape->record(
      std::move(out), {seq},
      [is = seq.id, mode, steps, argmax = std::move(argmax)](Tape& t, const Tensor&,
                                                             const Tensor& g) {
        Tensor& gs = t.grad(is);
        const std::size_t d = g.size();
        for (std::size_t j = 0; j < d; ++j) {
          switch (mode) {
            case PoolMode::kLast:
              gs.at(steps - 1, j) += g[j];
              break;
            case PoolMode::kMean:
              for (std::size_t s = 0; s < steps; ++s) gs.at(s, j) += g[j] / static_cast<double>(steps);
              break;
            case PoolMode::kMax:
              gs.at(argmax[j], j) += g[j];
              break;
          }
        }
      });
}

/// Batched pooling over per-step matrices. steps[t] is [B x d]; row b only
/// uses steps t < lengths[b]. kLast takes step lengths[b]-1.
inline Var pool_steps(const std::vector<Var>& steps, const std::vector<std::size_t>& lengths,
                      PoolMode mode) {
  if (steps.empty()) throw PreconditionError("pool_steps: empty sequence");
  const Tensor& first = steps.front().value();
  detail::require_rank2(first, "pool_steps");
  const std::size_t batch = first.rows();
  const std::size_t d = first.cols();
  if (lengths.size() != batch) {
    throw DimensionError("pool_steps: " + std::to_string(lengths.size()) + " lengths for " +
                         std::to_string(batch) + " rows");
  }
  for (const Var& s : steps) {
    if (s.value().shape() != first.shape()) {
      throw DimensionError("pool_steps: step shape " + shape_str(s.value().shape()) +
                           " differs from " + shape_str(first.shape()));
    }
  }
  for (std::size_t len : lengths) {
    if (len == 0 || len > steps.size()) {
      throw PreconditionError("pool_steps: length " + std::to_string(len) +
                              " outside [1, " + std::to_string(steps.size()) + "]");
    }
  }

  Tensor out({batch, d});
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::kMax) argmax.assign(batch * d, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    auto dst = out.row(b);
    const std::size_t len = lengths[b];
    switch (mode) {
      case PoolMode::kLast: {
        const auto src = steps[len - 1].value().row(b);
        std::copy(src.begin(), src.end(), dst.begin());
        break;
      }
      case PoolMode::kMean:
        for (std::size_t t = 0; t < len; ++t) {
          const auto src = steps[t].value().row(b);
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        for (std::size_t j = 0; j < d; ++j) dst[j] /= static_cast<double>(len);
        break;
      case PoolMode::kMax: {
        const auto src0 = steps[0].value().row(b);
        std::copy(src0.begin(), src0.end(), dst.begin());
        for (std::size_t t = 1; t < len; ++t) {
          const auto src = steps[t].value().row(b);
          for (std::size_t j = 0; j < d; ++j) {
            if (src[j] > dst[j]) {
              dst[j] = src[j];
              argmax[b * d + j] = t;
            }
          }
        }
        break;
      }
    }
  }

  std::vector<std::size_t> ids;
  for (const Var& s : steps) ids.push_back(s.id);
  return steps.front().tape->record(
      std::move(out), steps,
      [ids, lengths, mode, argmax = std::move(argmax)](Tape& t, const Tensor&, const Tensor& g) {
        const std::size_t d = g.cols();
        for (std::size_t b = 0; b < lengths.size(); ++b) {
          const auto gb = g.row(b);
          const std::size_t len = lengths[b];
          switch (mode) {
            case PoolMode::kLast:
              if (t.needs_grad(ids[len - 1])) {
                auto dst = t.grad(ids[len - 1]).row(b);
                for (std::size_t j = 0; j < d; ++j) dst[j] += gb[j];
              }
              break;
            case PoolMode::kMean:
              for (std::size_t s = 0; s < len; ++s) {
                if (!t.needs_grad(ids[s])) continue;
                auto dst = t.grad(ids[s]).row(b);
                for (std::size_t j = 0; j < d; ++j) dst[j] += gb[j] / static_cast<double>(len);
              }
              break;
            case PoolMode::kMax:
              for (std::size_t j = 0; j < d; ++j) {
                const std::size_t s = argmax[b * d + j];
                if (t.needs_grad(ids[s])) t.grad(ids[s]).at(b, j) += gb[j];
              }
              break;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Numerically stable log-softmax of one row of logits.
inline std::vector<double> log_softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double rest = 0.0;
  bool seen_max = false;
  for (double v : logits) {
    if (v == m && !seen_max) {
      seen_max = true;
      continue;
    }
    rest += std::exp(v - m);
  }
  const double lse = m + std::log1p(rest);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  auto out = log_softmax(logits);
  for (double& v : out) v = std::exp(v);
  return out;
}

/// -log softmax(logits)[target] for a single logit vector, as a [1] tensor.
inline Var softmax_cross_entropy(Var logits, std::size_t target) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 1) {
    throw DimensionError("softmax_cross_entropy: expected a logit vector, got " +
                         shape_str(lv.shape()));
  }
  if (target >= lv.size()) {
    throw IndexError("softmax_cross_entropy: target " + std::to_string(target) +
                     " out of range for " + std::to_string(lv.size()) + " classes");
  }
  const auto logp = log_softmax(lv.data());
  return logits.tape->record(Tensor::vector({-logp[target]}), {logits},
                             [il = logits.id, target, logp](Tape& t, const Tensor&,
                                                            const Tensor& g) {
                               Tensor& gl = t.grad(il);
                               for (std::size_t c = 0; c < logp.size(); ++c) {
                                 gl[c] += g[0] * (std::exp(logp[c]) - (c == target ? 1.0 : 0.0));
                               }
                             });
}

/// Mean cross-entropy over the rows of a [B x C] logit matrix.
inline Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
  const Tensor& lv = logits.value();
  detail::require_rank2(lv, "softmax_cross_entropy");
  if (targets.size() != lv.rows()) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(lv.shape()));
  }
  const std::size_t classes = lv.cols();
  Tensor probs({lv.rows(), classes});
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (targets[r] >= classes) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[r]) +
                       " out of range for " + std::to_string(classes) + " classes");
    }
    const auto logp = log_softmax(lv.row(r));
    total -= logp[targets[r]];
    for (std::size_t c = 0; c < classes; ++c) probs.at(r, c) = std::exp(logp[c]);
  }
  const double inv = 1.0 / static_cast<double>(lv.rows());
  return logits.tape->record(
      Tensor::vector({total * inv}), {logits},
      [il = logits.id, targets, probs = std::move(probs), inv](Tape& t, const Tensor&,
                                                               const Tensor& g) {
        Tensor& gl = t.grad(il);
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          for (std::size_t c = 0; c < probs.cols(); ++c) {
            gl.at(r, c) += g[0] * inv * (probs.at(r, c) - (c == targets[r] ? 1.0 : 0.0));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// LSTM cell

/// Cell state from pre-activation gates [n x 4H] laid out as i | f | o | g:
///   c = sigmoid(f) * c_prev + sigmoid(i) * tanh(g)
/// Without `c_prev` the previous state is zero.
inline Var lstm_cell_state(Var gates, std::optional<Var> c_prev = std::nullopt) {
  const Tensor& gv = gates.value();
  detail::require_rank2(gv, "lstm_cell_state");
  if (gv.cols() % 4 != 0) {
    throw DimensionError("lstm_cell_state: gate width " + std::to_string(gv.cols()) +
                         " is not a multiple of 4");
  }
  const std::size_t n = gv.rows(), h = gv.cols() / 4;
  if (c_prev && c_prev->value().shape() != Shape{n, h}) {
    throw DimensionError("lstm_cell_state: previous state " + shape_str(c_prev->shape()) +
                         " does not match gates " + shape_str(gv.shape()));
  }
  Tensor out({n, h});
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = gv.row(r).data();
    const double* cp = c_prev ? c_prev->value().row(r).data() : nullptr;
    double* c = out.row(r).data();
    for (std::size_t u = 0; u < h; ++u) {
      c[u] = detail::sigmoid(z[u]) * std::tanh(z[3 * h + u]);
      if (cp) c[u] += detail::sigmoid(z[h + u]) * cp[u];
    }
  }
  std::vector<Var> inputs{gates};
  if (c_prev) inputs.push_back(*c_prev);
  return gates.tape->record(
      std::move(out), inputs,
      [ig = gates.id, ic = c_prev ? std::optional(c_prev->id) : std::nullopt, n, h](
          Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& gv = t.value(ig);
        const Tensor* cpv = ic ? &t.value(*ic) : nullptr;
        Tensor* gg = t.needs_grad(ig) ? &t.grad(ig) : nullptr;
        Tensor* gc = ic && t.needs_grad(*ic) ? &t.grad(*ic) : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          const double* z = gv.row(r).data();
          const double* dc = g.row(r).data();
          for (std::size_t u = 0; u < h; ++u) {
            const double si = detail::sigmoid(z[u]);
            const double tg = std::tanh(z[3 * h + u]);
            if (gg) {
              double* dz = gg->row(r).data();
              dz[u] += dc[u] * tg * si * (1.0 - si);
              dz[3 * h + u] += dc[u] * si * (1.0 - tg * tg);
            }
            if (cpv) {
              const double sf = detail::sigmoid(z[h + u]);
              if (gg) gg->row(r)[h + u] += dc[u] * cpv->row(r)[u] * sf * (1.0 - sf);
              if (gc) gc->row(r)[u] += dc[u] * sf;
            }
          }
        }
      });
}

/// Hidden state h = sigmoid(o) * tanh(c) from the same gate layout.
inline Var lstm_hidden(Var gates, Var cell) {
  const Tensor& gv = gates.value();
  const Tensor& cv = cell.value();
  detail::require_rank2(gv, "lstm_hidden");
  const std::size_t n = gv.rows(), h = gv.cols() / 4;
  if (gv.cols() % 4 != 0 || cv.shape() != Shape{n, h}) {
    throw DimensionError("lstm_hidden: gates " + shape_str(gv.shape()) + " and cell state " +
                         shape_str(cv.shape()) + " disagree");
  }
  Tensor out({n, h});
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = gv.row(r).data();
    const double* c = cv.row(r).data();
    double* y = out.row(r).data();
    for (std::size_t u = 0; u < h; ++u) y[u] = detail::sigmoid(z[2 * h + u]) * std::tanh(c[u]);
  }
  return gates.tape->record(
      std::move(out), {gates, cell},
      [ig = gates.id, ic = cell.id, n, h](Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& gv = t.value(ig);
        const Tensor& cv = t.value(ic);
        Tensor* gg = t.needs_grad(ig) ? &t.grad(ig) : nullptr;
        Tensor* gc = t.needs_grad(ic) ? &t.grad(ic) : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          const double* z = gv.row(r).data();
          const double* c = cv.row(r).data();
          const double* dy = g.row(r).data();
          for (std::size_t u = 0; u < h; ++u) {
            const double so = detail::sigmoid(z[2 * h + u]);
            const double tc = std::tanh(c[u]);
            if (gg) gg->row(r)[2 * h + u] += dy[u] * tc * so * (1.0 - so);
            if (gc) gc->row(r)[u] += dy[u] * so * (1.0 - tc * tc);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient reversal

/// Identity forward; backward multiplies the incoming gradient by -lambda.
inline Var grad_reverse(Var x, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("grad_reverse: lambda must be a finite non-negative number, got " +
                      std::to_string(lambda));
  }
  return x.tape->record(x.value(), {x},
                        [ix = x.id, lambda](Tape& t, const Tensor&, const Tensor& g) {
                          Tensor& gx = t.grad(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += -lambda * g[i];
                        });
}

}  // namespace probelab
