#include "edlab/ops.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "edlab/kernels.hpp"

namespace edlab::ops {

namespace {

template <class T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw Error(ErrorKind::Dimension, std::string(op) + " expects a matrix, got shape " + shape_string(t.shape));
  }
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape != b.shape) {
    throw Error(ErrorKind::Dimension, std::string(op) + ": shapes " + shape_string(a.shape) + " and " +
                                          shape_string(b.shape) + " differ");
  }
}

template <class T>
bool any_grad(const Tape<T>& tape, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (tape.needs_grad(v)) return true;
  return false;
}

}  // namespace

template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw Error(ErrorKind::Dimension, "matmul inner dimensions differ: " + shape_string(av.shape) + " x " +
                                          shape_string(bv.shape));
  }
  BasicTensor<T> out({m, n});
  kernels::gemm(m, k, n, av.data.data(), bv.data.data(), out.data.data(), false);
  return tape.record(std::move(out), any_grad(tape, {a, b}), [a, b, m, k, n](Tape<T>& tp, const std::vector<T>& g) {
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    if (tp.needs_grad(a)) {
      std::vector<T> bt(n * k);
      kernels::transpose(k, n, bv.data.data(), bt.data());
      kernels::gemm(m, n, k, g.data(), bt.data(), tp.grad_buffer(a).data(), true);
    }
    if (tp.needs_grad(b)) {
      std::vector<T> at(k * m);
      kernels::transpose(m, k, av.data.data(), at.data());
      kernels::gemm(k, m, n, at.data(), g.data(), tp.grad_buffer(b).data(), true);
    }
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_same_shape(av, bv, "add");
  BasicTensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
  return tape.record(std::move(out), any_grad(tape, {a, b}), [a, b](Tape<T>& tp, const std::vector<T>& g) {
    for (Var v : {a, b}) {
      if (!tp.needs_grad(v)) continue;
      auto& gv = tp.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_same_shape(av, bv, "mul");
  BasicTensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] * bv.data[i];
  return tape.record(std::move(out), any_grad(tape, {a, b}), [a, b](Tape<T>& tp, const std::vector<T>& g) {
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv.data[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av.data[i];
    }
  });
}

template <class T>
Var scale(Tape<T>& tape, Var a, double factor) {
  const auto& av = tape.value(a);
  const T f = static_cast<T>(factor);
  BasicTensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] * f;
  return tape.record(std::move(out), tape.needs_grad(a), [a, f](Tape<T>& tp, const std::vector<T>& g) {
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
  });
}

template <class T>
Var sum(Tape<T>& tape, Var a) {
  const auto& av = tape.value(a);
  double acc = 0.0;
  for (T x : av.data) acc += static_cast<double>(x);
  BasicTensor<T> out({1}, static_cast<T>(acc));
  return tape.record(std::move(out), tape.needs_grad(a), [a](Tape<T>& tp, const std::vector<T>& g) {
    auto& ga = tp.grad_buffer(a);
    for (auto& x : ga) x += g[0];
  });
}

template <class T>
Var layernorm(Tape<T>& tape, Var x, Var params) {
  const auto& xv = tape.value(x);
  const auto& pv = tape.value(params);
  require_matrix(xv, "layernorm");
  const std::size_t n = xv.rows(), d = xv.cols();
  if (pv.shape != Shape{2, d}) {
    throw Error(ErrorKind::Dimension, "layernorm params must be [2x" + std::to_string(d) + "], got " +
                                          shape_string(pv.shape));
  }
  BasicTensor<T> out({n, d});
  auto xhat = std::make_shared<std::vector<T>>(n * d);
  auto rstd = std::make_shared<std::vector<T>>(n);
  const T* gain = pv.data.data();
  const T* bias = gain + d;
  for (std::size_t r = 0; r < n; ++r) {
    kernels::layernorm_row(xv.data.data() + r * d, gain, bias, d, out.data.data() + r * d, xhat->data() + r * d,
                           rstd->data() + r);
  }
  return tape.record(std::move(out), any_grad(tape, {x, params}),
                     [x, params, n, d, xhat, rstd](Tape<T>& tp, const std::vector<T>& g) {
                       const T* gain = tp.value(params).data.data();
                       if (tp.needs_grad(params)) {
                         std::vector<double> dg(d, 0.0), db(d, 0.0);
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             dg[j] += static_cast<double>(g[r * d + j]) * static_cast<double>((*xhat)[r * d + j]);
                             db[j] += static_cast<double>(g[r * d + j]);
                           }
                         }
                         auto& gp = tp.grad_buffer(params);
                         for (std::size_t j = 0; j < d; ++j) {
                           gp[j] += static_cast<T>(dg[j]);
                           gp[d + j] += static_cast<T>(db[j]);
                         }
                       }
                       if (tp.needs_grad(x)) {
                         auto& gx = tp.grad_buffer(x);
                         for (std::size_t r = 0; r < n; ++r) {
                           const T* gr = g.data() + r * d;
                           const T* hr = xhat->data() + r * d;
                           double mean_dh = 0.0, mean_dh_h = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = static_cast<double>(gr[j]) * static_cast<double>(gain[j]);
                             mean_dh += dh;
                             mean_dh_h += dh * static_cast<double>(hr[j]);
                           }
                           mean_dh /= static_cast<double>(d);
                           mean_dh_h /= static_cast<double>(d);
                           const double rs = static_cast<double>((*rstd)[r]);
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = static_cast<double>(gr[j]) * static_cast<double>(gain[j]);
                             gx[r * d + j] += static_cast<T>(rs * (dh - mean_dh - static_cast<double>(hr[j]) * mean_dh_h));
                           }
                         }
                       }
                     });
}

template <class T>
Var gelu(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  BasicTensor<T> out(xv.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = kernels::gelu(xv.data[i]);
  return tape.record(std::move(out), tape.needs_grad(x), [x](Tape<T>& tp, const std::vector<T>& g) {
    const auto& xv = tp.value(x);
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::gelu_derivative(xv.data[i]);
  });
}

template <class T>
Var softmax(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  require_matrix(xv, "softmax");
  const std::size_t n = xv.rows(), c = xv.cols();
  BasicTensor<T> out({n, c});
  for (std::size_t r = 0; r < n; ++r) kernels::softmax_row(xv.data.data() + r * c, c, out.data.data() + r * c);
  auto probs = std::make_shared<std::vector<T>>(out.data);
  return tape.record(std::move(out), tape.needs_grad(x), [x, n, c, probs](Tape<T>& tp, const std::vector<T>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < n; ++r) {
      const T* p = probs->data() + r * c;
      const T* gr = g.data() + r * c;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += static_cast<double>(gr[j]) * static_cast<double>(p[j]);
      for (std::size_t j = 0; j < c; ++j)
        gx[r * c + j] += static_cast<T>(static_cast<double>(p[j]) * (static_cast<double>(gr[j]) - s));
    }
  });
}

template <class T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids) {
  const auto& tv = tape.value(table);
  require_matrix(tv, "embedding");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  BasicTensor<T> out({idx->size(), d});
  for (std::size_t r = 0; r < idx->size(); ++r) {
    const int id = (*idx)[r];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw Error(ErrorKind::Vocabulary, "token id " + std::to_string(id) + " outside table of " +
                                             std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data.data() + static_cast<std::size_t>(id) * d, d, out.data.data() + r * d);
  }
  return tape.record(std::move(out), tape.needs_grad(table), [table, idx, d](Tape<T>& tp, const std::vector<T>& g) {
    auto& gt = tp.grad_buffer(table);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      T* dst = gt.data() + static_cast<std::size_t>((*idx)[r]) * d;
      const T* src = g.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Var select_rows(Tape<T>& tape, Var x, std::span<const std::size_t> rows) {
  const auto& xv = tape.value(x);
  require_matrix(xv, "select_rows");
  const std::size_t d = xv.cols();
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  BasicTensor<T> out({idx->size(), d});
  for (std::size_t r = 0; r < idx->size(); ++r) {
    if ((*idx)[r] >= xv.rows()) {
      throw Error(ErrorKind::Dimension, "row " + std::to_string((*idx)[r]) + " outside " + shape_string(xv.shape));
    }
    std::copy_n(xv.data.data() + (*idx)[r] * d, d, out.data.data() + r * d);
  }
  return tape.record(std::move(out), tape.needs_grad(x), [x, idx, d](Tape<T>& tp, const std::vector<T>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      T* dst = gx.data() + (*idx)[r] * d;
      const T* src = g.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads, std::span<const std::size_t> offsets) {
  const auto& qv = tape.value(q);
  const auto& kv = tape.value(k);
  const auto& vv = tape.value(v);
  require_matrix(qv, "causal_attention");
  require_same_shape(qv, kv, "causal_attention");
  require_same_shape(qv, vv, "causal_attention");
  const std::size_t n = qv.rows(), d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw Error(ErrorKind::Dimension, "width " + std::to_string(d) + " not divisible into " +
                                          std::to_string(n_heads) + " heads");
  }
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n) {
    throw Error(ErrorKind::Dimension, "sequence offsets must span rows [0, " + std::to_string(n) + ")");
  }
  const std::size_t dh = d / n_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Row r of a sequence starting at s attends to r - s + 1 keys; prob_base[r]
  // is where its weights live inside each head's block.
  auto seg = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
  auto prob_base = std::make_shared<std::vector<std::size_t>>(n + 1, 0);
  for (std::size_t s = 0; s + 1 < seg->size(); ++s) {
    if ((*seg)[s + 1] < (*seg)[s]) throw Error(ErrorKind::Dimension, "sequence offsets must be non-decreasing");
    for (std::size_t r = (*seg)[s]; r < (*seg)[s + 1]; ++r) (*prob_base)[r + 1] = (*prob_base)[r] + (r - (*seg)[s] + 1);
  }
  const std::size_t per_head = (*prob_base)[n];
  auto probs = std::make_shared<std::vector<T>>(per_head * n_heads);

  BasicTensor<T> out({n, d});
  for (std::size_t s = 0; s + 1 < seg->size(); ++s) {
    const std::size_t start = (*seg)[s], end = (*seg)[s + 1];
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t col = h * dh;
      for (std::size_t r = start; r < end; ++r) {
        kernels::attend_row(qv.data.data() + r * d + col, kv.data.data() + start * d + col,
                            vv.data.data() + start * d + col, d, r - start + 1, dh, scale,
                            probs->data() + h * per_head + (*prob_base)[r], out.data.data() + r * d + col);
      }
    }
  }

  return tape.record(
      std::move(out), any_grad(tape, {q, k, v}),
      [q, k, v, n, d, dh, n_heads, scale, seg, prob_base, probs, per_head](Tape<T>& tp, const std::vector<T>& g) {
        const auto& qv = tp.value(q);
        const auto& kv = tp.value(k);
        const auto& vv = tp.value(v);
        std::vector<T> gq(n * d, T(0)), gk(n * d, T(0)), gvv(n * d, T(0));
        std::vector<T> dscore;
        for (std::size_t s = 0; s + 1 < seg->size(); ++s) {
          const std::size_t start = (*seg)[s], end = (*seg)[s + 1];
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t col = h * dh;
            for (std::size_t r = start; r < end; ++r) {
              const std::size_t count = r - start + 1;
              const T* p = probs->data() + h * per_head + (*prob_base)[r];
              const T* go = g.data() + r * d + col;
              dscore.assign(count, T(0));
              double weighted = 0.0;
              for (std::size_t j = 0; j < count; ++j) {
                const std::size_t kr = start + j;
                const T dp = kernels::dot(go, vv.data.data() + kr * d + col, dh);
                dscore[j] = dp;
                weighted += static_cast<double>(p[j]) * static_cast<double>(dp);
                T* gvr = gvv.data() + kr * d + col;
                for (std::size_t c = 0; c < dh; ++c) gvr[c] += p[j] * go[c];
              }
              T* gqr = gq.data() + r * d + col;
              const T* qr = qv.data.data() + r * d + col;
              for (std::size_t j = 0; j < count; ++j) {
                const std::size_t kr = start + j;
                const T ds = static_cast<T>(static_cast<double>(p[j]) * (static_cast<double>(dscore[j]) - weighted)) * scale;
                const T* krow = kv.data.data() + kr * d + col;
                T* gkr = gk.data() + kr * d + col;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqr[c] += ds * krow[c];
                  gkr[c] += ds * qr[c];
                }
              }
            }
          }
        }
        const std::vector<T>* parts[3] = {&gq, &gk, &gvv};
        const Var vars[3] = {q, k, v};
        for (int i = 0; i < 3; ++i) {
          if (!tp.needs_grad(vars[i])) continue;
          auto& dst = tp.grad_buffer(vars[i]);
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += (*parts[i])[j];
        }
      });
}

template <class T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets, std::span<const double> weights) {
  const auto& lv = tape.value(logits);
  require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.rows(), vocab = lv.cols();
  if (targets.size() != n || weights.size() != n) {
    throw Error(ErrorKind::Dimension, "cross_entropy: " + std::to_string(n) + " logit rows but " +
                                          std::to_string(targets.size()) + " targets and " +
                                          std::to_string(weights.size()) + " weights");
  }
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto wt = std::make_shared<std::vector<double>>(weights.begin(), weights.end());
  auto lse = std::make_shared<std::vector<double>>(n, 0.0);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int t = (*tg)[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw Error(ErrorKind::Vocabulary, "target id " + std::to_string(t) + " outside vocabulary of " +
                                             std::to_string(vocab));
    }
    if ((*wt)[r] == 0.0) continue;
    const T* row = lv.data.data() + r * vocab;
    (*lse)[r] = kernels::log_sum_exp(row, vocab);
    loss += (*wt)[r] * ((*lse)[r] - static_cast<double>(row[t]));
  }
  BasicTensor<T> out({1}, static_cast<T>(loss));
  return tape.record(std::move(out), tape.needs_grad(logits),
                     [logits, n, vocab, tg, wt, lse](Tape<T>& tp, const std::vector<T>& g) {
                       const auto& lv = tp.value(logits);
                       auto& gl = tp.grad_buffer(logits);
                       const double up = static_cast<double>(g[0]);
                       for (std::size_t r = 0; r < n; ++r) {
                         const double w = (*wt)[r];
                         if (w == 0.0) continue;
                         const T* row = lv.data.data() + r * vocab;
                         T* gr = gl.data() + r * vocab;
                         const double lr = (*lse)[r];
                         for (std::size_t j = 0; j < vocab; ++j) {
                           double p = std::exp(static_cast<double>(row[j]) - lr);
                           if (static_cast<int>(j) == (*tg)[r]) p -= 1.0;
                           gr[j] += static_cast<T>(up * w * p);
                         }
                       }
                     });
}

template <class T>
Var masked_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets, const std::vector<bool>& mask) {
  if (mask.size() != targets.size()) {
    throw Error(ErrorKind::Dimension, "mask has " + std::to_string(mask.size()) + " entries for " +
                                          std::to_string(targets.size()) + " targets");
  }
  std::size_t active = 0;
  for (bool b : mask) active += b ? 1 : 0;
  if (active == 0) throw Error(ErrorKind::EmptySupervision, "mask selects no positions");
  std::vector<double> weights(mask.size(), 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) weights[i] = 1.0 / static_cast<double>(active);
  return cross_entropy(tape, logits, targets, weights);
}

#define EDLAB_INSTANTIATE_OPS(T)                                                                        \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                           \
  template Var add<T>(Tape<T>&, Var, Var);                                                              \
  template Var mul<T>(Tape<T>&, Var, Var);                                                              \
  template Var scale<T>(Tape<T>&, Var, double);                                                         \
  template Var sum<T>(Tape<T>&, Var);                                                                   \
  template Var layernorm<T>(Tape<T>&, Var, Var);                                                        \
  template Var gelu<T>(Tape<T>&, Var);                                                                  \
  template Var softmax<T>(Tape<T>&, Var);                                                               \
  template Var embedding<T>(Tape<T>&, Var, std::span<const int>);                                       \
  template Var select_rows<T>(Tape<T>&, Var, std::span<const std::size_t>);                             \
  template Var causal_attention<T>(Tape<T>&, Var, Var, Var, std::size_t, std::span<const std::size_t>); \
  template Var cross_entropy<T>(Tape<T>&, Var, std::span<const int>, std::span<const double>);          \
  template Var masked_cross_entropy<T>(Tape<T>&, Var, std::span<const int>, const std::vector<bool>&);

EDLAB_INSTANTIATE_OPS(float)
EDLAB_INSTANTIATE_OPS(double)

}  // namespace edlab::ops
