#pragma once

#include <atomic>
#include <functional>
#include <span>
#include <vector>

#include "kgseq/rng.hpp"
#include "kgseq/tensor.hpp"

namespace kgseq::nn {

// Debug flag: when set, every forward op validates its output for NaN/Inf
// and throws NumericError naming the op.
inline std::atomic<bool> g_nan_trap{false};

// T5 relative-position bucket (bidirectional for encoder self-attention,
// causal for decoder self-attention). rel = key_pos - query_pos.
inline int rel_pos_bucket(int rel, bool bidirectional, int num_buckets, int max_dist) {
  int ret = 0;
  int n;
  if (bidirectional) {
    num_buckets /= 2;
    ret = rel > 0 ? num_buckets : 0;
    n = rel < 0 ? -rel : rel;
  } else {
    n = rel < 0 ? -rel : 0;
  }
  const int max_exact = num_buckets / 2;
  if (n < max_exact) return ret + n;
  const double frac = std::log(static_cast<double>(n) / max_exact) /
                      std::log(static_cast<double>(max_dist) / max_exact);
  const int v = max_exact + static_cast<int>(frac * (num_buckets - max_exact));
  return ret + std::min(v, num_buckets - 1);
}

// Reverse-mode tape. Nodes are appended in creation order, which is already
// a topological order; backward() walks it in reverse. A tape is
// single-threaded; independent tapes may run concurrently.
template <typename T>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n), "leaf");
  }

  const Tensor<T>& value(Var v) const { return nodes_[check(v)].value; }
  const Tensor<T>& grad(Var v) const { return nodes_[check(v)].grad; }
  size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) { return matmul_impl(a, b, false); }
  // a [m,k] x b[n,k]^T -> [m,n]; saves materializing transposes.
  Var matmul_nt(Var a, Var b) { return matmul_impl(a, b, true); }

  Var add(Var a, Var b) {
    const auto& av = nodes_[check(a)].value;
    const auto& bv = nodes_[check(b)].value;
    require_same_shape(av, bv, "add");
    Node n;
    n.value = av;
    for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += bv.data[i];
    n.parents = {a.id, b.id};
    n.backward = [a, b](Tape& t, Node& self) {
      t.accumulate(a, self.grad);
      t.accumulate(b, self.grad);
    };
    return push(std::move(n), "add");
  }

  Var scale(Var a, T c) {
    Node n;
    n.value = nodes_[check(a)].value;
    for (auto& v : n.value.data) v *= c;
    n.parents = {a.id};
    n.backward = [a, c](Tape& t, Node& self) {
      if (!t.wants_grad(a)) return;
      Tensor<T> g = self.grad;
      for (auto& v : g.data) v *= c;
      t.accumulate(a, g);
    };
    return push(std::move(n), "scale");
  }

  Var relu(Var a) {
    Node n;
    n.value = nodes_[check(a)].value;
    for (auto& v : n.value.data) v = v > T(0) ? v : T(0);
    n.parents = {a.id};
    n.backward = [a](Tape& t, Node& self) {
      if (!t.wants_grad(a)) return;
      const Tensor<T>& x = t.nodes_[a.id].value;
      Tensor<T> g = self.grad;
      for (size_t i = 0; i < g.data.size(); ++i)
        if (x.data[i] <= T(0)) g.data[i] = T(0);
      t.accumulate(a, g);
    };
    return push(std::move(n), "relu");
  }

  // Row-wise softmax of a rank-2 tensor (rank-1 treated as a single row).
  Var softmax_rows(Var a) {
    const auto& av = nodes_[check(a)].value;
    const int m = av.ndim() == 1 ? 1 : av.rows();
    const int w = av.ndim() == 1 ? av.rows() : av.cols();
    Node n;
    n.value = av;
    for (int i = 0; i < m; ++i) softmax_row(av.data.data() + static_cast<size_t>(i) * w,
                                            n.value.data.data() + static_cast<size_t>(i) * w, w);
    n.parents = {a.id};
    n.backward = [a, m, w](Tape& t, Node& self) {
      if (!t.wants_grad(a)) return;
      Tensor<T> g(self.value.shape);
      for (int i = 0; i < m; ++i) {
        const T* p = self.value.data.data() + static_cast<size_t>(i) * w;
        const T* go = self.grad.data.data() + static_cast<size_t>(i) * w;
        T* gi = g.data.data() + static_cast<size_t>(i) * w;
        T dot = T(0);
        for (int j = 0; j < w; ++j) dot += go[j] * p[j];
        for (int j = 0; j < w; ++j) gi[j] = p[j] * (go[j] - dot);
      }
      t.accumulate(a, g);
    };
    return push(std::move(n), "softmax");
  }

  // y = gain * (x - mean) / sqrt(var + eps) + bias, per row. gain/bias are
  // rank-1 of width cols(x).
  Var layer_norm(Var x, Var gain, Var bias, T eps = static_cast<T>(1e-5)) {
    const auto& xv = nodes_[check(x)].value;
    const auto& gv = nodes_[check(gain)].value;
    const auto& bv = nodes_[check(bias)].value;
    const int m = xv.rows(), w = xv.cols();
    if (static_cast<int>(gv.numel()) != w || static_cast<int>(bv.numel()) != w)
      throw ShapeError("layer_norm: gain/bias width mismatch " + gv.shape_str() + " vs " +
                       xv.shape_str());
    Node n;
    n.value = Tensor<T>(xv.shape);
    std::vector<T> mean(static_cast<size_t>(m)), inv_std(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      const T* xr = xv.row_ptr(i);
      T mu = T(0);
      for (int j = 0; j < w; ++j) mu += xr[j];
      mu /= static_cast<T>(w);
      T var = T(0);
      for (int j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<T>(w);
      const T is = T(1) / std::sqrt(var + eps);
      mean[static_cast<size_t>(i)] = mu;
      inv_std[static_cast<size_t>(i)] = is;
      T* yr = n.value.row_ptr(i);
      for (int j = 0; j < w; ++j) yr[j] = gv.data[static_cast<size_t>(j)] * (xr[j] - mu) * is + bv.data[static_cast<size_t>(j)];
    }
    n.parents = {x.id, gain.id, bias.id};
    n.backward = [x, gain, bias, m, w, mean, inv_std](Tape& t, Node& self) {
      const Tensor<T>& xv2 = t.nodes_[x.id].value;
      const Tensor<T>& gv2 = t.nodes_[gain.id].value;
      Tensor<T> dx(xv2.shape), dgain({w}), dbias({w});
      for (int i = 0; i < m; ++i) {
        const T* xr = xv2.row_ptr(i);
        const T* go = self.grad.row_ptr(i);
        T* dxr = dx.row_ptr(i);
        const T mu = mean[static_cast<size_t>(i)], is = inv_std[static_cast<size_t>(i)];
        // dxhat = go * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
        T s1 = T(0), s2 = T(0);
        for (int j = 0; j < w; ++j) {
          const T xhat = (xr[j] - mu) * is;
          const T dxh = go[j] * gv2.data[static_cast<size_t>(j)];
          s1 += dxh;
          s2 += dxh * xhat;
          dgain.data[static_cast<size_t>(j)] += go[j] * xhat;
          dbias.data[static_cast<size_t>(j)] += go[j];
        }
        s1 /= static_cast<T>(w);
        s2 /= static_cast<T>(w);
        for (int j = 0; j < w; ++j) {
          const T xhat = (xr[j] - mu) * is;
          const T dxh = go[j] * gv2.data[static_cast<size_t>(j)];
          dxr[j] = (dxh - s1 - xhat * s2) * is;
        }
      }
      t.accumulate(x, dx);
      t.accumulate(gain, dgain);
      t.accumulate(bias, dbias);
    };
    return push(std::move(n), "layer_norm");
  }

  // out[i, :] = table[ids[i], :]
  Var embedding_rows(Var table, std::vector<int> ids) {
    const auto& tv = nodes_[check(table)].value;
    if (tv.ndim() != 2) throw ShapeError("embedding: table must be rank 2, got " + tv.shape_str());
    const int w = tv.cols();
    Node n;
    n.value = Tensor<T>({static_cast<int>(ids.size()), w});
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= tv.rows())
        throw DomainError("embedding id " + std::to_string(ids[i]) + " out of range");
      std::copy_n(tv.row_ptr(ids[i]), w, n.value.row_ptr(static_cast<int>(i)));
    }
    n.parents = {table.id};
    n.backward = [table, ids = std::move(ids), w](Tape& t, Node& self) {
      if (!t.wants_grad(table)) return;
      Tensor<T> g(t.nodes_[table.id].value.shape);
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* src = self.grad.row_ptr(static_cast<int>(i));
        T* dst = g.row_ptr(ids[i]);
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
      t.accumulate(table, g);
    };
    return push(std::move(n), "embedding");
  }

  Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const int m = nodes_[check(xs[0])].value.rows();
    int total = 0;
    for (Var v : xs) {
      const auto& t = nodes_[check(v)].value;
      if (t.rows() != m)
        throw ShapeError("concat: row mismatch " + t.shape_str() + " vs rows=" + std::to_string(m));
      total += t.cols();
    }
    Node n;
    n.value = Tensor<T>({m, total});
    int off = 0;
    std::vector<int> offsets;
    for (Var v : xs) {
      const auto& t = nodes_[v.id].value;
      offsets.push_back(off);
      for (int i = 0; i < m; ++i) std::copy_n(t.row_ptr(i), t.cols(), n.value.row_ptr(i) + off);
      off += t.cols();
    }
    n.parents.reserve(xs.size());
    for (Var v : xs) n.parents.push_back(v.id);
    n.backward = [xs, offsets, m](Tape& t, Node& self) {
      for (size_t k = 0; k < xs.size(); ++k) {
        if (!t.wants_grad(xs[k])) continue;
        const int c = t.nodes_[xs[k].id].value.cols();
        Tensor<T> g({m, c});
        for (int i = 0; i < m; ++i)
          std::copy_n(self.grad.row_ptr(i) + offsets[k], c, g.row_ptr(i));
        t.accumulate(xs[k], g);
      }
    };
    return push(std::move(n), "concat");
  }

  Var slice_cols(Var x, int c0, int c1) {
    const auto& xv = nodes_[check(x)].value;
    if (c0 < 0 || c1 > xv.cols() || c0 >= c1)
      throw ShapeError("slice [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                       xv.shape_str());
    const int m = xv.rows(), w = c1 - c0;
    Node n;
    n.value = Tensor<T>({m, w});
    for (int i = 0; i < m; ++i) std::copy_n(xv.row_ptr(i) + c0, w, n.value.row_ptr(i));
    n.parents = {x.id};
    n.backward = [x, c0, m, w](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      Tensor<T> g(t.nodes_[x.id].value.shape);
      for (int i = 0; i < m; ++i) std::copy_n(self.grad.row_ptr(i), w, g.row_ptr(i) + c0);
      t.accumulate(x, g);
    };
    return push(std::move(n), "slice");
  }

  // Per-row -log softmax(logits)[target]; returns a rank-1 tensor of losses.
  Var cross_entropy(Var logits, std::vector<int> targets) {
    const auto& lv = nodes_[check(logits)].value;
    const int m = lv.rows(), w = lv.cols();
    if (static_cast<int>(targets.size()) != m)
      throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                       lv.shape_str());
    Tensor<T> probs(lv.shape);
    Node n;
    n.value = Tensor<T>({m});
    for (int i = 0; i < m; ++i) {
      if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= w)
        throw DomainError("cross_entropy target out of range");
      log_softmax_row(lv.row_ptr(i), probs.row_ptr(i), w);
      n.value.data[static_cast<size_t>(i)] = -probs.at(i, targets[static_cast<size_t>(i)]);
      T* pr = probs.row_ptr(i);
      for (int j = 0; j < w; ++j) pr[j] = std::exp(pr[j]);
    }
    n.parents = {logits.id};
    n.backward = [logits, targets = std::move(targets), probs = std::move(probs), m,
                  w](Tape& t, Node& self) {
      if (!t.wants_grad(logits)) return;
      Tensor<T> g(probs.shape);
      for (int i = 0; i < m; ++i) {
        const T gi = self.grad.data[static_cast<size_t>(i)];
        const T* pr = probs.row_ptr(i);
        T* gr = g.row_ptr(i);
        for (int j = 0; j < w; ++j) gr[j] = gi * pr[j];
        gr[targets[static_cast<size_t>(i)]] -= gi;
      }
      t.accumulate(logits, g);
    };
    return push(std::move(n), "cross_entropy");
  }

  Var mean_all(Var x) {
    const auto& xv = nodes_[check(x)].value;
    if (xv.numel() == 0) throw DomainError("mean of empty tensor");
    Node n;
    T sum = T(0);
    for (T v : xv.data) sum += v;
    n.value = Tensor<T>::scalar(sum / static_cast<T>(xv.numel()));
    n.parents = {x.id};
    n.backward = [x](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      const auto& xv2 = t.nodes_[x.id].value;
      Tensor<T> g(xv2.shape, self.grad.data[0] / static_cast<T>(xv2.numel()));
      t.accumulate(x, g);
    };
    return push(std::move(n), "mean");
  }

  // [rows, cols] matrix of learned relative-position biases for one head.
  // rel = key_pos - query_pos; causal selects the unidirectional bucketing.
  Var rel_bias(Var table, int head, int rows, int cols, bool causal, int max_dist) {
    const auto& tv = nodes_[check(table)].value;
    const int nb = tv.cols();
    Node n;
    n.value = Tensor<T>({rows, cols});
    std::vector<int> buckets(static_cast<size_t>(rows) * static_cast<size_t>(cols));
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        const int b = rel_pos_bucket(j - i, !causal, nb, max_dist);
        buckets[static_cast<size_t>(i) * cols + j] = b;
        n.value.at(i, j) = tv.at(head, b);
      }
    }
    n.parents = {table.id};
    n.backward = [table, head, rows, cols, buckets = std::move(buckets)](Tape& t, Node& self) {
      if (!t.wants_grad(table)) return;
      Tensor<T> g(t.nodes_[table.id].value.shape);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
          g.at(head, buckets[static_cast<size_t>(i) * cols + j]) += self.grad.at(i, j);
      t.accumulate(table, g);
    };
    return push(std::move(n), "rel_bias");
  }

  // Inverted dropout; identity when rate == 0.
  Var dropout(Var x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    const auto& xv = nodes_[check(x)].value;
    Node n;
    n.value = xv;
    std::vector<unsigned char> keep(xv.numel());
    const T inv = static_cast<T>(1.0 / (1.0 - rate));
    for (size_t i = 0; i < xv.numel(); ++i) {
      keep[i] = rng.uniform() >= rate;
      n.value.data[i] = keep[i] ? xv.data[i] * inv : T(0);
    }
    n.parents = {x.id};
    n.backward = [x, keep = std::move(keep), inv](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      Tensor<T> g = self.grad;
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] = keep[i] ? g.data[i] * inv : T(0);
      t.accumulate(x, g);
    };
    return push(std::move(n), "dropout");
  }

  // Reverse-mode sweep from a scalar loss. Gradients accumulate additively
  // across fan-out; leaves keep their grads until the tape is destroyed.
  void backward(Var loss) {
    Node& ln = nodes_[check(loss)];
    if (ln.value.numel() != 1) throw DomainError("backward requires a scalar loss, got " +
                                                 ln.value.shape_str());
    // Mark nodes reachable from the loss.
    std::vector<char> reach(nodes_.size(), 0);
    reach[static_cast<size_t>(loss.id)] = 1;
    for (int i = loss.id; i >= 0; --i) {
      if (!reach[static_cast<size_t>(i)]) continue;
      for (int p : nodes_[static_cast<size_t>(i)].parents) reach[static_cast<size_t>(p)] = 1;
    }
    ln.grad = Tensor<T>::scalar(T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!reach[static_cast<size_t>(i)] || !n.requires_grad || !n.backward) continue;
      if (n.grad.data.empty()) continue;  // no gradient flowed here
      n.backward(*this, n);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Tape&, Node&)> backward;
  };

  int check(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw DomainError("invalid tape variable");
    return v.id;
  }

  bool wants_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

  void accumulate(Var v, const Tensor<T>& g) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
    require_same_shape(n.grad, g, "grad accumulate");
    for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
  }

  Var push(Node n, const char* op) {
    for (int p : n.parents)
      if (nodes_[static_cast<size_t>(p)].requires_grad) n.requires_grad = true;
    if (g_nan_trap.load(std::memory_order_relaxed) && !n.value.all_finite())
      throw NumericError(std::string("non-finite output of op '") + op + "'");
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var matmul_impl(Var a, Var b, bool nt) {
    const auto& av = nodes_[check(a)].value;
    const auto& bv = nodes_[check(b)].value;
    if (av.ndim() != 2 || bv.ndim() != 2)
      throw ShapeError("matmul: need rank-2 operands, got " + av.shape_str() + " and " +
                       bv.shape_str());
    const int m = av.rows(), k = av.cols();
    const int bn = nt ? bv.rows() : bv.cols();
    const int bk = nt ? bv.cols() : bv.rows();
    if (bk != k)
      throw ShapeError(std::string(nt ? "matmul_nt" : "matmul") + ": inner dim mismatch " +
                       av.shape_str() + " vs " + bv.shape_str());
    Node n;
    n.value = Tensor<T>({m, bn});
    if (nt)
      gemm_nt(av.data.data(), bv.data.data(), n.value.data.data(), m, k, bn, false);
    else
      gemm_nn(av.data.data(), bv.data.data(), n.value.data.data(), m, k, bn, false);
    n.parents = {a.id, b.id};
    n.backward = [a, b, m, k, bn, nt](Tape& t, Node& self) {
      const Tensor<T>& av2 = t.nodes_[a.id].value;
      const Tensor<T>& bv2 = t.nodes_[b.id].value;
      if (t.wants_grad(a)) {
        Tensor<T> ga(av2.shape);
        if (nt)  // C = A B^T: dA = dC B
          gemm_nn(self.grad.data.data(), bv2.data.data(), ga.data.data(), m, bn, k, false);
        else  // C = A B: dA = dC B^T
          gemm_nt(self.grad.data.data(), bv2.data.data(), ga.data.data(), m, bn, k, false);
        t.accumulate(a, ga);
      }
      if (t.wants_grad(b)) {
        Tensor<T> gb(bv2.shape);
        if (nt)  // dB = dC^T A
          gemm_tn(self.grad.data.data(), av2.data.data(), gb.data.data(), bn, m, k, false);
        else  // dB = A^T dC
          gemm_tn(av2.data.data(), self.grad.data.data(), gb.data.data(), k, m, bn, false);
        t.accumulate(b, gb);
      }
    };
    return push(std::move(n), nt ? "matmul_nt" : "matmul");
  }

  std::vector<Node> nodes_;
};

}  // namespace kgseq::nn
