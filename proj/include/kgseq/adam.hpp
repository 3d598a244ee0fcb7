#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kgseq/tensor.hpp"

namespace kgseq::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates, aligned with a fixed parameter order.
template <typename T>
struct AdamMoments {
  std::vector<Tensor<T>> m, v;
  std::uint64_t t = 0;  // completed steps

  void init_like(const std::vector<Tensor<T>*>& params) {
    m.clear();
    v.clear();
    for (const Tensor<T>* p : params) {
      m.emplace_back(p->shape);
      v.emplace_back(p->shape);
    }
    t = 0;
  }
};

// lr(t) = lr_peak * min(t / warmup, sqrt(warmup / t)); equals lr_peak at
// t == warmup. t is 1-based.
inline double warmup_lr(double lr_peak, std::uint64_t t, std::uint64_t warmup) {
  if (warmup == 0) return lr_peak;
  const double td = static_cast<double>(t == 0 ? 1 : t);
  const double w = static_cast<double>(warmup);
  return lr_peak * std::min(td / w, std::sqrt(w / td));
}

// One Adam update with bias correction. Empty grads are treated as zero.
// Non-finite gradients raise NumericError naming the step index.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamMoments<T>& mom, double lr, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size() || params.size() != mom.m.size())
    throw ShapeError("adam_step: parameter/gradient/moment count mismatch");
  mom.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(mom.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(mom.t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    Tensor<T>& m = mom.m[pi];
    Tensor<T>& v = mom.v[pi];
    const Tensor<T>* g = grads[pi];
    const bool zero_grad = (g == nullptr || g->data.empty());
    if (!zero_grad && !p.same_shape(*g))
      throw ShapeError("adam_step: grad shape " + g->shape_str() + " vs param " + p.shape_str());
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double gi = zero_grad ? 0.0 : static_cast<double>(g->data[i]);
      if (!std::isfinite(gi))
        throw NumericError("non-finite gradient at optimizer step " + std::to_string(mom.t));
      const double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v.data[i]) + (1.0 - cfg.beta2) * gi * gi;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p.data[i] = static_cast<T>(static_cast<double>(p.data[i]) -
                                 lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace kgseq::nn
