#include "edlab/adam.hpp"

#include <cmath>

namespace edlab {

void adam_step(std::span<const ParamRef> params, AdamState& state, const std::vector<bool>& trainable_mask) {
  if (params.size() != trainable_mask.size()) {
    throw Error(ErrorKind::Dimension, std::to_string(params.size()) + " parameters but " +
                                          std::to_string(trainable_mask.size()) + " mask entries");
  }
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  } else if (state.m.size() != params.size()) {
    throw Error(ErrorKind::Dimension, "optimizer state tracks " + std::to_string(state.m.size()) +
                                          " parameters, step received " + std::to_string(params.size()));
  }

  // Validate everything before mutating anything.
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable_mask[i]) continue;
    const Tensor& p = *params[i].tensor;
    if (!p.grad || p.grad->size() != p.numel()) {
      throw Error(ErrorKind::Dimension, "parameter '" + params[i].name + "' has no gradient of matching size");
    }
    for (float g : *p.grad) {
      if (!std::isfinite(g)) throw Error(ErrorKind::NonFinite, "non-finite gradient in parameter '" + params[i].name + "'");
    }
  }

  state.t += 1;
  const AdamHyper& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable_mask[i]) continue;
    Tensor& p = *params[i].tensor;
    const std::vector<float>& g = *p.grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel()) {
      m.assign(p.numel(), 0.0f);
      v.assign(p.numel(), 0.0f);
    }
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = h.beta1 * static_cast<double>(m[j]) + (1.0 - h.beta1) * gj;
      const double vj = h.beta2 * static_cast<double>(v[j]) + (1.0 - h.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      p.data[j] = static_cast<float>(static_cast<double>(p.data[j]) - h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

}  // namespace edlab
