#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "edlab/tensor.hpp"

namespace edlab {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};

// Moments are sized lazily on the first step that touches a parameter.
struct AdamState {
  AdamHyper hyper;
  std::uint64_t t = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;

  AdamState() = default;
  explicit AdamState(AdamHyper h) : hyper(h) {}
};

// One Adam step with bias correction, applied only to parameters whose mask
// entry is true. Masked-out parameters and their moments are left untouched;
// the step counter advances regardless.
void adam_step(std::span<const ParamRef> params, AdamState& state, const std::vector<bool>& trainable_mask);

}  // namespace edlab
