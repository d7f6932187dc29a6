#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "draft/tensor.hpp"

namespace draft {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments per parameter, plus the shared step counter.
struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(AdamHyper h, const std::vector<Tensor>& params);
};

/// One bias-corrected Adam update of params from grads (same order and shapes
/// as the state). Parameters whose grads are empty are left untouched. `lr`
/// overrides the stored learning rate when positive.
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               double lr = -1.0);

/// Convenience: steps every parameter that currently requires grad, reading
/// its accumulated gradient. Frozen parameters are skipped.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr = -1.0);

/// Scales gradients of params so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

/// Fourth-order central-difference gradient check (stencil +-eps, +-2 eps). f maps the inputs to a scalar tensor;
/// inputs should be float64 leaves. Returns the largest relative error over
/// all coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
/// Throws if two evaluations of f at the same point disagree.
double finite_diff_gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                             std::vector<Tensor> inputs, double eps = 1e-3);

}  // namespace draft
