#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace draft {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
};

/// Every differentiable primitive, each wrapped as sum(w * op(x)) with a
/// random fixed weight w, on random float64 inputs of rank <= 3, dim <= 6.
std::vector<GradcheckResult> primitive_gradchecks(std::uint64_t seed);

/// Every training loss (APC, E-APC, E-BiAPC, contrastive + diversity,
/// HuBERT, CTC) and the residual adapter, on tiny random float64 models.
std::vector<GradcheckResult> loss_gradchecks(std::uint64_t seed);

}  // namespace draft
