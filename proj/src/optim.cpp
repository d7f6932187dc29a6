#include "draft/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace draft {

AdamState::AdamState(AdamHyper h, const std::vector<Tensor>& params) : hyper(h) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.emplace_back(p.numel(), 0.0);
    v.emplace_back(p.numel(), 0.0);
  }
}

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].empty() && grads[i].size() != params[i].numel())
      throw std::invalid_argument("adam_step: gradient shape mismatch for parameter " + std::to_string(i));
    if (state.m[i].size() != params[i].numel())
      throw std::invalid_argument("adam_step: state shape mismatch for parameter " + std::to_string(i));
  }
  const auto& h = state.hyper;
  const double rate = lr > 0.0 ? lr : h.lr;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  std::vector<double> values;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads[i];
    if (g.empty()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto pd = params[i].data();
    values.assign(pd.begin(), pd.end());
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      values[j] -= rate * mhat / (std::sqrt(vhat) + h.eps);
    }
    params[i].set_data(values);
  }
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
  std::vector<std::vector<double>> grads(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad()) continue;
    const auto g = params[i].grad();
    if (g.empty())
      grads[i].assign(params[i].numel(), 0.0);
    else
      grads[i].assign(g.begin(), g.end());
  }
  adam_step(params, grads, state, lr);
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.requires_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      for (double& g : grad_buffer(p)) g *= s;
    }
  }
  return norm;
}

double finite_diff_gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                             std::vector<Tensor> inputs, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("gradcheck: eps must be positive");
  for (auto& in : inputs) {
    if (in.dtype() != DType::f64) throw std::invalid_argument("gradcheck: inputs must be float64");
    in.set_requires_grad(true);
    in.zero_grad();
  }
  auto eval = [&]() {
    Tape quiet;  // no recording needed, but keep f away from any caller tape
    Tape::Scope scope(quiet);
    std::vector<Tensor> frozen;
    frozen.reserve(inputs.size());
    for (const auto& in : inputs) frozen.push_back(in.detach());
    return f(frozen).item();
  };
  const double f0 = eval();
  const double f1 = eval();
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0)
    throw std::runtime_error("gradcheck: function is not deterministic");

  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = f(inputs);
    backward(loss, tape);
  }
  double worst = 0.0;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) analytic.assign(in.grad().begin(), in.grad().end());
    for (std::size_t j = 0; j < in.numel(); ++j) {
      const double orig = in[j];
      auto at = [&](double delta) {
        in.set_value(j, orig + delta);
        return eval();
      };
      const double d1 = at(eps) - at(-eps);
      const double d2 = at(2.0 * eps) - at(-2.0 * eps);
      in.set_value(j, orig);
      const double numeric = (8.0 * d1 - d2) / (12.0 * eps);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace draft
