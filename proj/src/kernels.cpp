#include "draft/kernels.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

namespace draft::kernels {

namespace {

std::atomic<ExecMode> g_mode{ExecMode::verification};

inline double a_at(const GemmArgs& g, std::size_t i, std::size_t p) {
  return g.trans_a ? g.a[p * g.m + i] : g.a[i * g.k + p];
}

// One output row of C. The accumulator row starts at zero and is added to C
// at the end, so every element is reduced over p in increasing order.
void gemm_row(const GemmArgs& g, std::size_t i, std::vector<double>& acc) {
  acc.assign(g.n, 0.0);
  if (!g.trans_b) {
    for (std::size_t p = 0; p < g.k; ++p) {
      const double av = a_at(g, i, p);
      const double* brow = g.b.data() + p * g.n;
      for (std::size_t j = 0; j < g.n; ++j) acc[j] += av * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < g.n; ++j) {
      const double* brow = g.b.data() + j * g.k;
      double s = 0.0;
      for (std::size_t p = 0; p < g.k; ++p) s += a_at(g, i, p) * brow[p];
      acc[j] = s;
    }
  }
  double* crow = g.c.data() + i * g.n;
  if (g.accumulate) {
    for (std::size_t j = 0; j < g.n; ++j) crow[j] += acc[j];
  } else {
    for (std::size_t j = 0; j < g.n; ++j) crow[j] = acc[j];
  }
}

bool softmax_row(std::size_t r, std::size_t cols, std::span<const double> x,
                 std::span<const std::uint8_t> allow, std::span<double> y) {
  const double* xr = x.data() + r * cols;
  double* yr = y.data() + r * cols;
  const bool masked = !allow.empty();
  const std::uint8_t* ar = masked ? allow.data() + r * cols : nullptr;
  double mx = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < cols; ++j) {
    if (masked && !ar[j]) continue;
    any = true;
    if (xr[j] > mx) mx = xr[j];
  }
  if (!any) return false;
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    if (masked && !ar[j]) {
      yr[j] = 0.0;
      continue;
    }
    yr[j] = std::exp(xr[j] - mx);
    sum += yr[j];
  }
  for (std::size_t j = 0; j < cols; ++j) yr[j] /= sum;
  return true;
}

void layer_norm_row(std::size_t r, std::size_t dim, std::span<const double> x,
                    std::span<const double> gamma, std::span<const double> beta, double eps,
                    std::span<double> y, std::span<double> mean, std::span<double> rstd) {
  const double* xr = x.data() + r * dim;
  double* yr = y.data() + r * dim;
  double mu = 0.0;
  for (std::size_t j = 0; j < dim; ++j) mu += xr[j];
  mu /= static_cast<double>(dim);
  double var = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d = xr[j] - mu;
    var += d * d;
  }
  var /= static_cast<double>(dim);
  // Zero-variance rows with eps == 0 normalize to zero rather than NaN.
  const double denom = var + eps;
  const double rs = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
  mean[r] = mu;
  rstd[r] = rs;
  for (std::size_t j = 0; j < dim; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
}

void conv1d_row(const Conv1dArgs& c, std::size_t b, std::size_t t) {
  double* yr = c.y.data() + (b * c.out_time + t) * c.out_ch;
  for (std::size_t o = 0; o < c.out_ch; ++o) yr[o] = 0.0;
  for (std::size_t j = 0; j < c.width; ++j) {
    const long src = static_cast<long>(t * c.stride + j) - static_cast<long>(c.left_pad);
    if (src < 0 || src >= static_cast<long>(c.time)) continue;
    const double* xr = c.x.data() + (b * c.time + static_cast<std::size_t>(src)) * c.in_ch;
    const double* wj = c.w.data() + j * c.in_ch * c.out_ch;
    for (std::size_t i = 0; i < c.in_ch; ++i) {
      const double xv = xr[i];
      const double* wrow = wj + i * c.out_ch;
      for (std::size_t o = 0; o < c.out_ch; ++o) yr[o] += xv * wrow[o];
    }
  }
}

}  // namespace

void set_exec_mode(ExecMode mode) { g_mode.store(mode); }
ExecMode exec_mode() { return g_mode.load(); }

namespace serial {

void gemm(const GemmArgs& g) {
  std::vector<double> acc;
  for (std::size_t i = 0; i < g.m; ++i) gemm_row(g, i, acc);
}

bool softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<const std::uint8_t> allow, std::span<double> y) {
  bool ok = true;
  for (std::size_t r = 0; r < rows; ++r) ok = softmax_row(r, cols, x, allow, y) && ok;
  return ok;
}

void layer_norm_rows(std::size_t rows, std::size_t dim, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta, double eps,
                     std::span<double> y, std::span<double> mean, std::span<double> rstd) {
  for (std::size_t r = 0; r < rows; ++r) layer_norm_row(r, dim, x, gamma, beta, eps, y, mean, rstd);
}

void conv1d(const Conv1dArgs& c) {
  for (std::size_t b = 0; b < c.batch; ++b)
    for (std::size_t t = 0; t < c.out_time; ++t) conv1d_row(c, b, t);
}

}  // namespace serial

namespace omp {

void gemm(const GemmArgs& g) {
  const long m = static_cast<long>(g.m);
#pragma omp parallel
  {
    std::vector<double> acc;
#pragma omp for schedule(static)
    for (long i = 0; i < m; ++i) gemm_row(g, static_cast<std::size_t>(i), acc);
  }
}

bool softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<const std::uint8_t> allow, std::span<double> y) {
  int ok = 1;
  const long n = static_cast<long>(rows);
#pragma omp parallel for schedule(static) reduction(&& : ok)
  for (long r = 0; r < n; ++r) ok = softmax_row(static_cast<std::size_t>(r), cols, x, allow, y) && ok;
  return ok != 0;
}

void layer_norm_rows(std::size_t rows, std::size_t dim, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta, double eps,
                     std::span<double> y, std::span<double> mean, std::span<double> rstd) {
  const long n = static_cast<long>(rows);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < n; ++r)
    layer_norm_row(static_cast<std::size_t>(r), dim, x, gamma, beta, eps, y, mean, rstd);
}

void conv1d(const Conv1dArgs& c) {
  const long total = static_cast<long>(c.batch * c.out_time);
#pragma omp parallel for schedule(static)
  for (long idx = 0; idx < total; ++idx) {
    const auto u = static_cast<std::size_t>(idx);
    conv1d_row(c, u / c.out_time, u % c.out_time);
  }
}

}  // namespace omp

void gemm(const GemmArgs& g) {
  exec_mode() == ExecMode::fast ? omp::gemm(g) : serial::gemm(g);
}

bool softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<const std::uint8_t> allow, std::span<double> y) {
  return exec_mode() == ExecMode::fast ? omp::softmax_rows(rows, cols, x, allow, y)
                                       : serial::softmax_rows(rows, cols, x, allow, y);
}

void layer_norm_rows(std::size_t rows, std::size_t dim, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta, double eps,
                     std::span<double> y, std::span<double> mean, std::span<double> rstd) {
  if (exec_mode() == ExecMode::fast)
    omp::layer_norm_rows(rows, dim, x, gamma, beta, eps, y, mean, rstd);
  else
    serial::layer_norm_rows(rows, dim, x, gamma, beta, eps, y, mean, rstd);
}

void conv1d(const Conv1dArgs& c) {
  exec_mode() == ExecMode::fast ? omp::conv1d(c) : serial::conv1d(c);
}

}  // namespace draft::kernels
