#pragma once

// Dense numeric kernels used by the tensor engine.
//
// Every kernel exists twice: a serial reference in `draft::kernels::serial`
// and an OpenMP version in `draft::kernels::omp`. The OpenMP versions only
// split work across independent output rows, so each output element is still
// reduced in the same sequential order and both paths produce bit-identical
// results. The dispatching functions in `draft::kernels` pick the serial path
// in verification mode and the OpenMP path in fast mode.

#include <cstddef>
#include <cstdint>
#include <span>

namespace draft::kernels {

enum class ExecMode { verification, fast };

void set_exec_mode(ExecMode mode);
ExecMode exec_mode();

/// RAII override of the process-wide execution mode.
class ExecModeScope {
 public:
  explicit ExecModeScope(ExecMode mode) : previous_(exec_mode()) { set_exec_mode(mode); }
  ~ExecModeScope() { set_exec_mode(previous_); }
  ExecModeScope(const ExecModeScope&) = delete;
  ExecModeScope& operator=(const ExecModeScope&) = delete;

 private:
  ExecMode previous_;
};

/// C = op(A) * op(B) (+ C when accumulate). op(A) is m x k, op(B) is k x n,
/// all row-major. trans_a means A is stored k x m.
struct GemmArgs {
  std::size_t m = 0, n = 0, k = 0;
  std::span<const double> a;
  bool trans_a = false;
  std::span<const double> b;
  bool trans_b = false;
  std::span<double> c;
  bool accumulate = false;
};

/// Conv over time. x is batch x time x in_ch, w is width x in_ch x out_ch,
/// y is batch x out_time x out_ch. Input index for output t and tap j is
/// t * stride + j - left_pad; out-of-range reads are zero.
struct Conv1dArgs {
  std::size_t batch = 0, time = 0, in_ch = 0, out_ch = 0, width = 0;
  std::size_t stride = 1, left_pad = 0, out_time = 0;
  std::span<const double> x;
  std::span<const double> w;
  std::span<double> y;
};

namespace serial {
void gemm(const GemmArgs& g);
/// Returns false if some row has every position masked out.
bool softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<const std::uint8_t> allow, std::span<double> y);
void layer_norm_rows(std::size_t rows, std::size_t dim, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta, double eps,
                     std::span<double> y, std::span<double> mean, std::span<double> rstd);
void conv1d(const Conv1dArgs& c);
}  // namespace serial

namespace omp {
void gemm(const GemmArgs& g);
bool softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<const std::uint8_t> allow, std::span<double> y);
void layer_norm_rows(std::size_t rows, std::size_t dim, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta, double eps,
                     std::span<double> y, std::span<double> mean, std::span<double> rstd);
void conv1d(const Conv1dArgs& c);
}  // namespace omp

void gemm(const GemmArgs& g);
bool softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<const std::uint8_t> allow, std::span<double> y);
void layer_norm_rows(std::size_t rows, std::size_t dim, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta, double eps,
                     std::span<double> y, std::span<double> mean, std::span<double> rstd);
void conv1d(const Conv1dArgs& c);

}  // namespace draft::kernels
