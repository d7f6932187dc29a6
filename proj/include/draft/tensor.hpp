#pragma once

// Minimal dense tensor with tape-based reverse-mode differentiation.
//
// Values are held in double precision. A float32 tensor rounds every value it
// stores to single precision, so float32 and float64 tensors follow the same
// code path while keeping their own value semantics.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace draft {

enum class DType { f32, f64 };

const char* dtype_name(DType d);
DType parse_dtype(const std::string& s);

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
  bool is_leaf = true;
  const Tape* tape = nullptr;  // producing tape, for non-leaf tensors
  std::uint64_t tape_epoch = 0;
};

/// Shared handle to a tensor. Copies alias the same storage; use clone() for
/// an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::vector<double> values, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t numel() const { return impl().data.size(); }
  DType dtype() const { return impl().dtype; }

  std::span<const double> data() const { return impl().data; }
  /// Direct write access; re-rounds to the tensor's dtype via set_data.
  void set_data(std::span<const double> values);
  void set_value(std::size_t index, double value);
  double item() const;
  double operator[](std::size_t index) const { return impl().data[index]; }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl().is_leaf; }
  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }
  void zero_grad();

  /// Deep copy with no gradient history.
  Tensor clone() const;
  /// Same values, not tracked by any tape.
  Tensor detach() const;
  Tensor to(DType dtype) const;

  bool same_object(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> p) : impl_(std::move(p)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_tensor(Shape, DType);
};

/// Allocates a zero-filled tensor of the given shape.
Tensor make_tensor(Shape shape, DType dtype);

/// Row-major boolean array, used for masks.
struct BoolMask {
  Shape shape;
  std::vector<std::uint8_t> values;

  BoolMask() = default;
  BoolMask(Shape s, bool fill);
  BoolMask(Shape s, std::vector<std::uint8_t> v);
  bool at(std::size_t i) const { return values[i] != 0; }
};

/// Ordered record of differentiable operations.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Forgets every node; tensors produced before the reset become unusable
  /// as tracked inputs.
  void reset();
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  void record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  /// The tape ops record onto in the current thread, or nullptr.
  static Tape* active();

  /// Makes a tape active for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
};

/// Accumulates d(loss)/d(t) into every requires_grad leaf reachable on the
/// tape. Calling twice without zeroing doubles the leaf gradients exactly.
void backward(const Tensor& loss, Tape& tape);

/// True when an op must record itself: a tape is active and some input
/// participates in differentiation.
bool needs_grad(const Tensor& t);

/// Adds values into t's gradient buffer if t participates in differentiation.
void accumulate_grad(const Tensor& t, std::span<const double> values);
/// Mutable gradient buffer (allocated on demand) for use inside backward fns.
std::vector<double>& grad_buffer(const Tensor& t);

// ---------------------------------------------------------------------------
// Differentiable primitives.

Tensor add(const Tensor& a, const Tensor& b);  // numpy-style broadcasting
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

/// (m x k)(k x n), (b x m x k)(b x k x n), or (b x m x k)(k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
/// |x| composed from two relus.
Tensor abs(const Tensor& x);

/// Normalizes along `axis`. Masked-out positions (mask value false) get
/// exactly zero weight. The mask must have x's shape or a trailing suffix of it.
Tensor softmax(const Tensor& x, std::size_t axis, const BoolMask* mask = nullptr);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis, then applies gamma * x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

enum class Padding { causal, same, none };
Padding parse_padding(const std::string& s);
std::size_t conv1d_out_len(std::size_t time, std::size_t width, std::size_t stride, Padding pad);
/// x is T x Din or B x T x Din; kernel is W x Din x Dout.
Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t stride, Padding padding);

/// Embedding lookup: rows of a 2-D table.
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices);
/// Sets positions where mask is true to value; mask has x's shape or a suffix.
Tensor masked_fill(const Tensor& x, const BoolMask& mask, double value);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

/// Row-wise cosine similarity of two N x D tensors, giving N values.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
/// Row-wise negative log-likelihood of labels under softmax(logits); N x K -> N.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);
/// Forward value of `hard`, gradient routed to `soft` (straight-through).
Tensor straight_through(const Tensor& hard, const Tensor& soft);

}  // namespace draft
