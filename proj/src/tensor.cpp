#include "draft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "draft/kernels.hpp"

namespace draft {

namespace {

thread_local Tape* t_active_tape = nullptr;

DType promote(DType a, DType b) { return (a == DType::f64 || b == DType::f64) ? DType::f64 : DType::f32; }

DType promote(const std::vector<Tensor>& ts) {
  DType d = DType::f32;
  for (const auto& t : ts) d = promote(d, t.dtype());
  return d;
}

void round_to_dtype(std::vector<double>& v, DType d) {
  if (d != DType::f32) return;
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Rounds the output to its dtype and, in verification mode, rejects
// non-finite results computed from finite inputs.
void finalize(const Tensor& out, const char* op, std::initializer_list<const Tensor*> inputs) {
  auto& impl = out.impl();
  round_to_dtype(impl.data, impl.dtype);
  if (kernels::exec_mode() != kernels::ExecMode::verification) return;
  if (all_finite(impl.data)) return;
  for (const Tensor* in : inputs)
    if (!all_finite(in->data())) return;
  throw std::runtime_error(std::string("non-finite value produced by ") + op);
}

void record(const char* op, std::vector<Tensor> inputs, const Tensor& out, Tape::BackwardFn fn) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (!in.is_leaf() && (in.impl().tape != tape || in.impl().tape_epoch != tape->epoch()))
      throw std::logic_error("tensor used after tape reset");
    any = true;
  }
  if (!any) return;
  tape->record(op, std::move(inputs), out, std::move(fn));
}

// Maps every output element of a broadcast to the source element of one input.
struct BroadcastIndex {
  Shape out;
  std::vector<std::size_t> a, b;
  bool trivial = false;
};

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
    if (da == 0 || db == 0) out[i] = 0;
  }
  return out;
}

std::vector<std::size_t> source_index(const Shape& src, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    const std::size_t oi = i + (r - src.size());
    stride[oi] = (src[i] == 1 && out[oi] != 1) ? 0 : s;
    s *= src[i];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    idx[lin] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      off += stride[d];
      if (counter[d] < out[d]) break;
      off -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

BroadcastIndex make_broadcast(const Shape& a, const Shape& b) {
  BroadcastIndex bi;
  if (a == b) {
    bi.out = a;
    bi.trivial = true;
    return bi;
  }
  bi.out = broadcast_shape(a, b);
  bi.a = source_index(a, bi.out);
  bi.b = source_index(b, bi.out);
  return bi;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// Expands a mask with x's shape or a trailing suffix of it to x's full size.
std::vector<std::uint8_t> expand_mask(const BoolMask& mask, const Shape& shape) {
  const std::size_t n = numel(shape);
  if (mask.shape.size() > shape.size() ||
      !std::equal(mask.shape.rbegin(), mask.shape.rend(), shape.rbegin()))
    throw std::invalid_argument("mask shape " + shape_str(mask.shape) + " not broadcastable to " + shape_str(shape));
  const std::size_t m = mask.values.size();
  std::vector<std::uint8_t> full(n);
  for (std::size_t i = 0; i < n; ++i) full[i] = m == 0 ? 0 : mask.values[i % m];
  return full;
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  auto& od = out.impl().data;
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(xd[i]);
  finalize(out, op, {&x});
  record(op, {x}, out, [x, out, deriv](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    const auto xd = x.data();
    const auto yd = out.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], yd[i]);
  });
  return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---------------------------------------------------------------------------

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
  if (s == "f32" || s == "float32") return DType::f32;
  if (s == "f64" || s == "float64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + s + "'");
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor make_tensor(Shape shape, DType dtype) {
  auto p = std::make_shared<TensorImpl>();
  p->data.assign(numel(shape), 0.0);
  p->shape = std::move(shape);
  p->dtype = dtype;
  return Tensor(std::move(p));
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return make_tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = make_tensor(std::move(shape), dtype);
  std::fill(t.impl().data.begin(), t.impl().data.end(), value);
  round_to_dtype(t.impl().data, dtype);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, DType dtype) {
  if (draft::numel(shape) != values.size())
    throw std::invalid_argument("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  Tensor t = make_tensor(std::move(shape), dtype);
  t.impl().data = std::move(values);
  round_to_dtype(t.impl().data, dtype);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return from({}, {value}, dtype); }

TensorImpl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return *impl_;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw std::invalid_argument("axis out of range");
  return impl().shape[axis];
}

void Tensor::set_data(std::span<const double> values) {
  auto& d = impl().data;
  if (values.size() != d.size()) throw std::invalid_argument("set_data: size mismatch");
  std::copy(values.begin(), values.end(), d.begin());
  round_to_dtype(d, impl().dtype);
}

void Tensor::set_value(std::size_t index, double value) {
  auto& d = impl().data;
  d.at(index) = impl().dtype == DType::f32 ? static_cast<double>(static_cast<float>(value)) : value;
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl().requires_grad = on;
  return *this;
}

void Tensor::zero_grad() { impl().grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t = make_tensor(shape(), dtype());
  t.impl().data = impl().data;
  t.impl().requires_grad = impl().requires_grad;
  return t;
}

Tensor Tensor::detach() const {
  Tensor t = make_tensor(shape(), dtype());
  t.impl().data = impl().data;
  return t;
}

Tensor Tensor::to(DType d) const {
  Tensor t = make_tensor(shape(), d);
  t.impl().data = impl().data;
  round_to_dtype(t.impl().data, d);
  return t;
}

BoolMask::BoolMask(Shape s, bool fill) : shape(std::move(s)), values(draft::numel(shape), fill ? 1 : 0) {}

BoolMask::BoolMask(Shape s, std::vector<std::uint8_t> v) : shape(std::move(s)), values(std::move(v)) {
  if (draft::numel(shape) != values.size()) throw std::invalid_argument("mask shape does not match values");
}

// ---------------------------------------------------------------------------
// Tape

Tape* Tape::active() { return t_active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
Tape::Scope::~Scope() { t_active_tape = previous_; }

void Tape::reset() {
  nodes_.clear();
  ++epoch_;
}

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  auto& o = output.impl();
  o.is_leaf = false;
  o.requires_grad = true;
  o.tape = this;
  o.tape_epoch = epoch_;
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(fn)});
}

bool needs_grad(const Tensor& t) { return Tape::active() != nullptr && t.requires_grad(); }

std::vector<double>& grad_buffer(const Tensor& t) {
  auto& impl = t.impl();
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

void accumulate_grad(const Tensor& t, std::span<const double> values) {
  if (!t.requires_grad()) return;
  auto& g = grad_buffer(t);
  for (std::size_t i = 0; i < values.size(); ++i) g[i] += values[i];
}

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) throw std::invalid_argument("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.is_leaf() && (loss.impl().tape != &tape || loss.impl().tape_epoch != tape.epoch()))
    throw std::logic_error("tensor used after tape reset");

  // Leaf gradients are computed into fresh buffers and added to the existing
  // values once at the end, so repeated calls accumulate exact multiples.
  std::unordered_map<TensorImpl*, std::vector<double>> saved;
  auto stash_leaf = [&saved](const Tensor& t) {
    auto& impl = t.impl();
    if (!impl.is_leaf || !impl.requires_grad || saved.count(&impl)) return;
    std::vector<double> prev = impl.grad;
    if (prev.size() != impl.data.size()) prev.assign(impl.data.size(), 0.0);
    saved.emplace(&impl, std::move(prev));
    impl.grad.assign(impl.data.size(), 0.0);
  };
  for (const auto& node : tape.nodes()) {
    node.output.impl().grad.assign(node.output.numel(), 0.0);
    for (const auto& in : node.inputs) stash_leaf(in);
  }
  stash_leaf(loss);
  if (loss.requires_grad()) grad_buffer(loss)[0] += 1.0;

  const auto& nodes = tape.nodes();
  for (std::size_t i = nodes.size(); i-- > 0;) {
    const auto& node = nodes[i];
    node.backward(node.output.impl().grad);
  }
  for (auto& [impl, prev] : saved) {
    for (std::size_t i = 0; i < prev.size(); ++i) prev[i] += impl->grad[i];
    impl->grad = std::move(prev);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  auto bi = std::make_shared<BroadcastIndex>(make_broadcast(a.shape(), b.shape()));
  Tensor out = make_tensor(bi->out, promote(a.dtype(), b.dtype()));
  auto& od = out.impl().data;
  const auto ad = a.data();
  const auto bd = b.data();
  if (bi->trivial) {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  } else {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[bi->a[i]] + bd[bi->b[i]];
  }
  finalize(out, "add", {&a, &b});
  record("add", {a, b}, out, [a, b, bi](std::span<const double> g) {
    if (a.requires_grad()) {
      auto& ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[bi->trivial ? i : bi->a[i]] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[bi->trivial ? i : bi->b[i]] += g[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto bi = std::make_shared<BroadcastIndex>(make_broadcast(a.shape(), b.shape()));
  Tensor out = make_tensor(bi->out, promote(a.dtype(), b.dtype()));
  auto& od = out.impl().data;
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i)
    od[i] = bi->trivial ? ad[i] - bd[i] : ad[bi->a[i]] - bd[bi->b[i]];
  finalize(out, "sub", {&a, &b});
  record("sub", {a, b}, out, [a, b, bi](std::span<const double> g) {
    if (a.requires_grad()) {
      auto& ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[bi->trivial ? i : bi->a[i]] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[bi->trivial ? i : bi->b[i]] -= g[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto bi = std::make_shared<BroadcastIndex>(make_broadcast(a.shape(), b.shape()));
  Tensor out = make_tensor(bi->out, promote(a.dtype(), b.dtype()));
  auto& od = out.impl().data;
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i)
    od[i] = bi->trivial ? ad[i] * bd[i] : ad[bi->a[i]] * bd[bi->b[i]];
  finalize(out, "mul", {&a, &b});
  record("mul", {a, b}, out, [a, b, bi](std::span<const double> g) {
    const auto ad = a.data();
    const auto bd = b.data();
    if (a.requires_grad()) {
      auto& ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = bi->trivial ? i : bi->a[i];
        const std::size_t ib = bi->trivial ? i : bi->b[i];
        ga[ia] += g[i] * bd[ib];
      }
    }
    if (b.requires_grad()) {
      auto& gb = grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = bi->trivial ? i : bi->a[i];
        const std::size_t ib = bi->trivial ? i : bi->b[i];
        gb[ib] += g[i] * ad[ia];
      }
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Linear algebra and shape manipulation

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_rhs = false;
  Shape out_shape;
  if (as.size() == 2 && bs.size() == 2) {
    m = as[0], k = as[1], n = bs[1];
    if (bs[0] != k) throw std::invalid_argument("matmul: inner dims differ " + shape_str(as) + " x " + shape_str(bs));
    out_shape = {m, n};
  } else if (as.size() == 3 && bs.size() == 3) {
    batch = as[0], m = as[1], k = as[2], n = bs[2];
    if (bs[0] != batch || bs[1] != k)
      throw std::invalid_argument("matmul: incompatible " + shape_str(as) + " x " + shape_str(bs));
    out_shape = {batch, m, n};
  } else if (as.size() == 3 && bs.size() == 2) {
    // Fold the batch into rows.
    batch = 1, m = as[0] * as[1], k = as[2], n = bs[1];
    shared_rhs = true;
    if (bs[0] != k) throw std::invalid_argument("matmul: incompatible " + shape_str(as) + " x " + shape_str(bs));
    out_shape = {as[0], as[1], n};
  } else {
    throw std::invalid_argument("matmul: unsupported ranks " + shape_str(as) + " x " + shape_str(bs));
  }
  (void)shared_rhs;
  Tensor out = make_tensor(out_shape, promote(a.dtype(), b.dtype()));
  auto od = std::span<double>(out.impl().data);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm({.m = m, .n = n, .k = k,
                   .a = ad.subspan(i * m * k, m * k), .trans_a = false,
                   .b = bd.subspan(i * k * n, k * n), .trans_b = false,
                   .c = od.subspan(i * m * n, m * n), .accumulate = false});
  }
  finalize(out, "matmul", {&a, &b});
  record("matmul", {a, b}, out, [a, b, batch, m, n, k](std::span<const double> g) {
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < batch; ++i) {
      const auto gi = g.subspan(i * m * n, m * n);
      if (a.requires_grad()) {
        auto ga = std::span<double>(grad_buffer(a)).subspan(i * m * k, m * k);
        kernels::gemm({.m = m, .n = k, .k = n, .a = gi, .trans_a = false,
                       .b = bd.subspan(i * k * n, k * n), .trans_b = true, .c = ga, .accumulate = true});
      }
      if (b.requires_grad()) {
        auto gb = std::span<double>(grad_buffer(b)).subspan(i * k * n, k * n);
        kernels::gemm({.m = k, .n = n, .k = m, .a = ad.subspan(i * m * k, m * k), .trans_a = true,
                       .b = gi, .trans_b = false, .c = gb, .accumulate = true});
      }
    }
  });
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw std::invalid_argument("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw std::invalid_argument("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = s[perm[i]];
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    (*src)[lin] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      off += in_stride[perm[d]];
      if (counter[d] < out_shape[d]) break;
      off -= in_stride[perm[d]] * counter[d];
      counter[d] = 0;
    }
  }
  Tensor out = make_tensor(out_shape, x.dtype());
  auto& od = out.impl().data;
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) od[i] = xd[(*src)[i]];
  finalize(out, "permute", {&x});
  record("permute", {x}, out, [x, src](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*src)[i]] += g[i];
  });
  return out;
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  if (axis0 >= perm.size() || axis1 >= perm.size()) throw std::invalid_argument("transpose: axis out of range");
  std::swap(perm[axis0], perm[axis1]);
  return permute(x, perm);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (draft::numel(shape) != x.numel())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out = make_tensor(std::move(shape), x.dtype());
  out.impl().data = x.impl().data;
  record("reshape", {x}, out, [x](std::span<const double> g) { accumulate_grad(x, g); });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw std::invalid_argument("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != out_shape.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != parts[0].shape()[i]) throw std::invalid_argument("concat: shape mismatch");
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_at(out_shape, axis);
  Tensor out = make_tensor(out_shape, promote(parts));
  auto& od = out.impl().data;
  std::size_t base = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto pd = p.data();
    for (std::size_t o = 0; o < os.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < os.inner; ++in)
          od[(o * os.len + base + l) * os.inner + in] = pd[(o * len + l) * os.inner + in];
    base += len;
  }
  round_to_dtype(od, out.dtype());
  record("concat", parts, out, [parts, axis, os](std::span<const double> g) {
    std::size_t base = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.shape()[axis];
      if (p.requires_grad()) {
        auto& gp = grad_buffer(p);
        for (std::size_t o = 0; o < os.outer; ++o)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t in = 0; in < os.inner; ++in)
              gp[(o * len + l) * os.inner + in] += g[(o * os.len + base + l) * os.inner + in];
      }
      base += len;
    }
  });
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit xs = split_at(x.shape(), axis);
  if (begin > end || end > xs.len)
    throw std::invalid_argument("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                                shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  Tensor out = make_tensor(out_shape, x.dtype());
  auto& od = out.impl().data;
  const auto xd = x.data();
  for (std::size_t o = 0; o < xs.outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < xs.inner; ++in)
        od[(o * len + l) * xs.inner + in] = xd[(o * xs.len + begin + l) * xs.inner + in];
  record("slice", {x}, out, [x, xs, begin, len](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    for (std::size_t o = 0; o < xs.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < xs.inner; ++in)
          gx[(o * xs.len + begin + l) * xs.inner + in] += g[(o * len + l) * xs.inner + in];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      });
}

Tensor abs(const Tensor& x) { return add(relu(x), relu(neg(x))); }

Tensor softmax(const Tensor& x, std::size_t axis, const BoolMask* mask) {
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<std::uint8_t> allow;
  if (mask != nullptr) allow = expand_mask(*mask, x.shape());
  Tensor out = make_tensor(x.shape(), x.dtype());
  auto& od = out.impl().data;
  const auto xd = x.data();
  bool ok = true;
  if (s.inner == 1) {
    ok = kernels::softmax_rows(s.outer, s.len, xd, allow, od);
  } else {
    std::vector<double> row(s.len), res(s.len);
    std::vector<std::uint8_t> arow(allow.empty() ? 0 : s.len);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = (o * s.len + l) * s.inner + in;
          row[l] = xd[idx];
          if (!allow.empty()) arow[l] = allow[idx];
        }
        ok = kernels::serial::softmax_rows(1, s.len, row, arow, res) && ok;
        for (std::size_t l = 0; l < s.len; ++l) od[(o * s.len + l) * s.inner + in] = res[l];
      }
  }
  if (!ok) throw std::invalid_argument("fully masked softmax row");
  finalize(out, "softmax", {&x});
  record("softmax", {x}, out, [x, out, s](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    const auto y = out.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = (o * s.len + l) * s.inner + in;
          dot += g[idx] * y[idx];
        }
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = (o * s.len + l) * s.inner + in;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
  return out;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  Tensor out = make_tensor(x.shape(), x.dtype());
  auto& od = out.impl().data;
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, xd[(o * s.len + l) * s.inner + in]);
      double sum = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) sum += std::exp(xd[(o * s.len + l) * s.inner + in] - mx);
      const double lse = mx + std::log(sum);
      for (std::size_t l = 0; l < s.len; ++l) {
        const std::size_t idx = (o * s.len + l) * s.inner + in;
        od[idx] = xd[idx] - lse;
      }
    }
  finalize(out, "log_softmax", {&x});
  record("log_softmax", {x}, out, [x, out, s](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    const auto y = out.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        double gs = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) gs += g[(o * s.len + l) * s.inner + in];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = (o * s.len + l) * s.inner + in;
          gx[idx] += g[idx] - std::exp(y[idx]) * gs;
        }
      }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d == 0) throw std::invalid_argument("layer_norm: normalized dimension is empty");
  if (gamma.numel() != d || beta.numel() != d)
    throw std::invalid_argument("layer_norm: gamma/beta length must be " + std::to_string(d));
  if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be non-negative");
  const std::size_t rows = x.numel() / d;
  Tensor out = make_tensor(x.shape(), promote({x, gamma, beta}));
  auto stats = std::make_shared<std::vector<double>>(2 * rows);
  auto sp = std::span<double>(*stats);
  kernels::layer_norm_rows(rows, d, x.data(), gamma.data(), beta.data(), eps, out.impl().data,
                           sp.subspan(0, rows), sp.subspan(rows, rows));
  finalize(out, "layer_norm", {&x, &gamma, &beta});
  record("layer_norm", {x, gamma, beta}, out, [x, gamma, beta, stats, rows, d](std::span<const double> g) {
    const auto xd = x.data();
    const auto gd = gamma.data();
    const double* mean = stats->data();
    const double* rstd = stats->data() + rows;
    std::vector<double> xhat(d), gxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * d;
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (xd[r * d + j] - mean[r]) * rstd[r];
        gxhat[j] = gr[j] * gd[j];
        m1 += gxhat[j];
        m2 += gxhat[j] * xhat[j];
      }
      m1 /= static_cast<double>(d);
      m2 /= static_cast<double>(d);
      if (gamma.requires_grad()) {
        auto& gg = grad_buffer(gamma);
        for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xhat[j];
      }
      if (beta.requires_grad()) {
        auto& gb = grad_buffer(beta);
        for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
      }
      if (x.requires_grad()) {
        auto& gx = grad_buffer(x);
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += rstd[r] * (gxhat[j] - m1 - xhat[j] * m2);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

Padding parse_padding(const std::string& s) {
  if (s == "causal") return Padding::causal;
  if (s == "same") return Padding::same;
  if (s == "none") return Padding::none;
  throw std::invalid_argument("unknown padding '" + s + "'");
}

std::size_t conv1d_out_len(std::size_t time, std::size_t width, std::size_t stride, Padding pad) {
  if (stride == 0) throw std::invalid_argument("conv1d: stride must be positive");
  if (width == 0) throw std::invalid_argument("conv1d: kernel width must be at least 1");
  if (pad == Padding::none) {
    if (width > time) throw std::invalid_argument("conv1d: kernel wider than input");
    return (time - width) / stride + 1;
  }
  return (time + stride - 1) / stride;
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t stride, Padding padding) {
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2) throw std::invalid_argument("conv1d: input must be T x D or B x T x D");
  if (kernel.rank() != 3) throw std::invalid_argument("conv1d: kernel must be W x Din x Dout");
  kernels::Conv1dArgs c;
  c.batch = batched ? x.dim(0) : 1;
  c.time = x.dim(batched ? 1 : 0);
  c.in_ch = x.dim(batched ? 2 : 1);
  c.width = kernel.dim(0);
  c.out_ch = kernel.dim(2);
  if (kernel.dim(1) != c.in_ch) throw std::invalid_argument("conv1d: kernel input channels mismatch");
  c.stride = stride;
  c.out_time = conv1d_out_len(c.time, c.width, stride, padding);
  c.left_pad = padding == Padding::causal ? c.width - 1 : padding == Padding::same ? (c.width - 1) / 2 : 0;
  Shape out_shape = batched ? Shape{c.batch, c.out_time, c.out_ch} : Shape{c.out_time, c.out_ch};
  Tensor out = make_tensor(out_shape, promote(x.dtype(), kernel.dtype()));
  c.x = x.data();
  c.w = kernel.data();
  c.y = out.impl().data;
  kernels::conv1d(c);
  finalize(out, "conv1d", {&x, &kernel});
  c.x = {};
  c.w = {};
  c.y = {};
  record("conv1d", {x, kernel}, out, [x, kernel, c](std::span<const double> g) {
    const auto xd = x.data();
    const auto wd = kernel.data();
    std::vector<double>* gx = x.requires_grad() ? &grad_buffer(x) : nullptr;
    std::vector<double>* gw = kernel.requires_grad() ? &grad_buffer(kernel) : nullptr;
    for (std::size_t b = 0; b < c.batch; ++b)
      for (std::size_t t = 0; t < c.out_time; ++t) {
        const double* gr = g.data() + (b * c.out_time + t) * c.out_ch;
        for (std::size_t j = 0; j < c.width; ++j) {
          const long src = static_cast<long>(t * c.stride + j) - static_cast<long>(c.left_pad);
          if (src < 0 || src >= static_cast<long>(c.time)) continue;
          const std::size_t xoff = (b * c.time + static_cast<std::size_t>(src)) * c.in_ch;
          for (std::size_t i = 0; i < c.in_ch; ++i) {
            const std::size_t woff = (j * c.in_ch + i) * c.out_ch;
            double acc = 0.0;
            for (std::size_t o = 0; o < c.out_ch; ++o) {
              acc += gr[o] * wd[woff + o];
              if (gw) (*gw)[woff + o] += xd[xoff + i] * gr[o];
            }
            if (gx) (*gx)[xoff + i] += acc;
          }
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Indexing

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
  const std::size_t n = table.dim(0), d = table.dim(1);
  for (auto i : indices)
    if (i >= n) throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of range");
  Tensor out = make_tensor({indices.size(), d}, table.dtype());
  auto& od = out.impl().data;
  const auto td = table.data();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(td.begin() + static_cast<long>(indices[r] * d), d, od.begin() + static_cast<long>(r * d));
  record("gather_rows", {table}, out, [table, indices, d](std::span<const double> g) {
    if (!table.requires_grad()) return;
    auto& gt = grad_buffer(table);
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) gt[indices[r] * d + j] += g[r * d + j];
  });
  return out;
}

Tensor masked_fill(const Tensor& x, const BoolMask& mask, double value) {
  auto allow = std::make_shared<std::vector<std::uint8_t>>(expand_mask(mask, x.shape()));
  Tensor out = make_tensor(x.shape(), x.dtype());
  auto& od = out.impl().data;
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = (*allow)[i] ? value : xd[i];
  finalize(out, "masked_fill", {&x});
  record("masked_fill", {x}, out, [x, allow](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(*allow)[i]) gx[i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::from({}, {s}, x.dtype());
  finalize(out, "sum", {&x});
  record("sum", {x}, out, [x](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    for (double& v : gx) v += g[0];
  });
  return out;
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor out = make_tensor(out_shape, x.dtype());
  auto& od = out.impl().data;
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) acc += xd[(o * s.len + l) * s.inner + in];
      od[o * s.inner + in] = acc;
    }
  finalize(out, "sum_axis", {&x});
  record("sum_axis", {x}, out, [x, s](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto& gx = grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t in = 0; in < s.inner; ++in) gx[(o * s.len + l) * s.inner + in] += g[o * s.inner + in];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  const std::size_t len = split_at(x.shape(), axis).len;
  if (len == 0) throw std::invalid_argument("mean over empty axis");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------
// Similarities and losses

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape() != b.shape()) throw std::invalid_argument("cosine_similarity: expects equal N x D inputs");
  const std::size_t n = a.dim(0), d = a.dim(1);
  auto norms = std::make_shared<std::vector<double>>(2 * n);
  Tensor out = make_tensor({n}, promote(a.dtype(), b.dtype()));
  auto& od = out.impl().data;
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < n; ++r) {
    double aa = 0.0, bb = 0.0, ab = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      aa += ad[r * d + j] * ad[r * d + j];
      bb += bd[r * d + j] * bd[r * d + j];
      ab += ad[r * d + j] * bd[r * d + j];
    }
    if (aa == 0.0 || bb == 0.0) throw std::invalid_argument("degenerate similarity input");
    (*norms)[r] = std::sqrt(aa);
    (*norms)[n + r] = std::sqrt(bb);
    od[r] = ab / ((*norms)[r] * (*norms)[n + r]);
  }
  finalize(out, "cosine_similarity", {&a, &b});
  record("cosine_similarity", {a, b}, out, [a, b, out, norms, n, d](std::span<const double> g) {
    const auto ad = a.data();
    const auto bd = b.data();
    const auto sd = out.data();
    for (std::size_t r = 0; r < n; ++r) {
      const double na = (*norms)[r], nb = (*norms)[n + r];
      if (a.requires_grad()) {
        auto& ga = grad_buffer(a);
        for (std::size_t j = 0; j < d; ++j)
          ga[r * d + j] += g[r] * (bd[r * d + j] / (na * nb) - sd[r] * ad[r * d + j] / (na * na));
      }
      if (b.requires_grad()) {
        auto& gb = grad_buffer(b);
        for (std::size_t j = 0; j < d; ++j)
          gb[r * d + j] += g[r] * (ad[r * d + j] / (na * nb) - sd[r] * bd[r * d + j] / (nb * nb));
      }
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be N x K");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw std::invalid_argument("cross_entropy: label count mismatch");
  for (auto l : labels)
    if (l >= k) throw std::out_of_range("label out of range");
  auto probs = std::make_shared<std::vector<double>>(n * k);
  Tensor out = make_tensor({n}, logits.dtype());
  auto& od = out.impl().data;
  const auto xd = logits.data();
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, xd[r * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(xd[r * k + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(xd[r * k + j] - lse);
    od[r] = lse - xd[r * k + labels[r]];
  }
  finalize(out, "cross_entropy", {&logits});
  record("cross_entropy", {logits}, out, [logits, labels, probs, n, k](std::span<const double> g) {
    if (!logits.requires_grad()) return;
    auto& gl = grad_buffer(logits);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < k; ++j)
        gl[r * k + j] += g[r] * ((*probs)[r * k + j] - (j == labels[r] ? 1.0 : 0.0));
  });
  return out;
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) throw std::invalid_argument("straight_through: shape mismatch");
  Tensor out = make_tensor(hard.shape(), promote(hard.dtype(), soft.dtype()));
  out.impl().data = hard.impl().data;
  record("straight_through", {soft}, out, [soft](std::span<const double> g) { accumulate_grad(soft, g); });
  return out;
}

}  // namespace draft
