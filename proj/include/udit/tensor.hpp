#pragma once

// Minimal reverse-mode autodiff tensor core: row-major contiguous storage,
// eager kernels, and an explicit execution-ordered gradient tape. The scalar
// type is a template parameter; float is the working precision, double the
// testing precision. A graph never mixes the two.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "udit/base.hpp"
#include "udit/rng.hpp"

namespace udit {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = s;
    t.n_->data.assign(static_cast<size_t>(numel_of(s)), T(0));
    return t;
  }

  static Tensor full(const Shape& s, T v) {
    Tensor t = zeros(s);
    std::fill(t.n_->data.begin(), t.n_->data.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full(Shape{}, v); }

  static Tensor from_vector(const Shape& s, std::vector<T> v) {
    check_shape(static_cast<std::int64_t>(v.size()) == numel_of(s),
                "from_vector: data size " + std::to_string(v.size()) +
                    " does not match shape " + shape_str(s));
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = s;
    t.n_->data = std::move(v);
    return t;
  }

  static Tensor randn(const Shape& s, Rng& rng, double std_dev = 1.0) {
    Tensor t = zeros(s);
    rng.fill_normal(std::span<T>(t.n_->data), std_dev);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::int64_t dim(size_t i) const { return n_->shape[i]; }
  size_t rank() const { return n_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(n_->data.size()); }

  const std::vector<T>& data() const { return n_->data; }
  std::vector<T>& data_mut() { return n_->data; }
  const std::vector<T>& grad() const { return n_->grad; }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    return *this;
  }
  void zero_grad() { n_->grad.clear(); }

  T item() const {
    check_shape(numel() == 1, "item: tensor " + shape_str(shape()) + " is not scalar");
    return n_->data[0];
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Execution-ordered tape. Ops append their backward rule as they run; replay
// walks the list exactly once in reverse. Scoped activation, single-threaded.
template <typename T>
class GradTape {
 public:
  GradTape() : prev_(current_) { current_ = this; }
  ~GradTape() { current_ = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current() { return current_; }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  size_t size() const { return ops_.size(); }

  void backward(const Tensor<T>& loss) {
    if (used_) throw NumericError("backward: tape already replayed");
    check_shape(loss.numel() == 1,
                "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw NumericError("backward: loss does not depend on any tracked tensor");
    used_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
  GradTape* prev_;
  bool used_ = false;
  inline static thread_local GradTape* current_ = nullptr;
};

namespace detail {

template <typename T>
inline bool wants_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (GradTape<T>::current() == nullptr) return false;
  for (auto* t : ins)
    if ((*t).requires_grad()) return true;
  return false;
}

template <typename T, typename F>
inline void mark_and_record(std::initializer_list<const Tensor<T>*> ins, Tensor<T>& out,
                            F&& fn) {
  if (!wants_grad<T>(ins)) return;
  out.node()->requires_grad = true;
  GradTape<T>::current()->record(std::forward<F>(fn));
}

inline std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// C[m,n] += A[m,k] @ B[k,n]
// processes four rows of A per sweep of B so each B row is loaded once per
// four accumulator rows; per-element addition order over k is unchanged
template <typename T>
inline void gemm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                     std::int64_t m, std::int64_t n, std::int64_t k) {
  std::int64_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T *a0 = a + i * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
    T *c0 = c + i * n, *c1 = c0 + n, *c2 = c1 + n, *c3 = c2 + n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const T* br = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const T bv = br[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* cr = c + i * n;
    const T* ar = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[m,k] += A[m,n] @ B[k,n]^T
// B is transposed into scratch first so the hot loop is the same contiguous
// axpy sweep as gemm_acc; a row-by-row dot formulation is a reduction the
// compiler cannot reorder and runs several times slower.
template <typename T>
inline void gemm_acc_bt(const T* __restrict a, const T* __restrict b, T* __restrict c,
                        std::int64_t m, std::int64_t n, std::int64_t k) {
  auto bt = std::make_unique_for_overwrite<T[]>(static_cast<size_t>(n) * static_cast<size_t>(k));
  for (std::int64_t p = 0; p < k; ++p)
    for (std::int64_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_acc(a, bt.get(), c, m, k, n);
}

// C[k,n] += A[m,k]^T @ B[m,n]
// m is the reduction axis; grouping four m-rows per pass cuts C read/write
// traffic fourfold (the group's terms combine before touching C)
template <typename T>
inline void gemm_acc_at(const T* __restrict a, const T* __restrict b, T* __restrict c,
                        std::int64_t m, std::int64_t n, std::int64_t k) {
  std::int64_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T *a0 = a + i * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
    const T *b0 = b + i * n, *b1 = b0 + n, *b2 = b1 + n, *b3 = b2 + n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      T* cr = c + p * n;
      for (std::int64_t j = 0; j < n; ++j)
        cr[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
    }
  }
  for (; i < m; ++i) {
    const T* ar = a + i * k;
    const T* br = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = ar[p];
      T* cr = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(),
              "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * out.numel()));
  detail::mark_and_record<T>({&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(),
              "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * out.numel()));
  detail::mark_and_record<T>({&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(),
              "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * out.numel()));
  detail::mark_and_record<T>({&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * out.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), c] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    }
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * out.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node()] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * on->data[i];
    }
  });
  return out;
}

// min(x, hi); gradient passes only where x < hi.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& a, T hi) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(av[i], hi);
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * out.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), hi] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        if (an->data[i] < hi) an->grad[i] += on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-av[i]));
    ov[i] = av[i] * s;
  }
  FlopTrace::add(static_cast<std::uint64_t>(cost::kSilu * out.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node()] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) {
      const T x = an->data[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      an->grad[i] += on->grad[i] * (s * (T(1) + x * (T(1) - s)));
    }
  });
  return out;
}

// Exact gelu: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data_mut();
  const T inv_sqrt2 = T(0.7071067811865475244008443621048490);
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
  FlopTrace::add(static_cast<std::uint64_t>(cost::kGelu * out.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), inv_sqrt2] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T inv_sqrt_2pi = T(0.3989422804014326779399460599343819);
    for (size_t i = 0; i < on->grad.size(); ++i) {
      const T x = an->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      an->grad[i] += on->grad[i] * (cdf + x * pdf);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structure ops (pure data movement, zero traced cost)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
  check_shape(numel_of(s) == a.numel(), "reshape: cannot view " + shape_str(a.shape()) +
                                            " as " + shape_str(s));
  Tensor<T> out = Tensor<T>::from_vector(s, a.data());
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node()] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
  });
  return out;
}

namespace detail {
template <typename T>
inline void permute2_copy(const T* src, T* dst, const Shape& in_shape, size_t a0, size_t a1) {
  if (a0 > a1) std::swap(a0, a1);
  const size_t r = in_shape.size();
  // collapse to outer | D0 | mid | D1 | inner with inner contiguous in both
  std::int64_t outer = 1, mid = 1, inner = 1;
  for (size_t d = 0; d < a0; ++d) outer *= in_shape[d];
  for (size_t d = a0 + 1; d < a1; ++d) mid *= in_shape[d];
  for (size_t d = a1 + 1; d < r; ++d) inner *= in_shape[d];
  const std::int64_t d0 = in_shape[a0], d1 = in_shape[a1];
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i0 = 0; i0 < d0; ++i0)
      for (std::int64_t m = 0; m < mid; ++m) {
        const T* s = src + (((o * d0 + i0) * mid + m) * d1) * inner;
        T* t = dst + (((o * d1) * mid + m) * d0 + i0) * inner;
        const std::int64_t dst_step = mid * d0 * inner;
        if (inner == 1) {
          for (std::int64_t i1 = 0; i1 < d1; ++i1) t[i1 * dst_step] = s[i1];
        } else {
          for (std::int64_t i1 = 0; i1 < d1; ++i1)
            std::memcpy(t + i1 * dst_step, s + i1 * inner,
                        static_cast<size_t>(inner) * sizeof(T));
        }
      }
}
}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, size_t a0, size_t a1) {
  check_shape(a0 < a.rank() && a1 < a.rank(), "transpose: axis out of range for " +
                                                  shape_str(a.shape()));
  Shape s = a.shape();
  std::swap(s[a0], s[a1]);
  Tensor<T> out = Tensor<T>::zeros(s);
  detail::permute2_copy(a.data().data(), out.data_mut().data(), a.shape(), a0, a1);
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), a0, a1] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    // inverse of a swap is the same swap
    std::vector<T> tmp(an->grad.size(), T(0));
    detail::permute2_copy(on->grad.data(), tmp.data(), on->shape, a0, a1);
    for (size_t i = 0; i < tmp.size(); ++i) an->grad[i] += tmp[i];
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, size_t axis, std::int64_t start, std::int64_t len) {
  check_shape(axis < a.rank(), "slice: axis out of range for " + shape_str(a.shape()));
  check_shape(start >= 0 && len > 0 && start + len <= a.dim(axis),
              "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                  ") out of bounds for " + shape_str(a.shape()));
  Shape s = a.shape();
  s[axis] = len;
  Tensor<T> out = Tensor<T>::zeros(s);
  const auto st = detail::strides_of(a.shape());
  const std::int64_t outer = numel_of(Shape(a.shape().begin(), a.shape().begin() + axis));
  const std::int64_t inner = st[axis];
  const std::int64_t in_axis = a.dim(axis);
  const T* src = a.data().data();
  T* dst = out.data_mut().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(src + (o * in_axis + start) * inner, src + (o * in_axis + start + len) * inner,
              dst + o * len * inner);
  detail::mark_and_record<T>(
      {&a}, out, [an = a.node(), on = out.node(), axis, start, len, outer, inner, in_axis] {
        if (on->grad.empty()) return;
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* g = on->grad.data() + o * len * inner;
          T* dg = an->grad.data() + (o * in_axis + start) * inner;
          for (std::int64_t i = 0; i < len * inner; ++i) dg[i] += g[i];
        }
      });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
  check_shape(!parts.empty(), "concat: no inputs");
  const Shape& base = parts[0].shape();
  check_shape(axis < base.size(), "concat: axis out of range for " + shape_str(base));
  std::int64_t total = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == base.size(), "concat: rank mismatch " + shape_str(p.shape()) +
                                             " vs " + shape_str(base));
    for (size_t d = 0; d < base.size(); ++d)
      check_shape(d == axis || p.dim(d) == base[d],
                  "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(base));
    total += p.dim(axis);
  }
  Shape s = base;
  s[axis] = total;
  Tensor<T> out = Tensor<T>::zeros(s);
  const std::int64_t outer = numel_of(Shape(base.begin(), base.begin() + axis));
  const std::int64_t inner = detail::strides_of(s)[axis];
  T* dst = out.data_mut().data();
  std::int64_t written = 0;
  for (const auto& p : parts) {
    const std::int64_t la = p.dim(axis);
    const T* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(src + o * la * inner, src + (o + 1) * la * inner,
                dst + (o * total + written) * inner);
    written += la;
  }
  bool any_rg = false;
  for (const auto& p : parts) any_rg |= p.requires_grad();
  if (GradTape<T>::current() && any_rg) {
    out.node()->requires_grad = true;
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    GradTape<T>::current()->record([nodes, on = out.node(), axis, outer, inner, total] {
      if (on->grad.empty()) return;
      std::int64_t off = 0;
      for (auto& nd : nodes) {
        const std::int64_t la = nd->shape[axis];
        if (nd->requires_grad) {
          nd->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* g = on->grad.data() + (o * total + off) * inner;
            T* dg = nd->grad.data() + o * la * inner;
            for (std::int64_t i = 0; i < la * inner; ++i) dg[i] += g[i];
          }
        }
        off += la;
      }
    });
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> chunk(const Tensor<T>& a, std::int64_t n, size_t axis) {
  check_shape(axis < a.rank() && n > 0 && a.dim(axis) % n == 0,
              "chunk: cannot split axis " + std::to_string(axis) + " of " +
                  shape_str(a.shape()) + " into " + std::to_string(n));
  const std::int64_t step = a.dim(axis) / n;
  std::vector<Tensor<T>> out;
  out.reserve(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out.push_back(slice(a, axis, i * step, step));
  return out;
}

// (B,C,H,W) -> (B*s*s, C, H/s, W/s). Output batch index is b*s*s + (dy*s+dx),
// phase (dy,dx) holding input element (y*s+dy, x*s+dx). Lossless regrouping.
template <typename T>
Tensor<T> space_to_batch(const Tensor<T>& a, std::int64_t s) {
  check_shape(a.rank() == 4, "space_to_batch: want rank-4, got " + shape_str(a.shape()));
  check_shape(s >= 1, "space_to_batch: stride must be >= 1");
  const std::int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  check_shape(H % s == 0 && W % s == 0, "space_to_batch: " + shape_str(a.shape()) +
                                            " not divisible by stride " + std::to_string(s));
  const std::int64_t h = H / s, w = W / s;
  Tensor<T> out = Tensor<T>::zeros({B * s * s, C, h, w});
  const T* src = a.data().data();
  T* dst = out.data_mut().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t dy = 0; dy < s; ++dy)
      for (std::int64_t dx = 0; dx < s; ++dx) {
        const std::int64_t ob = (b * s + dy) * s + dx;
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t y = 0; y < h; ++y) {
            const T* row = src + ((b * C + c) * H + (y * s + dy)) * W + dx;
            T* orow = dst + ((ob * C + c) * h + y) * w;
            for (std::int64_t x = 0; x < w; ++x) orow[x] = row[x * s];
          }
      }
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), B, C, H, W, s, h, w] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = on->grad.data();
    T* dg = an->grad.data();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t dy = 0; dy < s; ++dy)
        for (std::int64_t dx = 0; dx < s; ++dx) {
          const std::int64_t ob = (b * s + dy) * s + dx;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t y = 0; y < h; ++y) {
              T* drow = dg + ((b * C + c) * H + (y * s + dy)) * W + dx;
              const T* grow = g + ((ob * C + c) * h + y) * w;
              for (std::int64_t x = 0; x < w; ++x) drow[x * s] += grow[x];
            }
        }
  });
  return out;
}

// Exact inverse of space_to_batch with the same phase order.
template <typename T>
Tensor<T> batch_to_space(const Tensor<T>& a, std::int64_t s) {
  check_shape(a.rank() == 4, "batch_to_space: want rank-4, got " + shape_str(a.shape()));
  check_shape(s >= 1, "batch_to_space: stride must be >= 1");
  const std::int64_t Bs = a.dim(0), C = a.dim(1), h = a.dim(2), w = a.dim(3);
  check_shape(Bs % (s * s) == 0, "batch_to_space: batch " + std::to_string(Bs) +
                                     " not divisible by " + std::to_string(s * s));
  const std::int64_t B = Bs / (s * s), H = h * s, W = w * s;
  Tensor<T> out = Tensor<T>::zeros({B, C, H, W});
  const T* src = a.data().data();
  T* dst = out.data_mut().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t dy = 0; dy < s; ++dy)
      for (std::int64_t dx = 0; dx < s; ++dx) {
        const std::int64_t ib = (b * s + dy) * s + dx;
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t y = 0; y < h; ++y) {
            const T* row = src + ((ib * C + c) * h + y) * w;
            T* orow = dst + ((b * C + c) * H + (y * s + dy)) * W + dx;
            for (std::int64_t x = 0; x < w; ++x) orow[x * s] = row[x];
          }
      }
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), B, C, H, W, s, h, w] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = on->grad.data();
    T* dg = an->grad.data();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t dy = 0; dy < s; ++dy)
        for (std::int64_t dx = 0; dx < s; ++dx) {
          const std::int64_t ib = (b * s + dy) * s + dx;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t y = 0; y < h; ++y) {
              T* drow = dg + ((ib * C + c) * h + y) * w;
              const T* grow = g + ((b * C + c) * H + (y * s + dy)) * W + dx;
              for (std::int64_t x = 0; x < w; ++x) drow[x] += grow[x * s];
            }
        }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Contractions
// ---------------------------------------------------------------------------

// Batched matmul. Leading (batch) dims must match exactly, or be absent on one
// side (that operand is shared across the other side's batches). No other
// broadcasting.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.rank() >= 2 && b.rank() >= 2,
              "matmul: want rank >= 2, got " + shape_str(a.shape()) + " and " +
                  shape_str(b.shape()));
  const std::int64_t m = a.dim(a.rank() - 2), ka = a.dim(a.rank() - 1);
  const std::int64_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  check_shape(ka == kb, "matmul: inner dim mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  check_shape(abatch == bbatch || abatch.empty() || bbatch.empty(),
              "matmul: batch dims mismatch " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  const Shape batch = abatch.empty() ? bbatch : abatch;
  const std::int64_t nb = numel_of(batch);
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out = Tensor<T>::zeros(os);
  const bool a_shared = abatch.empty() && !bbatch.empty();
  const bool b_shared = bbatch.empty() && !abatch.empty();
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t i = 0; i < nb; ++i)
    detail::gemm_acc(ap + (a_shared ? 0 : i * m * ka), bp + (b_shared ? 0 : i * ka * n),
                     op + i * m * n, m, n, ka);
  FlopTrace::add(static_cast<std::uint64_t>(2 * nb * m * n * ka));
  detail::mark_and_record<T>(
      {&a, &b}, out,
      [an = a.node(), bn = b.node(), on = out.node(), nb, m, n, ka, a_shared, b_shared] {
        if (on->grad.empty()) return;
        const T* g = on->grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::int64_t i = 0; i < nb; ++i)
            detail::gemm_acc_bt(g + i * m * n, bn->data.data() + (b_shared ? 0 : i * ka * n),
                                an->grad.data() + (a_shared ? 0 : i * m * ka), m, n, ka);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::int64_t i = 0; i < nb; ++i)
            detail::gemm_acc_at(an->data.data() + (a_shared ? 0 : i * m * ka), g + i * m * n,
                                bn->grad.data() + (b_shared ? 0 : i * ka * n), m, n, ka);
        }
      });
  return out;
}

// y[..., out] = x[..., in] @ w[in, out] + b[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check_shape(x.rank() >= 1 && w.rank() == 2, "linear: want x rank >= 1 and w rank 2, got " +
                                                  shape_str(x.shape()) + " and " +
                                                  shape_str(w.shape()));
  const std::int64_t in = x.dim(x.rank() - 1);
  check_shape(in == w.dim(0), "linear: input dim mismatch " + shape_str(x.shape()) + " vs " +
                                  shape_str(w.shape()));
  const std::int64_t out_dim = w.dim(1);
  check_shape(b.rank() == 1 && b.dim(0) == out_dim,
              "linear: bias shape " + shape_str(b.shape()) + " does not match w " +
                  shape_str(w.shape()));
  const std::int64_t rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = out_dim;
  Tensor<T> out = Tensor<T>::zeros(os);
  T* op = out.data_mut().data();
  const T* bp = b.data().data();
  for (std::int64_t r = 0; r < rows; ++r) std::copy(bp, bp + out_dim, op + r * out_dim);
  detail::gemm_acc(x.data().data(), w.data().data(), op, rows, out_dim, in);
  FlopTrace::add(static_cast<std::uint64_t>(2 * rows * out_dim * in + rows * out_dim));
  detail::mark_and_record<T>(
      {&x, &w, &b}, out,
      [xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(), rows, in, out_dim] {
        if (on->grad.empty()) return;
        const T* g = on->grad.data();
        if (xn->requires_grad) {
          xn->ensure_grad();
          detail::gemm_acc_bt(g, wn->data.data(), xn->grad.data(), rows, out_dim, in);
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          detail::gemm_acc_at(xn->data.data(), g, wn->grad.data(), rows, out_dim, in);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < out_dim; ++j) bn->grad[j] += g[r * out_dim + j];
        }
      });
  return out;
}

// Depthwise 3x3-style conv, same zero padding, odd square kernel (C,1,K,K).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k) {
  check_shape(x.rank() == 4, "depthwise_conv2d: want rank-4 input, got " + shape_str(x.shape()));
  check_shape(k.rank() == 4 && k.dim(1) == 1 && k.dim(2) == k.dim(3) && k.dim(2) % 2 == 1,
              "depthwise_conv2d: want kernel (C,1,K,K) with odd K, got " + shape_str(k.shape()));
  check_shape(x.dim(1) == k.dim(0), "depthwise_conv2d: channel mismatch " +
                                        shape_str(x.shape()) + " vs " + shape_str(k.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = k.dim(2);
  const std::int64_t P = K / 2;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* kp = k.data().data();
  T* op = out.data_mut().data();
  // tap-major: each kernel tap is a shifted accumulate over its valid window,
  // so the inner loop is contiguous and branch-free
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* xc = xp + (b * C + c) * H * W;
      const T* kc = kp + c * K * K;
      T* oc = op + (b * C + c) * H * W;
      for (std::int64_t i = 0; i < K; ++i) {
        const std::int64_t y0 = std::max<std::int64_t>(0, P - i);
        const std::int64_t y1 = std::min<std::int64_t>(H, H + P - i);
        for (std::int64_t j = 0; j < K; ++j) {
          const T kv = kc[i * K + j];
          const std::int64_t x0 = std::max<std::int64_t>(0, P - j);
          const std::int64_t x1 = std::min<std::int64_t>(W, W + P - j);
          for (std::int64_t y = y0; y < y1; ++y) {
            const T* xr = xc + (y + i - P) * W + (x0 + j - P);
            T* orow = oc + y * W + x0;
            for (std::int64_t t = 0; t < x1 - x0; ++t) orow[t] += kv * xr[t];
          }
        }
      }
    }
  // nominal dense cost (border taps counted)
  FlopTrace::add(static_cast<std::uint64_t>(2 * B * C * H * W * K * K));
  detail::mark_and_record<T>(
      {&x, &k}, out, [xn = x.node(), kn = k.node(), on = out.node(), B, C, H, W, K, P] {
        if (on->grad.empty()) return;
        const T* g = on->grad.data();
        if (xn->requires_grad) xn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = xn->data.data() + (b * C + c) * H * W;
            const T* kc = kn->data.data() + c * K * K;
            const T* gc = g + (b * C + c) * H * W;
            T* xg = xn->requires_grad ? xn->grad.data() + (b * C + c) * H * W : nullptr;
            T* kg = kn->requires_grad ? kn->grad.data() + c * K * K : nullptr;
            for (std::int64_t i = 0; i < K; ++i) {
              const std::int64_t y0 = std::max<std::int64_t>(0, P - i);
              const std::int64_t y1 = std::min<std::int64_t>(H, H + P - i);
              for (std::int64_t j = 0; j < K; ++j) {
                const std::int64_t x0 = std::max<std::int64_t>(0, P - j);
                const std::int64_t x1 = std::min<std::int64_t>(W, W + P - j);
                const T kv = kc[i * K + j];
                T tap = T(0);
                for (std::int64_t y = y0; y < y1; ++y) {
                  const std::int64_t shift = (i - P) * W + (j - P);
                  const T* grow = gc + y * W + x0;
                  const std::int64_t base = y * W + x0 + shift;
                  if (xg) {
                    T* xrow = xg + base;
                    for (std::int64_t t = 0; t < x1 - x0; ++t) xrow[t] += kv * grow[t];
                  }
                  if (kg) {
                    const T* xrow = xc + base;
                    for (std::int64_t t = 0; t < x1 - x0; ++t) tap += grow[t] * xrow[t];
                  }
                }
                if (kg) kg[i * K + j] += tap;
              }
            }
          }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, size_t axis) {
  check_shape(axis < a.rank(), "softmax: axis out of range for " + shape_str(a.shape()));
  const auto st = detail::strides_of(a.shape());
  const std::int64_t len = a.dim(axis), inner = st[axis];
  const std::int64_t outer = a.numel() / (len * inner);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* src = a.data().data();
  T* dst = out.data_mut().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const T* row = src + o * len * inner + in;
      T* orow = dst + o * len * inner + in;
      T mx = row[0];
      for (std::int64_t i = 1; i < len; ++i) mx = std::max(mx, row[i * inner]);
      T sum = T(0);
      for (std::int64_t i = 0; i < len; ++i) {
        const T e = std::exp(row[i * inner] - mx);
        orow[i * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::int64_t i = 0; i < len; ++i) orow[i * inner] *= inv;
    }
  FlopTrace::add(static_cast<std::uint64_t>(cost::kSoftmax * a.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), outer, len, inner] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t in = 0; in < inner; ++in) {
        const T* y = on->data.data() + o * len * inner + in;
        const T* gy = on->grad.data() + o * len * inner + in;
        T* gx = an->grad.data() + o * len * inner + in;
        T dot = T(0);
        for (std::int64_t i = 0; i < len; ++i) dot += y[i * inner] * gy[i * inner];
        for (std::int64_t i = 0; i < len; ++i)
          gx[i * inner] += y[i * inner] * (gy[i * inner] - dot);
      }
  });
  return out;
}

// Layer norm over the last axis; gain/bias have that axis's length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = static_cast<T>(1e-6)) {
  check_shape(x.rank() >= 1, "layer_norm: want rank >= 1");
  const std::int64_t c = x.dim(x.rank() - 1);
  check_shape(gain.rank() == 1 && gain.dim(0) == c && bias.rank() == 1 && bias.dim(0) == c,
              "layer_norm: affine shapes " + shape_str(gain.shape()) + "/" +
                  shape_str(bias.shape()) + " do not match feature dim of " +
                  shape_str(x.shape()));
  const std::int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* gp = gain.data().data();
  const T* bp = bias.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    T* orow = op + r * c;
    T mu = T(0);
    for (std::int64_t i = 0; i < c; ++i) mu += row[i];
    mu /= T(c);
    T var = T(0);
    for (std::int64_t i = 0; i < c; ++i) {
      const T d = row[i] - mu;
      var += d * d;
    }
    var /= T(c);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < c; ++i) orow[i] = (row[i] - mu) * inv * gp[i] + bp[i];
  }
  FlopTrace::add(static_cast<std::uint64_t>(cost::kLayerNorm * x.numel()));
  detail::mark_and_record<T>(
      {&x, &gain, &bias}, out,
      [xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(), rows, c, eps] {
        if (on->grad.empty()) return;
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* row = xn->data.data() + r * c;
          const T* g = on->grad.data() + r * c;
          T mu = T(0);
          for (std::int64_t i = 0; i < c; ++i) mu += row[i];
          mu /= T(c);
          T var = T(0);
          for (std::int64_t i = 0; i < c; ++i) {
            const T d = row[i] - mu;
            var += d * d;
          }
          var /= T(c);
          const T inv = T(1) / std::sqrt(var + eps);
          if (gn->requires_grad || bn->requires_grad) {
            for (std::int64_t i = 0; i < c; ++i) {
              const T xhat = (row[i] - mu) * inv;
              if (gn->requires_grad) gn->grad[i] += g[i] * xhat;
              if (bn->requires_grad) bn->grad[i] += g[i];
            }
          }
          if (xn->requires_grad) {
            T sum_gg = T(0), sum_ggx = T(0);
            for (std::int64_t i = 0; i < c; ++i) {
              const T gg = g[i] * gn->data[i];
              const T xhat = (row[i] - mu) * inv;
              sum_gg += gg;
              sum_ggx += gg * xhat;
            }
            sum_gg /= T(c);
            sum_ggx /= T(c);
            for (std::int64_t i = 0; i < c; ++i) {
              const T gg = g[i] * gn->data[i];
              const T xhat = (row[i] - mu) * inv;
              xn->grad[r * c + i] += (gg - sum_gg - xhat * sum_ggx) * inv;
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(Shape{});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  out.data_mut()[0] = acc;
  FlopTrace::add(static_cast<std::uint64_t>(a.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node()] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T g = on->grad[0];
    for (auto& v : an->grad) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / T(a.numel());
  Tensor<T> out = Tensor<T>::zeros(Shape{});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  out.data_mut()[0] = acc * inv;
  FlopTrace::add(static_cast<std::uint64_t>(a.numel()));
  detail::mark_and_record<T>({&a}, out, [an = a.node(), on = out.node(), inv] {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T g = on->grad[0] * inv;
    for (auto& v : an->grad) v += g;
  });
  return out;
}

// mean((a - b)^2) over all elements.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(), "mse_loss: shape mismatch " + shape_str(a.shape()) +
                                          " vs " + shape_str(b.shape()));
  const std::int64_t n = a.numel();
  const T inv = T(1) / T(n);
  Tensor<T> out = Tensor<T>::zeros(Shape{});
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  out.data_mut()[0] = acc * inv;
  FlopTrace::add(static_cast<std::uint64_t>(cost::kMse * n));
  detail::mark_and_record<T>({&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node(), n,
                                             inv] {
    if (on->grad.empty()) return;
    const T g = on->grad[0] * T(2) * inv;
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) an->grad[i] += g * (an->data[i] - bn->data[i]);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) bn->grad[i] -= g * (an->data[i] - bn->data[i]);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Token-structured ops (explicit broadcasts used by conditioning)
// ---------------------------------------------------------------------------

// x (B,N,C) * (1 + scale(B,C)) + shift(B,C), broadcast over tokens.
template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& sc) {
  check_shape(x.rank() == 3, "modulate: want x (B,N,C), got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  check_shape(shift.rank() == 2 && shift.dim(0) == B && shift.dim(1) == C &&
                  sc.shape() == shift.shape(),
              "modulate: conditioning shapes " + shape_str(shift.shape()) + "/" +
                  shape_str(sc.shape()) + " do not match x " + shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* sp = shift.data().data();
  const T* cp = sc.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c)
        op[(b * N + n) * C + c] =
            xp[(b * N + n) * C + c] * (T(1) + cp[b * C + c]) + sp[b * C + c];
  FlopTrace::add(static_cast<std::uint64_t>(cost::kModulate * x.numel()));
  detail::mark_and_record<T>(
      {&x, &shift, &sc}, out,
      [xn = x.node(), sn = shift.node(), cn = sc.node(), on = out.node(), B, N, C] {
        if (on->grad.empty()) return;
        const T* g = on->grad.data();
        if (xn->requires_grad) xn->ensure_grad();
        if (sn->requires_grad) sn->ensure_grad();
        if (cn->requires_grad) cn->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
              const T gv = g[(b * N + n) * C + c];
              if (xn->requires_grad)
                xn->grad[(b * N + n) * C + c] += gv * (T(1) + cn->data[b * C + c]);
              if (sn->requires_grad) sn->grad[b * C + c] += gv;
              if (cn->requires_grad)
                cn->grad[b * C + c] += gv * xn->data[(b * N + n) * C + c];
            }
      });
  return out;
}

// x (B,N,C) * g(B,C), broadcast over tokens.
template <typename T>
Tensor<T> gate_tokens(const Tensor<T>& x, const Tensor<T>& gv) {
  check_shape(x.rank() == 3, "gate_tokens: want x (B,N,C), got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  check_shape(gv.rank() == 2 && gv.dim(0) == B && gv.dim(1) == C,
              "gate_tokens: gate shape " + shape_str(gv.shape()) + " does not match x " +
                  shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* gp = gv.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c)
        op[(b * N + n) * C + c] = xp[(b * N + n) * C + c] * gp[b * C + c];
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * x.numel()));
  detail::mark_and_record<T>(
      {&x, &gv}, out, [xn = x.node(), gn = gv.node(), on = out.node(), B, N, C] {
        if (on->grad.empty()) return;
        const T* g = on->grad.data();
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
              const T gvv = g[(b * N + n) * C + c];
              if (xn->requires_grad)
                xn->grad[(b * N + n) * C + c] += gvv * gn->data[b * C + c];
              if (gn->requires_grad)
                gn->grad[b * C + c] += gvv * xn->data[(b * N + n) * C + c];
            }
      });
  return out;
}

// L2-normalize the last axis: v / (|v| + eps).
template <typename T>
Tensor<T> row_l2_normalize(const Tensor<T>& x, T eps) {
  check_shape(x.rank() >= 1, "row_l2_normalize: want rank >= 1");
  const std::int64_t c = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    T sq = T(0);
    for (std::int64_t i = 0; i < c; ++i) sq += row[i] * row[i];
    const T inv = T(1) / (std::sqrt(sq) + eps);
    for (std::int64_t i = 0; i < c; ++i) op[r * c + i] = row[i] * inv;
  }
  FlopTrace::add(static_cast<std::uint64_t>(cost::kRowNormalize * x.numel()));
  detail::mark_and_record<T>({&x}, out, [xn = x.node(), on = out.node(), rows, c, eps] {
    if (on->grad.empty()) return;
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* row = xn->data.data() + r * c;
      const T* g = on->grad.data() + r * c;
      T sq = T(0);
      for (std::int64_t i = 0; i < c; ++i) sq += row[i] * row[i];
      const T nrm = std::sqrt(sq);
      const T den = nrm + eps;
      const T inv = T(1) / den;
      // d(x_i/den)/dx_j = inv * delta_ij - x_i x_j / (nrm * den^2)
      T dot = T(0);
      for (std::int64_t i = 0; i < c; ++i) dot += g[i] * row[i];
      const T coef = (nrm > T(0)) ? dot / (nrm * den * den) : T(0);
      for (std::int64_t i = 0; i < c; ++i)
        xn->grad[r * c + i] += g[i] * inv - row[i] * coef;
    }
  });
  return out;
}

// x has leading dim G = B*H; slice g is scaled by s[g % H]. Used for per-head
// learnable logit scales with heads folded into the batch axis.
template <typename T>
Tensor<T> scale_per_head(const Tensor<T>& x, const Tensor<T>& s) {
  check_shape(x.rank() >= 1 && s.rank() == 1, "scale_per_head: want x rank >= 1, s rank 1");
  const std::int64_t G = x.dim(0), H = s.dim(0);
  check_shape(H > 0 && G % H == 0, "scale_per_head: leading dim " + std::to_string(G) +
                                       " not a multiple of head count " + std::to_string(H));
  const std::int64_t inner = x.numel() / G;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* sp = s.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t g = 0; g < G; ++g) {
    const T sv = sp[g % H];
    for (std::int64_t i = 0; i < inner; ++i) op[g * inner + i] = xp[g * inner + i] * sv;
  }
  FlopTrace::add(static_cast<std::uint64_t>(cost::kEltwise * x.numel()));
  detail::mark_and_record<T>(
      {&x, &s}, out, [xn = x.node(), sn = s.node(), on = out.node(), G, H, inner] {
        if (on->grad.empty()) return;
        const T* g = on->grad.data();
        if (xn->requires_grad) xn->ensure_grad();
        if (sn->requires_grad) sn->ensure_grad();
        for (std::int64_t gi = 0; gi < G; ++gi) {
          const T sv = sn->data[gi % H];
          for (std::int64_t i = 0; i < inner; ++i) {
            const T gv = g[gi * inner + i];
            if (xn->requires_grad) xn->grad[gi * inner + i] += gv * sv;
            if (sn->requires_grad) sn->grad[gi % H] += gv * xn->data[gi * inner + i];
          }
        }
      });
  return out;
}

// Rotate paired channels: x (G,N,D); cs/sn (N,D/2) hold per-token angles for
// pair p = (2p, 2p+1). The rotation is orthonormal so backward applies the
// transpose (inverse) rotation to the incoming gradient.
template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& x, const Tensor<T>& cs, const Tensor<T>& sn) {
  check_shape(x.rank() == 3, "rope_rotate: want x (G,N,D), got " + shape_str(x.shape()));
  const std::int64_t G = x.dim(0), N = x.dim(1), D = x.dim(2);
  check_shape(D % 2 == 0, "rope_rotate: head dim must be even, got " + shape_str(x.shape()));
  check_shape(cs.rank() == 2 && cs.dim(0) == N && cs.dim(1) == D / 2 && sn.shape() == cs.shape(),
              "rope_rotate: table shape " + shape_str(cs.shape()) + " does not match x " +
                  shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* cp = cs.data().data();
  const T* sp = sn.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t g = 0; g < G; ++g)
    for (std::int64_t n = 0; n < N; ++n) {
      const T* row = xp + (g * N + n) * D;
      T* orow = op + (g * N + n) * D;
      const T* crow = cp + n * (D / 2);
      const T* srow = sp + n * (D / 2);
      for (std::int64_t p = 0; p < D / 2; ++p) {
        const T a = row[2 * p], b = row[2 * p + 1];
        orow[2 * p] = a * crow[p] - b * srow[p];
        orow[2 * p + 1] = a * srow[p] + b * crow[p];
      }
    }
  FlopTrace::add(static_cast<std::uint64_t>(cost::kRope * x.numel()));
  detail::mark_and_record<T>(
      {&x}, out, [xn = x.node(), cn = cs.node(), snn = sn.node(), on = out.node(), G, N, D] {
        if (on->grad.empty()) return;
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* g = on->grad.data();
        for (std::int64_t gi = 0; gi < G; ++gi)
          for (std::int64_t n = 0; n < N; ++n) {
            const T* grow = g + (gi * N + n) * D;
            T* xg = xn->grad.data() + (gi * N + n) * D;
            const T* crow = cn->data.data() + n * (D / 2);
            const T* srow = snn->data.data() + n * (D / 2);
            for (std::int64_t p = 0; p < D / 2; ++p) {
              const T da = grow[2 * p], db = grow[2 * p + 1];
              xg[2 * p] += da * crow[p] + db * srow[p];
              xg[2 * p + 1] += -da * srow[p] + db * crow[p];
            }
          }
      });
  return out;
}

// Row gather: table (V,E), ids length B -> (B,E). Backward scatter-adds.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& ids) {
  check_shape(table.rank() == 2, "embedding: want table (V,E), got " + shape_str(table.shape()));
  const std::int64_t V = table.dim(0), E = table.dim(1);
  for (auto id : ids)
    check_shape(id >= 0 && id < V, "embedding: id " + std::to_string(id) +
                                       " out of range for table " + shape_str(table.shape()));
  const std::int64_t B = static_cast<std::int64_t>(ids.size());
  Tensor<T> out = Tensor<T>::zeros({B, E});
  const T* tp = table.data().data();
  T* op = out.data_mut().data();
  for (std::int64_t b = 0; b < B; ++b)
    std::copy(tp + ids[b] * E, tp + (ids[b] + 1) * E, op + b * E);
  detail::mark_and_record<T>({&table}, out, [tn = table.node(), on = out.node(), ids, E] {
    if (on->grad.empty()) return;
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t b = 0; b < ids.size(); ++b) {
      const T* g = on->grad.data() + b * E;
      T* tg = tn->grad.data() + ids[b] * E;
      for (std::int64_t i = 0; i < E; ++i) tg[i] += g[i];
    }
  });
  return out;
}

}  // namespace udit
