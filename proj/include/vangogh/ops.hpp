#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <vector>

#include "vangogh/autograd.hpp"

namespace vangogh {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    require(da == db || da == 1 || db == 1, Errc::shape_mismatch,
            "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `in` expressed in the index space of `out`; broadcast
// dimensions get stride 0.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const size_t r = out.size();
  std::vector<int64_t> s(r, 0);
  int64_t stride = 1;
  for (size_t k = 0; k < in.size(); ++k) {
    const size_t i = in.size() - 1 - k;
    const size_t o = r - 1 - k;
    s[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return s;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
  const int64_t n = shape_numel(out);
  const int r = static_cast<int>(out.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  const int64_t inner = out[r - 1], ia = sa[r - 1], ib = sb[r - 1];
  if (inner == 0) return;
  for (int64_t i = 0; i < n; i += inner) {
    for (int64_t j = 0; j < inner; ++j) f(i + j, oa + j * ia, ob + j * ib);
    for (int d = r - 2; d >= 0; --d) {
      oa += sa[d];
      ob += sb[d];
      if (++idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

// Binary op with numpy-style broadcasting. `da`/`db` return the partial
// derivative of the output with respect to each operand given (x, y, out).
template <class T, class F, class DA, class DB>
Var<T> binary_op(const Var<T>& a, const Var<T>& b, F f, DA da, DB db) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() == B.shape()) {
    Tensor<T> out(A.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(A[i], B[i]);
    return make_op<T>(std::move(out), {a, b}, [da, db](Node<T>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      const T* g = self.grad.data();
      const auto& X = na.value;
      const auto& Y = nb.value;
      const auto& O = self.value;
      if (T* ga = na.grad_buffer())
        for (int64_t i = 0; i < O.numel(); ++i) ga[i] += g[i] * da(X[i], Y[i], O[i]);
      if (T* gb = nb.grad_buffer())
        for (int64_t i = 0; i < O.numel(); ++i) gb[i] += g[i] * db(X[i], Y[i], O[i]);
    });
  }
  const Shape os = detail::broadcast_shape(A.shape(), B.shape());
  auto sa = detail::broadcast_strides(A.shape(), os);
  auto sb = detail::broadcast_strides(B.shape(), os);
  Tensor<T> out(os);
  detail::for_each_broadcast(os, sa, sb,
                             [&](int64_t i, int64_t ia, int64_t ib) { out[i] = f(A[ia], B[ib]); });
  return make_op<T>(std::move(out), {a, b}, [da, db, sa, sb](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const T* g = self.grad.data();
    const auto& X = na.value;
    const auto& Y = nb.value;
    const auto& O = self.value;
    T* ga = na.grad_buffer();
    T* gb = nb.grad_buffer();
    detail::for_each_broadcast(O.shape(), sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
      if (ga) ga[ia] += g[i] * da(X[ia], Y[ib], O[i]);
      if (gb) gb[ib] += g[i] * db(X[ia], Y[ib], O[i]);
    });
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <class T, class F, class D>
Var<T> unary_op(const Var<T>& x, F f, D d) {
  const auto& X = x.value();
  Tensor<T> out(X.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(X[i]);
  return make_op<T>(std::move(out), {x}, [d](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    const T* g = self.grad.data();
    const auto& X = nx.value;
    const auto& O = self.value;
    for (int64_t i = 0; i < O.numel(); ++i) gx[i] += g[i] * d(X[i], O[i]);
  });
}

template <class T>
Var<T> operator*(const Var<T>& a, T s) {
  return unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}
template <class T>
Var<T> operator*(T s, const Var<T>& a) {
  return a * s;
}
template <class T>
Var<T> operator+(const Var<T>& a, T s) {
  return unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}
template <class T>
Var<T> operator+(T s, const Var<T>& a) {
  return a + s;
}
template <class T>
Var<T> operator-(const Var<T>& a, T s) {
  return a + (-s);
}
template <class T>
Var<T> operator/(const Var<T>& a, T s) {
  return a * (T(1) / s);
}
template <class T>
Var<T> operator-(T s, const Var<T>& a) {
  return unary_op(a, [s](T x) { return s - x; }, [](T, T) { return T(-1); });
}
template <class T>
Var<T> operator-(const Var<T>& a) {
  return a * T(-1);
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return unary_op(x, [](T v) { return std::exp(v); }, [](T, T o) { return o; });
}
template <class T>
Var<T> log(const Var<T>& x) {
  return unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <class T>
Var<T> sqrt(const Var<T>& x) {
  return unary_op(x, [](T v) { return std::sqrt(v); }, [](T, T o) { return T(0.5) / o; });
}
template <class T>
Var<T> square(const Var<T>& x) {
  return unary_op(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
template <class T>
Var<T> tanh(const Var<T>& x) {
  return unary_op(x, [](T v) { return std::tanh(v); }, [](T, T o) { return T(1) - o * o; });
}
template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T o) { return o * (T(1) - o); });
}
template <class T>
Var<T> relu(const Var<T>& x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <class T>
Var<T> silu(const Var<T>& x) {
  return unary_op(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}
// tanh approximation
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T c = T(0.7978845608028654);
  constexpr T k = T(0.044715);
  return unary_op(
      x, [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); },
      [](T v, T) {
        const T u = c * (v + k * v * v * v);
        const T t = std::tanh(u);
        const T du = c * (T(1) + T(3) * k * v * v);
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value().span()) s += v;
  return make_op<T>(Tensor<T>::scalar(s), {x}, [](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    const T g = self.grad[0];
    for (int64_t i = 0; i < nx.value.numel(); ++i) gx[i] += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return sum(x) * (T(1) / static_cast<T>(x.numel()));
}

namespace detail {
struct AxisSplit {
  int64_t outer, len, inner;
};
inline AxisSplit split_axis(const Shape& s, int64_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (int64_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
inline Shape reduced_shape(const Shape& s, int64_t axis, bool keepdim) {
  Shape r = s;
  if (keepdim)
    r[axis] = 1;
  else
    r.erase(r.begin() + axis);
  return r;
}
}  // namespace detail

template <class T>
Var<T> sum(const Var<T>& x, int64_t axis, bool keepdim = false) {
  axis = normalize_axis(axis, x.dim());
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor<T> out(detail::reduced_shape(x.shape(), axis, keepdim));
  const auto& X = x.value();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t l = 0; l < sp.len; ++l)
      for (int64_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += X[(o * sp.len + l) * sp.inner + i];
  return make_op<T>(std::move(out), {x}, [sp](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    const T* g = self.grad.data();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t l = 0; l < sp.len; ++l)
        for (int64_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

template <class T>
Var<T> mean(const Var<T>& x, int64_t axis, bool keepdim = false) {
  axis = normalize_axis(axis, x.dim());
  return sum(x, axis, keepdim) * (T(1) / static_cast<T>(x.size(axis)));
}

namespace detail {
template <class T, class Better>
Var<T> arg_reduce(const Var<T>& x, int64_t axis, bool keepdim, Better better) {
  axis = normalize_axis(axis, x.dim());
  const auto sp = split_axis(x.shape(), axis);
  require(sp.len > 0, Errc::shape_mismatch, "reduction over empty axis");
  Tensor<T> out(reduced_shape(x.shape(), axis, keepdim));
  std::vector<int64_t> arg(static_cast<size_t>(sp.outer * sp.inner));
  const auto& X = x.value();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      int64_t best = (o * sp.len) * sp.inner + i;
      for (int64_t l = 1; l < sp.len; ++l) {
        const int64_t k = (o * sp.len + l) * sp.inner + i;
        if (better(X[k], X[best])) best = k;
      }
      out[o * sp.inner + i] = X[best];
      arg[o * sp.inner + i] = best;
    }
  return make_op<T>(std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    for (size_t j = 0; j < arg.size(); ++j) gx[arg[j]] += self.grad[static_cast<int64_t>(j)];
  });
}
}  // namespace detail

// Gradient flows to the first extremal element along the axis.
template <class T>
Var<T> max(const Var<T>& x, int64_t axis, bool keepdim = false) {
  return detail::arg_reduce(x, axis, keepdim, [](T a, T b) { return a > b; });
}
template <class T>
Var<T> min(const Var<T>& x, int64_t axis, bool keepdim = false) {
  return detail::arg_reduce(x, axis, keepdim, [](T a, T b) { return a < b; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  for (auto& d : s)
    if (d == -1) {
      int64_t known = 1;
      for (auto e : s)
        if (e != -1) known *= e;
      d = x.numel() / known;
    }
  Tensor<T> out = x.value().reshape(std::move(s));
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    for (int64_t i = 0; i < self.value.numel(); ++i) gx[i] += self.grad[i];
  });
}

template <class T>
Var<T> permute(const Var<T>& x, const std::vector<int64_t>& dims) {
  const Shape& in = x.shape();
  require(dims.size() == in.size(), Errc::shape_mismatch, "permute rank mismatch");
  Shape os(in.size());
  const auto ist = detail::contiguous_strides(in);
  std::vector<int64_t> src(in.size());
  for (size_t i = 0; i < dims.size(); ++i) {
    os[i] = in[dims[i]];
    src[i] = ist[dims[i]];
  }
  const std::vector<int64_t> zero(in.size(), 0);
  Tensor<T> out(os);
  const auto& X = x.value();
  detail::for_each_broadcast(os, src, zero, [&](int64_t i, int64_t s, int64_t) { out[i] = X[s]; });
  return make_op<T>(std::move(out), {x}, [src, zero](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    detail::for_each_broadcast(self.value.shape(), src, zero,
                               [&](int64_t i, int64_t s, int64_t) { gx[s] += self.grad[i]; });
  });
}

template <class T>
Var<T> transpose(const Var<T>& x, int64_t a, int64_t b) {
  std::vector<int64_t> dims(x.dim());
  std::iota(dims.begin(), dims.end(), 0);
  std::swap(dims[normalize_axis(a, x.dim())], dims[normalize_axis(b, x.dim())]);
  return permute(x, dims);
}

template <class T>
Var<T> slice(const Var<T>& x, int64_t axis, int64_t start, int64_t len) {
  axis = normalize_axis(axis, x.dim());
  require(start >= 0 && len >= 0 && start + len <= x.size(axis), Errc::shape_mismatch,
          "slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
              ") out of range for " + shape_str(x.shape()));
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape os = x.shape();
  os[axis] = len;
  Tensor<T> out(os);
  const auto& X = x.value();
  for (int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(X.data() + (o * sp.len + start) * sp.inner, len * sp.inner,
                out.data() + o * len * sp.inner);
  return make_op<T>(std::move(out), {x}, [sp, start, len](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t k = 0; k < len * sp.inner; ++k)
        gx[(o * sp.len + start) * sp.inner + k] += self.grad[o * len * sp.inner + k];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, int64_t axis) {
  require(!xs.empty(), Errc::shape_mismatch, "concat of nothing");
  axis = normalize_axis(axis, xs[0].dim());
  Shape os = xs[0].shape();
  os[axis] = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    require(s.size() == os.size(), Errc::shape_mismatch, "concat rank mismatch");
    for (size_t d = 0; d < s.size(); ++d)
      if (static_cast<int64_t>(d) != axis)
        require(s[d] == os[d], Errc::shape_mismatch,
                "concat shape mismatch " + shape_str(s) + " vs " + shape_str(xs[0].shape()));
    os[axis] += s[axis];
  }
  const auto sp = detail::split_axis(os, axis);
  Tensor<T> out(os);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t len = x.size(axis);
    offsets.push_back(off);
    for (int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.value().data() + o * len * sp.inner, len * sp.inner,
                  out.data() + (o * sp.len + off) * sp.inner);
    off += len;
  }
  return make_op<T>(std::move(out), xs, [sp, offsets](Node<T>& self) {
    for (size_t k = 0; k < self.inputs.size(); ++k) {
      auto& nx = *self.inputs[k];
      T* gx = nx.grad_buffer();
      if (!gx) continue;
      const int64_t len = nx.value.numel() / (sp.outer * sp.inner);
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t j = 0; j < len * sp.inner; ++j)
          gx[o * len * sp.inner + j] += self.grad[(o * sp.len + offsets[k]) * sp.inner + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] with identical batch dims.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.dim() >= 2 && b.dim() >= 2, Errc::shape_mismatch, "matmul needs rank >= 2");
  const int64_t M = a.size(-2), K = a.size(-1), N = b.size(-1);
  require(b.size(-2) == K, Errc::shape_mismatch,
          "matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool shared_b = b.dim() == 2;
  int64_t batch = 1;
  for (int64_t i = 0; i + 2 < a.dim(); ++i) batch *= a.size(i);
  if (!shared_b) {
    require(a.dim() == b.dim(), Errc::shape_mismatch, "matmul batch rank mismatch");
    for (int64_t i = 0; i + 2 < a.dim(); ++i)
      require(a.size(i) == b.size(i), Errc::shape_mismatch, "matmul batch dims differ");
  }
  Shape os = a.shape();
  os.back() = N;
  Tensor<T> out(os);
  using detail::ConstMatMap;
  using detail::MatMap;
  if (shared_b) {
    MatMap<T>(out.data(), batch * M, N).noalias() =
        ConstMatMap<T>(a.value().data(), batch * M, K) * ConstMatMap<T>(b.value().data(), K, N);
  } else {
    for (int64_t s = 0; s < batch; ++s)
      MatMap<T>(out.data() + s * M * N, M, N).noalias() =
          ConstMatMap<T>(a.value().data() + s * M * K, M, K) *
          ConstMatMap<T>(b.value().data() + s * K * N, K, N);
  }
  return make_op<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    T* ga = na.grad_buffer();
    T* gb = nb.grad_buffer();
    const T* g = self.grad.data();
    if (shared_b) {
      ConstMatMap<T> G(g, batch * M, N);
      if (ga)
        MatMap<T>(ga, batch * M, K).noalias() += G * ConstMatMap<T>(nb.value.data(), K, N).transpose();
      if (gb)
        MatMap<T>(gb, K, N).noalias() +=
            ConstMatMap<T>(na.value.data(), batch * M, K).transpose() * G;
    } else {
      for (int64_t s = 0; s < batch; ++s) {
        ConstMatMap<T> G(g + s * M * N, M, N);
        if (ga)
          MatMap<T>(ga + s * M * K, M, K).noalias() +=
              G * ConstMatMap<T>(nb.value.data() + s * K * N, K, N).transpose();
        if (gb)
          MatMap<T>(gb + s * K * N, K, N).noalias() +=
              ConstMatMap<T>(na.value.data() + s * M * K, M, K).transpose() * G;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation and attention primitives

template <class T>
Var<T> softmax(const Var<T>& x) {
  const int64_t n = x.size(-1);
  const int64_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  const auto& X = x.value();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = X.data() + r * n;
    T* yi = out.data() + r * n;
    T m = *std::max_element(xi, xi + n);
    T s = T(0);
    for (int64_t j = 0; j < n; ++j) s += (yi[j] = std::exp(xi[j] - m));
    for (int64_t j = 0; j < n; ++j) yi[j] /= s;
  }
  return make_op<T>(std::move(out), {x}, [n, rows](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = T(0);
      for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (int64_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

// Zero-mean, unit-variance normalisation over the last axis (no affine).
template <class T>
Var<T> normalize_last(const Var<T>& x, T eps = T(1e-5)) {
  const int64_t n = x.size(-1);
  const int64_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const auto& X = x.value();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = X.data() + r * n;
    T mu = T(0);
    for (int64_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (int64_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = (xi[j] - mu) * is;
  }
  return make_op<T>(std::move(out), {x}, [n, rows, inv_std = std::move(inv_std)](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T mg = T(0), mgy = T(0);
      for (int64_t j = 0; j < n; ++j) {
        mg += g[j];
        mgy += g[j] * y[j];
      }
      mg /= static_cast<T>(n);
      mgy /= static_cast<T>(n);
      for (int64_t j = 0; j < n; ++j) gx[r * n + j] += inv_std[r] * (g[j] - mg - y[j] * mgy);
    }
  });
}

// Rows of `table` selected by `ids`: [L, D].
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int64_t>& ids) {
  const int64_t D = table.size(1);
  Tensor<T> out({static_cast<int64_t>(ids.size()), D});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.value().data() + ids[i] * D, D, out.data() + static_cast<int64_t>(i) * D);
  return make_op<T>(std::move(out), {table}, [ids, D](Node<T>& self) {
    auto& nt = *self.inputs[0];
    T* gt = nt.grad_buffer();
    if (!gt) return;
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t d = 0; d < D; ++d) gt[ids[i] * D + d] += self.grad[static_cast<int64_t>(i) * D + d];
  });
}

// ---------------------------------------------------------------------------
// Spatial ops on NCHW tensors

namespace detail {
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride, int64_t pad,
            int64_t Ho, int64_t Wo, T* cols) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            row[oy * Wo + ox] =
                (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride, int64_t pad,
            int64_t Ho, int64_t Wo, T* x) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) x[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}
}  // namespace detail

// x: [N, C, H, W]; weight: [O, C, k, k]; bias: [O] or undefined. Zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int64_t stride,
              int64_t pad) {
  require(x.dim() == 4 && weight.dim() == 4, Errc::shape_mismatch, "conv2d expects NCHW input");
  const int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const int64_t O = weight.size(0), k = weight.size(2);
  require(weight.size(1) == C, Errc::shape_mismatch,
          "conv2d channel mismatch: input " + shape_str(x.shape()) + " weight " +
              shape_str(weight.shape()));
  const int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const int64_t Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho > 0 && Wo > 0, Errc::shape_mismatch, "conv2d output would be empty");
  const int64_t CK = C * k * k, P = Ho * Wo;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  const bool has_bias = bias.defined();

  using detail::ConstMatMap;
  using detail::MatMap;
  Tensor<T> out({N, O, Ho, Wo});
  std::vector<T> cols(pointwise ? 0 : static_cast<size_t>(CK * P));
  ConstMatMap<T> Wm(weight.value().data(), O, CK);
  for (int64_t n = 0; n < N; ++n) {
    const T* xn = x.value().data() + n * C * H * W;
    const T* colp = xn;
    if (!pointwise) {
      detail::im2col(xn, C, H, W, k, stride, pad, Ho, Wo, cols.data());
      colp = cols.data();
    }
    MatMap<T> On(out.data() + n * O * P, O, P);
    On.noalias() = Wm * ConstMatMap<T>(colp, CK, P);
    if (has_bias)
      for (int64_t o = 0; o < O; ++o) On.row(o).array() += bias.value()[o];
  }
  std::vector<Var<T>> ins{x, weight};
  if (has_bias) ins.push_back(bias);
  return make_op<T>(std::move(out), ins, [=](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    T* gx = nx.grad_buffer();
    T* gw = nw.grad_buffer();
    T* gb = has_bias ? self.inputs[2]->grad_buffer() : nullptr;
    ConstMatMap<T> Wm(nw.value.data(), O, CK);
    std::vector<T> cols(pointwise ? 0 : static_cast<size_t>(CK * P));
    std::vector<T> dcols(pointwise ? 0 : static_cast<size_t>(CK * P));
    for (int64_t n = 0; n < N; ++n) {
      ConstMatMap<T> G(self.grad.data() + n * O * P, O, P);
      const T* xn = nx.value.data() + n * C * H * W;
      if (gw) {
        const T* colp = xn;
        if (!pointwise) {
          detail::im2col(xn, C, H, W, k, stride, pad, Ho, Wo, cols.data());
          colp = cols.data();
        }
        MatMap<T>(gw, O, CK).noalias() += G * ConstMatMap<T>(colp, CK, P).transpose();
      }
      if (gx) {
        if (pointwise) {
          MatMap<T>(gx + n * C * H * W, CK, P).noalias() += Wm.transpose() * G;
        } else {
          MatMap<T>(dcols.data(), CK, P).noalias() = Wm.transpose() * G;
          detail::col2im(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, gx + n * C * H * W);
        }
      }
      if (gb)
        for (int64_t o = 0; o < O; ++o) gb[o] += G.row(o).sum();
    }
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const int64_t NC = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  Tensor<T> out({x.size(0), x.size(1), 2 * H, 2 * W});
  const auto& X = x.value();
  for (int64_t p = 0; p < NC; ++p)
    for (int64_t y = 0; y < 2 * H; ++y)
      for (int64_t xx = 0; xx < 2 * W; ++xx)
        out[(p * 2 * H + y) * 2 * W + xx] = X[(p * H + y / 2) * W + xx / 2];
  return make_op<T>(std::move(out), {x}, [NC, H, W](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    for (int64_t p = 0; p < NC; ++p)
      for (int64_t y = 0; y < 2 * H; ++y)
        for (int64_t xx = 0; xx < 2 * W; ++xx)
          gx[(p * H + y / 2) * W + xx / 2] += self.grad[(p * 2 * H + y) * 2 * W + xx];
  });
}

// 2x2 mean pooling; a trailing odd row/column is dropped.
template <class T>
Var<T> avg_pool2x(const Var<T>& x) {
  const int64_t NC = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  const int64_t Ho = H / 2, Wo = W / 2;
  require(Ho > 0 && Wo > 0, Errc::shape_mismatch, "avg_pool2x on " + shape_str(x.shape()));
  Tensor<T> out({x.size(0), x.size(1), Ho, Wo});
  const auto& X = x.value();
  for (int64_t p = 0; p < NC; ++p)
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t xx = 0; xx < Wo; ++xx) {
        const T* r0 = X.data() + (p * H + 2 * y) * W + 2 * xx;
        out[(p * Ho + y) * Wo + xx] = T(0.25) * (r0[0] + r0[1] + r0[W] + r0[W + 1]);
      }
  return make_op<T>(std::move(out), {x}, [NC, H, W, Ho, Wo](Node<T>& self) {
    auto& nx = *self.inputs[0];
    T* gx = nx.grad_buffer();
    if (!gx) return;
    for (int64_t p = 0; p < NC; ++p)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t xx = 0; xx < Wo; ++xx) {
          const T g = T(0.25) * self.grad[(p * Ho + y) * Wo + xx];
          T* r0 = gx + (p * H + 2 * y) * W + 2 * xx;
          r0[0] += g;
          r0[1] += g;
          r0[W] += g;
          r0[W + 1] += g;
        }
  });
}

// Pads the two trailing axes by `p` on every side, repeating edge values.
template <class T>
Var<T> pad_replicate(const Var<T>& x, int64_t p) {
  const int64_t H = x.size(-2), W = x.size(-1), outer = x.numel() / (H * W);
  const int64_t Ho = H + 2 * p, Wo = W + 2 * p;
  Shape os = x.shape();
  os[os.size() - 2] = Ho;
  os[os.size() - 1] = Wo;
  auto src = [=](int64_t y, int64_t xx) {
    return std::clamp<int64_t>(y - p, 0, H - 1) * W + std::clamp<int64_t>(xx - p, 0, W - 1);
  };
  Tensor<T> out(os);
  const auto& X = x.value();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t xx = 0; xx < Wo; ++xx) out[(o * Ho + y) * Wo + xx] = X[o * H * W + src(y, xx)];
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t xx = 0; xx < Wo; ++xx) gx[o * H * W + src(y, xx)] += self.grad[(o * Ho + y) * Wo + xx];
  });
}

// Samples img [C, H, W] at (x + u, y + v) with bilinear interpolation;
// coordinates are clamped to the image (border replication). u, v: [H, W].
template <class T>
Var<T> warp_bilinear(const Var<T>& img, const Var<T>& u, const Var<T>& v) {
  const int64_t C = img.size(0), H = img.size(1), W = img.size(2);
  require(u.shape() == Shape({H, W}) && v.shape() == Shape({H, W}), Errc::shape_mismatch,
          "warp flow shape must be (H, W)");
  struct Tap {
    int64_t x0, x1, y0, y1;
    T fx, fy;
    bool in_x, in_y;
  };
  std::vector<Tap> taps(static_cast<size_t>(H * W));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const int64_t p = y * W + x;
      const T px = static_cast<T>(x) + u.value()[p];
      const T py = static_cast<T>(y) + v.value()[p];
      const T cx = std::clamp(px, T(0), static_cast<T>(W - 1));
      const T cy = std::clamp(py, T(0), static_cast<T>(H - 1));
      Tap t;
      t.x0 = static_cast<int64_t>(std::floor(cx));
      t.y0 = static_cast<int64_t>(std::floor(cy));
      t.x1 = std::min(t.x0 + 1, W - 1);
      t.y1 = std::min(t.y0 + 1, H - 1);
      t.fx = cx - static_cast<T>(t.x0);
      t.fy = cy - static_cast<T>(t.y0);
      t.in_x = px >= T(0) && px <= static_cast<T>(W - 1);
      t.in_y = py >= T(0) && py <= static_cast<T>(H - 1);
      taps[p] = t;
    }
  Tensor<T> out({C, H, W});
  const auto& I = img.value();
  for (int64_t c = 0; c < C; ++c) {
    const T* ic = I.data() + c * H * W;
    for (int64_t p = 0; p < H * W; ++p) {
      const Tap& t = taps[p];
      out[c * H * W + p] = (T(1) - t.fy) * ((T(1) - t.fx) * ic[t.y0 * W + t.x0] + t.fx * ic[t.y0 * W + t.x1]) +
                           t.fy * ((T(1) - t.fx) * ic[t.y1 * W + t.x0] + t.fx * ic[t.y1 * W + t.x1]);
    }
  }
  return make_op<T>(std::move(out), {img, u, v}, [C, H, W, taps = std::move(taps)](Node<T>& self) {
    auto& ni = *self.inputs[0];
    T* gi = ni.grad_buffer();
    T* gu = self.inputs[1]->grad_buffer();
    T* gv = self.inputs[2]->grad_buffer();
    const auto& I = ni.value;
    for (int64_t c = 0; c < C; ++c) {
      const T* ic = I.data() + c * H * W;
      for (int64_t p = 0; p < H * W; ++p) {
        const Tap& t = taps[p];
        const T g = self.grad[c * H * W + p];
        if (gi) {
          T* gc = gi + c * H * W;
          gc[t.y0 * W + t.x0] += g * (T(1) - t.fy) * (T(1) - t.fx);
          gc[t.y0 * W + t.x1] += g * (T(1) - t.fy) * t.fx;
          gc[t.y1 * W + t.x0] += g * t.fy * (T(1) - t.fx);
          gc[t.y1 * W + t.x1] += g * t.fy * t.fx;
        }
        const T a = ic[t.y0 * W + t.x0], b = ic[t.y0 * W + t.x1];
        const T cc = ic[t.y1 * W + t.x0], d = ic[t.y1 * W + t.x1];
        if (gu && t.in_x && t.x1 != t.x0) gu[p] += g * ((T(1) - t.fy) * (b - a) + t.fy * (d - cc));
        if (gv && t.in_y && t.y1 != t.y0) gv[p] += g * ((T(1) - t.fx) * (cc - a) + t.fx * (d - b));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Composite helpers

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), Errc::shape_mismatch,
          "mse operands " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return mean(square(a - b));
}

}  // namespace vangogh
