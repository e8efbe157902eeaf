#pragma once

#include <algorithm>
#include <cmath>

#include "tsubf/tensor.hpp"

// Differentiable tensor ops. Every op computes its output eagerly and, when
// any input is tracked on a tape, records a pull closure that routes the
// output gradient to the inputs. No broadcasting beyond scalar-tensor; shape
// alignment is explicit.

namespace tsubf {

template <class T>
inline void check_same_shape(const char* op, const Tensor<T>& a,
                             const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// ---------------------------------------------------------------- elementwise

template <class T, class F, class DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  const T* x = a.data();
  T* y = out.data();
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) y[i] = f(x[i]);
  if (Tape<T>* tp = tape_of<T>({&a})) {
    auto aid = a.id();
    Tensor<T> av = a, yv = out;
    tp->record(name, {aid}, out,
               [aid, av, yv, df](Tape<T>& t, const Tensor<T>& g) {
                 Tensor<T> ga(av.shape());
                 const T* x = av.data();
                 const T* y = yv.data();
                 const T* gp = g.data();
                 T* o = ga.data();
                 for (long long i = 0; i < av.size(); ++i)
                   o[i] = gp[i] * df(x[i], y[i]);
                 t.add_grad(aid, ga);
               });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  for (long long i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] + b.data()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    auto aid = a.id(), bid = b.id();
    tp->record("add", {aid, bid}, out,
               [aid, bid](Tape<T>& t, const Tensor<T>& g) {
                 t.add_grad(aid, g);
                 t.add_grad(bid, g);
               });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  for (long long i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    auto aid = a.id(), bid = b.id();
    tp->record("sub", {aid, bid}, out,
               [aid, bid](Tape<T>& t, const Tensor<T>& g) {
                 t.add_grad(aid, g);
                 if (bid >= 0) {
                   Tensor<T> ng(g.shape());
                   for (long long i = 0; i < g.size(); ++i)
                     ng.data()[i] = -g.data()[i];
                   t.add_grad(bid, ng);
                 }
               });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (long long i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    auto aid = a.id(), bid = b.id();
    Tensor<T> av = a, bv = b;
    tp->record("mul", {aid, bid}, out,
               [aid, bid, av, bv](Tape<T>& t, const Tensor<T>& g) {
                 if (aid >= 0) {
                   Tensor<T> ga(av.shape());
                   for (long long i = 0; i < av.size(); ++i)
                     ga.data()[i] = g.data()[i] * bv.data()[i];
                   t.add_grad(aid, ga);
                 }
                 if (bid >= 0) {
                   Tensor<T> gb(bv.shape());
                   for (long long i = 0; i < bv.size(); ++i)
                     gb.data()[i] = g.data()[i] * av.data()[i];
                   t.add_grad(bid, gb);
                 }
               });
  }
  return out;
}

template <class T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("divide", a, b);
  Tensor<T> out(a.shape());
  for (long long i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] / b.data()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    auto aid = a.id(), bid = b.id();
    Tensor<T> av = a, bv = b;
    tp->record("divide", {aid, bid}, out,
               [aid, bid, av, bv](Tape<T>& t, const Tensor<T>& g) {
                 if (aid >= 0) {
                   Tensor<T> ga(av.shape());
                   for (long long i = 0; i < av.size(); ++i)
                     ga.data()[i] = g.data()[i] / bv.data()[i];
                   t.add_grad(aid, ga);
                 }
                 if (bid >= 0) {
                   Tensor<T> gb(bv.shape());
                   for (long long i = 0; i < bv.size(); ++i) {
                     const T d = bv.data()[i];
                     gb.data()[i] = -g.data()[i] * av.data()[i] / (d * d);
                   }
                   t.add_grad(bid, gb);
                 }
               });
  }
  return out;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      "mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary_op(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(
      "log", a, [](T x) { return std::log(x); },
      [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary_op(
      "abs", a, [](T x) { return std::fabs(x); },
      [](T x, T) { return x < 0 ? T(-1) : T(1); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return unary_op(
      "leaky_relu", a, [slope](T x) { return x >= 0 ? x : slope * x; },
      [slope](T x, T) { return x >= 0 ? T(1) : slope; });
}

// -------------------------------------------------------------------- matmul

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out({M, N});
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k) {
      const T aik = ap[i * K + k];
      const T* brow = bp + static_cast<long long>(k) * N;
      T* orow = op + static_cast<long long>(i) * N;
      for (int j = 0; j < N; ++j) orow[j] += aik * brow[j];
    }
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    auto aid = a.id(), bid = b.id();
    Tensor<T> av = a, bv = b;
    tp->record("matmul", {aid, bid}, out,
               [aid, bid, av, bv, M, K, N](Tape<T>& t, const Tensor<T>& g) {
                 const T* gp = g.data();
                 if (aid >= 0) {
                   // gA = g . B^T
                   Tensor<T> ga({M, K});
                   const T* bp = bv.data();
                   for (int i = 0; i < M; ++i)
                     for (int k = 0; k < K; ++k) {
                       T s = 0;
                       for (int j = 0; j < N; ++j)
                         s += gp[i * N + j] * bp[k * N + j];
                       ga.data()[i * K + k] = s;
                     }
                   t.add_grad(aid, ga);
                 }
                 if (bid >= 0) {
                   // gB = A^T . g
                   Tensor<T> gb({K, N});
                   const T* ap = av.data();
                   for (int k = 0; k < K; ++k)
                     for (int i = 0; i < M; ++i) {
                       const T aik = ap[i * K + k];
                       for (int j = 0; j < N; ++j)
                         gb.data()[k * N + j] += aik * gp[i * N + j];
                     }
                   t.add_grad(bid, gb);
                 }
               });
  }
  return out;
}

// ------------------------------------------------------- reshape and movement

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  Tensor<T> out(shape, a.vec());
  if (Tape<T>* tp = tape_of<T>({&a})) {
    auto aid = a.id();
    Shape in_shape = a.shape();
    tp->record("reshape", {aid}, out,
               [aid, in_shape](Tape<T>& t, const Tensor<T>& g) {
                 t.add_grad(aid, Tensor<T>(in_shape, g.vec()));
               });
  }
  return out;
}

namespace detail {
template <class T>
Tensor<T> permute_data(const Tensor<T>& a, const std::vector<int>& axes) {
  const int nd = a.ndim();
  Shape os(nd);
  for (int i = 0; i < nd; ++i) os[i] = a.dim(axes[i]);
  Tensor<T> out(os);
  auto ist = row_major_strides(a.shape());
  auto ost = row_major_strides(os);
  const T* src = a.data();
  T* dst = out.data();
  const long long n = a.size();
  std::vector<long long> map(nd);  // output axis -> input stride
  for (int i = 0; i < nd; ++i) map[i] = ist[axes[i]];
  std::vector<int> idx(nd, 0);
  long long src_off = 0;
  for (long long o = 0; o < n; ++o) {
    dst[o] = src[src_off];
    for (int ax = nd - 1; ax >= 0; --ax) {
      if (++idx[ax] < os[ax]) {
        src_off += map[ax];
        break;
      }
      src_off -= map[ax] * (os[ax] - 1);
      idx[ax] = 0;
    }
  }
  return out;
}
}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> axes) {
  const int nd = a.ndim();
  if (static_cast<int>(axes.size()) != nd)
    throw ShapeError("permute: axes size " + std::to_string(axes.size()) +
                     " != ndim " + std::to_string(nd));
  std::vector<bool> seen(nd, false);
  for (int ax : axes) {
    if (ax < 0 || ax >= nd || seen[ax])
      throw ShapeError("permute: invalid axis list");
    seen[ax] = true;
  }
  Tensor<T> out = detail::permute_data(a, axes);
  if (Tape<T>* tp = tape_of<T>({&a})) {
    auto aid = a.id();
    std::vector<int> inv(nd);
    for (int i = 0; i < nd; ++i) inv[axes[i]] = i;
    tp->record("permute", {aid}, out,
               [aid, inv](Tape<T>& t, const Tensor<T>& g) {
                 t.add_grad(aid, detail::permute_data(g, inv));
               });
  }
  return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
  const int nd = a.ndim();
  if (axis < 0 || axis >= nd) throw ShapeError("slice: axis out of range");
  if (start < 0 || len < 0 || start + len > a.dim(axis))
    throw ShapeError("slice: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(a.dim(axis)));
  Shape os = a.shape();
  os[axis] = len;
  Tensor<T> out(os);
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  const long long in_l = a.dim(axis);
  const T* src = a.data();
  T* dst = out.data();
  for (long long o = 0; o < outer; ++o)
    for (int l = 0; l < len; ++l)
      std::copy_n(src + (o * in_l + start + l) * inner, inner,
                  dst + (o * len + l) * inner);
  if (Tape<T>* tp = tape_of<T>({&a})) {
    auto aid = a.id();
    Shape in_shape = a.shape();
    tp->record("slice", {aid}, out,
               [aid, in_shape, axis, start, len, outer, inner,
                in_l](Tape<T>& t, const Tensor<T>& g) {
                 Tensor<T> ga(in_shape);
                 const T* gp = g.data();
                 T* o = ga.data();
                 for (long long u = 0; u < outer; ++u)
                   for (int l = 0; l < len; ++l)
                     std::copy_n(gp + (u * len + l) * inner, inner,
                                 o + (u * in_l + start + l) * inner);
                 t.add_grad(aid, ga);
               });
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
  Shape os = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != os[i])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) +
                         " vs " + shape_str(os));
    total += p.dim(axis);
  }
  os[axis] = total;
  Tensor<T> out(os);
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[i];
  for (int i = axis + 1; i < nd; ++i) inner *= os[i];
  T* dst = out.data();
  long long off = 0;
  for (const auto& p : parts) {
    const long long pl = p.dim(axis);
    const T* src = p.data();
    for (long long o = 0; o < outer; ++o)
      std::copy_n(src + o * pl * inner, pl * inner,
                  dst + (o * total + off) * inner);
    off += pl;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.tracked();
  if (any) {
    Tape<T>* tp = nullptr;
    for (const auto& p : parts)
      if (p.tracked()) tp = p.tape();
    std::vector<std::int64_t> ids;
    std::vector<int> lens;
    for (const auto& p : parts) {
      ids.push_back(p.id());
      lens.push_back(p.dim(axis));
    }
    tp->record("concat", ids, out,
               [ids, lens, axis](Tape<T>& t, const Tensor<T>& g) {
                 int off = 0;
                 for (size_t i = 0; i < ids.size(); ++i) {
                   if (ids[i] >= 0) {
                     Tensor<T> part = slice(g, axis, off, lens[i]);
                     t.add_grad(ids[i], part);
                   }
                   off += lens[i];
                 }
               });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (long long i = 0; i < a.size(); ++i) s += a.data()[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  if (Tape<T>* tp = tape_of<T>({&a})) {
    auto aid = a.id();
    Shape in_shape = a.shape();
    tp->record("sum", {aid}, out,
               [aid, in_shape](Tape<T>& t, const Tensor<T>& g) {
                 t.add_grad(aid, Tensor<T>::full(in_shape, g.item()));
               });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> sum(const Tensor<T>& a, int axis) {
  const int nd = a.ndim();
  if (axis < 0 || axis >= nd) throw ShapeError("sum: axis out of range");
  Shape os;
  for (int i = 0; i < nd; ++i)
    if (i != axis) os.push_back(a.dim(i));
  if (os.empty()) os.push_back(1);
  long long outer = 1, inner = 1;
  const int L = a.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  Tensor<T> out(os);
  const T* src = a.data();
  T* dst = out.data();
  for (long long o = 0; o < outer; ++o)
    for (int l = 0; l < L; ++l)
      for (long long in = 0; in < inner; ++in)
        dst[o * inner + in] += src[(o * L + l) * inner + in];
  if (Tape<T>* tp = tape_of<T>({&a})) {
    auto aid = a.id();
    Shape in_shape = a.shape();
    tp->record("sum_axis", {aid}, out,
               [aid, in_shape, outer, inner, L](Tape<T>& t,
                                                const Tensor<T>& g) {
                 Tensor<T> ga(in_shape);
                 const T* gp = g.data();
                 T* o = ga.data();
                 for (long long u = 0; u < outer; ++u)
                   for (int l = 0; l < L; ++l)
                     for (long long in = 0; in < inner; ++in)
                       o[(u * L + l) * inner + in] = gp[u * inner + in];
                 t.add_grad(aid, ga);
               });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, int axis) {
  return mul_scalar(sum(a, axis), T(1) / static_cast<T>(a.dim(axis)));
}

// ------------------------------------------------------------------- softmax

// Max-subtracted softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const int nd = a.ndim();
  if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range");
  long long outer = 1, inner = 1;
  const int L = a.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  Tensor<T> out(a.shape());
  const T* src = a.data();
  T* dst = out.data();
  for (long long o = 0; o < outer; ++o)
    for (long long in = 0; in < inner; ++in) {
      const long long base = o * L * inner + in;
      T m = src[base];
      for (int l = 1; l < L; ++l)
        m = std::max(m, src[base + l * inner]);
      T z = 0;
      for (int l = 0; l < L; ++l) {
        const T e = std::exp(src[base + l * inner] - m);
        dst[base + l * inner] = e;
        z += e;
      }
      for (int l = 0; l < L; ++l) dst[base + l * inner] /= z;
    }
  if (Tape<T>* tp = tape_of<T>({&a})) {
    auto aid = a.id();
    Tensor<T> yv = out;
    tp->record("softmax", {aid}, out,
               [aid, yv, outer, inner, L](Tape<T>& t, const Tensor<T>& g) {
                 // gx = y * (g - sum(g*y along axis))
                 Tensor<T> ga(yv.shape());
                 const T* y = yv.data();
                 const T* gp = g.data();
                 T* o = ga.data();
                 for (long long u = 0; u < outer; ++u)
                   for (long long in = 0; in < inner; ++in) {
                     const long long base = u * L * inner + in;
                     T dot = 0;
                     for (int l = 0; l < L; ++l)
                       dot += gp[base + l * inner] * y[base + l * inner];
                     for (int l = 0; l < L; ++l)
                       o[base + l * inner] =
                           y[base + l * inner] * (gp[base + l * inner] - dot);
                   }
                 t.add_grad(aid, ga);
               });
  }
  return out;
}

// ------------------------------------------------------------------- conv3d

// Input [C_in, S0, S1, S2], kernel [C_out, C_in, k0, k1, k2]; cross-
// correlation (kernel not flipped), symmetric zero padding p, uniform stride.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, int stride = 1,
                 int pad_lo = 0, int pad_hi = -1) {
  if (pad_hi < 0) pad_hi = pad_lo;
  if (x.ndim() != 4 || k.ndim() != 5)
    throw ShapeError("conv3d: expected input [C,S0,S1,S2] and kernel "
                     "[Co,Ci,k0,k1,k2], got " +
                     shape_str(x.shape()) + " and " + shape_str(k.shape()));
  if (k.dim(1) != x.dim(0))
    throw ShapeError("conv3d: input channels " + std::to_string(x.dim(0)) +
                     " != kernel channels " + std::to_string(k.dim(1)));
  if (stride < 1) throw ConfigError("conv3d: stride must be >= 1");
  if (pad_lo < 0) throw ConfigError("conv3d: negative padding");
  const int Ci = x.dim(0), Co = k.dim(0);
  int S[3] = {x.dim(1), x.dim(2), x.dim(3)};
  int K[3] = {k.dim(2), k.dim(3), k.dim(4)};
  int O[3];
  for (int a = 0; a < 3; ++a) {
    const int span = S[a] + pad_lo + pad_hi - K[a];
    if (span < 0 || span % stride != 0)
      throw ConfigError("conv3d: extent " + std::to_string(S[a]) +
                        " with kernel " + std::to_string(K[a]) + ", stride " +
                        std::to_string(stride) + ", padding " +
                        std::to_string(pad_lo) + "/" + std::to_string(pad_hi) +
                        " gives non-integral output extent");
    O[a] = span / stride + 1;
  }
  Tensor<T> out({Co, O[0], O[1], O[2]});
  const T* xp = x.data();
  const T* kp = k.data();
  T* yp = out.data();
  const long long xs1 = static_cast<long long>(S[1]) * S[2];
  const long long xs0 = static_cast<long long>(S[0]) * xs1;
  const long long ks = static_cast<long long>(K[0]) * K[1] * K[2];
  for (int co = 0; co < Co; ++co) {
    T* ybase = yp + static_cast<long long>(co) * O[0] * O[1] * O[2];
    for (int o0 = 0; o0 < O[0]; ++o0)
      for (int o1 = 0; o1 < O[1]; ++o1)
        for (int o2 = 0; o2 < O[2]; ++o2) {
          T acc = 0;
          for (int ci = 0; ci < Ci; ++ci) {
            const T* xc = xp + ci * xs0;
            const T* kc = kp + (static_cast<long long>(co) * Ci + ci) * ks;
            for (int t0 = 0; t0 < K[0]; ++t0) {
              const int i0 = o0 * stride - pad_lo + t0;
              if (i0 < 0 || i0 >= S[0]) continue;
              for (int t1 = 0; t1 < K[1]; ++t1) {
                const int i1 = o1 * stride - pad_lo + t1;
                if (i1 < 0 || i1 >= S[1]) continue;
                const T* xrow = xc + i0 * xs1 + static_cast<long long>(i1) * S[2];
                const T* krow = kc + (t0 * K[1] + t1) * K[2];
                for (int t2 = 0; t2 < K[2]; ++t2) {
                  const int i2 = o2 * stride - pad_lo + t2;
                  if (i2 < 0 || i2 >= S[2]) continue;
                  acc += krow[t2] * xrow[i2];
                }
              }
            }
          }
          ybase[(static_cast<long long>(o0) * O[1] + o1) * O[2] + o2] = acc;
        }
  }
  if (Tape<T>* tp = tape_of<T>({&x, &k})) {
    auto xid = x.id(), kid = k.id();
    Tensor<T> xv = x, kv = k;
    int s = stride, p = pad_lo;
    std::vector<int> Sv(S, S + 3), Kv(K, K + 3), Ov(O, O + 3);
    tp->record(
        "conv3d", {xid, kid}, out,
        [xid, kid, xv, kv, s, p, Sv, Kv, Ov, Ci, Co](Tape<T>& t,
                                                     const Tensor<T>& g) {
          const T* gp = g.data();
          const long long xs1 = static_cast<long long>(Sv[1]) * Sv[2];
          const long long os1 = static_cast<long long>(Ov[1]) * Ov[2];
          const long long ks = static_cast<long long>(Kv[0]) * Kv[1] * Kv[2];
          if (kid >= 0) {
            Tensor<T> gk(kv.shape());
            T* gkp = gk.data();
            const T* xp = xv.data();
            for (int co = 0; co < Co; ++co)
              for (int ci = 0; ci < Ci; ++ci)
                for (int t0 = 0; t0 < Kv[0]; ++t0)
                  for (int t1 = 0; t1 < Kv[1]; ++t1)
                    for (int t2 = 0; t2 < Kv[2]; ++t2) {
                      T acc = 0;
                      for (int o0 = 0; o0 < Ov[0]; ++o0) {
                        const int i0 = o0 * s - p + t0;
                        if (i0 < 0 || i0 >= Sv[0]) continue;
                        for (int o1 = 0; o1 < Ov[1]; ++o1) {
                          const int i1 = o1 * s - p + t1;
                          if (i1 < 0 || i1 >= Sv[1]) continue;
                          for (int o2 = 0; o2 < Ov[2]; ++o2) {
                            const int i2 = o2 * s - p + t2;
                            if (i2 < 0 || i2 >= Sv[2]) continue;
                            acc += gp[co * Ov[0] * os1 + o0 * os1 +
                                      static_cast<long long>(o1) * Ov[2] + o2] *
                                   xp[ci * Sv[0] * xs1 + i0 * xs1 +
                                      static_cast<long long>(i1) * Sv[2] + i2];
                          }
                        }
                      }
                      gkp[(static_cast<long long>(co) * Ci + ci) * ks +
                          (t0 * Kv[1] + t1) * Kv[2] + t2] = acc;
                    }
            t.add_grad(kid, gk);
          }
          if (xid >= 0) {
            Tensor<T> gx(xv.shape());
            T* gxp = gx.data();
            const T* kp = kv.data();
            for (int ci = 0; ci < Ci; ++ci)
              for (int i0 = 0; i0 < Sv[0]; ++i0)
                for (int i1 = 0; i1 < Sv[1]; ++i1)
                  for (int i2 = 0; i2 < Sv[2]; ++i2) {
                    T acc = 0;
                    for (int t0 = 0; t0 < Kv[0]; ++t0) {
                      const int n0 = i0 + p - t0;
                      if (n0 < 0 || n0 % s != 0) continue;
                      const int o0 = n0 / s;
                      if (o0 >= Ov[0]) continue;
                      for (int t1 = 0; t1 < Kv[1]; ++t1) {
                        const int n1 = i1 + p - t1;
                        if (n1 < 0 || n1 % s != 0) continue;
                        const int o1 = n1 / s;
                        if (o1 >= Ov[1]) continue;
                        for (int t2 = 0; t2 < Kv[2]; ++t2) {
                          const int n2 = i2 + p - t2;
                          if (n2 < 0 || n2 % s != 0) continue;
                          const int o2 = n2 / s;
                          if (o2 >= Ov[2]) continue;
                          for (int co = 0; co < Co; ++co)
                            acc +=
                                gp[co * Ov[0] * os1 + o0 * os1 +
                                   static_cast<long long>(o1) * Ov[2] + o2] *
                                kp[(static_cast<long long>(co) * Ci + ci) * ks +
                                   (t0 * Kv[1] + t1) * Kv[2] + t2];
                        }
                      }
                    }
                    gxp[ci * Sv[0] * xs1 + i0 * xs1 +
                        static_cast<long long>(i1) * Sv[2] + i2] = acc;
                  }
            t.add_grad(xid, gx);
          }
        });
  }
  return out;
}

// Transposed conv. Input [C_in, S0, S1, S2], kernel [C_in, C_out, k, k, k];
// output extent (S-1)*stride + k per axis.
template <class T>
Tensor<T> conv3d_transpose(const Tensor<T>& x, const Tensor<T>& k,
                           int stride = 1) {
  if (x.ndim() != 4 || k.ndim() != 5)
    throw ShapeError("conv3d_transpose: expected input [C,S0,S1,S2] and "
                     "kernel [Ci,Co,k0,k1,k2], got " +
                     shape_str(x.shape()) + " and " + shape_str(k.shape()));
  if (k.dim(0) != x.dim(0))
    throw ShapeError("conv3d_transpose: input channels " +
                     std::to_string(x.dim(0)) + " != kernel channels " +
                     std::to_string(k.dim(0)));
  if (stride < 1) throw ConfigError("conv3d_transpose: stride must be >= 1");
  const int Ci = x.dim(0), Co = k.dim(1);
  int S[3] = {x.dim(1), x.dim(2), x.dim(3)};
  int K[3] = {k.dim(2), k.dim(3), k.dim(4)};
  int O[3];
  for (int a = 0; a < 3; ++a) O[a] = (S[a] - 1) * stride + K[a];
  Tensor<T> out({Co, O[0], O[1], O[2]});
  const T* xp = x.data();
  const T* kp = k.data();
  T* yp = out.data();
  const long long xs1 = static_cast<long long>(S[1]) * S[2];
  const long long os1 = static_cast<long long>(O[1]) * O[2];
  const long long ks = static_cast<long long>(K[0]) * K[1] * K[2];
  for (int ci = 0; ci < Ci; ++ci)
    for (int i0 = 0; i0 < S[0]; ++i0)
      for (int i1 = 0; i1 < S[1]; ++i1)
        for (int i2 = 0; i2 < S[2]; ++i2) {
          const T xv = xp[ci * S[0] * xs1 + i0 * xs1 +
                          static_cast<long long>(i1) * S[2] + i2];
          if (xv == T(0)) continue;
          for (int co = 0; co < Co; ++co) {
            const T* kc = kp + (static_cast<long long>(ci) * Co + co) * ks;
            T* yc = yp + static_cast<long long>(co) * O[0] * os1;
            for (int t0 = 0; t0 < K[0]; ++t0)
              for (int t1 = 0; t1 < K[1]; ++t1)
                for (int t2 = 0; t2 < K[2]; ++t2)
                  yc[(i0 * stride + t0) * os1 +
                     static_cast<long long>(i1 * stride + t1) * O[2] +
                     (i2 * stride + t2)] += xv * kc[(t0 * K[1] + t1) * K[2] + t2];
          }
        }
  if (Tape<T>* tp = tape_of<T>({&x, &k})) {
    auto xid = x.id(), kid = k.id();
    Tensor<T> xv = x, kv = k;
    int s = stride;
    std::vector<int> Sv(S, S + 3), Kv(K, K + 3), Ov(O, O + 3);
    tp->record(
        "conv3d_transpose", {xid, kid}, out,
        [xid, kid, xv, kv, s, Sv, Kv, Ov, Ci, Co](Tape<T>& t,
                                                  const Tensor<T>& g) {
          const T* gp = g.data();
          const long long xs1 = static_cast<long long>(Sv[1]) * Sv[2];
          const long long os1 = static_cast<long long>(Ov[1]) * Ov[2];
          const long long ks = static_cast<long long>(Kv[0]) * Kv[1] * Kv[2];
          if (xid >= 0) {
            // gx[ci,i] = sum_co sum_t g[co, i*s + t] k[ci,co,t]
            Tensor<T> gx(xv.shape());
            T* gxp = gx.data();
            const T* kp = kv.data();
            for (int ci = 0; ci < Ci; ++ci)
              for (int i0 = 0; i0 < Sv[0]; ++i0)
                for (int i1 = 0; i1 < Sv[1]; ++i1)
                  for (int i2 = 0; i2 < Sv[2]; ++i2) {
                    T acc = 0;
                    for (int co = 0; co < Co; ++co) {
                      const T* kc =
                          kp + (static_cast<long long>(ci) * Co + co) * ks;
                      const T* gc = gp + static_cast<long long>(co) * Ov[0] * os1;
                      for (int t0 = 0; t0 < Kv[0]; ++t0)
                        for (int t1 = 0; t1 < Kv[1]; ++t1)
                          for (int t2 = 0; t2 < Kv[2]; ++t2)
                            acc += gc[(i0 * s + t0) * os1 +
                                      static_cast<long long>(i1 * s + t1) *
                                          Ov[2] +
                                      (i2 * s + t2)] *
                                   kc[(t0 * Kv[1] + t1) * Kv[2] + t2];
                    }
                    gxp[ci * Sv[0] * xs1 + i0 * xs1 +
                        static_cast<long long>(i1) * Sv[2] + i2] = acc;
                  }
            t.add_grad(xid, gx);
          }
          if (kid >= 0) {
            Tensor<T> gk(kv.shape());
            T* gkp = gk.data();
            const T* xp = xv.data();
            for (int ci = 0; ci < Ci; ++ci)
              for (int co = 0; co < Co; ++co)
                for (int t0 = 0; t0 < Kv[0]; ++t0)
                  for (int t1 = 0; t1 < Kv[1]; ++t1)
                    for (int t2 = 0; t2 < Kv[2]; ++t2) {
                      T acc = 0;
                      const T* gc = gp + static_cast<long long>(co) * Ov[0] * os1;
                      for (int i0 = 0; i0 < Sv[0]; ++i0)
                        for (int i1 = 0; i1 < Sv[1]; ++i1)
                          for (int i2 = 0; i2 < Sv[2]; ++i2)
                            acc += xp[ci * Sv[0] * xs1 + i0 * xs1 +
                                      static_cast<long long>(i1) * Sv[2] + i2] *
                                   gc[(i0 * s + t0) * os1 +
                                      static_cast<long long>(i1 * s + t1) *
                                          Ov[2] +
                                      (i2 * s + t2)];
                      gkp[(static_cast<long long>(ci) * Co + co) * ks +
                          (t0 * Kv[1] + t1) * Kv[2] + t2] = acc;
                    }
            t.add_grad(kid, gk);
          }
        });
  }
  return out;
}

// Per-channel bias over [C, spatial...].
template <class T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() < 1 || b.ndim() != 1 || b.dim(0) != x.dim(0))
    throw ShapeError("bias_add: bias " + shape_str(b.shape()) +
                     " does not match leading channel axis of " +
                     shape_str(x.shape()));
  const int C = x.dim(0);
  const long long sp = x.size() / C;
  Tensor<T> out(x.shape());
  for (int c = 0; c < C; ++c)
    for (long long i = 0; i < sp; ++i)
      out.data()[c * sp + i] = x.data()[c * sp + i] + b.data()[c];
  if (Tape<T>* tp = tape_of<T>({&x, &b})) {
    auto xid = x.id(), bid = b.id();
    tp->record("bias_add", {xid, bid}, out,
               [xid, bid, C, sp](Tape<T>& t, const Tensor<T>& g) {
                 t.add_grad(xid, g);
                 if (bid >= 0) {
                   Tensor<T> gb({C});
                   for (int c = 0; c < C; ++c) {
                     T s = 0;
                     for (long long i = 0; i < sp; ++i)
                       s += g.data()[c * sp + i];
                     gb.data()[c] = s;
                   }
                   t.add_grad(bid, gb);
                 }
               });
  }
  return out;
}

// ------------------------------------------------------------- instance norm

// Per-channel normalization over all spatial positions of [C, spatial...],
// with learned per-channel scale and shift.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                        const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.ndim() < 2) throw ShapeError("instance_norm: need [C, spatial...]");
  const int C = x.dim(0);
  if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 ||
      beta.dim(0) != C)
    throw ShapeError("instance_norm: gamma/beta must be [C] with C=" +
                     std::to_string(C));
  const long long sp = x.size() / C;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(C);
  const T* xp = x.data();
  for (int c = 0; c < C; ++c) {
    const T* xc = xp + c * sp;
    T mu = 0;
    for (long long i = 0; i < sp; ++i) mu += xc[i];
    mu /= static_cast<T>(sp);
    T var = 0;
    for (long long i = 0; i < sp; ++i) {
      const T d = xc[i] - mu;
      var += d * d;
    }
    var /= static_cast<T>(sp);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[c] = is;
    const T g = gamma.data()[c], b = beta.data()[c];
    for (long long i = 0; i < sp; ++i) {
      const T h = (xc[i] - mu) * is;
      xhat.data()[c * sp + i] = h;
      out.data()[c * sp + i] = g * h + b;
    }
  }
  if (Tape<T>* tp = tape_of<T>({&x, &gamma, &beta})) {
    auto xid = x.id(), gid = gamma.id(), bid = beta.id();
    Tensor<T> gv = gamma;
    tp->record(
        "instance_norm", {xid, gid, bid}, out,
        [xid, gid, bid, xhat, gv, inv_std, C, sp](Tape<T>& t,
                                                  const Tensor<T>& g) {
          const T* gp = g.data();
          const T* hp = xhat.data();
          if (gid >= 0) {
            Tensor<T> gg({C});
            for (int c = 0; c < C; ++c) {
              T s = 0;
              for (long long i = 0; i < sp; ++i)
                s += gp[c * sp + i] * hp[c * sp + i];
              gg.data()[c] = s;
            }
            t.add_grad(gid, gg);
          }
          if (bid >= 0) {
            Tensor<T> gb({C});
            for (int c = 0; c < C; ++c) {
              T s = 0;
              for (long long i = 0; i < sp; ++i) s += gp[c * sp + i];
              gb.data()[c] = s;
            }
            t.add_grad(bid, gb);
          }
          if (xid >= 0) {
            // dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat))
            Tensor<T> gx(xhat.shape());
            for (int c = 0; c < C; ++c) {
              T mg = 0, mgh = 0;
              for (long long i = 0; i < sp; ++i) {
                mg += gp[c * sp + i];
                mgh += gp[c * sp + i] * hp[c * sp + i];
              }
              mg /= static_cast<T>(sp);
              mgh /= static_cast<T>(sp);
              const T scale = gv.data()[c] * inv_std[c];
              for (long long i = 0; i < sp; ++i)
                gx.data()[c * sp + i] =
                    scale * (gp[c * sp + i] - mg - hp[c * sp + i] * mgh);
            }
            t.add_grad(xid, gx);
          }
        });
  }
  return out;
}

}  // namespace tsubf
