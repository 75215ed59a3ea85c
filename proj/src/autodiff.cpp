#include "setcon/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace setcon {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MapMat<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapMat<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": operand shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (&a.tape() != &b.tape()) throw StructuralError("operands live on different tapes");
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<std::size_t>& inputs, Backward fn) {
  bool needs = false;
  for (auto id : inputs) needs = needs || nodes_.at(id).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape(), T(0));
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.size() == 0) return Tensor<T>(n.value.shape(), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> out) {
  if (out.value().size() != 1) throw DimensionError("backward: output must hold a single value");
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad_buffer(out.id()).fill(T(1));
  for (std::size_t id = out.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, id);
  }
}

template class Tape<float>;
template class Tape<double>;

namespace ops {

template <typename T>
Var<T> matmul(Var<T> x, Var<T> w) {
  require_same_tape(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0))
    throw DimensionError("matmul: x trailing extent " + std::to_string(xv.cols()) +
                         " does not match weight " + shape_string(wv.shape()));
  const std::size_t rows = xv.rows(), in = wv.dim(0), out = wv.dim(1);
  Shape shape = xv.shape();
  shape.back() = out;
  Tensor<T> y(shape);
  as_mat(y, rows, out).noalias() = as_mat(xv, rows, in) * as_mat(wv, in, out);
  const auto xi = x.id(), wi = w.id();
  return x.tape().record(std::move(y), {xi, wi}, [xi, wi, rows, in, out](Tape<T>& t, std::size_t self) {
    auto dy = as_mat(t.grad_of(self), rows, out);
    if (t.requires_grad(xi))
      as_mat(t.grad_buffer(xi), rows, in).noalias() += dy * as_mat(t.value(wi), in, out).transpose();
    if (t.requires_grad(wi))
      as_mat(t.grad_buffer(wi), in, out).noalias() += as_mat(t.value(xi), rows, in).transpose() * dy;
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  require_same_tape(x, w);
  require_same_tape(x, b);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0))
    throw DimensionError("linear: input x trailing extent " + std::to_string(xv.cols()) +
                         " does not match weight W " + shape_string(wv.shape()));
  if (bv.size() != wv.dim(1))
    throw DimensionError("linear: bias b " + shape_string(bv.shape()) + " does not match weight W " +
                         shape_string(wv.shape()));
  const std::size_t rows = xv.rows(), in = wv.dim(0), out = wv.dim(1);
  Shape shape = xv.shape();
  shape.back() = out;
  Tensor<T> y(shape);
  auto ym = as_mat(y, rows, out);
  ym.noalias() = as_mat(xv, rows, in) * as_mat(wv, in, out);
  ym.rowwise() += as_mat(bv, 1, out).row(0);
  const auto xi = x.id(), wi = w.id(), bi = b.id();
  return x.tape().record(std::move(y), {xi, wi, bi},
                         [xi, wi, bi, rows, in, out](Tape<T>& t, std::size_t self) {
                           auto dy = as_mat(t.grad_of(self), rows, out);
                           if (t.requires_grad(xi))
                             as_mat(t.grad_buffer(xi), rows, in).noalias() +=
                                 dy * as_mat(t.value(wi), in, out).transpose();
                           if (t.requires_grad(wi))
                             as_mat(t.grad_buffer(wi), in, out).noalias() +=
                                 as_mat(t.value(xi), rows, in).transpose() * dy;
                           if (t.requires_grad(bi)) {
                             // Fixed row order; Eigen's reduction order depends on buffer alignment.
                             T* gb = t.grad_buffer(bi).ptr();
                             const T* g = t.grad_of(self).ptr();
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < out; ++c) gb[c] += g[r * out + c];
                           }
                         });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [ai, bi](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    for (auto id : {ai, bi}) {
      if (!t.requires_grad(id)) continue;
      auto& g = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [ai, bi](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    if (t.requires_grad(ai)) {
      auto& g = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    }
    if (t.requires_grad(bi)) {
      auto& g = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= dy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [ai, bi](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    if (t.requires_grad(ai)) {
      auto& g = t.grad_buffer(ai);
      const auto& other = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * other[i];
    }
    if (t.requires_grad(bi)) {
      auto& g = t.grad_buffer(bi);
      const auto& other = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * other[i];
    }
  });
}

template <typename T>
Var<T> affine(Var<T> x, T a, T b) {
  Tensor<T> y = x.value();
  for (auto& v : y.storage()) v = a * v + b;
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, a](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += a * dy[i];
  });
}

namespace {

// Elementwise map whose derivative is expressed through the output value.
template <typename T, typename F, typename DF>
Var<T> unary_from_output(Var<T> x, F f, DF df_from_y) {
  Tensor<T> y = x.value();
  for (auto& v : y.storage()) v = f(v);
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, df_from_y](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    const auto& yv = t.value(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * df_from_y(yv[i]);
  });
}

}  // namespace

template <typename T>
Var<T> relu(Var<T> x) {
  return unary_from_output(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T y) { return y > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary_from_output(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return unary_from_output(
      x, [](T v) { return std::tanh(v); }, [](T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "softmax");
  Tensor<T> y = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      T* base = y.ptr() + o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, base[e * s.inner]);
      T total = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        base[e * s.inner] = std::exp(base[e * s.inner] - mx);
        total += base[e * s.inner];
      }
      for (std::size_t e = 0; e < s.extent; ++e) base[e * s.inner] /= total;
    }
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, s](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    const auto& yv = t.value(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t off = o * s.extent * s.inner + i;
        T dot = 0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += dy[off + e * s.inner] * yv[off + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = off + e * s.inner;
          g[k] += yv[k] * (dy[k] - dot);
        }
      }
  });
}

template <typename T>
Var<T> normalize_sum(Var<T> x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "normalize_sum");
  Tensor<T> y = x.value();
  std::vector<T> sums(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      T* base = y.ptr() + o * s.extent * s.inner + i;
      T total = 0;
      for (std::size_t e = 0; e < s.extent; ++e) total += base[e * s.inner];
      sums[o * s.inner + i] = total;
      for (std::size_t e = 0; e < s.extent; ++e) base[e * s.inner] /= total;
    }
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, s, sums = std::move(sums)](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    const auto& yv = t.value(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t off = o * s.extent * s.inner + i;
        T dot = 0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += dy[off + e * s.inner] * yv[off + e * s.inner];
        const T total = sums[o * s.inner + i];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = off + e * s.inner;
          g[k] += (dy[k] - dot) / total;
        }
      }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> offset, T eps) {
  require_same_tape(x, gain);
  require_same_tape(x, offset);
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  if (gain.value().size() != c || offset.value().size() != c)
    throw DimensionError("layer_norm: gain/offset extent does not match trailing extent " + std::to_string(c));
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(rows);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& ov = offset.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.ptr() + r * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(c);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mean) * rstd[r];
      xhat[r * c + j] = h;
      y[r * c + j] = h * gv[j] + ov[j];
    }
  }
  const auto xi = x.id(), gi = gain.id(), oi = offset.id();
  return x.tape().record(
      std::move(y), {xi, gi, oi},
      [xi, gi, oi, rows, c, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
        const auto& dy = t.grad_of(self);
        if (t.requires_grad(gi)) {
          auto& g = t.grad_buffer(gi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += dy[r * c + j] * xhat[r * c + j];
        }
        if (t.requires_grad(oi)) {
          auto& g = t.grad_buffer(oi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += dy[r * c + j];
        }
        if (t.requires_grad(xi)) {
          const auto& gv = t.value(gi);
          auto& g = t.grad_buffer(xi);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T d = dy[r * c + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[r * c + j];
            }
            mean_d /= T(c);
            mean_dx /= T(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T d = dy[r * c + j] * gv[j];
              g[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
            }
          }
        }
      });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3) throw DimensionError("bmm: operands must be rank 3");
  const std::size_t groups = av.dim(0);
  const bool shared_b = bv.dim(0) == 1;
  if (!shared_b && bv.dim(0) != groups)
    throw DimensionError("bmm: batch extents " + shape_string(av.shape()) + " and " + shape_string(bv.shape()));
  const std::size_t ar = av.dim(1), ac = av.dim(2), br = bv.dim(1), bc = bv.dim(2);
  const std::size_t n = transpose_a ? ac : ar, k = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br, m = transpose_b ? br : bc;
  if (k != kb)
    throw DimensionError("bmm: inner extents differ, " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  Tensor<T> y(Shape{groups, n, m});
  const bool flat = shared_b && !transpose_a;
  if (flat) {
    auto B = as_mat(bv, br, bc);
    if (transpose_b)
      as_mat(y, groups * n, m).noalias() = as_mat(av, groups * n, k) * B.transpose();
    else
      as_mat(y, groups * n, m).noalias() = as_mat(av, groups * n, k) * B;
  } else {
    for (std::size_t g = 0; g < groups; ++g) {
      CMapMat<T> A(av.ptr() + g * ar * ac, ar, ac);
      CMapMat<T> B(bv.ptr() + (shared_b ? 0 : g) * br * bc, br, bc);
      MapMat<T> Y(y.ptr() + g * n * m, n, m);
      if (transpose_a && transpose_b)
        Y.noalias() = A.transpose() * B.transpose();
      else if (transpose_a)
        Y.noalias() = A.transpose() * B;
      else if (transpose_b)
        Y.noalias() = A * B.transpose();
      else
        Y.noalias() = A * B;
    }
  }
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(
      std::move(y), {ai, bi},
      [=](Tape<T>& t, std::size_t self) {
        const auto& dyv = t.grad_of(self);
        const auto& avv = t.value(ai);
        const auto& bvv = t.value(bi);
        if (flat) {
          auto dY = as_mat(dyv, groups * n, m);
          auto B = as_mat(bvv, br, bc);
          if (t.requires_grad(ai)) {
            auto dA = as_mat(t.grad_buffer(ai), groups * n, k);
            if (transpose_b)
              dA.noalias() += dY * B;
            else
              dA.noalias() += dY * B.transpose();
          }
          if (t.requires_grad(bi)) {
            auto dB = as_mat(t.grad_buffer(bi), br, bc);
            auto A = as_mat(avv, groups * n, k);
            if (transpose_b)
              dB.noalias() += dY.transpose() * A;
            else
              dB.noalias() += A.transpose() * dY;
          }
          return;
        }
        Tensor<T>* ga = t.requires_grad(ai) ? &t.grad_buffer(ai) : nullptr;
        Tensor<T>* gb = t.requires_grad(bi) ? &t.grad_buffer(bi) : nullptr;
        for (std::size_t g = 0; g < groups; ++g) {
          CMapMat<T> A(avv.ptr() + g * ar * ac, ar, ac);
          CMapMat<T> B(bvv.ptr() + (shared_b ? 0 : g) * br * bc, br, bc);
          CMapMat<T> dY(dyv.ptr() + g * n * m, n, m);
          if (ga) {
            MapMat<T> dA(ga->ptr() + g * ar * ac, ar, ac);
            // d(opA) = dY * opB^T; dA = d(opA) or its transpose.
            if (!transpose_a && !transpose_b)
              dA.noalias() += dY * B.transpose();
            else if (!transpose_a && transpose_b)
              dA.noalias() += dY * B;
            else if (transpose_a && !transpose_b)
              dA.noalias() += B * dY.transpose();
            else
              dA.noalias() += B.transpose() * dY.transpose();
          }
          if (gb) {
            MapMat<T> dB(gb->ptr() + (shared_b ? 0 : g) * br * bc, br, bc);
            // d(opB) = opA^T * dY.
            if (!transpose_a && !transpose_b)
              dB.noalias() += A.transpose() * dY;
            else if (!transpose_a && transpose_b)
              dB.noalias() += dY.transpose() * A;
            else if (transpose_a && !transpose_b)
              dB.noalias() += A * dY;
            else
              dB.noalias() += dY.transpose() * A.transpose();
          }
        }
      });
}

template <typename T>
Var<T> transpose_last2(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("transpose_last2: operand must be rank 3");
  const std::size_t g = xv.dim(0), n = xv.dim(1), m = xv.dim(2);
  Tensor<T> y(Shape{g, m, n});
  for (std::size_t b = 0; b < g; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) y[(b * m + j) * n + i] = xv[(b * n + i) * m + j];
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, g, n, m](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t b = 0; b < g; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gx[(b * n + i) * m + j] += dy[(b * m + j) * n + i];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    if (p.value().rows() != rows || p.value().rank() != parts[0].value().rank())
      throw DimensionError("concat: leading shapes differ, " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    total += p.value().cols();
  }
  Shape shape = parts[0].shape();
  shape.back() = total;
  Tensor<T> y(shape);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.ptr() + r * widths[p], widths[p], y.ptr() + r * total + off);
    off += widths[p];
  }
  return parts[0].tape().record(std::move(y), ids, [ids, widths, rows, total](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.requires_grad(ids[p])) {
        auto& g = t.grad_buffer(ids[p]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[p]; ++j) g[r * widths[p] + j] += dy[r * total + off + j];
      }
      off += widths[p];
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t c = parts[0].value().cols();
  std::vector<std::size_t> ids, counts;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    if (p.value().cols() != c)
      throw DimensionError("concat_rows: trailing extents differ, " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    ids.push_back(p.id());
    counts.push_back(p.value().size());
    rows += p.value().rows();
  }
  Tensor<T> y(Shape{rows, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().ptr(), p.value().size(), y.ptr() + off);
    off += p.value().size();
  }
  return parts[0].tape().record(std::move(y), ids, [ids, counts](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.requires_grad(ids[p])) {
        auto& g = t.grad_buffer(ids[p]);
        for (std::size_t i = 0; i < counts[p]; ++i) g[i] += dy[off + i];
      }
      off += counts[p];
    }
  });
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t begin, std::size_t end) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  if (begin >= end || end > c)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for trailing extent " + std::to_string(c));
  const std::size_t w = end - begin;
  Shape shape = x.shape();
  shape.back() = w;
  Tensor<T> y(shape);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.ptr() + r * c + begin, w, y.ptr() + r * w);
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, rows, c, w, begin](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) g[r * c + begin + j] += dy[r * w + j];
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<std::size_t>& index) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor<T> y(Shape{index.size(), c});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows)
      throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " out of range " + std::to_string(rows));
    std::copy_n(xv.ptr() + index[i] * c, c, y.ptr() + i * c);
  }
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, c, index](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[index[i] * c + j] += dy[i * c + j];
  });
}

template <typename T>
Var<T> group_sum(Var<T> x, std::size_t group) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  if (group == 0 || rows % group != 0)
    throw DimensionError("group_sum: " + std::to_string(rows) + " rows not divisible by " + std::to_string(group));
  const std::size_t out_rows = rows / group;
  Tensor<T> y(Shape{out_rows, c});
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) y[(r / group) * c + j] += xv[r * c + j];
  const auto xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, c, rows, group](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    auto& g = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += dy[(r / group) * c + j];
  });
}

template <typename T>
Var<T> tile_add(Var<T> x, Var<T> p) {
  require_same_tape(x, p);
  const std::size_t c = x.value().cols(), rows = x.value().rows(), n = p.value().rows();
  if (p.value().cols() != c || rows % n != 0)
    throw DimensionError("tile_add: " + shape_string(p.shape()) + " does not tile " + shape_string(x.shape()));
  Tensor<T> y = x.value();
  const auto& pv = p.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] += pv[(r % n) * c + j];
  const auto xi = x.id(), pi = p.id();
  return x.tape().record(std::move(y), {xi, pi}, [xi, pi, c, rows, n](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    if (t.requires_grad(xi)) {
      auto& g = t.grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    }
    if (t.requires_grad(pi)) {
      auto& g = t.grad_buffer(pi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[(r % n) * c + j] += dy[r * c + j];
    }
  });
}

template <typename T>
Var<T> broadcast_add(Var<T> a, Var<T> p) {
  require_same_tape(a, p);
  const std::size_t c = a.value().cols(), groups = a.value().rows(), n = p.value().rows();
  if (p.value().cols() != c)
    throw DimensionError("broadcast_add: " + shape_string(a.shape()) + " vs " + shape_string(p.shape()));
  Tensor<T> y(Shape{groups * n, c});
  const auto& av = a.value();
  const auto& pv = p.value();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) y[(g * n + i) * c + j] = av[g * c + j] + pv[i * c + j];
  const auto ai = a.id(), pi = p.id();
  return a.tape().record(std::move(y), {ai, pi}, [ai, pi, c, groups, n](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    Tensor<T>* ga = t.requires_grad(ai) ? &t.grad_buffer(ai) : nullptr;
    Tensor<T>* gp = t.requires_grad(pi) ? &t.grad_buffer(pi) : nullptr;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const T d = dy[(g * n + i) * c + j];
          if (ga) (*ga)[g * c + j] += d;
          if (gp) (*gp)[i * c + j] += d;
        }
  });
}

template <typename T>
Var<T> composite(Var<T> alpha, Var<T> rgb) {
  require_same_tape(alpha, rgb);
  const auto& av = alpha.value();
  const auto& cv = rgb.value();
  if (av.rank() != 3 || cv.rank() != 4 || cv.dim(0) != av.dim(0) || cv.dim(1) != av.dim(1) ||
      cv.dim(2) != av.dim(2))
    throw DimensionError("composite: alpha " + shape_string(av.shape()) + " vs rgb " + shape_string(cv.shape()));
  const std::size_t R = av.dim(0), K = av.dim(1), N = av.dim(2), C = cv.dim(3);
  Tensor<T> y(Shape{R, N, C});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t n = 0; n < N; ++n) {
        const T w = av[(r * K + k) * N + n];
        const T* src = cv.ptr() + ((r * K + k) * N + n) * C;
        T* dst = y.ptr() + (r * N + n) * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] += w * src[c];
      }
  const auto ai = alpha.id(), ci = rgb.id();
  return alpha.tape().record(std::move(y), {ai, ci}, [ai, ci, R, K, N, C](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad_of(self);
    const auto& av = t.value(ai);
    const auto& cv = t.value(ci);
    Tensor<T>* ga = t.requires_grad(ai) ? &t.grad_buffer(ai) : nullptr;
    Tensor<T>* gc = t.requires_grad(ci) ? &t.grad_buffer(ci) : nullptr;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t ak = (r * K + k) * N + n;
          const T* d = dy.ptr() + (r * N + n) * C;
          if (ga) {
            T acc = 0;
            for (std::size_t c = 0; c < C; ++c) acc += d[c] * cv[ak * C + c];
            (*ga)[ak] += acc;
          }
          if (gc)
            for (std::size_t c = 0; c < C; ++c) (*gc)[ak * C + c] += d[c] * av[ak];
        }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total = 0;
  for (auto v : x.value().storage()) total += v;
  const auto xi = x.id();
  return x.tape().record(Tensor<T>::scalar(total), {xi}, [xi](Tape<T>& t, std::size_t self) {
    const T d = t.grad_of(self)[0];
    auto& g = t.grad_buffer(xi);
    for (auto& v : g.storage()) v += d;
  });
}

template <typename T>
Var<T> mse(Var<T> x, const Tensor<T>& target) {
  if (x.shape() != target.shape())
    throw DimensionError("mse: prediction " + shape_string(x.shape()) + " vs target " +
                         shape_string(target.shape()));
  const auto& xv = x.value();
  T total = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += (xv[i] - target[i]) * (xv[i] - target[i]);
  const T count = T(xv.size());
  const auto xi = x.id();
  return x.tape().record(Tensor<T>::scalar(total / count), {xi}, [xi, target, count](Tape<T>& t, std::size_t self) {
    const T d = t.grad_of(self)[0];
    const auto& xv = t.value(xi);
    auto& g = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d * T(2) * (xv[i] - target[i]) / count;
  });
}

template <typename T>
Var<T> info_nce(Var<T> anchors, Var<T> candidates, const std::vector<std::size_t>& positive,
                const std::vector<long>& excluded, T tau) {
  require_same_tape(anchors, candidates);
  if (!(tau > T(0))) throw ArgumentError("info_nce: temperature must be positive");
  const auto& av = anchors.value();
  const auto& cv = candidates.value();
  const std::size_t A = av.rows(), D = av.cols(), M = cv.rows();
  if (cv.cols() != D)
    throw DimensionError("info_nce: anchor width " + std::to_string(D) + " vs candidate width " +
                         std::to_string(cv.cols()));
  if (positive.size() != A || excluded.size() != A)
    throw DimensionError("info_nce: index lists must have one entry per anchor");
  RowMat<T> logits = (as_mat(av, A, D) * as_mat(cv, M, D).transpose()) / tau;
  RowMat<T> probs(A, M);
  T total = 0;
  for (std::size_t a = 0; a < A; ++a) {
    if (positive[a] >= M) throw DimensionError("info_nce: positive index out of range");
    if (excluded[a] >= 0 && static_cast<std::size_t>(excluded[a]) == positive[a])
      throw ArgumentError("info_nce: positive cannot be excluded");
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t m = 0; m < M; ++m)
      if (static_cast<long>(m) != excluded[a]) mx = std::max(mx, logits(a, m));
    T z = 0;
    for (std::size_t m = 0; m < M; ++m) {
      const T e = static_cast<long>(m) == excluded[a] ? T(0) : std::exp(logits(a, m) - mx);
      probs(a, m) = e;
      z += e;
    }
    probs.row(a) /= z;
    total += (mx + std::log(z)) - logits(a, positive[a]);
  }
  for (std::size_t a = 0; a < A; ++a) probs(a, positive[a]) -= T(1);
  const auto ai = anchors.id(), ci = candidates.id();
  return anchors.tape().record(
      Tensor<T>::scalar(total / T(A)), {ai, ci},
      [ai, ci, A, D, M, tau, dlogits = std::move(probs)](Tape<T>& t, std::size_t self) {
        const T scale = t.grad_of(self)[0] / (T(A) * tau);
        if (t.requires_grad(ai))
          as_mat(t.grad_buffer(ai), A, D).noalias() += scale * (dlogits * as_mat(t.value(ci), M, D));
        if (t.requires_grad(ci))
          as_mat(t.grad_buffer(ci), M, D).noalias() += scale * (dlogits.transpose() * as_mat(t.value(ai), A, D));
      });
}

#define SETCON_INSTANTIATE_OPS(T)                                                                        \
  template Var<T> matmul(Var<T>, Var<T>);                                                                \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                        \
  template Var<T> add(Var<T>, Var<T>);                                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                                   \
  template Var<T> affine(Var<T>, T, T);                                                                  \
  template Var<T> relu(Var<T>);                                                                          \
  template Var<T> sigmoid(Var<T>);                                                                       \
  template Var<T> tanh(Var<T>);                                                                          \
  template Var<T> softmax(Var<T>, std::size_t);                                                          \
  template Var<T> normalize_sum(Var<T>, std::size_t);                                                    \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                                 \
  template Var<T> bmm(Var<T>, Var<T>, bool, bool);                                                       \
  template Var<T> transpose_last2(Var<T>);                                                               \
  template Var<T> reshape(Var<T>, Shape);                                                                \
  template Var<T> concat(const std::vector<Var<T>>&);                                                    \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                               \
  template Var<T> slice(Var<T>, std::size_t, std::size_t);                                               \
  template Var<T> gather_rows(Var<T>, const std::vector<std::size_t>&);                                  \
  template Var<T> group_sum(Var<T>, std::size_t);                                                        \
  template Var<T> tile_add(Var<T>, Var<T>);                                                              \
  template Var<T> broadcast_add(Var<T>, Var<T>);                                                         \
  template Var<T> composite(Var<T>, Var<T>);                                                             \
  template Var<T> sum(Var<T>);                                                                           \
  template Var<T> mse(Var<T>, const Tensor<T>&);                                                         \
  template Var<T> info_nce(Var<T>, Var<T>, const std::vector<std::size_t>&, const std::vector<long>&, T);

SETCON_INSTANTIATE_OPS(float)
SETCON_INSTANTIATE_OPS(double)

#undef SETCON_INSTANTIATE_OPS

}  // namespace ops
}  // namespace setcon
