#include "nif/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace nif::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using SMapMat = Eigen::Map<RowMat, 0, Strided>;
using CSMapMat = Eigen::Map<const RowMat, 0, Strided>;

const Tensor& pv(const Node& self, size_t i) { return self.parents[i]->value; }

void require_rank(const Var& v, int rank, const char* what) {
  if (v.value().rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(v.shape()));
  }
}

template <typename F>
Var unary(const Var& a, F&& fwd_and_deriv) {
  // fwd_and_deriv(x) -> pair(y, dy/dx)
  const Tensor& x = a.value();
  Tensor y(x.shape());
  Tensor d(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    auto [yi, di] = fwd_and_deriv(x[i]);
    y[i] = yi;
    d[i] = di;
  }
  return make_op(std::move(y), {a}, [d = std::move(d)](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (int64_t i = 0; i < d.numel(); ++i) (*g)[i] += self.grad[i] * d[i];
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  return make_op(std::move(y), {a, b}, [](Node& self) {
    for (size_t p = 0; p < 2; ++p)
      if (Tensor* g = parent_grad(self, p)) *g += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) *g += self.grad;
    if (Tensor* g = parent_grad(self, 1))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    const Tensor& av = pv(self, 0);
    const Tensor& bv = pv(self, 1);
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = parent_grad(self, 1))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  Tensor y = a.value();
  y *= s;
  return make_op(std::move(y), {a}, [s](Node& self) {
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v += s;
  return make_op(std::move(y), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) *g += self.grad;
  });
}

Var add_n(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no terms");
  Tensor y = terms[0].value();
  for (size_t t = 1; t < terms.size(); ++t) {
    require_same_shape(y, terms[t].value(), "add_n");
    y += terms[t].value();
  }
  return make_op(std::move(y), terms, [](Node& self) {
    for (size_t p = 0; p < self.parents.size(); ++p)
      if (Tensor* g = parent_grad(self, p)) *g += self.grad;
  });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return std::pair{x > 0 ? x : 0.0, x > 0 ? 1.0 : 0.0}; });
}

Var gelu(const Var& a) {
  return unary(a, [](double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
    return std::pair{x * cdf, cdf + x * pdf};
  });
}

Var silu(const Var& a) {
  return unary(a, [](double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return std::pair{x * s, s * (1.0 + x * (1.0 - s))};
  });
}

Var abs(const Var& a) {
  // Subgradient 0 at the kink.
  return unary(a, [](double x) { return std::pair{std::abs(x), x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0)}; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return std::pair{x * x, 2.0 * x}; });
}

Var sum(const Var& a) {
  return make_op(Tensor::scalar(sum_of(a.value())), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const double s = self.grad[0];
      for (double& v : g->values()) v += s;
    }
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.numel());
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  return make_op(Tensor::scalar(sum_of(a.value()) / n), {a}, [n](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const double s = self.grad[0] / n;
      for (double& v : g->values()) v += s;
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  return make_op(a.value().reshaped(std::move(shape)), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var add_rowvec(const Var& x, const Var& v) {
  require_rank(x, 2, "add_rowvec");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (v.numel() != d) throw std::invalid_argument("add_rowvec: vector length mismatch");
  Tensor y = x.value();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) y[i * d + j] += v.value()[j];
  return make_op(std::move(y), {x, v}, [n, d](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) *g += self.grad;
    if (Tensor* g = parent_grad(self, 1))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j];
  });
}

Var mul_rowvec(const Var& x, const Var& v) {
  require_rank(x, 2, "mul_rowvec");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (v.numel() != d) throw std::invalid_argument("mul_rowvec: vector length mismatch");
  Tensor y = x.value();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) y[i * d + j] *= v.value()[j];
  return make_op(std::move(y), {x, v}, [n, d](Node& self) {
    const Tensor& xv = pv(self, 0);
    const Tensor& vv = pv(self, 1);
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[i * d + j] += self.grad[i * d + j] * vv[j];
    if (Tensor* g = parent_grad(self, 1))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j] * xv[i * d + j];
  });
}

Var modulate(const Var& x, const Var& shift, const Var& scale_v) {
  require_rank(x, 2, "modulate");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (shift.numel() != d || scale_v.numel() != d) throw std::invalid_argument("modulate: vector length mismatch");
  Tensor y = x.value();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) y[i * d + j] = y[i * d + j] * (1.0 + scale_v.value()[j]) + shift.value()[j];
  return make_op(std::move(y), {x, shift, scale_v}, [n, d](Node& self) {
    const Tensor& xv = pv(self, 0);
    const Tensor& sc = pv(self, 2);
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[i * d + j] += self.grad[i * d + j] * (1.0 + sc[j]);
    if (Tensor* g = parent_grad(self, 1))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j];
    if (Tensor* g = parent_grad(self, 2))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j] * xv[i * d + j];
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor y(Shape{m, n});
  MapMat(y.data(), m, n).noalias() = CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), k, n);
  return make_op(std::move(y), {a, b}, [m, k, n](Node& self) {
    CMapMat gy(self.grad.data(), m, n);
    if (Tensor* g = parent_grad(self, 0))
      MapMat(g->data(), m, k).noalias() += gy * CMapMat(pv(self, 1).data(), k, n).transpose();
    if (Tensor* g = parent_grad(self, 1))
      MapMat(g->data(), k, n).noalias() += CMapMat(pv(self, 0).data(), m, k).transpose() * gy;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Tensor y(Shape{m, n});
  MapMat(y.data(), m, n).noalias() = CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), n, k).transpose();
  return make_op(std::move(y), {a, b}, [m, k, n](Node& self) {
    CMapMat gy(self.grad.data(), m, n);
    if (Tensor* g = parent_grad(self, 0))
      MapMat(g->data(), m, k).noalias() += gy * CMapMat(pv(self, 1).data(), n, k);
    if (Tensor* g = parent_grad(self, 1))
      MapMat(g->data(), n, k).noalias() += gy.transpose() * CMapMat(pv(self, 0).data(), m, k);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) {
    throw std::invalid_argument("linear: input width " + std::to_string(in) + " does not match weight " +
                                shape_str(w.shape()));
  }
  const bool has_bias = b.defined();
  if (has_bias && b.numel() != out) throw std::invalid_argument("linear: bias length mismatch");
  Tensor y(Shape{n, out});
  MapMat ym(y.data(), n, out);
  ym.noalias() = CMapMat(x.value().data(), n, in) * CMapMat(w.value().data(), out, in).transpose();
  if (has_bias) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), out);
  std::vector<Var> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_op(std::move(y), std::move(parents), [n, in, out, has_bias](Node& self) {
    CMapMat gy(self.grad.data(), n, out);
    if (Tensor* g = parent_grad(self, 0))
      MapMat(g->data(), n, in).noalias() += gy * CMapMat(pv(self, 1).data(), out, in);
    if (Tensor* g = parent_grad(self, 1))
      MapMat(g->data(), out, in).noalias() += gy.transpose() * CMapMat(pv(self, 0).data(), n, in);
    if (has_bias)
      if (Tensor* g = parent_grad(self, 2)) Eigen::Map<Eigen::RowVectorXd>(g->data(), out) += gy.colwise().sum();
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor y(Shape{n, m});
  MapMat(y.data(), n, m) = CMapMat(a.value().data(), m, n).transpose();
  return make_op(std::move(y), {a}, [m, n](Node& self) {
    if (Tensor* g = parent_grad(self, 0))
      MapMat(g->data(), m, n) += CMapMat(self.grad.data(), n, m).transpose();
  });
}

Var slice_cols(const Var& x, int64_t start, int64_t len) {
  require_rank(x, 2, "slice_cols");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (start < 0 || len < 0 || start + len > d) throw std::out_of_range("slice_cols: range out of bounds");
  Tensor y(Shape{n, len});
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(x.value().data() + i * d + start, len, y.data() + i * len);
  return make_op(std::move(y), {x}, [n, d, start, len](Node& self) {
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < len; ++j) (*g)[i * d + start + j] += self.grad[i * len + j];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int64_t n = parts[0].dim(0);
  std::vector<int64_t> widths;
  int64_t total = 0;
  for (const Var& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != n) throw std::invalid_argument("concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Tensor y(Shape{n, total});
  int64_t off = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    for (int64_t i = 0; i < n; ++i)
      std::copy_n(parts[p].value().data() + i * widths[p], widths[p], y.data() + i * total + off);
    off += widths[p];
  }
  return make_op(std::move(y), parts, [n, total, widths](Node& self) {
    int64_t o = 0;
    for (size_t p = 0; p < widths.size(); ++p) {
      if (Tensor* g = parent_grad(self, p))
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < widths[p]; ++j) (*g)[i * widths[p] + j] += self.grad[i * total + o + j];
      o += widths[p];
    }
  });
}

Var gather_rows(const Var& x, const std::vector<int64_t>& idx) {
  require_rank(x, 2, "gather_rows");
  const int64_t n = x.dim(0), d = x.dim(1);
  const auto m = static_cast<int64_t>(idx.size());
  Tensor y(Shape{m, d}, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const int64_t s = idx[static_cast<size_t>(i)];
    if (s >= n) throw std::out_of_range("gather_rows: index out of range");
    if (s >= 0) std::copy_n(x.value().data() + s * d, d, y.data() + i * d);
  }
  return make_op(std::move(y), {x}, [idx, d](Node& self) {
    if (Tensor* g = parent_grad(self, 0))
      for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0) continue;
        double* dst = g->data() + idx[i] * d;
        const double* src = self.grad.data() + static_cast<int64_t>(i) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
  });
}

Var row_dot(const Var& a, const Var& b) {
  require_rank(a, 2, "row_dot");
  require_same_shape(a.value(), b.value(), "row_dot");
  const int64_t n = a.dim(0), d = a.dim(1);
  Tensor y(Shape{n}, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += a.value()[i * d + j] * b.value()[i * d + j];
    y[i] = s;
  }
  return make_op(std::move(y), {a, b}, [n, d](Node& self) {
    const Tensor& av = pv(self, 0);
    const Tensor& bv = pv(self, 1);
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[i * d + j] += self.grad[i] * bv[i * d + j];
    if (Tensor* g = parent_grad(self, 1))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) (*g)[i * d + j] += self.grad[i] * av[i * d + j];
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int64_t n = x.dim(0), d = x.dim(1);
  const bool affine = gamma.defined();
  Tensor xhat(Shape{n, d});
  std::vector<double> inv_std(static_cast<size_t>(n));
  Tensor y(Shape{n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = x.value().data() + i * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < d; ++j) {
      const double h = (xi[j] - mu) * is;
      xhat[i * d + j] = h;
      y[i * d + j] = affine ? h * gamma.value()[j] + beta.value()[j] : h;
    }
  }
  std::vector<Var> parents{x};
  if (affine) {
    parents.push_back(gamma);
    parents.push_back(beta);
  }
  return make_op(std::move(y), std::move(parents),
                 [n, d, affine, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   if (affine) {
                     if (Tensor* g = parent_grad(self, 1))
                       for (int64_t i = 0; i < n; ++i)
                         for (int64_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j] * xhat[i * d + j];
                     if (Tensor* g = parent_grad(self, 2))
                       for (int64_t i = 0; i < n; ++i)
                         for (int64_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j];
                   }
                   Tensor* gx = parent_grad(self, 0);
                   if (!gx) return;
                   std::vector<double> dh(static_cast<size_t>(d));
                   for (int64_t i = 0; i < n; ++i) {
                     double m1 = 0.0, m2 = 0.0;
                     for (int64_t j = 0; j < d; ++j) {
                       const double gj = self.grad[i * d + j] * (affine ? pv(self, 1)[j] : 1.0);
                       dh[static_cast<size_t>(j)] = gj;
                       m1 += gj;
                       m2 += gj * xhat[i * d + j];
                     }
                     m1 /= static_cast<double>(d);
                     m2 /= static_cast<double>(d);
                     const double is = inv_std[static_cast<size_t>(i)];
                     for (int64_t j = 0; j < d; ++j)
                       (*gx)[i * d + j] += is * (dh[static_cast<size_t>(j)] - m1 - xhat[i * d + j] * m2);
                   }
                 });
}

Var rms_norm(const Var& x, const Var& gamma, double eps) {
  require_rank(x, 2, "rms_norm");
  const int64_t n = x.dim(0), d = x.dim(1);
  const bool affine = gamma.defined();
  Tensor xhat(Shape{n, d});
  std::vector<double> inv_rms(static_cast<size_t>(n));
  Tensor y(Shape{n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = x.value().data() + i * d;
    double ms = 0.0;
    for (int64_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
    ms /= static_cast<double>(d);
    const double ir = 1.0 / std::sqrt(ms + eps);
    inv_rms[static_cast<size_t>(i)] = ir;
    for (int64_t j = 0; j < d; ++j) {
      const double h = xi[j] * ir;
      xhat[i * d + j] = h;
      y[i * d + j] = affine ? h * gamma.value()[j] : h;
    }
  }
  std::vector<Var> parents{x};
  if (affine) parents.push_back(gamma);
  return make_op(std::move(y), std::move(parents),
                 [n, d, affine, xhat = std::move(xhat), inv_rms = std::move(inv_rms)](Node& self) {
                   if (affine)
                     if (Tensor* g = parent_grad(self, 1))
                       for (int64_t i = 0; i < n; ++i)
                         for (int64_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j] * xhat[i * d + j];
                   Tensor* gx = parent_grad(self, 0);
                   if (!gx) return;
                   for (int64_t i = 0; i < n; ++i) {
                     double m = 0.0;
                     for (int64_t j = 0; j < d; ++j)
                       m += self.grad[i * d + j] * (affine ? pv(self, 1)[j] : 1.0) * xhat[i * d + j];
                     m /= static_cast<double>(d);
                     const double ir = inv_rms[static_cast<size_t>(i)];
                     for (int64_t j = 0; j < d; ++j) {
                       const double gj = self.grad[i * d + j] * (affine ? pv(self, 1)[j] : 1.0);
                       (*gx)[i * d + j] += ir * (gj - xhat[i * d + j] * m);
                     }
                   }
                 });
}

Var l2_normalize_rows(const Var& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const int64_t n = x.dim(0), d = x.dim(1);
  Tensor y(Shape{n, d});
  std::vector<double> norms(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += x.value()[i * d + j] * x.value()[i * d + j];
    const double nr = std::sqrt(s);
    norms[static_cast<size_t>(i)] = nr;
    const double den = std::max(nr, eps);
    for (int64_t j = 0; j < d; ++j) y[i * d + j] = x.value()[i * d + j] / den;
  }
  Tensor yc = y;
  return make_op(std::move(y), {x}, [n, d, eps, norms = std::move(norms), yc = std::move(yc)](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    for (int64_t i = 0; i < n; ++i) {
      const double nr = norms[static_cast<size_t>(i)];
      if (nr > eps) {
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += yc[i * d + j] * self.grad[i * d + j];
        for (int64_t j = 0; j < d; ++j) (*gx)[i * d + j] += (self.grad[i * d + j] - yc[i * d + j] * dot) / nr;
      } else {
        for (int64_t j = 0; j < d; ++j) (*gx)[i * d + j] += self.grad[i * d + j] / eps;
      }
    }
  });
}

Var chw_to_rows(const Var& x) {
  require_rank(x, 3, "chw_to_rows");
  const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor y(Shape{hw, c});
  MapMat(y.data(), hw, c) = CMapMat(x.value().data(), c, hw).transpose();
  return make_op(std::move(y), {x}, [c, hw](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) MapMat(g->data(), c, hw) += CMapMat(self.grad.data(), hw, c).transpose();
  });
}

Var rows_to_chw(const Var& x, int64_t height, int64_t width) {
  require_rank(x, 2, "rows_to_chw");
  const int64_t hw = x.dim(0), c = x.dim(1);
  if (hw != height * width) throw std::invalid_argument("rows_to_chw: row count does not match H*W");
  Tensor y(Shape{c, height, width});
  MapMat(y.data(), c, hw) = CMapMat(x.value().data(), hw, c).transpose();
  return make_op(std::move(y), {x}, [c, hw](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) MapMat(g->data(), hw, c) += CMapMat(self.grad.data(), c, hw).transpose();
  });
}

namespace {

void im2col(const double* x, int64_t ci, int64_t h, int64_t w, int64_t k, int64_t pad, int64_t ho, int64_t wo,
            double* cols) {
  for (int64_t c = 0; c < ci; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill_n(row + oy * wo, wo, 0.0);
            continue;
          }
          const double* src = x + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox + kx - pad;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, int64_t ci, int64_t h, int64_t w, int64_t k, int64_t pad, int64_t ho, int64_t wo,
            double* x) {
  for (int64_t c = 0; c < ci; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const int64_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int64_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci || w.dim(3) != k) {
    throw std::invalid_argument("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                                shape_str(x.shape()));
  }
  const int64_t ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: input smaller than kernel");
  const int64_t kk = ci * k * k, p = ho * wo;
  Tensor cols(Shape{kk, p});
  im2col(x.value().data(), ci, h, wd, k, pad, ho, wo, cols.data());
  Tensor y(Shape{co, ho, wo});
  MapMat ym(y.data(), co, p);
  ym.noalias() = CMapMat(w.value().data(), co, kk) * CMapMat(cols.data(), kk, p);
  const bool has_bias = b.defined();
  if (has_bias) ym.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), co);
  std::vector<Var> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_op(std::move(y), std::move(parents),
                 [ci, h, wd, co, k, pad, ho, wo, kk, p, has_bias, cols = std::move(cols)](Node& self) {
                   CMapMat gy(self.grad.data(), co, p);
                   if (Tensor* g = parent_grad(self, 1))
                     MapMat(g->data(), co, kk).noalias() += gy * CMapMat(cols.data(), kk, p).transpose();
                   if (has_bias)
                     if (Tensor* g = parent_grad(self, 2))
                       Eigen::Map<Eigen::VectorXd>(g->data(), co) += gy.rowwise().sum();
                   if (Tensor* g = parent_grad(self, 0)) {
                     RowMat gcols = CMapMat(pv(self, 1).data(), co, kk).transpose() * gy;
                     col2im(gcols.data(), ci, h, wd, k, pad, ho, wo, g->data());
                   }
                 });
}

Var adaptive_avg_pool(const Var& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 3, "adaptive_avg_pool");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) {
    throw std::invalid_argument("adaptive_avg_pool: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                " exceeds input " + shape_str(x.shape()));
  }
  auto bins = [](int64_t in, int64_t out) {
    std::vector<std::pair<int64_t, int64_t>> r;
    for (int64_t i = 0; i < out; ++i) r.emplace_back((i * in) / out, ((i + 1) * in + out - 1) / out);
    return r;
  };
  const auto by = bins(h, out_h), bx = bins(w, out_w);
  Tensor y(Shape{c, out_h, out_w}, 0.0);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < out_h; ++i)
      for (int64_t j = 0; j < out_w; ++j) {
        double s = 0.0;
        for (int64_t yy = by[i].first; yy < by[i].second; ++yy)
          for (int64_t xx = bx[j].first; xx < bx[j].second; ++xx) s += x.value()[(ch * h + yy) * w + xx];
        const double cnt = static_cast<double>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
        y[(ch * out_h + i) * out_w + j] = s / cnt;
      }
  return make_op(std::move(y), {x}, [c, h, w, out_h, out_w, by, bx](Node& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < out_h; ++i)
        for (int64_t j = 0; j < out_w; ++j) {
          const double cnt = static_cast<double>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
          const double gv = self.grad[(ch * out_h + i) * out_w + j] / cnt;
          for (int64_t yy = by[i].first; yy < by[i].second; ++yy)
            for (int64_t xx = bx[j].first; xx < bx[j].second; ++xx) (*g)[(ch * h + yy) * w + xx] += gv;
        }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, const Var& bias, const Tensor* mask) {
  require_rank(q, 3, "attention");
  require_rank(k, 3, "attention");
  require_rank(v, 3, "attention");
  const int64_t b = q.dim(0), nq = q.dim(1), d = q.dim(2), nk = k.dim(1);
  if (k.dim(0) != b || v.dim(0) != b || k.dim(2) != d || v.dim(2) != d || v.dim(1) != nk) {
    throw std::invalid_argument("attention: q/k/v shape mismatch");
  }
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  const int64_t dh = d / heads;
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{heads, nq, nk}) throw std::invalid_argument("attention: bias shape mismatch");
  if (mask && mask->shape() != Shape{b, nq, nk}) throw std::invalid_argument("attention: mask shape mismatch");
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor probs(Shape{b, heads, nq, nk});
  Tensor y(Shape{b, nq, d});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t h = 0; h < heads; ++h) {
      CSMapMat qh(q.value().data() + bi * nq * d + h * dh, nq, dh, Strided(d));
      CSMapMat kh(k.value().data() + bi * nk * d + h * dh, nk, dh, Strided(d));
      CSMapMat vh(v.value().data() + bi * nk * d + h * dh, nk, dh, Strided(d));
      MapMat p(probs.data() + (bi * heads + h) * nq * nk, nq, nk);
      p.noalias() = sc * (qh * kh.transpose());
      if (has_bias) p += CMapMat(bias.value().data() + h * nq * nk, nq, nk);
      if (mask) p += CMapMat(mask->data() + bi * nq * nk, nq, nk);
      for (int64_t i = 0; i < nq; ++i) {
        auto row = p.row(i);
        const double mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      SMapMat(y.data() + bi * nq * d + h * dh, nq, dh, Strided(d)).noalias() = p * vh;
    }

  std::vector<Var> parents{q, k, v};
  if (has_bias) parents.push_back(bias);
  return make_op(std::move(y), std::move(parents),
                 [b, nq, nk, d, dh, heads, sc, has_bias, probs = std::move(probs)](Node& self) {
                   Tensor* gq = parent_grad(self, 0);
                   Tensor* gk = parent_grad(self, 1);
                   Tensor* gv = parent_grad(self, 2);
                   Tensor* gb = has_bias ? parent_grad(self, 3) : nullptr;
                   const Tensor& qv = pv(self, 0);
                   const Tensor& kv = pv(self, 1);
                   const Tensor& vv = pv(self, 2);
                   RowMat dp(nq, nk);
                   for (int64_t bi = 0; bi < b; ++bi)
                     for (int64_t h = 0; h < heads; ++h) {
                       CMapMat p(probs.data() + (bi * heads + h) * nq * nk, nq, nk);
                       CSMapMat go(self.grad.data() + bi * nq * d + h * dh, nq, dh, Strided(d));
                       CSMapMat vh(vv.data() + bi * nk * d + h * dh, nk, dh, Strided(d));
                       if (gv) SMapMat(gv->data() + bi * nk * d + h * dh, nk, dh, Strided(d)).noalias() += p.transpose() * go;
                       if (!gq && !gk && !gb) continue;
                       dp.noalias() = go * vh.transpose();
                       for (int64_t i = 0; i < nq; ++i) {
                         const double s = dp.row(i).dot(p.row(i));
                         dp.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - s).matrix());
                       }
                       if (gb) MapMat(gb->data() + h * nq * nk, nq, nk) += dp;
                       CSMapMat qh(qv.data() + bi * nq * d + h * dh, nq, dh, Strided(d));
                       CSMapMat kh(kv.data() + bi * nk * d + h * dh, nk, dh, Strided(d));
                       if (gq) SMapMat(gq->data() + bi * nq * d + h * dh, nq, dh, Strided(d)).noalias() += sc * (dp * kh);
                       if (gk)
                         SMapMat(gk->data() + bi * nk * d + h * dh, nk, dh, Strided(d)).noalias() +=
                             sc * (dp.transpose() * qh);
                     }
                 });
}

Var relative_bias(const Var& table, const std::vector<int64_t>& index, int64_t n) {
  require_rank(table, 2, "relative_bias");
  const int64_t rows = table.dim(0), heads = table.dim(1);
  if (static_cast<int64_t>(index.size()) != n * n) throw std::invalid_argument("relative_bias: index size mismatch");
  Tensor y(Shape{heads, n, n});
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t ij = 0; ij < n * n; ++ij) {
      const int64_t r = index[static_cast<size_t>(ij)];
      if (r < 0 || r >= rows) throw std::out_of_range("relative_bias: table index out of range");
      y[h * n * n + ij] = table.value()[r * heads + h];
    }
  return make_op(std::move(y), {table}, [index, n, heads](Node& self) {
    if (Tensor* g = parent_grad(self, 0))
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t ij = 0; ij < n * n; ++ij) (*g)[index[static_cast<size_t>(ij)] * heads + h] += self.grad[h * n * n + ij];
  });
}

Var rope2d(const Var& x, int heads, const std::vector<int64_t>& rows, const std::vector<int64_t>& cols, double base) {
  require_rank(x, 2, "rope2d");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("rope2d: width not divisible by heads");
  const int64_t dh = d / heads;
  if (dh % 4 != 0) throw std::invalid_argument("rope2d: head dimension must be a multiple of 4");
  if (static_cast<int64_t>(rows.size()) != n || static_cast<int64_t>(cols.size()) != n) {
    throw std::invalid_argument("rope2d: position count mismatch");
  }
  const int64_t half = dh / 2;
  const int64_t pairs = half / 2;
  // cos/sin per (token, axis, pair)
  Tensor cs(Shape{n, 2, pairs}), sn(Shape{n, 2, pairs});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t a = 0; a < 2; ++a)
      for (int64_t m = 0; m < pairs; ++m) {
        const double pos = static_cast<double>(a == 0 ? rows[static_cast<size_t>(i)] : cols[static_cast<size_t>(i)]);
        const double theta = pos * std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(half));
        cs[(i * 2 + a) * pairs + m] = std::cos(theta);
        sn[(i * 2 + a) * pairs + m] = std::sin(theta);
      }
  auto apply = [=](const double* in, double* out, const Tensor& c, const Tensor& s, double sign) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t a = 0; a < 2; ++a)
          for (int64_t m = 0; m < pairs; ++m) {
            const int64_t j = i * d + h * dh + a * half + 2 * m;
            const double cv = c[(i * 2 + a) * pairs + m];
            const double sv = sign * s[(i * 2 + a) * pairs + m];
            const double x0 = in[j], x1 = in[j + 1];
            out[j] += x0 * cv - x1 * sv;
            out[j + 1] += x0 * sv + x1 * cv;
          }
  };
  Tensor y(Shape{n, d}, 0.0);
  apply(x.value().data(), y.data(), cs, sn, 1.0);
  return make_op(std::move(y), {x}, [apply, cs = std::move(cs), sn = std::move(sn)](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) apply(self.grad.data(), g->data(), cs, sn, -1.0);
  });
}

}  // namespace nif::ops
