#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "snr/graph.hpp"

namespace snr {

// Numerically safe scalar kernels shared by the graph ops and plain code.
template <typename S>
S sigmoid_stable(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S softplus_stable(S x) {
  // For large x, ln(1+exp(x)) = x + ln(1+exp(-x)).
  if (x > S(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

namespace detail {

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

template <typename S>
Eigen::Map<MatRM<S>> as_matrix(ArrayX<S>& a, Index rows, Index cols) {
  return Eigen::Map<MatRM<S>>(a.data(), rows, cols);
}

template <typename S>
Eigen::Map<const MatRM<S>> as_matrix(const ArrayX<S>& a, Index rows, Index cols) {
  return Eigen::Map<const MatRM<S>>(a.data(), rows, cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_shape(a, b, "add");
  Graph<S>& g = *a.graph();
  Var<S> out = g.make(a.shape(), a.value() + b.value());
  g.set_backward(out, [ai = a.id(), bi = b.id(), oi = out.id()](Graph<S>& g) {
    g.grad(ai) += g.grad(oi);
    g.grad(bi) += g.grad(oi);
  });
  return out;
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require_same_shape(a, b, "sub");
  Graph<S>& g = *a.graph();
  Var<S> out = g.make(a.shape(), a.value() - b.value());
  g.set_backward(out, [ai = a.id(), bi = b.id(), oi = out.id()](Graph<S>& g) {
    g.grad(ai) += g.grad(oi);
    g.grad(bi) -= g.grad(oi);
  });
  return out;
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require_same_shape(a, b, "mul");
  Graph<S>& g = *a.graph();
  Var<S> out = g.make(a.shape(), a.value() * b.value());
  g.set_backward(out, [ai = a.id(), bi = b.id(), oi = out.id()](Graph<S>& g) {
    g.grad(ai) += g.grad(oi) * g.value(bi);
    g.grad(bi) += g.grad(oi) * g.value(ai);
  });
  return out;
}

// k*a + c, elementwise with scalar constants.
template <typename S>
Var<S> affine(Var<S> a, S k, S c) {
  Graph<S>& g = *a.graph();
  Var<S> out = g.make(a.shape(), k * a.value() + c);
  g.set_backward(out, [ai = a.id(), oi = out.id(), k](Graph<S>& g) { g.grad(ai) += k * g.grad(oi); });
  return out;
}

template <typename S>
Var<S> scale(Var<S> a, S k) {
  return affine(a, k, S(0));
}

template <typename S>
Var<S> relu(Var<S> a) {
  Graph<S>& g = *a.graph();
  Var<S> out = g.make(a.shape(), a.value().max(S(0)));
  g.set_backward(out, [ai = a.id(), oi = out.id()](Graph<S>& g) {
    g.grad(ai) += g.grad(oi) * (g.value(ai) > S(0)).template cast<S>();
  });
  return out;
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Graph<S>& g = *a.graph();
  ArrayX<S> v(a.value().size());
  for (Index i = 0; i < v.size(); ++i) v[i] = sigmoid_stable(a.value()[i]);
  Var<S> out = g.make(a.shape(), std::move(v));
  g.set_backward(out, [ai = a.id(), oi = out.id()](Graph<S>& g) {
    const ArrayX<S>& s = g.value(oi);
    g.grad(ai) += g.grad(oi) * s * (S(1) - s);
  });
  return out;
}

template <typename S>
Var<S> softplus(Var<S> a) {
  Graph<S>& g = *a.graph();
  ArrayX<S> v(a.value().size());
  for (Index i = 0; i < v.size(); ++i) v[i] = softplus_stable(a.value()[i]);
  Var<S> out = g.make(a.shape(), std::move(v));
  g.set_backward(out, [ai = a.id(), oi = out.id()](Graph<S>& g) {
    ArrayX<S>& ga = g.grad(ai);
    const ArrayX<S>& x = g.value(ai);
    const ArrayX<S>& go = g.grad(oi);
    for (Index i = 0; i < ga.size(); ++i) ga[i] += go[i] * sigmoid_stable(x[i]);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum(Var<S> a) {
  Graph<S>& g = *a.graph();
  ArrayX<S> v(1);
  v[0] = static_cast<S>(a.value().template cast<double>().sum());
  Var<S> out = g.make(Shape::scalar(), std::move(v));
  g.set_backward(out, [ai = a.id(), oi = out.id()](Graph<S>& g) { g.grad(ai) += g.grad(oi)[0]; });
  return out;
}

template <typename S>
Var<S> mean(Var<S> a) {
  Graph<S>& g = *a.graph();
  const Index m = a.value().size();
  if (m == 0) throw std::invalid_argument("mean: empty input");
  ArrayX<S> v(1);
  v[0] = static_cast<S>(a.value().template cast<double>().sum() / static_cast<double>(m));
  Var<S> out = g.make(Shape::scalar(), std::move(v));
  g.set_backward(out, [ai = a.id(), oi = out.id(), m](Graph<S>& g) {
    g.grad(ai) += g.grad(oi)[0] / static_cast<S>(m);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops

// Copies row r of an (N x C) matrix into a length-C vector node.
template <typename S>
Var<S> row(Var<S> m, Index r) {
  const Shape& sh = m.shape();
  if (sh.rank != 2) throw std::invalid_argument("row: expects a matrix");
  if (r < 0 || r >= sh.dims[0]) throw std::invalid_argument("row: index out of range");
  const Index cols = sh.dims[1];
  Graph<S>& g = *m.graph();
  Var<S> out = g.make(Shape::vector(cols), m.value().segment(r * cols, cols));
  g.set_backward(out, [mi = m.id(), oi = out.id(), r, cols](Graph<S>& g) {
    g.grad(mi).segment(r * cols, cols) += g.grad(oi);
  });
  return out;
}

// Y = X * W^T (+ b), X: (N x in), W: (out x in), b: (out).
template <typename S>
Var<S> fully_connected(Var<S> x, Var<S> w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.rank != 2 || ws.rank != 2) throw std::invalid_argument("fully_connected: expects matrices");
  if (xs.dims[1] != ws.dims[1])
    throw std::invalid_argument("fully_connected: inner dimension mismatch " + xs.str() + " vs " + ws.str());
  const Index n = xs.dims[0], in = xs.dims[1], outc = ws.dims[0];
  Graph<S>& g = *x.graph();
  ArrayX<S> v(n * outc);
  detail::as_matrix(v, n, outc) = detail::as_matrix(x.value(), n, in) * detail::as_matrix(w.value(), outc, in).transpose();
  Var<S> out = g.make(Shape::matrix(n, outc), std::move(v));
  g.set_backward(out, [xi = x.id(), wi = w.id(), oi = out.id(), n, in, outc](Graph<S>& g) {
    auto gy = detail::as_matrix(g.grad(oi), n, outc);
    detail::as_matrix(g.grad(xi), n, in) += gy * detail::as_matrix(g.value(wi), outc, in);
    detail::as_matrix(g.grad(wi), outc, in) += gy.transpose() * detail::as_matrix(g.value(xi), n, in);
  });
  return out;
}

template <typename S>
Var<S> fully_connected(Var<S> x, Var<S> w, Var<S> b) {
  Var<S> y = fully_connected(x, w);
  const Index n = y.shape().dims[0], outc = y.shape().dims[1];
  if (b.shape().rank != 1 || b.shape().dims[0] != outc)
    throw std::invalid_argument("fully_connected: bias length mismatch");
  Graph<S>& g = *y.graph();
  ArrayX<S> v = y.value();
  detail::as_matrix(v, n, outc).rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.value().data(), outc);
  Var<S> out = g.make(y.shape(), std::move(v));
  g.set_backward(out, [yi = y.id(), bi = b.id(), oi = out.id(), n, outc](Graph<S>& g) {
    g.grad(yi) += g.grad(oi);
    auto go = detail::as_matrix(g.grad(oi), n, outc);
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(g.grad(bi).data(), outc) += go.colwise().sum().transpose();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Feature-map ops

// Spatial mean per (sample, channel): [n,c,h,w] -> (n x c).
template <typename S>
Var<S> global_avg_pool(Var<S> f) {
  const Shape& fs = f.shape();
  if (fs.rank != 4) throw std::invalid_argument("global_avg_pool: expects a feature map");
  const Index n = fs.dims[0], c = fs.dims[1], hw = fs.dims[2] * fs.dims[3];
  if (hw < 1) throw std::invalid_argument("global_avg_pool: zero spatial extent");
  Graph<S>& g = *f.graph();
  ArrayX<S> v(n * c);
  for (Index i = 0; i < n * c; ++i)
    v[i] = static_cast<S>(f.value().segment(i * hw, hw).template cast<double>().sum() / static_cast<double>(hw));
  Var<S> out = g.make(Shape::matrix(n, c), std::move(v));
  g.set_backward(out, [fi = f.id(), oi = out.id(), n, c, hw](Graph<S>& g) {
    for (Index i = 0; i < n * c; ++i) g.grad(fi).segment(i * hw, hw) += g.grad(oi)[i] / static_cast<S>(hw);
  });
  return out;
}

// out[i,k,:,:] = gate[i,k] * f[i,k,:,:]; gate is an (n x c) matrix node.
template <typename S>
Var<S> channel_scale(Var<S> f, Var<S> gate) {
  const Shape& fs = f.shape();
  const Shape& gs = gate.shape();
  if (fs.rank != 4 || gs.rank != 2) throw std::invalid_argument("channel_scale: expects feature map and matrix gate");
  if (gs.dims[0] != fs.dims[0] || gs.dims[1] != fs.dims[1])
    throw std::invalid_argument("channel_scale: gate shape mismatch " + gs.str() + " vs " + fs.str());
  const Index n = fs.dims[0], c = fs.dims[1], hw = fs.dims[2] * fs.dims[3];
  Graph<S>& g = *f.graph();
  ArrayX<S> v(fs.count());
  for (Index i = 0; i < n * c; ++i) v.segment(i * hw, hw) = gate.value()[i] * f.value().segment(i * hw, hw);
  Var<S> out = g.make(fs, std::move(v));
  g.set_backward(out, [fi = f.id(), gi = gate.id(), oi = out.id(), n, c, hw](Graph<S>& g) {
    for (Index i = 0; i < n * c; ++i) {
      g.grad(fi).segment(i * hw, hw) += g.value(gi)[i] * g.grad(oi).segment(i * hw, hw);
      g.grad(gi)[i] += static_cast<S>(
          (g.grad(oi).segment(i * hw, hw) * g.value(fi).segment(i * hw, hw)).template cast<double>().sum());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

// Instance normalization: statistics over spatial dims, independently per
// sample and channel; population variance, eps inside the square root.
template <typename S>
Var<S> instance_norm(Var<S> f, Var<S> gamma, Var<S> beta, S eps) {
  const Shape& fs = f.shape();
  if (fs.rank != 4) throw std::invalid_argument("instance_norm: expects a feature map");
  const Index n = fs.dims[0], c = fs.dims[1], hw = fs.dims[2] * fs.dims[3];
  if (hw < 1) throw std::invalid_argument("instance_norm: zero spatial extent");
  if (gamma.shape().rank != 1 || gamma.shape().dims[0] != c || beta.shape().rank != 1 || beta.shape().dims[0] != c)
    throw std::invalid_argument("instance_norm: gamma/beta length must equal channel count");
  if (!(eps > S(0))) throw std::invalid_argument("instance_norm: eps must be positive");

  Graph<S>& g = *f.graph();
  ArrayX<S> xhat(fs.count());
  ArrayX<double> inv(n * c);
  ArrayX<S> v(fs.count());
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < c; ++k) {
      const Index g0 = (i * c + k) * hw;
      auto slice = f.value().segment(g0, hw).template cast<double>();
      const double mu = slice.sum() / static_cast<double>(hw);
      const double var = (slice - mu).square().sum() / static_cast<double>(hw);
      const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv[i * c + k] = is;
      xhat.segment(g0, hw) = ((f.value().segment(g0, hw) - static_cast<S>(mu)) * static_cast<S>(is));
      v.segment(g0, hw) = gamma.value()[k] * xhat.segment(g0, hw) + beta.value()[k];
    }
  }
  Var<S> out = g.make(fs, std::move(v));
  g.set_backward(out, [fi = f.id(), gi = gamma.id(), bi = beta.id(), oi = out.id(), n, c, hw, xhat, inv](Graph<S>& g) {
    const double m = static_cast<double>(hw);
    for (Index i = 0; i < n; ++i) {
      for (Index k = 0; k < c; ++k) {
        const Index g0 = (i * c + k) * hw;
        const double gam = static_cast<double>(g.value(gi)[k]);
        auto go = g.grad(oi).segment(g0, hw).template cast<double>();
        auto xh = xhat.segment(g0, hw).template cast<double>();
        const double sb = go.sum();
        const double sg = (go * xh).sum();
        const double s1 = sb * gam;
        const double s2 = sg * gam;
        g.grad(gi)[k] += static_cast<S>(sg);
        g.grad(bi)[k] += static_cast<S>(sb);
        g.grad(fi).segment(g0, hw) +=
            (inv[i * c + k] * (gam * go - s1 / m - xh * (s2 / m))).template cast<S>();
      }
    }
  });
  return out;
}

// Persistent batch-norm statistics (EMA of batch mean / population variance).
template <typename S>
struct RunningStats {
  Parameter<S>* mean = nullptr;
  Parameter<S>* var = nullptr;
};

namespace detail {

// Shared grouped batch-norm kernel. The group of element e is group_of(e);
// statistics are taken over all elements of a group (training) or read from
// running stats (inference).
template <typename S, typename GroupOf>
Var<S> batch_norm_grouped(Var<S> x, Var<S> gamma, Var<S> beta, RunningStats<S> running, bool training, S eps,
                          S momentum, Index groups, Index group_size, GroupOf group_of, const char* op) {
  Graph<S>& g = *x.graph();
  if (gamma.shape().rank != 1 || gamma.shape().dims[0] != groups || beta.shape().rank != 1 ||
      beta.shape().dims[0] != groups)
    throw std::invalid_argument(std::string(op) + ": gamma/beta length mismatch");
  if (running.mean == nullptr || running.var == nullptr || running.mean->count() != groups ||
      running.var->count() != groups)
    throw std::invalid_argument(std::string(op) + ": running stats missing or mis-sized");

  const Index total = x.value().size();
  ArrayX<double> mu(groups), var(groups);
  if (training) {
    mu.setZero();
    var.setZero();
    for (Index e = 0; e < total; ++e) mu[group_of(e)] += static_cast<double>(x.value()[e]);
    mu /= static_cast<double>(group_size);
    for (Index e = 0; e < total; ++e) {
      const double d = static_cast<double>(x.value()[e]) - mu[group_of(e)];
      var[group_of(e)] += d * d;
    }
    var /= static_cast<double>(group_size);
    for (Index k = 0; k < groups; ++k) {
      running.mean->value[k] =
          static_cast<S>((S(1) - momentum) * running.mean->value[k] + momentum * static_cast<S>(mu[k]));
      running.var->value[k] =
          static_cast<S>((S(1) - momentum) * running.var->value[k] + momentum * static_cast<S>(var[k]));
    }
  } else {
    for (Index k = 0; k < groups; ++k) {
      mu[k] = static_cast<double>(running.mean->value[k]);
      var[k] = static_cast<double>(running.var->value[k]);
    }
  }

  ArrayX<double> inv(groups);
  for (Index k = 0; k < groups; ++k) inv[k] = 1.0 / std::sqrt(var[k] + static_cast<double>(eps));
  ArrayX<S> xhat(total), v(total);
  for (Index e = 0; e < total; ++e) {
    const Index k = group_of(e);
    const S xh = static_cast<S>((static_cast<double>(x.value()[e]) - mu[k]) * inv[k]);
    xhat[e] = xh;
    v[e] = gamma.value()[k] * xh + beta.value()[k];
  }
  Var<S> out = g.make(x.shape(), std::move(v));
  g.set_backward(out, [xi = x.id(), gi = gamma.id(), bi = beta.id(), oi = out.id(), xhat, inv, group_of, groups,
                       group_size, total, training](Graph<S>& g) {
    ArrayX<double> s1 = ArrayX<double>::Zero(groups);
    ArrayX<double> s2 = ArrayX<double>::Zero(groups);
    ArrayX<double> sg = ArrayX<double>::Zero(groups);
    ArrayX<double> sb = ArrayX<double>::Zero(groups);
    for (Index e = 0; e < total; ++e) {
      const Index k = group_of(e);
      const double go = static_cast<double>(g.grad(oi)[e]);
      const double dxh = go * static_cast<double>(g.value(gi)[k]);
      s1[k] += dxh;
      s2[k] += dxh * static_cast<double>(xhat[e]);
      sg[k] += go * static_cast<double>(xhat[e]);
      sb[k] += go;
    }
    for (Index k = 0; k < groups; ++k) {
      g.grad(gi)[k] += static_cast<S>(sg[k]);
      g.grad(bi)[k] += static_cast<S>(sb[k]);
    }
    const double m = static_cast<double>(group_size);
    for (Index e = 0; e < total; ++e) {
      const Index k = group_of(e);
      const double dxh = static_cast<double>(g.grad(oi)[e]) * static_cast<double>(g.value(gi)[k]);
      if (training) {
        g.grad(xi)[e] += static_cast<S>(inv[k] * (dxh - s1[k] / m - static_cast<double>(xhat[e]) * s2[k] / m));
      } else {
        g.grad(xi)[e] += static_cast<S>(inv[k] * dxh);
      }
    }
  });
  return out;
}

}  // namespace detail

// Batch normalization over (sample, spatial) per channel, for feature maps.
// Segment-based: per-(sample, channel) spatial slices are contiguous.
template <typename S>
Var<S> batch_norm(Var<S> f, Var<S> gamma, Var<S> beta, RunningStats<S> running, bool training, S eps = S(1e-5),
                  S momentum = S(0.1)) {
  const Shape& fs = f.shape();
  if (fs.rank != 4) throw std::invalid_argument("batch_norm: expects a feature map");
  const Index n = fs.dims[0], c = fs.dims[1], hw = fs.dims[2] * fs.dims[3];
  if (n * hw < 1) throw std::invalid_argument("batch_norm: empty normalization group");
  if (gamma.shape().rank != 1 || gamma.shape().dims[0] != c || beta.shape().rank != 1 || beta.shape().dims[0] != c)
    throw std::invalid_argument("batch_norm: gamma/beta length mismatch");
  if (running.mean == nullptr || running.var == nullptr || running.mean->count() != c || running.var->count() != c)
    throw std::invalid_argument("batch_norm: running stats missing or mis-sized");

  Graph<S>& g = *f.graph();
  const double m = static_cast<double>(n * hw);
  ArrayX<double> mu(c), var(c);
  if (training) {
    mu.setZero();
    var.setZero();
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < c; ++k) mu[k] += f.value().segment((i * c + k) * hw, hw).template cast<double>().sum();
    mu /= m;
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < c; ++k)
        var[k] += (f.value().segment((i * c + k) * hw, hw).template cast<double>() - mu[k]).square().sum();
    var /= m;
    for (Index k = 0; k < c; ++k) {
      running.mean->value[k] =
          static_cast<S>((S(1) - momentum) * running.mean->value[k] + momentum * static_cast<S>(mu[k]));
      running.var->value[k] =
          static_cast<S>((S(1) - momentum) * running.var->value[k] + momentum * static_cast<S>(var[k]));
    }
  } else {
    for (Index k = 0; k < c; ++k) {
      mu[k] = static_cast<double>(running.mean->value[k]);
      var[k] = static_cast<double>(running.var->value[k]);
    }
  }
  ArrayX<double> inv(c);
  for (Index k = 0; k < c; ++k) inv[k] = 1.0 / std::sqrt(var[k] + static_cast<double>(eps));

  ArrayX<S> xhat(fs.count()), v(fs.count());
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k) {
      const Index g0 = (i * c + k) * hw;
      xhat.segment(g0, hw) = (f.value().segment(g0, hw) - static_cast<S>(mu[k])) * static_cast<S>(inv[k]);
      v.segment(g0, hw) = gamma.value()[k] * xhat.segment(g0, hw) + beta.value()[k];
    }
  Var<S> out = g.make(fs, std::move(v));
  g.set_backward(out, [fi = f.id(), gi = gamma.id(), bi = beta.id(), oi = out.id(), n, c, hw, xhat, inv, m,
                       training](Graph<S>& g) {
    ArrayX<double> s1 = ArrayX<double>::Zero(c), s2 = ArrayX<double>::Zero(c);
    ArrayX<double> sg = ArrayX<double>::Zero(c), sb = ArrayX<double>::Zero(c);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < c; ++k) {
        const Index g0 = (i * c + k) * hw;
        auto go = g.grad(oi).segment(g0, hw).template cast<double>();
        auto xh = xhat.segment(g0, hw).template cast<double>();
        sb[k] += go.sum();
        sg[k] += (go * xh).sum();
      }
    for (Index k = 0; k < c; ++k) {
      const double gam = static_cast<double>(g.value(gi)[k]);
      s1[k] = sb[k] * gam;
      s2[k] = sg[k] * gam;
      g.grad(gi)[k] += static_cast<S>(sg[k]);
      g.grad(bi)[k] += static_cast<S>(sb[k]);
    }
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < c; ++k) {
        const Index g0 = (i * c + k) * hw;
        const double gam = static_cast<double>(g.value(gi)[k]);
        auto go = g.grad(oi).segment(g0, hw).template cast<double>();
        auto xh = xhat.segment(g0, hw).template cast<double>();
        if (training) {
          g.grad(fi).segment(g0, hw) += (inv[k] * (gam * go - s1[k] / m - xh * (s2[k] / m))).template cast<S>();
        } else {
          g.grad(fi).segment(g0, hw) += (inv[k] * gam * go).template cast<S>();
        }
      }
  });
  return out;
}

// Batch normalization over samples per feature, for (N x D) matrices.
template <typename S>
Var<S> batch_norm1d(Var<S> x, Var<S> gamma, Var<S> beta, RunningStats<S> running, bool training, S eps = S(1e-5),
                    S momentum = S(0.1)) {
  const Shape& xs = x.shape();
  if (xs.rank != 2) throw std::invalid_argument("batch_norm1d: expects a matrix");
  const Index d = xs.dims[1];
  if (xs.dims[0] < 1) throw std::invalid_argument("batch_norm1d: empty batch");
  auto group_of = [d](Index e) { return e % d; };
  return detail::batch_norm_grouped(x, gamma, beta, running, training, eps, momentum, d, xs.dims[0], group_of,
                                    "batch_norm1d");
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM), zero padding, square kernels.

namespace detail {

// Reusable per-thread workspaces for the convolution lowering; every element
// is overwritten before use, so reuse never leaks state between calls.
template <typename S>
Eigen::Map<MatRM<S>> scratch_matrix(int slot, Index rows, Index cols) {
  thread_local std::vector<S> buffers[4];
  std::vector<S>& buf = buffers[slot];
  if (static_cast<Index>(buf.size()) < rows * cols) buf.resize(static_cast<std::size_t>(rows * cols));
  return Eigen::Map<MatRM<S>>(buf.data(), rows, cols);
}

template <typename S, typename ColBlock>
void im2col(const ArrayX<S>& f, Index sample, Index c, Index h, Index w, Index kh, Index kw, Index stride, Index pad,
            Index ho, Index wo, ColBlock&& col) {
  for (Index ci = 0; ci < c; ++ci) {
    const Index base = (sample * c + ci) * h * w;
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Index r = (ci * kh + ky) * kw + kx;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + ky - pad;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride + kx - pad;
            col(r, oy * wo + ox) =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? f[base + iy * w + ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S, typename ColBlock>
void col2im_add(const ColBlock& col, Index sample, Index c, Index h, Index w, Index kh, Index kw, Index stride,
                Index pad, Index ho, Index wo, ArrayX<S>& gf) {
  for (Index ci = 0; ci < c; ++ci) {
    const Index base = (sample * c + ci) * h * w;
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Index r = (ci * kh + ky) * kw + kx;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            gf[base + iy * w + ix] += col(r, oy * wo + ox);
          }
        }
      }
    }
  }
}

}  // namespace detail

// f: [n, cin, h, w], weight: [cout, cin, kh, kw]. No bias (a norm layer
// always follows in this codebase).
template <typename S>
Var<S> conv2d(Var<S> f, Var<S> weight, Index stride, Index pad) {
  const Shape& fs = f.shape();
  const Shape& ws = weight.shape();
  if (fs.rank != 4 || ws.rank != 4) throw std::invalid_argument("conv2d: expects feature map and 4-d weight");
  if (fs.dims[1] != ws.dims[1])
    throw std::invalid_argument("conv2d: input channel mismatch " + fs.str() + " vs " + ws.str());
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const Index n = fs.dims[0], cin = fs.dims[1], h = fs.dims[2], w = fs.dims[3];
  const Index cout = ws.dims[0], kh = ws.dims[2], kw = ws.dims[3];
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output would be empty");

  Graph<S>& g = *f.graph();
  const Index howo = ho * wo;
  // One batched GEMM over all samples: columns are sample-major patches.
  ArrayX<S> v(n * cout * howo);
  auto col_all = detail::scratch_matrix<S>(0, cin * kh * kw, n * howo);
  for (Index i = 0; i < n; ++i)
    detail::im2col(f.value(), i, cin, h, w, kh, kw, stride, pad, ho, wo, col_all.middleCols(i * howo, howo));
  auto y_all = detail::scratch_matrix<S>(1, cout, n * howo);
  y_all.noalias() = detail::as_matrix(weight.value(), cout, cin * kh * kw) * col_all;
  for (Index i = 0; i < n; ++i)
    Eigen::Map<MatRM<S>>(v.data() + i * cout * howo, cout, howo) = y_all.middleCols(i * howo, howo);
  Var<S> out = g.make(Shape::tensor4(n, cout, ho, wo), std::move(v));
  g.set_backward(out, [fi = f.id(), wi = weight.id(), oi = out.id(), n, cin, h, w, cout, kh, kw, stride, pad, ho,
                       wo, howo](Graph<S>& g) {
    auto col_all = detail::scratch_matrix<S>(0, cin * kh * kw, n * howo);
    auto gy_all = detail::scratch_matrix<S>(1, cout, n * howo);
    for (Index i = 0; i < n; ++i) {
      detail::im2col(g.value(fi), i, cin, h, w, kh, kw, stride, pad, ho, wo, col_all.middleCols(i * howo, howo));
      gy_all.middleCols(i * howo, howo) = Eigen::Map<const MatRM<S>>(g.grad(oi).data() + i * cout * howo, cout, howo);
    }
    detail::as_matrix(g.grad(wi), cout, cin * kh * kw).noalias() += gy_all * col_all.transpose();
    auto gcol_all = detail::scratch_matrix<S>(2, cin * kh * kw, n * howo);
    gcol_all.noalias() = detail::as_matrix(g.value(wi), cout, cin * kh * kw).transpose() * gy_all;
    for (Index i = 0; i < n; ++i)
      detail::col2im_add<S>(gcol_all.middleCols(i * howo, howo), i, cin, h, w, kh, kw, stride, pad, ho, wo,
                            g.grad(fi));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Vector distance

// d(x, y) = 0.5 - x.y / (2 |x| |y|), in [0, 1]. norm_eps = 0 demands nonzero
// norms; loss code passes a small positive guard instead.
template <typename S>
Var<S> cosine_distance(Var<S> x, Var<S> y, S norm_eps = S(0)) {
  detail::require_same_shape(x, y, "cosine_distance");
  if (x.shape().rank != 1) throw std::invalid_argument("cosine_distance: expects vectors");
  Graph<S>& g = *x.graph();
  const double u = (x.value().template cast<double>() * y.value().template cast<double>()).sum();
  const double rx = std::sqrt(x.value().template cast<double>().square().sum());
  const double ry = std::sqrt(y.value().template cast<double>().square().sum());
  if (norm_eps == S(0) && (rx == 0.0 || ry == 0.0))
    throw std::invalid_argument("cosine_distance: zero-norm input");
  const double nx = rx + static_cast<double>(norm_eps);
  const double ny = ry + static_cast<double>(norm_eps);
  ArrayX<S> v(1);
  v[0] = static_cast<S>(0.5 - u / (2.0 * nx * ny));
  Var<S> out = g.make(Shape::scalar(), std::move(v));
  g.set_backward(out, [xi = x.id(), yi = y.id(), oi = out.id(), u, rx, ry, nx, ny](Graph<S>& g) {
    const double go = static_cast<double>(g.grad(oi)[0]);
    const double tiny = 1e-300;
    auto xv = g.value(xi).template cast<double>();
    auto yv = g.value(yi).template cast<double>();
    // d = 0.5 - u / (2 nx ny); dnx/dx = x / |x|.
    ArrayX<double> dx = -yv / (2.0 * nx * ny) + (u / (2.0 * nx * nx * ny)) * (xv / std::max(rx, tiny));
    ArrayX<double> dy = -xv / (2.0 * nx * ny) + (u / (2.0 * nx * ny * ny)) * (yv / std::max(ry, tiny));
    g.grad(xi) += (go * dx).template cast<S>();
    g.grad(yi) += (go * dy).template cast<S>();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Classification loss (primitive op; the losses module wraps it)

// Mean cross-entropy against label-smoothed targets: 1 - eps on the true
// class, eps/(K-1) on the others.
template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, const std::vector<int>& labels, S smoothing) {
  const Shape& ls = logits.shape();
  if (ls.rank != 2) throw std::invalid_argument("softmax_cross_entropy: expects (N x K) logits");
  const Index n = ls.dims[0], k = ls.dims[1];
  if (static_cast<Index>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  if (smoothing < S(0) || smoothing >= S(1)) throw std::invalid_argument("softmax_cross_entropy: bad smoothing");
  if (smoothing > S(0) && k < 2) throw std::invalid_argument("softmax_cross_entropy: smoothing needs K >= 2");
  for (int lab : labels)
    if (lab < 0 || lab >= k) throw std::invalid_argument("softmax_cross_entropy: label out of range");

  Graph<S>& g = *logits.graph();
  ArrayX<S> probs(n * k);
  double loss = 0;
  const double off = (k > 1) ? static_cast<double>(smoothing) / static_cast<double>(k - 1) : 0.0;
  const double on = 1.0 - static_cast<double>(smoothing);
  for (Index i = 0; i < n; ++i) {
    auto zl = logits.value().segment(i * k, k).template cast<double>();
    const double zmax = zl.maxCoeff();
    ArrayX<double> e = (zl - zmax).exp();
    const double z = e.sum();
    const double logz = std::log(z) + zmax;
    for (Index j = 0; j < k; ++j) {
      const double logp = static_cast<double>(logits.value()[i * k + j]) - logz;
      probs[i * k + j] = static_cast<S>(e[j] / z);
      const double t = (j == labels[static_cast<std::size_t>(i)]) ? on : off;
      loss -= t * logp;
    }
  }
  ArrayX<S> v(1);
  v[0] = static_cast<S>(loss / static_cast<double>(n));
  Var<S> out = g.make(Shape::scalar(), std::move(v));
  g.set_backward(out, [li = logits.id(), oi = out.id(), probs, labels, n, k, on, off](Graph<S>& g) {
    const S go = g.grad(oi)[0];
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < k; ++j) {
        const double t = (j == labels[static_cast<std::size_t>(i)]) ? on : off;
        g.grad(li)[i * k + j] += go * static_cast<S>((static_cast<double>(probs[i * k + j]) - t) / static_cast<double>(n));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Operator sugar

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  return sub(a, b);
}
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
  return mul(a, b);
}
template <typename S>
Var<S> operator*(S k, Var<S> a) {
  return scale(a, k);
}

}  // namespace snr
