#include "stagechain/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numbers>
#include <string>

#include "stagechain/errors.hpp"

namespace stagechain::ad {

namespace {

using ImplPtr = std::shared_ptr<Tensor::Impl>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor finish(Shape shape, std::vector<double> data, bool track, const char* op) {
  check_finite(data, op);
  return Tensor(std::move(shape), std::move(data), track);
}

std::vector<double>& grad_of(const ImplPtr& p) {
  if (p->grad.empty()) p->grad.assign(p->data.size(), 0.0);
  return p->grad;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

// Softmax over in[0..n), written to out[0..n).
void softmax_span(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    total += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= total;
}

void softmax_span_backward(const double* y, const double* dy, double* dx, std::size_t n) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  const bool track = tracking({&a, &b});
  Tensor out = finish({m, n}, std::move(c), track, "matmul");
  if (track) {
    Tape::active()->record([o = out.impl(), ai = a.impl(), bi = b.impl(), m, k, n] {
      if (o->grad.empty()) return;
      const double* dc = o->grad.data();
      if (ai->requires_grad) {
        auto& da = grad_of(ai);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * bi->data[p * n + j];
            da[i * k + p] += acc;
          }
      }
      if (bi->requires_grad) {
        auto& db = grad_of(bi);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ai->data[i * k + p];
            for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * dc[i * n + j];
          }
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  std::vector<double> c(m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = pb + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = acc;
    }
  }
  const bool track = tracking({&a, &b});
  Tensor out = finish({m, n}, std::move(c), track, "matmul_nt");
  if (track) {
    Tape::active()->record([o = out.impl(), ai = a.impl(), bi = b.impl(), m, k, n] {
      if (o->grad.empty()) return;
      const double* dc = o->grad.data();
      if (ai->requires_grad) {
        auto& da = grad_of(ai);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = dc[i * n + j];
            if (g == 0.0) continue;
            const double* brow = bi->data.data() + j * k;
            double* darow = da.data() + i * k;
            for (std::size_t p = 0; p < k; ++p) darow[p] += g * brow[p];
          }
      }
      if (bi->requires_grad) {
        auto& db = grad_of(bi);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = dc[i * n + j];
            if (g == 0.0) continue;
            const double* arow = ai->data.data() + i * k;
            double* dbrow = db.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) dbrow[p] += g * arow[p];
          }
      }
    });
  }
  return out;
}

Tensor matvec(const Tensor& w, const Tensor& v) {
  require_rank(w, 2, "matvec");
  require_rank(v, 1, "matvec");
  const std::size_t m = w.rows(), k = w.cols();
  if (v.numel() != k) {
    throw DimensionError("matvec: " + shape_string(w.shape()) + " x " + shape_string(v.shape()));
  }
  std::vector<double> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += w.data()[i * k + p] * v.data()[p];
    y[i] = acc;
  }
  const bool track = tracking({&w, &v});
  Tensor out = finish({m}, std::move(y), track, "matvec");
  if (track) {
    Tape::active()->record([o = out.impl(), wi = w.impl(), vi = v.impl(), m, k] {
      if (o->grad.empty()) return;
      const auto& dy = o->grad;
      if (wi->requires_grad) {
        auto& dw = grad_of(wi);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) dw[i * k + p] += dy[i] * vi->data[p];
      }
      if (vi->requires_grad) {
        auto& dv = grad_of(vi);
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += dy[i] * wi->data[i * k + p];
          dv[p] += acc;
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] + b.data()[i];
  const bool track = tracking({&a, &b});
  Tensor out = finish(a.shape(), std::move(c), track, "add");
  if (track) {
    Tape::active()->record([o = out.impl(), ai = a.impl(), bi = b.impl()] {
      if (o->grad.empty()) return;
      for (const ImplPtr& in : {ai, bi}) {
        if (!in->requires_grad) continue;
        auto& g = grad_of(in);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] * b.data()[i];
  const bool track = tracking({&a, &b});
  Tensor out = finish(a.shape(), std::move(c), track, "mul");
  if (track) {
    Tape::active()->record([o = out.impl(), ai = a.impl(), bi = b.impl()] {
      if (o->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] * factor;
  const bool track = tracking({&a});
  Tensor out = finish(a.shape(), std::move(c), track, "scale");
  if (track) {
    Tape::active()->record([o = out.impl(), ai = a.impl(), factor] {
      if (o->grad.empty()) return;
      auto& g = grad_of(ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * factor;
    });
  }
  return out;
}

Tensor scalar_mul(const Tensor& s, const Tensor& x) {
  if (s.numel() != 1) {
    throw DimensionError("scalar_mul: scale must have one element, got " +
                         shape_string(s.shape()));
  }
  const double sv = s.data()[0];
  std::vector<double> c(x.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = sv * x.data()[i];
  const bool track = tracking({&s, &x});
  Tensor out = finish(x.shape(), std::move(c), track, "scalar_mul");
  if (track) {
    Tape::active()->record([o = out.impl(), si = s.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      if (si->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < o->grad.size(); ++i) acc += o->grad[i] * xi->data[i];
        grad_of(si)[0] += acc;
      }
      if (xi->requires_grad) {
        auto& g = grad_of(xi);
        const double sv = si->data[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * sv;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool track = tracking({&x});
  Tensor out = finish({1}, {acc}, track, "sum");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto& g = grad_of(xi);
      for (double& v : g) v += o->grad[0];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sigmoid_scalar(x.data()[i]);
  const bool track = tracking({&x});
  Tensor out = finish(x.shape(), std::move(y), track, "sigmoid");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = o->data[i];
        g[i] += o->grad[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = x.data()[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluK * v * v * v)));
  }
  const bool track = tracking({&x});
  Tensor out = finish(x.shape(), std::move(y), track, "gelu");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xi->data[i];
        const double t = std::tanh(kGeluC * (v + kGeluK * v * v * v));
        const double d = 0.5 * (1.0 + t) +
                         0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * v * v);
        g[i] += o->grad[i] * d;
      }
    });
  }
  return out;
}

Tensor l2_normalize(const Tensor& v, double eps) {
  require_rank(v, 1, "l2_normalize");
  double sq = 0.0;
  for (double e : v.data()) sq += e * e;
  const double norm = std::sqrt(sq);
  const double denom = norm + eps;
  std::vector<double> y(v.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = v.data()[i] / denom;
  const bool track = tracking({&v});
  Tensor out = finish(v.shape(), std::move(y), track, "l2_normalize");
  if (track) {
    Tape::active()->record([o = out.impl(), vi = v.impl(), norm, denom] {
      if (o->grad.empty()) return;
      auto& g = grad_of(vi);
      const auto& dy = o->grad;
      const auto& x = vi->data;
      double dot = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) dot += dy[i] * x[i];
      // d(‖v‖)/dv = v/‖v‖ is undefined at 0; the term vanishes there.
      const double radial = norm > 0.0 ? dot / (norm * denom * denom) : 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += dy[i] / denom - x[i] * radial;
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.rows(), dim = table.cols();
  std::vector<double> y(ids.size() * dim);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw DimensionError("embedding: token id " + std::to_string(ids[t]) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().data() + ids[t] * dim, dim, y.data() + t * dim);
  }
  const bool track = tracking({&table});
  Tensor out = finish({ids.size(), dim}, std::move(y), track, "embedding");
  if (track) {
    Tape::active()->record(
        [o = out.impl(), ti = table.impl(), idv = std::vector<int>(ids.begin(), ids.end()), dim] {
          if (o->grad.empty()) return;
          auto& g = grad_of(ti);
          for (std::size_t t = 0; t < idv.size(); ++t)
            for (std::size_t d = 0; d < dim; ++d) g[idv[t] * dim + d] += o->grad[t * dim + d];
        });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t rows = x.rows(), dim = x.cols();
  if (gain.numel() != dim || bias.numel() != dim) {
    throw DimensionError("layer_norm: gain/bias length must equal " + std::to_string(dim));
  }
  std::vector<double> y(rows * dim), xhat(rows * dim), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * dim;
    double mean = 0.0;
    for (std::size_t d = 0; d < dim; ++d) mean += xr[d];
    mean /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t d = 0; d < dim; ++d) var += (xr[d] - mean) * (xr[d] - mean);
    var /= static_cast<double>(dim);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t d = 0; d < dim; ++d) {
      xhat[r * dim + d] = (xr[d] - mean) * rstd[r];
      y[r * dim + d] = xhat[r * dim + d] * gain.data()[d] + bias.data()[d];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  Tensor out = finish({rows, dim}, std::move(y), track, "layer_norm");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl(), gi = gain.impl(), bi = bias.impl(),
                            xhat = std::move(xhat), rstd = std::move(rstd), rows, dim] {
      if (o->grad.empty()) return;
      const auto& dy = o->grad;
      if (gi->requires_grad) {
        auto& dg = grad_of(gi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t d = 0; d < dim; ++d) dg[d] += dy[r * dim + d] * xhat[r * dim + d];
      }
      if (bi->requires_grad) {
        auto& db = grad_of(bi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t d = 0; d < dim; ++d) db[d] += dy[r * dim + d];
      }
      if (xi->requires_grad) {
        auto& dx = grad_of(xi);
        const double inv_dim = 1.0 / static_cast<double>(dim);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t d = 0; d < dim; ++d) {
            const double dxh = dy[r * dim + d] * gi->data[d];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[r * dim + d];
          }
          mean_dxhat *= inv_dim;
          mean_dxhat_xhat *= inv_dim;
          for (std::size_t d = 0; d < dim; ++d) {
            const double dxh = dy[r * dim + d] * gi->data[d];
            dx[r * dim + d] += rstd[r] * (dxh - mean_dxhat - xhat[r * dim + d] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

namespace {

Tensor softmax_impl(const Tensor& x, bool causal, const char* op) {
  require_rank(x, 2, op);
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> y(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t n = causal ? std::min(r + 1, cols) : cols;
    softmax_span(x.data().data() + r * cols, y.data() + r * cols, n);
  }
  const bool track = tracking({&x});
  Tensor out = finish({rows, cols}, std::move(y), track, op);
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl(), rows, cols, causal] {
      if (o->grad.empty()) return;
      auto& dx = grad_of(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t n = causal ? std::min(r + 1, cols) : cols;
        softmax_span_backward(o->data.data() + r * cols, o->grad.data() + r * cols,
                              dx.data() + r * cols, n);
      }
    });
  }
  return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_impl(x, false, "softmax_rows"); }

Tensor causal_softmax(const Tensor& x) { return softmax_impl(x, true, "causal_softmax"); }

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (start + len > cols) throw DimensionError("slice_cols: range exceeds column count");
  std::vector<double> y(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + start, len, y.data() + r * len);
  const bool track = tracking({&x});
  Tensor out = finish({rows, len}, std::move(y), track, "slice_cols");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl(), rows, cols, start, len] {
      if (o->grad.empty()) return;
      auto& dx = grad_of(xi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) dx[r * cols + start + c] += o->grad[r * len + c];
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  std::vector<double> y(rows * cols);
  bool track = false;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * p.cols(), p.cols(), y.data() + r * cols + offset);
    offset += p.cols();
    track = track || tracking({&p});
  }
  Tensor out = finish({rows, cols}, std::move(y), track, "concat_cols");
  if (track) {
    std::vector<ImplPtr> ins;
    for (const Tensor& p : parts) ins.push_back(p.impl());
    Tape::active()->record([o = out.impl(), ins = std::move(ins), rows, cols] {
      if (o->grad.empty()) return;
      std::size_t off = 0;
      for (const ImplPtr& in : ins) {
        const std::size_t w = in->shape[1];
        if (in->requires_grad) {
          auto& g = grad_of(in);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) g[r * w + c] += o->grad[r * cols + off + c];
        }
        off += w;
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  std::vector<double> y;
  y.reserve(rows * cols);
  bool track = false;
  for (const Tensor& p : parts) {
    y.insert(y.end(), p.data().begin(), p.data().end());
    track = track || tracking({&p});
  }
  Tensor out = finish({rows, cols}, std::move(y), track, "concat_rows");
  if (track) {
    std::vector<ImplPtr> ins;
    for (const Tensor& p : parts) ins.push_back(p.impl());
    Tape::active()->record([o = out.impl(), ins = std::move(ins)] {
      if (o->grad.empty()) return;
      std::size_t off = 0;
      for (const ImplPtr& in : ins) {
        if (in->requires_grad) {
          auto& g = grad_of(in);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[off + i];
        }
        off += in->data.size();
      }
    });
  }
  return out;
}

Tensor row(const Tensor& x, std::size_t i) {
  require_rank(x, 2, "row");
  const std::size_t cols = x.cols();
  if (i >= x.rows()) {
    throw DimensionError("row: index " + std::to_string(i) + " outside " +
                         shape_string(x.shape()));
  }
  std::vector<double> y(x.data().begin() + i * cols, x.data().begin() + (i + 1) * cols);
  const bool track = tracking({&x});
  Tensor out = finish({cols}, std::move(y), track, "row");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl(), i, cols] {
      if (o->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t c = 0; c < cols; ++c) g[i * cols + c] += o->grad[c];
    });
  }
  return out;
}

Tensor add_to_row(const Tensor& x, std::size_t i, const Tensor& v) {
  require_rank(x, 2, "add_to_row");
  const std::size_t cols = x.cols();
  if (i >= x.rows()) {
    throw DimensionError("add_to_row: index " + std::to_string(i) + " outside " +
                         shape_string(x.shape()));
  }
  if (v.numel() != cols) throw DimensionError("add_to_row: vector length mismatch");
  std::vector<double> y(x.data().begin(), x.data().end());
  for (std::size_t c = 0; c < cols; ++c) y[i * cols + c] += v.data()[c];
  const bool track = tracking({&x, &v});
  Tensor out = finish(x.shape(), std::move(y), track, "add_to_row");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl(), vi = v.impl(), i, cols] {
      if (o->grad.empty()) return;
      if (xi->requires_grad) {
        auto& g = grad_of(xi);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += o->grad[k];
      }
      if (vi->requires_grad) {
        auto& g = grad_of(vi);
        for (std::size_t c = 0; c < cols; ++c) g[c] += o->grad[i * cols + c];
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw Error("dropout: p must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * mask[i];
  const bool track = tracking({&x});
  Tensor out = finish(x.shape(), std::move(y), track, "dropout");
  if (track) {
    Tape::active()->record([o = out.impl(), xi = x.impl(), mask = std::move(mask)] {
      if (o->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * mask[i];
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets,
                             int ignore_index) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DimensionError("softmax_cross_entropy: target " + std::to_string(t) +
                           " outside [0, " + std::to_string(vocab) + ")");
    }
    ++count;
  }
  if (count == 0) throw Error("softmax_cross_entropy: no non-ignored targets");

  std::vector<double> probs(rows * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const double* lr = logits.data().data() + r * vocab;
    softmax_span(lr, probs.data() + r * vocab, vocab);
    double mx = lr[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(lr[j] - mx);
    total += (mx + std::log(z)) - lr[targets[r]];
  }
  const double loss = total / static_cast<double>(count);
  const bool track = tracking({&logits});
  Tensor out = finish({1}, {loss}, track, "softmax_cross_entropy");
  if (track) {
    Tape::active()->record([o = out.impl(), li = logits.impl(), probs = std::move(probs),
                            tv = std::vector<int>(targets.begin(), targets.end()), ignore_index,
                            rows, vocab, count] {
      if (o->grad.empty()) return;
      auto& g = grad_of(li);
      const double s = o->grad[0] / static_cast<double>(count);
      for (std::size_t r = 0; r < rows; ++r) {
        if (tv[r] == ignore_index) continue;
        for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += s * probs[r * vocab + j];
        g[r * vocab + tv[r]] -= s;
      }
    });
  }
  return out;
}

}  // namespace stagechain::ad
