#include "dit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dit::ops {

using detail::make_result;

namespace {

// Gradient buffer of input i, or nullptr when that input needs no gradient.
float* gin(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer() : nullptr;
}

const std::vector<float>& vin(Node& self, std::size_t i) { return self.inputs[i]->value; }

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_2d(const char* op, const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-D input, got " + shape_str(x.shape()));
}

void require_3d(const char* op, const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError(std::string(op) + ": expected [C,H,W] input, got " + shape_str(x.shape()));
}

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      float s = 0.0f;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0f);
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    const float* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      float* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (float* g = gin(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    if (float* g = gin(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (float* g = gin(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    const auto& av = vin(self, 0);
    const auto& bv = vin(self, 1);
    if (float* g = gin(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (float* g = gin(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result(a.shape(), std::move(out), "scale", {a}, [s](Node& self) {
    if (float* g = gin(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return make_result(a.shape(), std::move(out), "add_scalar", {a}, [](Node& self) {
    if (float* g = gin(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    float v = x.data()[i];
    out[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  }
  return make_result(x.shape(), std::move(out), "gelu", {x}, [](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    const auto& xv = vin(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      float v = xv[i];
      float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
      float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0f, x.data()[i]);
  return make_result(x.shape(), std::move(out), "relu", {x}, [](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    const auto& xv = vin(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xv[i] > 0.0f) g[i] += self.grad[i];
  });
}

Tensor log(const Tensor& x, float eps) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x.data()[i] + eps);
  return make_result(x.shape(), std::move(out), "log", {x}, [eps](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    const auto& xv = vin(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / (xv[i] + eps);
  });
}

Tensor exp(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
  return make_result(x.shape(), std::move(out), "exp", {x}, [](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  return make_result({1}, {static_cast<float>(s)}, "sum", {x}, [](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    const float go = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += go;
  });
}

Tensor mean(const Tensor& x) {
  const float n = static_cast<float>(x.numel());
  return scale(sum(x), 1.0f / n);
}

// ---------------------------------------------------------------------------
// Matrix ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, n, k, false);
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [m, n, k](Node& self) {
    if (float* ga = gin(self, 0)) gemm_nt(self.grad.data(), vin(self, 1).data(), ga, m, k, n, true);
    if (float* gb = gin(self, 1)) gemm_tn(vin(self, 0).data(), self.grad.data(), gb, k, n, m, true);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_2d("linear", x);
  require_2d("linear", w);
  if (x.dim(1) != w.dim(0)) throw ShapeError("linear", x.shape(), w.shape());
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (b.defined() && b.numel() != n) throw ShapeError("linear bias", w.shape(), b.shape());
  std::vector<float> out(m * n);
  if (b.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), out.begin() + i * n);
  }
  gemm_nn(x.data().data(), w.data().data(), out.data(), m, n, k, b.defined());
  return make_result({m, n}, std::move(out), "linear", {x, w, b}, [m, n, k](Node& self) {
    if (float* gx = gin(self, 0)) gemm_nt(self.grad.data(), vin(self, 1).data(), gx, m, k, n, true);
    if (float* gw = gin(self, 1)) gemm_tn(vin(self, 0).data(), self.grad.data(), gw, k, n, m, true);
    if (float* gb = gin(self, 2)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_2d("add_row", x);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (row.numel() != n) throw ShapeError("add_row", x.shape(), row.shape());
  std::vector<float> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row.data()[j];
  return make_result(x.shape(), std::move(out), "add_row", {x, row}, [m, n](Node& self) {
    if (float* g = gin(self, 0))
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    if (float* g = gin(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  });
}

Tensor transpose(const Tensor& x) {
  require_2d("transpose", x);
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
  return make_result({n, m}, std::move(out), "transpose", {x}, [m, n](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape);
  return make_result(std::move(shape), x.values(), "reshape", {x}, [](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor softmax(const Tensor& x) {
  if (x.ndim() == 0) throw ShapeError("softmax: empty shape");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * n;
    float* o = out.data() + r * n;
    float mx = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return make_result(x.shape(), std::move(out), "softmax", {x}, [rows, n](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = self.value.data() + r * n;
      const float* gy = self.grad.data() + r * n;
      float dot = 0.0f;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  if (gamma.numel() != n) throw ShapeError("layer_norm gamma", x.shape(), gamma.shape());
  if (beta.numel() != n) throw ShapeError("layer_norm beta", x.shape(), beta.shape());
  std::vector<float> out(x.numel());
  std::vector<float> xhat(x.numel());
  std::vector<float> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = static_cast<float>(1.0 / std::sqrt(var + eps));
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = static_cast<float>(in[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        const auto& gm = vin(self, 1);
        float* gx = gin(self, 0);
        float* gg = gin(self, 1);
        float* gb = gin(self, 2);
        std::vector<float> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const float* gy = self.grad.data() + r * n;
          const float* xh = xhat.data() + r * n;
          float s1 = 0.0f, s2 = 0.0f;
          for (std::size_t j = 0; j < n; ++j) {
            if (gg) gg[j] += gy[j] * xh[j];
            if (gb) gb[j] += gy[j];
            dxhat[j] = gy[j] * gm[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
          }
          if (gx) {
            const float inv_n = 1.0f / static_cast<float>(n);
            for (std::size_t j = 0; j < n; ++j)
              gx[r * n + j] += rstd[r] * (dxhat[j] - inv_n * s1 - xh[j] * inv_n * s2);
          }
        }
      });
}

Tensor mean_rows(const Tensor& x) {
  require_2d("mean_rows", x);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (m == 0) throw ShapeError("mean_rows: empty sequence");
  std::vector<float> out(n, 0.0f);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  for (auto& v : out) v /= static_cast<float>(m);
  return make_result({1, n}, std::move(out), "mean_rows", {x}, [m, n](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    const float inv = 1.0f / static_cast<float>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_2d("slice_cols", x);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin + count > n) throw ShapeError("slice_cols: columns [" + std::to_string(begin) + "," +
                                          std::to_string(begin + count) + ") of " + shape_str(x.shape()));
  std::vector<float> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + begin, count, out.data() + i * count);
  return make_result({m, count}, std::move(out), "slice_cols", {x}, [m, n, begin, count](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
  });
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = xs[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& t : xs) {
    require_2d("concat_cols", t);
    if (t.dim(0) != m) throw ShapeError("concat_cols", xs[0].shape(), t.shape());
    widths.push_back(t.dim(1));
    total += t.dim(1);
  }
  std::vector<float> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(xs[k].data().data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return make_result({m, total}, std::move(out), "concat_cols", xs, [m, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (float* g = gin(self, k)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = xs[0].dim(1);
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (const auto& t : xs) {
    require_2d("concat_rows", t);
    if (t.dim(1) != n) throw ShapeError("concat_rows", xs[0].shape(), t.shape());
    sizes.push_back(t.numel());
    rows += t.dim(0);
  }
  std::vector<float> out;
  out.reserve(rows * n);
  for (const auto& t : xs) out.insert(out.end(), t.data().begin(), t.data().end());
  return make_result({rows, n}, std::move(out), "concat_rows", xs, [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (float* g = gin(self, k))
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[off + i];
      off += sizes[k];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  require_2d("gather_rows", table);
  const std::size_t n = table.dim(1);
  std::vector<float> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= table.dim(0))
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " of " + shape_str(table.shape()));
    std::copy_n(table.data().data() + rows[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({idx.size(), n}, std::move(out), "gather_rows", {table}, [idx, n](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
  });
}

Tensor broadcast_rows(const Tensor& row, std::size_t m) {
  const std::size_t n = row.numel();
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(row.data().begin(), row.data().end(), out.begin() + i * n);
  return make_result({m, n}, std::move(out), "broadcast_rows", {row}, [m, n](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  });
}

Tensor replace_rows(const Tensor& x, const std::vector<bool>& mask, const Tensor& source) {
  require_2d("replace_rows", x);
  require_same("replace_rows", x, source);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (mask.size() != m) throw ShapeError("replace_rows: mask length " + std::to_string(mask.size()) +
                                         " vs rows " + std::to_string(m));
  std::vector<float> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    if (mask[i]) std::copy_n(source.data().data() + i * n, n, out.data() + i * n);
  return make_result(x.shape(), std::move(out), "replace_rows", {x, source}, [mask, n](Node& self) {
    float* gx = gin(self, 0);
    float* gs = gin(self, 1);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      float* g = mask[i] ? gs : gx;
      if (!g) continue;
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Feature maps

namespace {

// cols[(c*k + ky)*k + kx, oy*wo + ox]
void im2col(const float* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, float* cols) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        float* dst = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[oy * wo + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                                    ? x[(ci * h + iy) * w + ix]
                                    : 0.0f;
          }
        }
      }
}

void col2im(const float* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, float* x) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const float* src = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            x[(ci * h + iy) * w + ix] += src[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  require_3d("conv2d", x);
  if (w.ndim() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3)) throw ShapeError("conv2d", x.shape(), w.shape());
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t o = w.dim(0), k = w.dim(2);
  if (h + 2 * pad < k || wd + 2 * pad < k) throw ShapeError("conv2d: kernel larger than input", x.shape(), w.shape());
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  if (b.defined() && b.numel() != o) throw ShapeError("conv2d bias", w.shape(), b.shape());
  const std::size_t ckk = c * k * k, hw = ho * wo;
  std::vector<float> cols;
  const float* colp = x.data().data();
  if (!(k == 1 && stride == 1 && pad == 0)) {
    cols.resize(ckk * hw);
    im2col(x.data().data(), c, h, wd, k, stride, pad, ho, wo, cols.data());
    colp = cols.data();
  }
  std::vector<float> out(o * hw, 0.0f);
  if (b.defined())
    for (std::size_t oc = 0; oc < o; ++oc) std::fill_n(out.data() + oc * hw, hw, b.data()[oc]);
  gemm_nn(w.data().data(), colp, out.data(), o, hw, ckk, true);
  return make_result(
      {o, ho, wo}, std::move(out), "conv2d", {x, w, b},
      [c, h, wd, o, k, stride, pad, ho, wo, ckk, hw, cols = std::move(cols)](Node& self) {
        const float* colp = cols.empty() ? vin(self, 0).data() : cols.data();
        if (float* gw = gin(self, 1)) gemm_nt(self.grad.data(), colp, gw, o, ckk, hw, true);
        if (float* gb = gin(self, 2)) {
          for (std::size_t oc = 0; oc < o; ++oc) {
            float s = 0.0f;
            for (std::size_t i = 0; i < hw; ++i) s += self.grad[oc * hw + i];
            gb[oc] += s;
          }
        }
        if (float* gx = gin(self, 0)) {
          if (cols.empty()) {
            gemm_tn(vin(self, 1).data(), self.grad.data(), gx, ckk, hw, o, true);
          } else {
            std::vector<float> dcols(ckk * hw);
            gemm_tn(vin(self, 1).data(), self.grad.data(), dcols.data(), ckk, hw, o, false);
            col2im(dcols.data(), c, h, wd, k, stride, pad, ho, wo, gx);
          }
        }
      });
}

Tensor conv_transpose2x2(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_3d("conv_transpose2x2", x);
  if (w.ndim() != 4 || w.dim(0) != x.dim(0) || w.dim(2) != 2 || w.dim(3) != 2)
    throw ShapeError("conv_transpose2x2", x.shape(), w.shape());
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2), o = w.dim(1);
  if (b.defined() && b.numel() != o) throw ShapeError("conv_transpose2x2 bias", w.shape(), b.shape());
  const std::size_t hw = h * wd;
  // tmp[(oc*2+a)*2+bb, i*W+j] = sum_c w[c, oc, a, bb] * x[c, i, j]
  std::vector<float> tmp(o * 4 * hw);
  gemm_tn(w.data().data(), x.data().data(), tmp.data(), o * 4, hw, c, false);
  const std::size_t ho = 2 * h, wo = 2 * wd;
  std::vector<float> out(o * ho * wo);
  for (std::size_t oc = 0; oc < o; ++oc) {
    const float bias = b.defined() ? b.data()[oc] : 0.0f;
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t bb = 0; bb < 2; ++bb) {
        const float* src = tmp.data() + ((oc * 2 + a) * 2 + bb) * hw;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < wd; ++j) out[(oc * ho + 2 * i + a) * wo + 2 * j + bb] = src[i * wd + j] + bias;
      }
  }
  return make_result({o, ho, wo}, std::move(out), "conv_transpose2x2", {x, w, b}, [c, h, wd, o, hw, ho, wo](Node& self) {
    std::vector<float> gtmp(o * 4 * hw);
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t bb = 0; bb < 2; ++bb) {
          float* dst = gtmp.data() + ((oc * 2 + a) * 2 + bb) * hw;
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < wd; ++j) dst[i * wd + j] = self.grad[(oc * ho + 2 * i + a) * wo + 2 * j + bb];
        }
    if (float* gx = gin(self, 0)) gemm_nn(vin(self, 1).data(), gtmp.data(), gx, c, hw, o * 4, true);
    if (float* gw = gin(self, 1)) gemm_nt(vin(self, 0).data(), gtmp.data(), gw, c, o * 4, hw, true);
    if (float* gb = gin(self, 2)) {
      for (std::size_t oc = 0; oc < o; ++oc) {
        float s = 0.0f;
        for (std::size_t i = 0; i < ho * wo; ++i) s += self.grad[oc * ho * wo + i];
        gb[oc] += s;
      }
    }
  });
}

Tensor maxpool2x2(const Tensor& x) {
  require_3d("maxpool2x2", x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw ShapeError("maxpool2x2: input too small " + shape_str(x.shape()));
  std::vector<float> out(c * ho * wo);
  std::vector<std::size_t> arg(out.size());
  const float* in = x.data().data();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = (ci * h + 2 * i) * w + 2 * j;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t bb = 0; bb < 2; ++bb) {
            std::size_t idx = (ci * h + 2 * i + a) * w + 2 * j + bb;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (ci * ho + i) * wo + j;
        out[o] = in[best];
        arg[o] = best;
      }
  return make_result({c, ho, wo}, std::move(out), "maxpool2x2", {x}, [arg = std::move(arg)](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require_3d("channel_norm", x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor seq = transpose(reshape(x, {c, h * w}));
  Tensor normed = layer_norm(seq, gamma, beta, eps);
  return reshape(transpose(normed), {c, h, w});
}

// ---------------------------------------------------------------------------
// Losses

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  require_2d("cross_entropy", logits);
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  if (targets.size() != m)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  if (m == 0) throw ShapeError("cross_entropy: empty batch");
  std::vector<float> probs(m * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= k)
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " outside [0," +
                              std::to_string(k) + ")");
    const float* row = logits.data().data() + i * k;
    const float mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      s += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<float>(probs[i * k + j] / s);
    loss += std::log(s) + mx - row[targets[i]];
  }
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  return make_result({1}, {static_cast<float>(loss / static_cast<double>(m))}, "cross_entropy", {logits},
                     [m, k, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                       float* g = gin(self, 0);
                       if (!g) return;
                       const float go = self.grad[0] / static_cast<float>(m);
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t j = 0; j < k; ++j) g[i * k + j] += go * probs[i * k + j];
                         g[i * k + static_cast<std::size_t>(tgt[i])] -= go;
                       }
                     });
}

Tensor smooth_l1(const Tensor& pred, std::span<const float> target, float beta) {
  if (target.size() != pred.numel())
    throw ShapeError("smooth_l1: " + std::to_string(target.size()) + " targets for " + shape_str(pred.shape()));
  double loss = 0.0;
  std::vector<float> diff(pred.numel());
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] = pred.data()[i] - target[i];
    const float a = std::fabs(diff[i]);
    loss += a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
  }
  return make_result({1}, {static_cast<float>(loss)}, "smooth_l1", {pred}, [beta, diff = std::move(diff)](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    const float go = self.grad[0];
    for (std::size_t i = 0; i < diff.size(); ++i) {
      const float d = diff[i];
      g[i] += go * (std::fabs(d) < beta ? d / beta : (d > 0 ? 1.0f : -1.0f));
    }
  });
}

Tensor mse(const Tensor& pred, std::span<const float> target) {
  if (target.size() != pred.numel())
    throw ShapeError("mse: " + std::to_string(target.size()) + " targets for " + shape_str(pred.shape()));
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = pred.data()[i] - target[i];
    loss += d * d;
  }
  const std::size_t n = target.size();
  std::vector<float> tgt(target.begin(), target.end());
  return make_result({1}, {static_cast<float>(loss / static_cast<double>(n))}, "mse", {pred},
                     [n, tgt = std::move(tgt)](Node& self) {
                       float* g = gin(self, 0);
                       if (!g) return;
                       const float go = 2.0f * self.grad[0] / static_cast<float>(n);
                       const auto& pv = vin(self, 0);
                       for (std::size_t i = 0; i < n; ++i) g[i] += go * (pv[i] - tgt[i]);
                     });
}

Tensor straight_through(const Tensor& soft) {
  const std::size_t n = soft.shape().back();
  const std::size_t rows = soft.numel() / n;
  std::vector<float> out(soft.numel(), 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = soft.data().data() + r * n;
    // max_element returns the first maximum, i.e. the lowest index on ties.
    out[r * n + static_cast<std::size_t>(std::max_element(row, row + n) - row)] = 1.0f;
  }
  return make_result(soft.shape(), std::move(out), "straight_through", {soft}, [](Node& self) {
    float* g = gin(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, float p, bool training, Rng& rng) {
  if (!training || p <= 0.0f) return x;
  if (p >= 1.0f) throw std::invalid_argument("dropout: p must be < 1");
  std::vector<float> keep(x.numel());
  const float inv = 1.0f / (1.0f - p);
  for (auto& k : keep) k = rng.bernoulli(p) ? 0.0f : inv;
  return mul(x, Tensor::from(x.shape(), std::move(keep)));
}

Tensor stochastic_depth(const Tensor& x, float p, bool training, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) throw std::invalid_argument("stochastic_depth: p must be in [0,1)");
  if (!training || p == 0.0f) return x;
  if (rng.bernoulli(p)) return scale(x, 0.0f);
  return scale(x, 1.0f / (1.0f - p));
}

Tensor multi_head_attention(const Tensor& x, const Tensor& qkv_w, const Tensor& qkv_b, const Tensor& proj_w,
                            const Tensor& proj_b, std::size_t heads) {
  require_2d("attention", x);
  const std::size_t hidden = x.dim(1);
  if (heads == 0 || hidden % heads != 0)
    throw std::invalid_argument("attention: hidden " + std::to_string(hidden) + " not divisible by " +
                                std::to_string(heads) + " heads");
  const std::size_t dh = hidden / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor qkv = linear(x, qkv_w, qkv_b);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Tensor q = slice_cols(qkv, hd * dh, dh);
    Tensor k = slice_cols(qkv, hidden + hd * dh, dh);
    Tensor v = slice_cols(qkv, 2 * hidden + hd * dh, dh);
    Tensor attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt));
    outs.push_back(matmul(attn, v));
  }
  return linear(concat_cols(outs), proj_w, proj_b);
}

}  // namespace dit::ops
