#include "ltu/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <utility>

#include "ltu/errors.hpp"

namespace ltu {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap cmap(const Tensor& t) {
  return ECMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}

EMap gmap(Tensor& t) {
  auto g = t.grad_mut();
  return EMap(g.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw RuntimeError(msg);
}

void require_2d(const Tensor& t, const char* op) {
  require(t.shape().size() == 2, std::string(op) + ": expected 2-D tensor, got " +
                                     shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  const std::size_t n = shape_numel(shape);
  t.impl_->shape = std::move(shape);
  t.impl_->values.assign(n, 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  const std::size_t n = shape_numel(shape);
  if (n != values.size()) {
    throw RuntimeError("Tensor::from: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.impl_->values) v = rng.normal(0.0, stddev);
  return t;
}

const Shape& Tensor::shape() const {
  require(defined(), "Tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->values.size() : 0; }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() == 1) return 1;
  require(s.size() == 2, "Tensor::rows: not 2-D: " + shape_str(s));
  return s[0];
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() == 1) return s[0];
  require(s.size() == 2, "Tensor::cols: not 2-D: " + shape_str(s));
  return s[1];
}

std::span<const double> Tensor::values() const {
  require(defined(), "Tensor: use of undefined tensor");
  return impl_->values;
}

std::span<double> Tensor::values_mut() {
  require(defined(), "Tensor: use of undefined tensor");
  return impl_->values;
}

double Tensor::item() const {
  require(numel() == 1, "Tensor::item: tensor has " + std::to_string(numel()) +
                            " elements");
  return impl_->values[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return impl_->values[r * cols() + c];
}

double Tensor::at(std::size_t i) const { return impl_->values[i]; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require(has_grad(), "Tensor::grad: no gradient buffer");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  require(defined(), "Tensor: use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::drop_grad() {
  if (impl_) impl_->grad.clear();
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::function<void()> fn) {
  if (grad_enabled_) nodes_.push_back(std::move(fn));
}

void Tape::backward(const Tensor& loss) {
  require(grad_enabled_, "Tape::backward: tape was built with grads disabled");
  require(loss.numel() == 1, "Tape::backward: loss must be scalar, got " +
                                 shape_str(loss.shape()));
  if (backward_done_) {
    throw RuntimeError(
        "Tape::backward: called twice without reset; gradients would "
        "double-accumulate");
  }
  backward_done_ = true;
  Tensor seed = loss;
  seed.grad_mut()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y = Tensor::zeros(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  record([a = a, b = b, y]() mutable {
    const auto gy = y.grad();
    auto ga = a.grad_mut();
    auto gb = b.grad_mut();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      ga[i] += gy[i];
      gb[i] += gy[i];
    }
  });
  return y;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y = Tensor::zeros(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  record([a = a, b = b, y]() mutable {
    const auto gy = y.grad();
    const auto av = a.values();
    const auto bv = b.values();
    auto ga = a.grad_mut();
    auto gb = b.grad_mut();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      ga[i] += gy[i] * bv[i];
      gb[i] += gy[i] * av[i];
    }
  });
  return y;
}

Tensor Tape::scale(const Tensor& a, double c) {
  Tensor y = Tensor::zeros(a.shape());
  const auto av = a.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = c * av[i];
  record([a = a, y, c]() mutable {
    const auto gy = y.grad();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += c * gy[i];
  });
  return y;
}

Tensor Tape::sum(const Tensor& a) {
  double s = 0.0;
  for (const double v : a.values()) s += v;
  Tensor y = Tensor::scalar(s);
  record([a = a, y]() mutable {
    const double g = y.grad()[0];
    auto ga = a.grad_mut();
    for (double& v : ga) v += g;
  });
  return y;
}

Tensor Tape::gelu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto yv = y.values_mut();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < yv.size(); ++i) {
    yv[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  }
  record([x = x, y]() mutable {
    const auto gy = y.grad();
    const auto xv = x.values();
    auto gx = x.grad_mut();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv[i] * xv[i]);
      gx[i] += gy[i] * (cdf + xv[i] * pdf);
    }
  });
  return y;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    throw RuntimeError("matmul: inner extents differ: " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
  }
  Tensor y = Tensor::zeros({a.rows(), b.cols()});
  {
    EMap ym(y.values_mut().data(), static_cast<Eigen::Index>(y.rows()),
            static_cast<Eigen::Index>(y.cols()));
    ym.noalias() = cmap(a) * cmap(b);
  }
  record([a = a, b = b, y]() mutable {
    ECMap gy(y.grad().data(), static_cast<Eigen::Index>(y.rows()),
             static_cast<Eigen::Index>(y.cols()));
    gmap(a).noalias() += gy * cmap(b).transpose();
    gmap(b).noalias() += cmap(a).transpose() * gy;
  });
  return y;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw RuntimeError("matmul_nt: inner extents differ: " +
                       shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                       "^T");
  }
  Tensor y = Tensor::zeros({a.rows(), b.rows()});
  {
    EMap ym(y.values_mut().data(), static_cast<Eigen::Index>(y.rows()),
            static_cast<Eigen::Index>(y.cols()));
    ym.noalias() = cmap(a) * cmap(b).transpose();
  }
  record([a = a, b = b, y]() mutable {
    ECMap gy(y.grad().data(), static_cast<Eigen::Index>(y.rows()),
             static_cast<Eigen::Index>(y.cols()));
    gmap(a).noalias() += gy * cmap(b);
    gmap(b).noalias() += gy.transpose() * cmap(a);
  });
  return y;
}

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  if (x.cols() != w.rows() || bias.numel() != w.cols()) {
    throw RuntimeError("linear: shape mismatch " + shape_str(x.shape()) +
                       " x " + shape_str(w.shape()) + " + " +
                       shape_str(bias.shape()));
  }
  Tensor y = Tensor::zeros({x.rows(), w.cols()});
  {
    EMap ym(y.values_mut().data(), static_cast<Eigen::Index>(y.rows()),
            static_cast<Eigen::Index>(y.cols()));
    ym.noalias() = cmap(x) * cmap(w);
    const auto bv = bias.values();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double* row = y.values_mut().data() + r * y.cols();
      for (std::size_t c = 0; c < y.cols(); ++c) row[c] += bv[c];
    }
  }
  record([x = x, w = w, bias = bias, y]() mutable {
    ECMap gy(y.grad().data(), static_cast<Eigen::Index>(y.rows()),
             static_cast<Eigen::Index>(y.cols()));
    gmap(x).noalias() += gy * cmap(w).transpose();
    gmap(w).noalias() += cmap(x).transpose() * gy;
    auto gb = bias.grad_mut();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double* row = y.grad().data() + r * y.cols();
      for (std::size_t c = 0; c < y.cols(); ++c) gb[c] += row[c];
    }
  });
  return y;
}

Tensor Tape::gather_rows(const Tensor& table, std::span<const TokenId> ids) {
  require_2d(table, "gather_rows");
  const std::size_t n_rows = table.rows();
  const std::size_t d = table.cols();
  for (const TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n_rows) {
      throw RuntimeError("gather_rows: index " + std::to_string(id) +
                         " out of range for table " + shape_str(table.shape()));
    }
  }
  Tensor y = Tensor::zeros({ids.size(), d});
  const auto tv = table.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = tv.data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, yv.data() + i * d);
  }
  std::vector<TokenId> ids_copy(ids.begin(), ids.end());
  record([table = table, y, ids = std::move(ids_copy), d]() mutable {
    const auto gy = y.grad();
    auto gt = table.grad_mut();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
      const double* src = gy.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
  return y;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain,
                        const Tensor& bias) {
  require_2d(x, "layer_norm");
  const std::size_t n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw RuntimeError("layer_norm: gain/bias " + shape_str(gain.shape()) +
                       "/" + shape_str(bias.shape()) + " do not match " +
                       shape_str(x.shape()));
  }
  constexpr double eps = 1e-5;
  const std::size_t m = x.rows();
  Tensor y = Tensor::zeros(x.shape());
  // x_hat and rstd are needed for the backward pass
  Tensor x_hat = Tensor::zeros(x.shape());
  std::vector<double> rstd(m);
  {
    const auto xv = x.values();
    const auto gv = gain.values();
    const auto bv = bias.values();
    auto yv = y.values_mut();
    auto hv = x_hat.values_mut();
    for (std::size_t r = 0; r < m; ++r) {
      const double* row = xv.data() + r * n;
      double mean = 0.0;
      for (std::size_t c = 0; c < n; ++c) mean += row[c];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double dv = row[c] - mean;
        var += dv * dv;
      }
      var /= static_cast<double>(n);
      const double rs = 1.0 / std::sqrt(var + eps);
      rstd[r] = rs;
      for (std::size_t c = 0; c < n; ++c) {
        const double h = (row[c] - mean) * rs;
        hv[r * n + c] = h;
        yv[r * n + c] = gv[c] * h + bv[c];
      }
    }
  }
  record([x = x, gain = gain, bias = bias, y, x_hat,
          rstd = std::move(rstd), m, n]() mutable {
    const auto gy = y.grad();
    const auto hv = x_hat.values();
    const auto gv = gain.values();
    auto gx = x.grad_mut();
    auto gg = gain.grad_mut();
    auto gb = bias.grad_mut();
    for (std::size_t r = 0; r < m; ++r) {
      const double* gyr = gy.data() + r * n;
      const double* hr = hv.data() + r * n;
      double sum_dh = 0.0;
      double sum_dh_h = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double dh = gyr[c] * gv[c];
        sum_dh += dh;
        sum_dh_h += dh * hr[c];
        gg[c] += gyr[c] * hr[c];
        gb[c] += gyr[c];
      }
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t c = 0; c < n; ++c) {
        const double dh = gyr[c] * gv[c];
        gx[r * n + c] +=
            rstd[r] * (dh - inv_n * sum_dh - hr[c] * inv_n * sum_dh_h);
      }
    }
  });
  return y;
}

Tensor Tape::slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_2d(x, "slice_cols");
  if (begin + count > x.cols()) {
    throw RuntimeError("slice_cols: [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") out of range for " +
                       shape_str(x.shape()));
  }
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Tensor y = Tensor::zeros({m, count});
  const auto xv = x.values();
  auto yv = y.values_mut();
  for (std::size_t r = 0; r < m; ++r) {
    std::copy(xv.data() + r * n + begin, xv.data() + r * n + begin + count,
              yv.data() + r * count);
  }
  record([x = x, y, begin, count, m, n]() mutable {
    const auto gy = y.grad();
    auto gx = x.grad_mut();
    for (std::size_t r = 0; r < m; ++r) {
      const double* src = gy.data() + r * count;
      double* dst = gx.data() + r * n + begin;
      for (std::size_t c = 0; c < count; ++c) dst[c] += src[c];
    }
  });
  return y;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_cols: empty input list");
  const std::size_t m = xs.front().rows();
  std::size_t total = 0;
  for (const Tensor& x : xs) {
    require(x.shape().size() == 2 && x.rows() == m,
            "concat_cols: row counts differ");
    total += x.cols();
  }
  Tensor y = Tensor::zeros({m, total});
  auto yv = y.values_mut();
  std::size_t off = 0;
  for (const Tensor& x : xs) {
    const auto xv = x.values();
    const std::size_t w = x.cols();
    for (std::size_t r = 0; r < m; ++r) {
      std::copy(xv.data() + r * w, xv.data() + (r + 1) * w,
                yv.data() + r * total + off);
    }
    off += w;
  }
  record([xs = xs, y, m, total]() mutable {
    const auto gy = y.grad();
    std::size_t off = 0;
    for (Tensor& x : xs) {
      auto gx = x.grad_mut();
      const std::size_t w = x.cols();
      for (std::size_t r = 0; r < m; ++r) {
        const double* src = gy.data() + r * total + off;
        double* dst = gx.data() + r * w;
        for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
      }
      off += w;
    }
  });
  return y;
}

Tensor Tape::softmax_rows(const Tensor& a) {
  require_2d(a, "softmax_rows");
  for (const double v : a.values()) {
    if (!std::isfinite(v)) {
      throw RuntimeError("softmax_rows: non-finite input");
    }
  }
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Tensor y = Tensor::zeros(a.shape());
  {
    const auto av = a.values();
    auto yv = y.values_mut();
    for (std::size_t r = 0; r < m; ++r) {
      const double* row = av.data() + r * n;
      double mx = row[0];
      for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
      double z = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double e = std::exp(row[c] - mx);
        yv[r * n + c] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t c = 0; c < n; ++c) yv[r * n + c] *= inv;
    }
  }
  record([a = a, y, m, n]() mutable {
    const auto gy = y.grad();
    const auto yv = y.values();
    auto ga = a.grad_mut();
    for (std::size_t r = 0; r < m; ++r) {
      const double* gyr = gy.data() + r * n;
      const double* yr = yv.data() + r * n;
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += gyr[c] * yr[c];
      for (std::size_t c = 0; c < n; ++c) {
        ga[r * n + c] += yr[c] * (gyr[c] - dot);
      }
    }
  });
  return y;
}

Tensor Tape::causal_softmax_rows(const Tensor& scores) {
  require_2d(scores, "causal_softmax_rows");
  require(scores.rows() == scores.cols(),
          "causal_softmax_rows: expected square scores, got " +
              shape_str(scores.shape()));
  const std::size_t t = scores.rows();
  Tensor y = Tensor::zeros(scores.shape());
  {
    const auto sv = scores.values();
    auto yv = y.values_mut();
    for (std::size_t r = 0; r < t; ++r) {
      const double* row = sv.data() + r * t;
      double mx = row[0];
      for (std::size_t c = 1; c <= r; ++c) mx = std::max(mx, row[c]);
      double z = 0.0;
      for (std::size_t c = 0; c <= r; ++c) {
        const double e = std::exp(row[c] - mx);
        yv[r * t + c] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t c = 0; c <= r; ++c) yv[r * t + c] *= inv;
    }
  }
  record([scores = scores, y, t]() mutable {
    const auto gy = y.grad();
    const auto yv = y.values();
    auto gs = scores.grad_mut();
    for (std::size_t r = 0; r < t; ++r) {
      const double* gyr = gy.data() + r * t;
      const double* yr = yv.data() + r * t;
      double dot = 0.0;
      for (std::size_t c = 0; c <= r; ++c) dot += gyr[c] * yr[c];
      for (std::size_t c = 0; c <= r; ++c) {
        gs[r * t + c] += yr[c] * (gyr[c] - dot);
      }
    }
  });
  return y;
}

Tensor Tape::multi_head_causal_attention(const Tensor& q, const Tensor& k,
                                         const Tensor& v,
                                         std::size_t n_heads) {
  return multi_head_causal_attention(q, k, v, n_heads, {q.rows()});
}

Tensor Tape::multi_head_causal_attention(const Tensor& q, const Tensor& k,
                                         const Tensor& v, std::size_t n_heads,
                                         std::vector<std::size_t> seq_lens) {
  require_2d(q, "multi_head_causal_attention");
  require_2d(k, "multi_head_causal_attention");
  require_2d(v, "multi_head_causal_attention");
  require(q.shape() == k.shape() && q.shape() == v.shape(),
          "multi_head_causal_attention: q/k/v shapes differ: " +
              shape_str(q.shape()) + " / " + shape_str(k.shape()) + " / " +
              shape_str(v.shape()));
  const std::size_t t = q.rows();
  const std::size_t d = q.cols();
  require(n_heads >= 1 && d % n_heads == 0,
          "multi_head_causal_attention: width " + std::to_string(d) +
              " is not divisible into " + std::to_string(n_heads) + " heads");
  require(!seq_lens.empty(), "multi_head_causal_attention: no segments");
  std::size_t total = 0, wsize = 0, max_len = 0;
  for (const std::size_t len : seq_lens) {
    require(len >= 1, "multi_head_causal_attention: empty segment");
    total += len;
    wsize += len * len;
    max_len = std::max(max_len, len);
  }
  require(total == t, "multi_head_causal_attention: segment lengths sum to " +
                          std::to_string(total) + ", rows are " +
                          std::to_string(t));
  const std::size_t hd = d / n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto ei = [](std::size_t s) { return static_cast<Eigen::Index>(s); };

  // Softmax weights for every segment and head, kept for the backward pass.
  // Entries above a segment's diagonal are never written and stay exactly
  // zero, so a plain dense product applies the causal mask for free.
  std::vector<double> weights(n_heads * wsize, 0.0);
  Tensor y = Tensor::zeros(q.shape());
  {
    const auto qv = q.values();
    const auto kv = k.values();
    const auto vv = v.values();
    auto yv = y.values_mut();
    std::vector<double> scores(max_len * max_len);
    std::size_t r0 = 0, w_off = 0;
    for (const std::size_t tb : seq_lens) {
      for (std::size_t h0 = 0; h0 < n_heads; ++h0) {
        const std::size_t p0 = r0 * d + h0 * hd;
        Eigen::Map<const EMat, 0, Eigen::OuterStride<>> qh(
            qv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<const EMat, 0, Eigen::OuterStride<>> kh(
            kv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<const EMat, 0, Eigen::OuterStride<>> vh(
            vv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        EMap sm(scores.data(), ei(tb), ei(tb));
        sm.noalias() = qh * kh.transpose() * att_scale;
        double* w = weights.data() + w_off;
        for (std::size_t r = 0; r < tb; ++r) {
          const double* row = scores.data() + r * tb;
          double mx = row[0];
          for (std::size_t c = 1; c <= r; ++c) mx = std::max(mx, row[c]);
          double z = 0.0;
          for (std::size_t c = 0; c <= r; ++c) {
            const double e = std::exp(row[c] - mx);
            w[r * tb + c] = e;
            z += e;
          }
          const double inv = 1.0 / z;
          for (std::size_t c = 0; c <= r; ++c) w[r * tb + c] *= inv;
        }
        Eigen::Map<EMat, 0, Eigen::OuterStride<>> yh(
            yv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        ECMap wm(w, ei(tb), ei(tb));
        yh.noalias() = wm * vh;
        w_off += tb * tb;
      }
      r0 += tb;
    }
  }
  record([q = q, k = k, v = v, y, weights = std::move(weights),
          seq_lens = std::move(seq_lens), n_heads, d, hd, max_len, att_scale,
          ei]() mutable {
    const auto gy = y.grad();
    const auto qv = q.values();
    const auto kv = k.values();
    const auto vv = v.values();
    auto gq = q.grad_mut();
    auto gk = k.grad_mut();
    auto gv = v.grad_mut();
    std::vector<double> gw(max_len * max_len), gs(max_len * max_len, 0.0);
    std::size_t r0 = 0, w_off = 0;
    for (const std::size_t tb : seq_lens) {
      for (std::size_t h0 = 0; h0 < n_heads; ++h0) {
        const std::size_t p0 = r0 * d + h0 * hd;
        Eigen::Map<const EMat, 0, Eigen::OuterStride<>> qh(
            qv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<const EMat, 0, Eigen::OuterStride<>> kh(
            kv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<const EMat, 0, Eigen::OuterStride<>> vh(
            vv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<const EMat, 0, Eigen::OuterStride<>> gyh(
            gy.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<EMat, 0, Eigen::OuterStride<>> gqh(
            gq.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<EMat, 0, Eigen::OuterStride<>> gkh(
            gk.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        Eigen::Map<EMat, 0, Eigen::OuterStride<>> gvh(
            gv.data() + p0, ei(tb), ei(hd), Eigen::OuterStride<>(ei(d)));
        const double* w = weights.data() + w_off;
        ECMap wm(w, ei(tb), ei(tb));

        EMap gwm(gw.data(), ei(tb), ei(tb));
        gwm.noalias() = gyh * vh.transpose();
        gvh.noalias() += wm.transpose() * gyh;

        // Softmax backward, restricted to the causal lower triangle. gs is
        // only read at r*tb+c for c <= r, and those slots are written here
        // every iteration, so reuse across segments and heads is safe.
        for (std::size_t r = 0; r < tb; ++r) {
          const double* gwr = gw.data() + r * tb;
          const double* wr = w + r * tb;
          double dot = 0.0;
          for (std::size_t c = 0; c <= r; ++c) dot += gwr[c] * wr[c];
          for (std::size_t c = 0; c <= r; ++c) {
            gs[r * tb + c] = wr[c] * (gwr[c] - dot);
          }
        }
        EMap gsm(gs.data(), ei(tb), ei(tb));
        for (std::size_t r = 0; r < tb; ++r) {
          for (std::size_t c = r + 1; c < tb; ++c) gs[r * tb + c] = 0.0;
        }
        gqh.noalias() += att_scale * (gsm * kh);
        gkh.noalias() += att_scale * (gsm.transpose() * qh);
        w_off += tb * tb;
      }
      r0 += tb;
    }
  });
  return y;
}

Tensor Tape::cross_entropy_masked(const Tensor& logits,
                                  std::span<const TokenId> targets,
                                  std::span<const std::uint8_t> mask) {
  require_2d(logits, "cross_entropy_masked");
  const std::size_t t = logits.rows();
  const std::size_t v = logits.cols();
  require(targets.size() == t && mask.size() == t,
          "cross_entropy_masked: targets/mask length does not match logits " +
              shape_str(logits.shape()));
  std::size_t active = 0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    ++active;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw RuntimeError("cross_entropy_masked: target id " +
                         std::to_string(targets[i]) + " out of range [0, " +
                         std::to_string(v) + ")");
    }
  }
  if (active == 0) {
    throw RuntimeError("cross_entropy_masked: all-zero mask, empty loss");
  }

  // Softmax probabilities are kept for the masked rows only; unmasked rows
  // stay zero and are never touched in the backward pass.
  Tensor probs = Tensor::zeros(logits.shape());
  double total = 0.0;
  {
    const auto lv = logits.values();
    auto pv = probs.values_mut();
    for (std::size_t i = 0; i < t; ++i) {
      if (!mask[i]) continue;
      const double* row = lv.data() + i * v;
      double mx = row[0];
      for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
      double z = 0.0;
      for (std::size_t c = 0; c < v; ++c) {
        const double e = std::exp(row[c] - mx);
        pv[i * v + c] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t c = 0; c < v; ++c) pv[i * v + c] *= inv;
      total += -(row[static_cast<std::size_t>(targets[i])] - mx - std::log(z));
    }
  }
  Tensor loss = Tensor::scalar(total / static_cast<double>(active));
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  record([logits = logits, probs, loss, tgt = std::move(tgt),
          msk = std::move(msk), t, v, active]() mutable {
    const double g = loss.grad()[0] / static_cast<double>(active);
    const auto pv = probs.values();
    auto gl = logits.grad_mut();
    for (std::size_t i = 0; i < t; ++i) {
      if (!msk[i]) continue;
      const double* pr = pv.data() + i * v;
      double* gr = gl.data() + i * v;
      for (std::size_t c = 0; c < v; ++c) gr[c] += g * pr[c];
      gr[static_cast<std::size_t>(tgt[i])] -= g;
    }
  });
  return loss;
}

}  // namespace ltu
