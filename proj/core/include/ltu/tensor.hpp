#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ltu/rng.hpp"

namespace ltu {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::string shape_str(const Shape& s);

// Dense row-major tensor of 64-bit reals with an optional same-shape gradient
// buffer. Handle semantics: copies share the same storage. Values are
// immutable once built except through the optimizer (values_mut).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Entries ~ Normal(0, stddev^2) drawn row-major from rng.
  static Tensor randn(Shape shape, Rng& rng, double stddev);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rows() const;  // 2-D accessors
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<double> values_mut();
  double item() const;                              // numel()==1
  double at(std::size_t r, std::size_t c) const;    // 2-D
  double at(std::size_t i) const;                   // flat

  bool has_grad() const;
  std::span<const double> grad() const;             // throws if absent
  std::span<double> grad_mut();                     // allocates zeroed buffer
  void zero_grad();                                 // zero if allocated
  void drop_grad();

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first touched
  };
  std::shared_ptr<Impl> impl_;
};

// Records differentiable ops in insertion order; backward() replays them in
// exact reverse, so gradient accumulation order is deterministic. One tape
// per training step. With grad_enabled=false the ops only compute values
// (inference path, safe to run concurrently on separate tapes).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Elementwise and reductions
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor sum(const Tensor& a);
  Tensor gelu(const Tensor& x);

  // Linear algebra
  Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n] -> [m,n]
  Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k] -> [m,n]
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

  // Structured
  Tensor gather_rows(const Tensor& table, std::span<const TokenId> ids);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
  Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
  Tensor concat_cols(const std::vector<Tensor>& xs);

  // Softmax family. softmax_rows is numerically stabilized by row-max
  // subtraction. causal_softmax_rows normalizes row i over columns j<=i and
  // leaves exact zeros above the diagonal.
  Tensor softmax_rows(const Tensor& a);
  Tensor causal_softmax_rows(const Tensor& scores);

  // Fused scaled dot-product attention over all heads at once. q/k/v are
  // [t, d] with d divisible by n_heads; each head's column block is attended
  // with the causal mask and written back to the same block of the output.
  // Numerically equivalent to the slice/scale/softmax/matmul/concat chain,
  // but records a single tape node, which matters at small widths where the
  // per-node bookkeeping dominates the arithmetic.
  Tensor multi_head_causal_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v, std::size_t n_heads);

  // Same, for several sequences stacked row-wise: rows are split into
  // segments of the given lengths and attention never crosses a segment
  // boundary. Lengths must be positive and sum to the row count.
  Tensor multi_head_causal_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v, std::size_t n_heads,
                                     std::vector<std::size_t> seq_lens);

  // Mean of -log p(target) over positions with mask=1. Gradient w.r.t.
  // logits is exactly zero at mask=0 positions.
  Tensor cross_entropy_masked(const Tensor& logits,
                              std::span<const TokenId> targets,
                              std::span<const std::uint8_t> mask);

  // Reverse sweep from a scalar loss. Calling twice without reset() throws:
  // grads would double-accumulate.
  void backward(const Tensor& loss);
  void reset();

 private:
  void record(std::function<void()> fn);

  std::vector<std::function<void()>> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

}  // namespace ltu
