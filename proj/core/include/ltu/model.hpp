#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ltu/tensor.hpp"

namespace ltu {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t max_seq_len = 256;
  std::uint64_t init_seed = 0;
  double init_scale = 0.02;

  // Throws ConfigError on zero extents, d_model % n_heads != 0, or a
  // non-positive init scale.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

// Pre-norm decoder blocks, GELU MLP with expansion 4, learned positional
// embeddings, output projection weight-tied to the token embedding.
//
// Parameter count (tied head):
//   vocab_size*d + max_seq_len*d + n_layers*(12*d^2 + 13*d) + 2*d
// per layer: 4 attention matrices (4d^2) + their biases (4d), MLP d->4d->d
// (8d^2 + 5d), and two layer norms (4d).
struct ModelParams {
  struct Layer {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w_up, b_up, w_down, b_down;
  };

  ModelConfig config;
  Tensor tok_emb;  // [vocab_size, d_model]; also the tied output projection
  Tensor pos_emb;  // [max_seq_len, d_model]
  std::vector<Layer> layers;
  Tensor lnf_gain, lnf_bias;

  // Flat view in declaration order; shared handles, not copies. This order
  // defines the checkpoint layout.
  std::vector<Tensor> all_params() const;
  std::size_t param_count() const;
};

std::size_t param_count(const ModelConfig& cfg);

// Matrices ~ Normal(0, init_scale^2) drawn in declaration order from
// init_seed; biases zero; layer-norm gains one. Deterministic.
ModelParams init_model(const ModelConfig& cfg);

// Next-token logits [T, vocab_size]. logits[i] depends only on
// tokens[0..=i]. Throws on out-of-range ids or T > max_seq_len.
Tensor model_forward(Tape& tape, const ModelParams& params,
                     std::span<const TokenId> tokens);

// Batched form: tokens holds several sequences back to back, seq_lens their
// lengths. Logits come back stacked the same way, and each row depends only
// on earlier tokens of its own sequence, exactly as if the sequences were
// run one at a time. One tape node per op instead of one per sequence, which
// is what makes small-model training throughput acceptable.
Tensor model_forward(Tape& tape, const ModelParams& params,
                     std::span<const TokenId> tokens,
                     std::span<const std::size_t> seq_lens);

// Checkpoint file: "LTU1" magic, u32 little-endian length, ModelConfig JSON
// (UTF-8), then parameter tensors in declaration order as little-endian
// 64-bit reals. Loading validates the payload size against the closed-form
// parameter count.
void save_model(const ModelParams& params, const std::string& path);
ModelParams load_model(const std::string& path);

}  // namespace ltu
