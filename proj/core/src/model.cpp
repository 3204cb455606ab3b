#include "ltu/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ltu/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace ltu {

using nlohmann::json;

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 ||
      max_seq_len == 0) {
    throw ConfigError("ModelConfig: all extents must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("ModelConfig: d_model=" + std::to_string(d_model) +
                      " not divisible by n_heads=" + std::to_string(n_heads));
  }
  if (!(init_scale > 0.0) || !std::isfinite(init_scale)) {
    throw ConfigError("ModelConfig: init_scale must be positive and finite");
  }
}

std::string ModelConfig::to_json() const {
  json j{{"vocab_size", vocab_size},   {"d_model", d_model},
         {"n_heads", n_heads},         {"n_layers", n_layers},
         {"max_seq_len", max_seq_len}, {"init_seed", init_seed},
         {"init_scale", init_scale}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("ModelConfig: bad JSON: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    cfg.init_scale = j.at("init_scale").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("ModelConfig: missing field: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::vector<Tensor> ModelParams::all_params() const {
  std::vector<Tensor> out;
  out.reserve(2 + layers.size() * 16 + 2);
  out.push_back(tok_emb);
  out.push_back(pos_emb);
  for (const Layer& l : layers) {
    out.push_back(l.ln1_gain);
    out.push_back(l.ln1_bias);
    out.push_back(l.wq);
    out.push_back(l.bq);
    out.push_back(l.wk);
    out.push_back(l.bk);
    out.push_back(l.wv);
    out.push_back(l.bv);
    out.push_back(l.wo);
    out.push_back(l.bo);
    out.push_back(l.ln2_gain);
    out.push_back(l.ln2_bias);
    out.push_back(l.w_up);
    out.push_back(l.b_up);
    out.push_back(l.w_down);
    out.push_back(l.b_down);
  }
  out.push_back(lnf_gain);
  out.push_back(lnf_bias);
  return out;
}

std::size_t ModelParams::param_count() const {
  std::size_t n = 0;
  for (const Tensor& t : all_params()) n += t.numel();
  return n;
}

std::size_t param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  return cfg.vocab_size * d + cfg.max_seq_len * d +
         cfg.n_layers * (12 * d * d + 13 * d) + 2 * d;
}

ModelParams init_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.init_seed);
  const std::size_t d = cfg.d_model;
  const std::size_t h = 4 * d;

  auto weight = [&](std::size_t r, std::size_t c) {
    return Tensor::randn({r, c}, rng, cfg.init_scale);
  };
  auto bias = [&](std::size_t n) { return Tensor::zeros({n}); };
  auto one = [&](std::size_t n) { return Tensor::full({n}, 1.0); };

  ModelParams p;
  p.config = cfg;
  p.tok_emb = weight(cfg.vocab_size, d);
  p.pos_emb = weight(cfg.max_seq_len, d);
  p.layers.resize(cfg.n_layers);
  for (ModelParams::Layer& l : p.layers) {
    l.ln1_gain = one(d);
    l.ln1_bias = bias(d);
    l.wq = weight(d, d);
    l.bq = bias(d);
    l.wk = weight(d, d);
    l.bk = bias(d);
    l.wv = weight(d, d);
    l.bv = bias(d);
    l.wo = weight(d, d);
    l.bo = bias(d);
    l.ln2_gain = one(d);
    l.ln2_bias = bias(d);
    l.w_up = weight(d, h);
    l.b_up = bias(h);
    l.w_down = weight(h, d);
    l.b_down = bias(d);
  }
  p.lnf_gain = one(d);
  p.lnf_bias = bias(d);
  return p;
}

Tensor model_forward(Tape& tape, const ModelParams& params,
                     std::span<const TokenId> tokens) {
  const std::size_t lens[1] = {tokens.size()};
  return model_forward(tape, params, tokens, lens);
}

Tensor model_forward(Tape& tape, const ModelParams& params,
                     std::span<const TokenId> tokens,
                     std::span<const std::size_t> seq_lens) {
  const ModelConfig& cfg = params.config;
  if (seq_lens.empty()) {
    throw RuntimeError("model_forward: no sequences");
  }
  std::size_t total = 0;
  for (const std::size_t len : seq_lens) {
    if (len == 0) throw RuntimeError("model_forward: empty token sequence");
    if (len > cfg.max_seq_len) {
      throw RuntimeError("model_forward: sequence length " +
                         std::to_string(len) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    }
    total += len;
  }
  if (total != tokens.size()) {
    throw RuntimeError("model_forward: sequence lengths sum to " +
                       std::to_string(total) + " but " +
                       std::to_string(tokens.size()) + " tokens were given");
  }
  for (const TokenId id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw RuntimeError("model_forward: token id " + std::to_string(id) +
                         " out of range [0, " + std::to_string(cfg.vocab_size) +
                         ")");
    }
  }

  const std::size_t n_heads = cfg.n_heads;
  const std::vector<std::size_t> lens(seq_lens.begin(), seq_lens.end());

  std::vector<TokenId> positions;
  positions.reserve(total);
  for (const std::size_t len : lens) {
    for (std::size_t i = 0; i < len; ++i) {
      positions.push_back(static_cast<TokenId>(i));
    }
  }

  Tensor x = tape.add(tape.gather_rows(params.tok_emb, tokens),
                      tape.gather_rows(params.pos_emb, positions));

  for (const ModelParams::Layer& l : params.layers) {
    Tensor h = tape.layer_norm(x, l.ln1_gain, l.ln1_bias);
    Tensor q = tape.linear(h, l.wq, l.bq);
    Tensor k = tape.linear(h, l.wk, l.bk);
    Tensor v = tape.linear(h, l.wv, l.bv);
    Tensor attn = tape.linear(
        tape.multi_head_causal_attention(q, k, v, n_heads, lens), l.wo, l.bo);
    x = tape.add(x, attn);

    Tensor h2 = tape.layer_norm(x, l.ln2_gain, l.ln2_bias);
    Tensor mlp = tape.linear(tape.gelu(tape.linear(h2, l.w_up, l.b_up)),
                             l.w_down, l.b_down);
    x = tape.add(x, mlp);
  }

  Tensor final = tape.layer_norm(x, params.lnf_gain, params.lnf_bias);
  return tape.matmul_nt(final, params.tok_emb);  // tied output projection
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {
constexpr char kMagic[4] = {'L', 'T', 'U', '1'};
}

void save_model(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("save_model: cannot open " + path);
  out.write(kMagic, 4);
  const std::string cfg_json = params.config.to_json();
  const std::uint32_t len = static_cast<std::uint32_t>(cfg_json.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
  for (const Tensor& t : params.all_params()) {
    const auto v = t.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw RuntimeError("save_model: write failed for " + path);
}

ModelParams load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("load_model: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw RuntimeError("load_model: bad magic in " + path);
  }
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in || len == 0 || len > (1u << 20)) {
    throw RuntimeError("load_model: bad config length in " + path);
  }
  std::string cfg_json(len, '\0');
  in.read(cfg_json.data(), len);
  if (!in) throw RuntimeError("load_model: truncated config in " + path);
  const ModelConfig cfg = ModelConfig::from_json(cfg_json);

  // Shape skeleton with zero weights, then overwrite from the payload.
  ModelConfig skeleton = cfg;
  skeleton.init_scale = 1.0;  // value irrelevant, overwritten below
  ModelParams params = init_model(skeleton);
  params.config = cfg;

  const std::size_t expected = param_count(cfg);
  std::size_t seen = 0;
  for (Tensor t : params.all_params()) {
    auto v = t.values_mut();
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) {
      throw RuntimeError("load_model: truncated payload in " + path +
                         " (expected " + std::to_string(expected) +
                         " parameters)");
    }
    seen += v.size();
  }
  char extra;
  if (in.read(&extra, 1)) {
    throw RuntimeError("load_model: trailing bytes in " + path);
  }
  if (seen != expected) {
    throw RuntimeError("load_model: parameter count " + std::to_string(seen) +
                       " does not match closed form " +
                       std::to_string(expected));
  }
  for (const Tensor& t : params.all_params()) {
    for (const double x : t.values()) {
      if (!std::isfinite(x)) {
        throw RuntimeError("load_model: non-finite parameter in " + path);
      }
    }
  }
  return params;
}

}  // namespace ltu
