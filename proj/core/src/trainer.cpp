#include "ltu/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ltu/errors.hpp"
#include "ltu/hash.hpp"
#include "ltu/optim.hpp"
#include "ltu/rng.hpp"

namespace ltu {
namespace {

using nlohmann::json;

constexpr std::size_t kNoCarry = std::numeric_limits<std::size_t>::max();

// Deterministic index stream: a fresh seeded shuffle per pass over the data.
class OrderedStream {
 public:
  OrderedStream(std::size_t n, std::uint64_t seed)
      : order_(n), pos_(n), seed_(seed) {}

  std::size_t next() {
    if (pos_ >= order_.size()) {
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      Rng rng(Rng::derive(seed_, "data-order", pass_++));
      rng.shuffle(order_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
};

// Shared per-step machinery: weighted batch loss, backward, clip, Adam with
// warmup, loss curve, progress lines.
class StepEngine {
 public:
  StepEngine(ModelParams& model, const TrainConfig& cfg, const char* tag,
             std::ostream* log)
      : params_(model.all_params()),
        adam_(params_, {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps}),
        cfg_(cfg),
        tag_(tag),
        log_(log) {
    warmup_steps_ = static_cast<std::size_t>(
        std::ceil(cfg.warmup_fraction * static_cast<double>(cfg.steps)));
  }

  double lr_scale(std::size_t step_idx) const {
    if (warmup_steps_ > 0 && step_idx < warmup_steps_) {
      return static_cast<double>(step_idx + 1) /
             static_cast<double>(warmup_steps_);
    }
    return 1.0;
  }

  // terms: (per-example mean loss, weight). The batch loss is the weighted
  // mean, i.e. the exact mean over all active positions in the batch.
  double step(Tape& tape, const std::vector<std::pair<Tensor, double>>& terms,
              std::size_t step_idx) {
    Tensor acc;
    double total_weight = 0.0;
    for (const auto& [ce, w] : terms) {
      Tensor t = tape.scale(ce, w);
      acc = acc.defined() ? tape.add(acc, t) : t;
      total_weight += w;
    }
    Tensor loss = tape.scale(acc, 1.0 / total_weight);
    double value = loss.item();
    if (!std::isfinite(value)) {
      throw RuntimeError(std::string(tag_) + " loss went non-finite at step " +
                         std::to_string(step_idx));
    }
    tape.backward(loss);
    clip_grad_norm(std::span<Tensor>(params_), cfg_.clip_norm);
    adam_.step(lr_scale(step_idx));
    curve_.push_back(value);
    tokens_since_log_ += total_weight + static_cast<double>(terms.size());
    if (log_ && cfg_.log_every > 0 &&
        ((step_idx + 1) % cfg_.log_every == 0 || step_idx + 1 == cfg_.steps)) {
      auto now = std::chrono::steady_clock::now();
      double secs = std::chrono::duration<double>(now - last_log_).count();
      double rate = secs > 0.0 ? tokens_since_log_ / secs : 0.0;
      std::ostringstream line;
      line << tag_ << " step " << (step_idx + 1) << "/" << cfg_.steps
           << " | loss " << value << " | lr " << cfg_.lr * lr_scale(step_idx)
           << " | tokens/sec " << static_cast<long long>(rate);
      *log_ << line.str() << '\n';
      log_->flush();
      last_log_ = now;
      tokens_since_log_ = 0.0;
    }
    return value;
  }

  std::vector<double> take_curve() { return std::move(curve_); }

 private:
  std::vector<Tensor> params_;
  AdamState adam_;
  TrainConfig cfg_;
  const char* tag_;
  std::ostream* log_;
  std::size_t warmup_steps_ = 0;
  std::vector<double> curve_;
  std::chrono::steady_clock::time_point last_log_ =
      std::chrono::steady_clock::now();
  double tokens_since_log_ = 0.0;
};

double tail_mean(const std::vector<double>& curve) {
  if (curve.empty()) return 0.0;
  std::size_t n = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::ceil(static_cast<double>(curve.size()) * 0.1)));
  double sum = 0.0;
  for (std::size_t i = curve.size() - n; i < curve.size(); ++i) {
    sum += curve[i];
  }
  return sum / static_cast<double>(n);
}

std::uint64_t chain_hash(std::uint64_t acc, std::uint64_t h) {
  acc ^= h;
  acc *= 0x100000001b3ull;
  return acc;
}

}  // namespace

void TrainConfig::validate() const {
  if (steps == 0 && sample_budget == 0) {
    throw ConfigError("steps must be >= 1");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
    throw ConfigError("warmup_fraction must be in [0, 1]");
  }
}

TrainStats run_phase(ModelParams& model, const CtData& data,
                     const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (cfg.sample_budget != 0) {
    throw ConfigError("sample_budget applies only to the reward-prediction phase");
  }
  if (data.docs.empty()) throw ConfigError("document corpus is empty");
  if (!data.doc_hashes.empty() &&
      data.doc_hashes.size() != data.docs.size()) {
    throw ConfigError("doc_hashes size does not match docs");
  }
  const std::size_t window = model.config.max_seq_len;
  for (const auto& doc : data.docs) {
    if (doc.size() < 2) {
      throw ConfigError("document with fewer than 2 tokens cannot be trained");
    }
    if (doc.size() > window) {
      throw ConfigError("document of " + std::to_string(doc.size()) +
                        " tokens exceeds the " + std::to_string(window) +
                        "-token window; documents are never split");
    }
  }

  TrainStats stats;
  stats.steps = cfg.steps;
  stats.data_fingerprint = 0xcbf29ce484222325ull;
  for (const auto& doc : data.docs) {
    stats.data_fingerprint =
        chain_hash(stats.data_fingerprint,
                   fnv1a64(std::span<const TokenId>(doc)));
  }

  OrderedStream stream(data.docs.size(), cfg.seed);
  std::size_t carry = kNoCarry;
  std::set<std::uint64_t> seen;

  // Greedy packing: fill the window with whole documents, start a new window
  // when the next one does not fit.
  auto next_window = [&]() {
    std::vector<TokenId> w;
    while (true) {
      std::size_t idx = carry != kNoCarry ? carry : stream.next();
      carry = kNoCarry;
      const auto& doc = data.docs[idx];
      if (!w.empty() && w.size() + doc.size() > window) {
        carry = idx;
        break;
      }
      w.insert(w.end(), doc.begin(), doc.end());
      ++stats.docs_consumed;
      seen.insert(data.doc_hashes.empty()
                      ? fnv1a64(std::span<const TokenId>(doc))
                      : data.doc_hashes[idx]);
      if (w.size() == window) break;
    }
    return w;
  };

  StepEngine engine(model, cfg, "ct", log);
  std::vector<TokenId> toks, tgts;
  std::vector<std::uint8_t> msk;
  std::vector<std::size_t> lens;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    toks.clear();
    tgts.clear();
    msk.clear();
    lens.clear();
    double active = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto w = next_window();
      const std::size_t n_pos = w.size() - 1;
      toks.insert(toks.end(), w.begin(), w.end() - 1);
      tgts.insert(tgts.end(), w.begin() + 1, w.end());
      msk.insert(msk.end(), n_pos, std::uint8_t{1});
      lens.push_back(n_pos);
      active += static_cast<double>(n_pos);
      stats.tokens_consumed += w.size();
    }
    // One batched forward; the loss is the exact mean over all positions in
    // the batch, the same value the per-window formulation produced.
    Tape tape;
    Tensor logits = model_forward(tape, model, toks, lens);
    Tensor ce = tape.cross_entropy_masked(logits, tgts, msk);
    engine.step(tape, {{ce, active}}, s);
  }
  stats.loss_curve = engine.take_curve();
  stats.final_loss = tail_mean(stats.loss_curve);
  stats.sample_hashes.assign(seen.begin(), seen.end());
  return stats;
}

TrainStats run_phase(ModelParams& model, const SftData& data,
                     const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  TrainConfig eff = cfg;
  if (cfg.sample_budget > 0) {
    eff.steps =
        (cfg.sample_budget + cfg.batch_size - 1) / cfg.batch_size;
    eff.sample_budget = cfg.sample_budget;
  }
  if (data.samples.empty()) throw ConfigError("sample set is empty");
  const std::size_t window = model.config.max_seq_len;
  for (const auto& s : data.samples) {
    if (s.input.empty() || s.input.size() != s.targets.size() ||
        s.input.size() != s.mask.size()) {
      throw ConfigError("sample with inconsistent input/target/mask lengths");
    }
    if (s.input.size() > window) {
      throw ConfigError("sample of " + std::to_string(s.input.size()) +
                        " tokens exceeds max_seq_len " +
                        std::to_string(window));
    }
    if (std::count(s.mask.begin(), s.mask.end(), std::uint8_t{1}) == 0) {
      throw ConfigError("sample with an all-zero loss mask");
    }
  }

  TrainStats stats;
  stats.steps = eff.steps;
  stats.data_fingerprint = 0xcbf29ce484222325ull;
  for (const auto& s : data.samples) {
    std::uint64_t h = fnv1a64(std::span<const TokenId>(s.input));
    h = chain_hash(h, static_cast<std::uint64_t>(s.label));
    h = chain_hash(h, s.traj_hash);
    stats.data_fingerprint = chain_hash(stats.data_fingerprint, h);
  }

  OrderedStream stream(data.samples.size(), eff.seed);
  std::set<std::uint64_t> seen;

  StepEngine engine(model, eff, "sft", log);
  std::vector<TokenId> toks, tgts;
  std::vector<std::uint8_t> msk;
  std::vector<std::size_t> lens;
  for (std::size_t s = 0; s < eff.steps; ++s) {
    toks.clear();
    tgts.clear();
    msk.clear();
    lens.clear();
    std::size_t batch = eff.batch_size;
    if (eff.sample_budget > 0) {
      std::size_t remaining = eff.sample_budget - stats.docs_consumed;
      batch = std::min(batch, remaining);
    }
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& sample = data.samples[stream.next()];
      toks.insert(toks.end(), sample.input.begin(), sample.input.end());
      tgts.insert(tgts.end(), sample.targets.begin(), sample.targets.end());
      msk.insert(msk.end(), sample.mask.begin(), sample.mask.end());
      lens.push_back(sample.input.size());
      ++stats.docs_consumed;
      stats.tokens_consumed += sample.input.size();
      seen.insert(sample.traj_hash);
    }
    const double active = static_cast<double>(
        std::count(msk.begin(), msk.end(), std::uint8_t{1}));
    Tape tape;
    Tensor logits = model_forward(tape, model, toks, lens);
    Tensor ce = tape.cross_entropy_masked(logits, tgts, msk);
    engine.step(tape, {{ce, active}}, s);
  }
  stats.loss_curve = engine.take_curve();
  stats.final_loss = tail_mean(stats.loss_curve);
  stats.sample_hashes.assign(seen.begin(), seen.end());
  return stats;
}

std::string CheckpointMeta::to_json() const {
  json j;
  j["phase"] = phase;
  j["lineage"] = lineage;
  j["seed"] = seed;
  j["steps"] = steps;
  j["examples"] = examples;
  j["data_fingerprint"] = data_fingerprint;
  j["final_loss"] = final_loss;
  return j.dump(2);
}

CheckpointMeta CheckpointMeta::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw RuntimeError(std::string("invalid checkpoint sidecar JSON: ") +
                       e.what());
  }
  CheckpointMeta meta;
  try {
    meta.phase = j.at("phase").get<std::string>();
    meta.lineage = j.at("lineage").get<std::string>();
    meta.seed = j.at("seed").get<std::uint64_t>();
    meta.steps = j.at("steps").get<std::size_t>();
    meta.examples = j.at("examples").get<std::size_t>();
    meta.data_fingerprint = j.at("data_fingerprint").get<std::string>();
    meta.final_loss = j.at("final_loss").get<double>();
  } catch (const json::exception& e) {
    throw RuntimeError(std::string("invalid checkpoint sidecar fields: ") +
                       e.what());
  }
  return meta;
}

std::string extend_lineage(const std::string& parent,
                           const std::string& stage) {
  if (parent.empty()) return stage;
  return parent + " -> " + stage;
}

void save_checkpoint(const ModelParams& model, const CheckpointMeta& meta,
                     const std::string& path) {
  save_model(model, path);
  std::ofstream side(path + ".json");
  if (!side) throw RuntimeError("cannot write checkpoint sidecar: " + path +
                                ".json");
  side << meta.to_json() << '\n';
  if (!side) throw RuntimeError("short write on checkpoint sidecar");
}

std::pair<ModelParams, CheckpointMeta> load_checkpoint(
    const std::string& path) {
  ModelParams model = load_model(path);
  std::ifstream side(path + ".json");
  if (!side) {
    throw RuntimeError("checkpoint sidecar missing: " + path + ".json");
  }
  std::stringstream ss;
  ss << side.rdbuf();
  return {std::move(model), CheckpointMeta::from_json(ss.str())};
}

void save_hashes(const std::vector<std::uint64_t>& hashes,
                 const std::string& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write hash file: " + path);
  for (std::uint64_t h : hashes) out << to_hex(h) << '\n';
  if (!out) throw RuntimeError("short write on hash file: " + path);
}

std::vector<std::uint64_t> load_hashes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open hash file: " + path);
  std::vector<std::uint64_t> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(std::stoull(line, nullptr, 16));
  }
  return out;
}

}  // namespace ltu
