#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ltu/corpus.hpp"
#include "ltu/model.hpp"

namespace ltu {

struct TrainConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 1;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;       // global grad norm cap, applied every step
  double warmup_fraction = 0.05;  // linear ramp, then constant lr
  std::uint64_t seed = 0;       // data order
  std::size_t log_every = 50;   // 0 silences progress lines
  // When > 0 the reward-prediction phase consumes exactly this many examples
  // (the final batch truncates) and `steps` is ignored. Used by the
  // equalized-data control arm. Rejected by the full-sequence phase.
  std::size_t sample_budget = 0;

  void validate() const;
};

// Full-sequence stage input: documents are packed greedily into windows of at
// most max_seq_len tokens, never split across windows, and the loss covers
// every next-token position in the window.
struct CtData {
  std::vector<std::vector<TokenId>> docs;
  std::vector<std::uint64_t> doc_hashes;  // optional, parallel to docs
};

// Reward-prediction stage input: per-sample loss from each sample's own mask
// (one active position).
struct SftData {
  std::vector<SftSample> samples;
};

struct TrainStats {
  std::vector<double> loss_curve;          // per optimizer step
  double final_loss = 0.0;                 // mean over the last logged window
  std::size_t steps = 0;
  std::size_t docs_consumed = 0;           // docs or samples fed to the model
  std::size_t tokens_consumed = 0;
  std::uint64_t data_fingerprint = 0;      // order-sensitive corpus hash
  std::vector<std::uint64_t> sample_hashes;  // content hashes of records seen
};

// Runs one training phase in place. Cycles through the data in a seeded
// order, reshuffled each pass. Throws when the loss goes non-finite, naming
// the step. log, when non-null, receives progress lines.
TrainStats run_phase(ModelParams& model, const CtData& data,
                     const TrainConfig& cfg, std::ostream* log = nullptr);
TrainStats run_phase(ModelParams& model, const SftData& data,
                     const TrainConfig& cfg, std::ostream* log = nullptr);

// Sidecar metadata written next to the weight file as <path>.json.
struct CheckpointMeta {
  std::string phase;       // "init", "ct", or "sft"
  std::string lineage;     // e.g. "CT:seo-seed7 -> SFT:ppc-seed3"
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::size_t examples = 0;      // docs or samples this phase consumed
  std::string data_fingerprint;  // hex
  double final_loss = 0.0;

  std::string to_json() const;
  static CheckpointMeta from_json(const std::string& text);
};

// Appends " -> <stage>" to an existing lineage, or starts one.
std::string extend_lineage(const std::string& parent, const std::string& stage);

void save_checkpoint(const ModelParams& model, const CheckpointMeta& meta,
                     const std::string& path);
std::pair<ModelParams, CheckpointMeta> load_checkpoint(const std::string& path);

// Train-set content hashes ride along as <ckpt>.hashes, one hex value per
// line; eval uses them for the train/eval overlap guard.
void save_hashes(const std::vector<std::uint64_t>& hashes,
                 const std::string& path);
std::vector<std::uint64_t> load_hashes(const std::string& path);

}  // namespace ltu
