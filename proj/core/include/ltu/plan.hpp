#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ltu/model.hpp"
#include "ltu/trainer.hpp"

namespace ltu {

// Arm names understood by the matrix runner:
//   sft_only       fresh init, reward-prediction fine-tune only
//   ltu_in_domain  CT on the target domain's decision docs, then fine-tune
//   ltu_cross      CT on the auxiliary domain's docs, then fine-tune
//   ltu_mix        CT on decision docs mixed with common text, then fine-tune
//   ltu_common     CT on common text only, then fine-tune
//   sft_full       fresh init, fine-tune with total consumption equalized to
//                  ltu_in_domain (CT docs + SFT samples)
const std::vector<std::string>& known_arms();

// Fully validated experiment description. Parsing is strict: unknown keys
// anywhere in the JSON are rejected before any work starts.
struct PlanFile {
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> arms;

  // domains
  std::string target_kind = "ppc";
  std::string aux_kind = "seo";
  std::uint64_t domain_seed = 0;
  std::size_t n_categories = 10;
  std::size_t n_holdout_categories = 2;
  double shared_fraction = 0.5;
  double temperature_scale = 1.0;

  // corpus recipe. CT docs come from train categories; fine-tune and eval
  // samples come from held-out categories, so the CT stage never sees the
  // evaluation categories.
  std::size_t ct_docs = 0;
  std::size_t common_docs = 0;
  std::size_t sft_train = 0;
  std::size_t sft_eval = 0;
  double mix_fraction = 0.25;
  std::size_t steps_per_doc = 1;

  // model config template; vocab_size and init_seed are filled per run
  ModelConfig model;

  // per-phase training configs; seed is filled per run
  TrainConfig ct;
  TrainConfig sft;

  std::size_t bayes_samples = 20000;
  std::string out_dir;  // optional; --out overrides

  void validate() const;
  static PlanFile from_json(const std::string& text);
  static PlanFile load(const std::string& path);

  // Canonical serialization used for the config fingerprint.
  std::string canonical_json() const;
  std::string fingerprint() const;  // hex
};

}  // namespace ltu
