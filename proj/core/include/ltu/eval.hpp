#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ltu/corpus.hpp"
#include "ltu/model.hpp"
#include "ltu/plan.hpp"

namespace ltu {

// Predicted label for a prefix sample: argmax over the logits of the task's
// reward tokens at the final input position; ties break toward the lower
// label. The input must end at a <R> marker (encode_sft's contract).
int predict_reward(const ModelParams& params, std::span<const TokenId> input,
                   const Vocab& vocab, const std::string& task);

struct AccuracyResult {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t n = 0;
  std::vector<std::pair<int, int>> predictions;     // (true, predicted)
};

// Exact-match accuracy over an eval set. Every sample's record hash is
// checked against the training-set hashes first; any overlap aborts with a
// contamination error rather than reporting a tainted number.
AccuracyResult accuracy(const ModelParams& params,
                        std::span<const SftSample> eval_set,
                        const Vocab& vocab,
                        const std::unordered_set<std::uint64_t>& train_hashes);

struct ReportRow {
  std::string arm;
  std::string task;
  std::string dataset;
  std::size_t n_eval = 0;
  double accuracy = 0.0;
  double majority_baseline = 0.0;
  double bayes_ceiling = 0.0;
  double bayes_se = 0.0;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or the failure message
};

struct Report {
  std::vector<ReportRow> rows;
  std::string created_at;          // not part of the CSV, so reruns match
  std::string config_fingerprint;  // plan content hash

  std::string to_csv() const;
  std::string to_markdown() const;
};

struct MatrixOptions {
  std::string out_dir;
  std::size_t jobs = 1;
  std::ostream* log = nullptr;
};

// Emits the plan's domains, vocab, and corpora under out_dir without
// training anything. run_matrix performs the same generation, so files are
// identical either way.
void generate_corpora(const PlanFile& plan, const std::string& out_dir,
                      std::ostream* log = nullptr);

// Runs the full ablation grid from a plan: generates domains and corpora,
// trains one CT checkpoint per (recipe, seed), fine-tunes per (arm, task,
// seed), and evaluates on the held-out-category eval split. Produces one
// report row per (arm, task, seed); a failed unit is recorded in its row's
// status without aborting the rest. Writes corpora, checkpoints,
// predictions, report.csv, and report.md under out_dir.
Report run_matrix(const PlanFile& plan, const MatrixOptions& options);

}  // namespace ltu
