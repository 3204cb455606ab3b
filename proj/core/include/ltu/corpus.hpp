#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ltu/tensor.hpp"

namespace ltu {

// One decision record: state context, action taken, discretized reward.
// Multi-step records chain several (s, a, r) steps in order.
struct TrajectoryStep {
  std::string state_text;
  std::string action_text;
  int reward_label = 0;
};

struct Trajectory {
  std::string domain_id;
  std::string category_id;
  std::string task_id;  // qualified, e.g. "ppc.ctr"; selects the reward token set
  std::vector<TrajectoryStep> steps;
};

// Content hash of the underlying record, shared between the full-document
// and prefix->reward encodings so train/eval overlap is detectable across
// phases.
std::uint64_t trajectory_hash(const Trajectory& traj);

// Token <-> id map with structural markers at fixed low ids and one dedicated
// reward token per (task, label) pair. Word tokens are whitespace-free.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kState = 4;
  static constexpr TokenId kAction = 5;
  static constexpr TokenId kReward = 6;
  static constexpr std::size_t kNumMarkers = 7;

  static std::string reward_token(const std::string& task, int label);

  // Validates marker prefix, bijectivity, and that each task's reward tokens
  // are contiguous with labels 0..K-1.
  static Vocab from_tokens(std::vector<std::string> tokens);

  static Vocab load(const std::string& path);
  // Plain text, one token per line, line number = id.
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  TokenId lookup(const std::string& word) const;  // kUnk when absent
  const std::string& token(TokenId id) const;
  bool contains(const std::string& word) const;

  bool has_task(const std::string& task) const;
  std::vector<std::string> tasks() const;
  // Reward token ids for a task, index = label.
  std::span<const TokenId> reward_ids(const std::string& task) const;
  // Reverse lookup: (task, label) if the id is a reward token.
  std::optional<std::pair<std::string, int>> reward_of(TokenId id) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> index_;
  std::map<std::string, std::vector<TokenId>> task_rewards_;
};

// Deterministic vocab assembly: markers, then reward tokens per task in
// registration order, then words sorted lexicographically.
class VocabBuilder {
 public:
  void add_word(const std::string& word);
  void add_words(std::span<const std::string> words);
  void add_text(const std::string& text);  // whitespace-split
  void add_task(const std::string& task, int bin_count);
  Vocab build() const;

 private:
  std::vector<std::pair<std::string, int>> tasks_;
  std::vector<std::string> words_;
};

// Reward discretization: K bins over K-1 strictly increasing edges fit at
// empirical quantiles. A value exactly on an edge lands in the higher bin.
struct BinningSpec {
  std::string task;
  int bin_count = 0;
  std::vector<double> edges;
  std::string provenance;

  std::string to_json() const;
  static BinningSpec from_json(const std::string& text);
  void save(const std::string& path) const;
  static BinningSpec load(const std::string& path);
};

BinningSpec fit_bins(std::span<const double> values, int bin_count,
                     std::string task, std::string provenance);
int discretize(double value, const BinningSpec& spec);

// Full-document encoding:
//   <BOS> { <S> s-words <A> a-words <R> reward-token }xN <EOS>
// Throws when the result would exceed max_seq_len (message carries the
// offending length).
std::vector<TokenId> encode_ct(const Trajectory& traj, const Vocab& vocab,
                               std::size_t max_seq_len);

// Inverse of encode_ct up to <UNK> substitution.
Trajectory decode_ct(std::span<const TokenId> ids, const Vocab& vocab);

// Prefix->reward sample: input is the full encoding truncated immediately
// after the final <R> marker; the loss mask selects exactly the position
// whose target is the final reward token. Intermediate rewards of multi-step
// records stay visible in the input.
struct SftSample {
  std::vector<TokenId> input;
  std::vector<TokenId> targets;      // next-token targets, same length
  std::vector<std::uint8_t> mask;    // exactly one 1, at the last position
  std::string task_id;
  int label = 0;                     // final reward label
  std::uint64_t traj_hash = 0;
};

SftSample encode_sft(const Trajectory& traj, const Vocab& vocab,
                     std::size_t max_seq_len);

// Plain text document (no decision structure): <BOS> words <EOS>.
std::vector<TokenId> encode_text(const std::string& text, const Vocab& vocab,
                                 std::size_t max_seq_len);

// Interleaves the two corpora: each emitted document is drawn from the
// decision corpus with probability decision_fraction, else from the common
// corpus (recycled and reshuffled as needed). The stream ends when the
// decision corpus is exhausted, so fraction 1.0 yields a permutation of the
// decision docs.
std::vector<std::vector<TokenId>> mix_corpora(
    std::vector<std::vector<TokenId>> decision_docs,
    std::vector<std::vector<TokenId>> common_docs, double decision_fraction,
    std::uint64_t seed);

// Templated filler sentences standing in for general web text; no decision
// markers. Every word comes from common_word_pool().
std::vector<std::string> make_common_docs(std::size_t count,
                                          std::uint64_t seed);
const std::vector<std::string>& common_word_pool();

// JSON Lines: {"domain":…, "category":…, "task":…, "steps":[[s,a,r],…]}
void write_trajectories_jsonl(std::span<const Trajectory> trajs,
                              const std::string& path);
std::vector<Trajectory> read_trajectories_jsonl(const std::string& path);

}  // namespace ltu
