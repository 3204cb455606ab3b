#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ltu/corpus.hpp"
#include "ltu/rng.hpp"

namespace ltu {

// A reward head over the domain's feature map. temperature > 0 samples labels
// from softmax(logits / temperature); temperature == 0 takes the argmax (ties
// resolve to the lower label), making the reward a deterministic function of
// (state, action).
struct RewardHead {
  std::string name;                // short name, qualified as domain.name
  int bin_count = 0;
  double temperature = 0.0;
  std::vector<double> weights;     // bin_count x feature_dim, row-major
};

// A synthetic decision domain. States are rendered as attribute-slot word
// sequences; the underlying feature vector is exactly recoverable from the
// text. The first n_shared_slots state slots use a word family shared across
// domains built from the same seed, which is the cross-domain transfer knob.
struct DomainSpec {
  std::string domain_id;
  std::uint64_t seed = 0;
  std::vector<std::string> categories;
  std::size_t n_state_slots = 0;
  std::size_t n_levels = 0;        // discrete levels per state slot
  std::size_t n_shared_slots = 0;
  std::size_t n_action_styles = 0;
  std::size_t n_action_levels = 0;
  double cross_scale = 1.0;        // weight on state x action cross features
  std::vector<RewardHead> tasks;
  // Per (category, slot) preferred level, biases state sampling so held-out
  // categories are distributionally distinct.
  std::vector<std::size_t> category_bias;

  std::size_t state_dim() const { return n_state_slots; }
  std::size_t action_dim() const { return n_action_styles + 1; }
  std::size_t feature_dim() const {
    return state_dim() + action_dim() + state_dim() * action_dim();
  }
  std::string qualified_task(std::size_t i) const;
  int task_index(const std::string& qualified) const;  // -1 when absent

  std::string to_json() const;
  static DomainSpec from_json(const std::string& text);
  void save(const std::string& path) const;
  static DomainSpec load(const std::string& path);
  void validate() const;
};

struct DomainOptions {
  std::size_t n_categories = 10;
  // Scales every task temperature; 0 makes all rewards deterministic.
  double temperature_scale = 1.0;
};

// kind is "seo" (two 10-bin tasks, wide action space) or "ppc" (two 3-bin
// tasks). Calling with the same seed for both kinds makes the shared slots
// render through an identical word family; shared_fraction in [0, 1] sets
// how many state slots that covers.
DomainSpec make_domain(const std::string& kind, std::uint64_t seed,
                       double shared_fraction,
                       const DomainOptions& options = {});

// Word-family overlap between two domains: the number of state slots that
// both render with the same shared family. Zero when either side was built
// with shared_fraction 0.
std::size_t shared_slot_overlap(const DomainSpec& a, const DomainSpec& b);

// Draws one record: sample a state from the category's slot distribution,
// a uniform action, and a reward from the task head.
Trajectory sample_trajectory(const DomainSpec& spec,
                             const std::string& category,
                             const std::string& qualified_task,
                             std::size_t n_steps, Rng& rng);

// Recovers the feature vector phi(state, action) from rendered text.
// Throws when a slot is missing, repeated, or from the wrong domain.
std::vector<double> parse_features(const DomainSpec& spec,
                                   const std::string& state_text,
                                   const std::string& action_text);

// Label logits for a feature vector under one task head.
std::vector<double> task_logits(const DomainSpec& spec, std::size_t task_index,
                                std::span<const double> features);

struct BayesEstimate {
  double accuracy = 0.0;       // E[max_k p(k | s, a)] over the state/action law
  double std_error = 0.0;
  std::size_t n_samples = 0;
};

// Monte Carlo estimate of the best achievable accuracy for a task, restricted
// to the given categories. Exact 1.0 at temperature 0.
BayesEstimate bayes_accuracy(const DomainSpec& spec,
                             const std::string& qualified_task,
                             std::span<const std::string> categories,
                             std::size_t n_samples, std::uint64_t seed);

struct CategorySplit {
  std::vector<std::string> train;
  std::vector<std::string> holdout;
};

// Seeded shuffle then split; both sides non-empty.
CategorySplit split_categories(const DomainSpec& spec, std::size_t n_holdout,
                               std::uint64_t seed);

// Every word any generator for this domain can emit (category names, slot
// words, action words, template words). Closed by construction.
std::vector<std::string> domain_word_pool(const DomainSpec& spec);

}  // namespace ltu
