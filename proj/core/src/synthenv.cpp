#include "ltu/synthenv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "ltu/errors.hpp"

namespace ltu {
namespace {

using nlohmann::json;

const std::vector<std::string>& category_themes() {
  static const std::vector<std::string> kThemes = {
      "audio",  "garden", "toys", "kitchen", "sports", "office",
      "beauty", "auto",   "music", "books",  "games",  "pets",
      "tools",  "travel", "health", "decor"};
  return kThemes;
}

const std::vector<std::string>& filler_pool() {
  static const std::vector<std::string> kFill = {
      "plus", "series", "model", "edition", "pro", "line", "set", "kit"};
  return kFill;
}

// Shared slot families depend only on (seed, slot), so two domains built from
// the same seed render their shared slots with identical words.
std::string shared_prefix(std::uint64_t seed, std::size_t slot) {
  std::uint64_t h = Rng::derive(seed, "shared-family", slot);
  std::string p = "z";
  for (int i = 0; i < 4; ++i) {
    p += static_cast<char>('a' + h % 26);
    h /= 26;
  }
  return p;
}

std::string slot_prefix(const DomainSpec& spec, std::size_t slot) {
  if (slot < spec.n_shared_slots) return shared_prefix(spec.seed, slot);
  return spec.domain_id + "f" + std::to_string(slot);
}

std::string slot_word(const DomainSpec& spec, std::size_t slot,
                      std::size_t level) {
  return slot_prefix(spec, slot) + "v" + std::to_string(level);
}

std::string style_word(const DomainSpec& spec, std::size_t style) {
  return spec.domain_id + "act" + std::to_string(style);
}

std::string level_word(const DomainSpec& spec, std::size_t level) {
  return spec.domain_id + "lvl" + std::to_string(level);
}

double level_feature(std::size_t level, std::size_t n_levels) {
  if (n_levels <= 1) return 0.0;
  return 2.0 * static_cast<double>(level) /
             static_cast<double>(n_levels - 1) -
         1.0;
}

std::vector<double> features_from_parts(const DomainSpec& spec,
                                        std::span<const std::size_t> levels,
                                        std::size_t style,
                                        std::size_t action_level) {
  std::vector<double> phi;
  phi.reserve(spec.feature_dim());
  for (std::size_t j = 0; j < spec.n_state_slots; ++j) {
    phi.push_back(level_feature(levels[j], spec.n_levels));
  }
  std::vector<double> act(spec.action_dim(), 0.0);
  act[style] = 1.0;
  act.back() = level_feature(action_level, spec.n_action_levels);
  phi.insert(phi.end(), act.begin(), act.end());
  for (std::size_t j = 0; j < spec.n_state_slots; ++j) {
    for (std::size_t k = 0; k < act.size(); ++k) {
      phi.push_back(spec.cross_scale * phi[j] * act[k]);
    }
  }
  return phi;
}

std::vector<std::size_t> sample_state_levels(const DomainSpec& spec,
                                             std::size_t cat_index, Rng& rng) {
  std::vector<std::size_t> levels(spec.n_state_slots);
  for (std::size_t j = 0; j < spec.n_state_slots; ++j) {
    std::size_t preferred =
        spec.category_bias[cat_index * spec.n_state_slots + j];
    levels[j] = rng.bernoulli(0.5) ? preferred : rng.index(spec.n_levels);
  }
  return levels;
}

std::string render_state(const DomainSpec& spec, const std::string& category,
                         std::span<const std::size_t> levels, Rng& rng) {
  std::string text = "item " + category + " with";
  for (std::size_t j = 0; j < spec.n_state_slots; ++j) {
    text += ' ';
    text += slot_word(spec, j, levels[j]);
    if (rng.bernoulli(0.3)) {
      text += ' ';
      text += filler_pool()[rng.index(filler_pool().size())];
    }
  }
  return text;
}

std::string render_action(const DomainSpec& spec, std::size_t style,
                          std::size_t action_level, Rng& rng) {
  std::string text = "apply " + style_word(spec, style) + " " +
                     level_word(spec, action_level);
  if (rng.bernoulli(0.25)) {
    text += ' ';
    text += filler_pool()[rng.index(filler_pool().size())];
  }
  return text;
}

std::vector<double> softmax_probs(std::span<const double> logits,
                                  double temperature) {
  std::vector<double> p(logits.begin(), logits.end());
  double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp((v - mx) / temperature);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

int sample_label(std::span<const double> logits, double temperature,
                 Rng& rng) {
  if (temperature == 0.0) {
    int best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k) {
      if (logits[k] > logits[static_cast<std::size_t>(best)]) {
        best = static_cast<int>(k);
      }
    }
    return best;
  }
  auto p = softmax_probs(logits, temperature);
  double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return static_cast<int>(k);
  }
  return static_cast<int>(p.size()) - 1;
}

std::size_t category_index(const DomainSpec& spec,
                           const std::string& category) {
  auto it =
      std::find(spec.categories.begin(), spec.categories.end(), category);
  if (it == spec.categories.end()) {
    throw ConfigError("unknown category " + category + " in domain " +
                      spec.domain_id);
  }
  return static_cast<std::size_t>(it - spec.categories.begin());
}

}  // namespace

std::string DomainSpec::qualified_task(std::size_t i) const {
  if (i >= tasks.size()) {
    throw ConfigError("task index " + std::to_string(i) +
                      " outside domain " + domain_id + " with " +
                      std::to_string(tasks.size()) + " tasks");
  }
  return domain_id + "." + tasks[i].name;
}

int DomainSpec::task_index(const std::string& qualified) const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (qualified_task(i) == qualified) return static_cast<int>(i);
  }
  return -1;
}

void DomainSpec::validate() const {
  if (domain_id.empty()) throw ConfigError("domain_id is empty");
  if (categories.empty()) throw ConfigError("domain has no categories");
  if (n_state_slots == 0) throw ConfigError("domain has no state slots");
  if (n_levels < 2) throw ConfigError("state slots need at least 2 levels");
  if (n_shared_slots > n_state_slots) {
    throw ConfigError("n_shared_slots " + std::to_string(n_shared_slots) +
                      " exceeds n_state_slots " +
                      std::to_string(n_state_slots));
  }
  if (n_action_styles == 0 || n_action_levels == 0) {
    throw ConfigError("domain needs at least one action style and level");
  }
  if (tasks.empty()) throw ConfigError("domain has no reward tasks");
  if (category_bias.size() != categories.size() * n_state_slots) {
    throw ConfigError("category_bias has " +
                      std::to_string(category_bias.size()) +
                      " entries, expected " +
                      std::to_string(categories.size() * n_state_slots));
  }
  for (std::size_t b : category_bias) {
    if (b >= n_levels) throw ConfigError("category_bias level out of range");
  }
  for (const auto& task : tasks) {
    if (task.bin_count < 2) {
      throw ConfigError("task " + task.name + " has bin_count " +
                        std::to_string(task.bin_count));
    }
    if (task.temperature < 0.0) {
      throw ConfigError("task " + task.name + " has negative temperature");
    }
    std::size_t want = static_cast<std::size_t>(task.bin_count) * feature_dim();
    if (task.weights.size() != want) {
      throw ConfigError("task " + task.name + " weight matrix has " +
                        std::to_string(task.weights.size()) +
                        " entries, expected " + std::to_string(want));
    }
    for (double w : task.weights) {
      if (!std::isfinite(w)) {
        throw ConfigError("task " + task.name + " has non-finite weights");
      }
    }
  }
}

std::string DomainSpec::to_json() const {
  json j;
  j["domain_id"] = domain_id;
  j["seed"] = seed;
  j["categories"] = categories;
  j["n_state_slots"] = n_state_slots;
  j["n_levels"] = n_levels;
  j["n_shared_slots"] = n_shared_slots;
  j["n_action_styles"] = n_action_styles;
  j["n_action_levels"] = n_action_levels;
  j["cross_scale"] = cross_scale;
  j["category_bias"] = category_bias;
  json tasks_json = json::array();
  for (const auto& task : tasks) {
    json t;
    t["name"] = task.name;
    t["bin_count"] = task.bin_count;
    t["temperature"] = task.temperature;
    t["weights"] = task.weights;
    tasks_json.push_back(std::move(t));
  }
  j["tasks"] = std::move(tasks_json);
  return j.dump(2);
}

DomainSpec DomainSpec::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid domain JSON: ") + e.what());
  }
  DomainSpec spec;
  try {
    spec.domain_id = j.at("domain_id").get<std::string>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.categories = j.at("categories").get<std::vector<std::string>>();
    spec.n_state_slots = j.at("n_state_slots").get<std::size_t>();
    spec.n_levels = j.at("n_levels").get<std::size_t>();
    spec.n_shared_slots = j.at("n_shared_slots").get<std::size_t>();
    spec.n_action_styles = j.at("n_action_styles").get<std::size_t>();
    spec.n_action_levels = j.at("n_action_levels").get<std::size_t>();
    spec.cross_scale = j.at("cross_scale").get<double>();
    spec.category_bias =
        j.at("category_bias").get<std::vector<std::size_t>>();
    for (const auto& t : j.at("tasks")) {
      RewardHead task;
      task.name = t.at("name").get<std::string>();
      task.bin_count = t.at("bin_count").get<int>();
      task.temperature = t.at("temperature").get<double>();
      task.weights = t.at("weights").get<std::vector<double>>();
      spec.tasks.push_back(std::move(task));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid domain fields: ") + e.what());
  }
  spec.validate();
  return spec;
}

void DomainSpec::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write domain spec: " + path);
  out << to_json() << '\n';
}

DomainSpec DomainSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open domain spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

DomainSpec make_domain(const std::string& kind, std::uint64_t seed,
                       double shared_fraction, const DomainOptions& options) {
  if (kind != "seo" && kind != "ppc") {
    throw ConfigError("unknown domain kind: " + kind + " (use seo or ppc)");
  }
  if (shared_fraction < 0.0 || shared_fraction > 1.0) {
    throw ConfigError("shared_fraction must be in [0, 1], got " +
                      std::to_string(shared_fraction));
  }
  if (options.n_categories < 2 ||
      options.n_categories > category_themes().size()) {
    throw ConfigError("n_categories must be in 2.." +
                      std::to_string(category_themes().size()) + ", got " +
                      std::to_string(options.n_categories));
  }
  if (options.temperature_scale < 0.0) {
    throw ConfigError("temperature_scale must be >= 0");
  }

  DomainSpec spec;
  spec.domain_id = kind;
  spec.seed = seed;
  spec.n_state_slots = 8;
  spec.n_levels = 5;
  spec.n_shared_slots = static_cast<std::size_t>(
      std::llround(shared_fraction * static_cast<double>(spec.n_state_slots)));
  spec.cross_scale = 0.5;
  if (kind == "seo") {
    spec.n_action_styles = 6;
    spec.n_action_levels = 4;
    spec.tasks.push_back({"clicks", 10, 1.0, {}});
    spec.tasks.push_back({"volume", 10, 1.0, {}});
  } else {
    spec.n_action_styles = 4;
    spec.n_action_levels = 3;
    spec.tasks.push_back({"ctr", 3, 1.0, {}});
    spec.tasks.push_back({"cpc", 3, 1.0, {}});
  }
  for (auto& task : spec.tasks) task.temperature *= options.temperature_scale;

  for (std::size_t i = 0; i < options.n_categories; ++i) {
    spec.categories.push_back(kind + "_" + category_themes()[i]);
  }

  Rng bias_rng(Rng::derive(seed, kind + "-category-bias"));
  spec.category_bias.resize(options.n_categories * spec.n_state_slots);
  for (auto& b : spec.category_bias) b = bias_rng.index(spec.n_levels);

  const std::size_t dim = spec.feature_dim();
  for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
    auto& task = spec.tasks[t];
    Rng w_rng(Rng::derive(seed, kind + "-weights", t));
    task.weights.resize(static_cast<std::size_t>(task.bin_count) * dim);
    double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& w : task.weights) w = w_rng.normal() * scale * 6.0;
  }
  spec.validate();
  return spec;
}

std::size_t shared_slot_overlap(const DomainSpec& a, const DomainSpec& b) {
  std::size_t n = std::min(a.n_shared_slots, b.n_shared_slots);
  std::size_t overlap = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (shared_prefix(a.seed, j) == shared_prefix(b.seed, j)) ++overlap;
  }
  return overlap;
}

Trajectory sample_trajectory(const DomainSpec& spec,
                             const std::string& category,
                             const std::string& qualified_task,
                             std::size_t n_steps, Rng& rng) {
  if (n_steps == 0) throw ConfigError("n_steps must be >= 1");
  int ti = spec.task_index(qualified_task);
  if (ti < 0) {
    throw ConfigError("unknown task " + qualified_task + " in domain " +
                      spec.domain_id);
  }
  const auto& task = spec.tasks[static_cast<std::size_t>(ti)];
  std::size_t cat = category_index(spec, category);

  Trajectory traj;
  traj.domain_id = spec.domain_id;
  traj.category_id = category;
  traj.task_id = qualified_task;
  for (std::size_t s = 0; s < n_steps; ++s) {
    auto levels = sample_state_levels(spec, cat, rng);
    std::size_t style = rng.index(spec.n_action_styles);
    std::size_t action_level = rng.index(spec.n_action_levels);
    auto phi = features_from_parts(spec, levels, style, action_level);
    auto logits = task_logits(spec, static_cast<std::size_t>(ti), phi);
    TrajectoryStep step;
    step.state_text = render_state(spec, category, levels, rng);
    step.action_text = render_action(spec, style, action_level, rng);
    step.reward_label = sample_label(logits, task.temperature, rng);
    traj.steps.push_back(std::move(step));
  }
  return traj;
}

std::vector<double> parse_features(const DomainSpec& spec,
                                   const std::string& state_text,
                                   const std::string& action_text) {
  auto parse_suffix = [](const std::string& word, const std::string& prefix,
                         std::size_t limit, std::size_t& out) {
    if (word.size() <= prefix.size() ||
        word.compare(0, prefix.size(), prefix) != 0) {
      return false;
    }
    std::size_t v = 0;
    for (std::size_t i = prefix.size(); i < word.size(); ++i) {
      char c = word[i];
      if (c < '0' || c > '9') return false;
      v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    if (v >= limit) return false;
    out = v;
    return true;
  };

  std::vector<std::size_t> levels(spec.n_state_slots, 0);
  std::vector<int> seen(spec.n_state_slots, 0);
  std::istringstream ss(state_text);
  std::string word;
  while (ss >> word) {
    for (std::size_t j = 0; j < spec.n_state_slots; ++j) {
      std::size_t v = 0;
      if (parse_suffix(word, slot_prefix(spec, j) + "v", spec.n_levels, v)) {
        if (seen[j]) {
          throw RuntimeError("state slot " + std::to_string(j) +
                             " appears twice in: " + state_text);
        }
        levels[j] = v;
        seen[j] = 1;
        break;
      }
    }
  }
  for (std::size_t j = 0; j < spec.n_state_slots; ++j) {
    if (!seen[j]) {
      throw RuntimeError("state slot " + std::to_string(j) +
                         " missing from: " + state_text);
    }
  }

  std::size_t style = 0, action_level = 0;
  int style_seen = 0, level_seen = 0;
  std::istringstream as(action_text);
  while (as >> word) {
    std::size_t v = 0;
    if (parse_suffix(word, spec.domain_id + "act", spec.n_action_styles, v)) {
      if (style_seen) {
        throw RuntimeError("action style appears twice in: " + action_text);
      }
      style = v;
      style_seen = 1;
    } else if (parse_suffix(word, spec.domain_id + "lvl", spec.n_action_levels,
                            v)) {
      if (level_seen) {
        throw RuntimeError("action level appears twice in: " + action_text);
      }
      action_level = v;
      level_seen = 1;
    }
  }
  if (!style_seen || !level_seen) {
    throw RuntimeError("action style or level missing from: " + action_text);
  }
  return features_from_parts(spec, levels, style, action_level);
}

std::vector<double> task_logits(const DomainSpec& spec, std::size_t task_index,
                                std::span<const double> features) {
  if (task_index >= spec.tasks.size()) {
    throw ConfigError("task index out of range");
  }
  const auto& task = spec.tasks[task_index];
  const std::size_t dim = spec.feature_dim();
  if (features.size() != dim) {
    throw ConfigError("feature vector has " + std::to_string(features.size()) +
                      " entries, expected " + std::to_string(dim));
  }
  std::vector<double> z(static_cast<std::size_t>(task.bin_count), 0.0);
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double* row = task.weights.data() + k * dim;
    double acc = 0.0;
    for (std::size_t f = 0; f < dim; ++f) acc += row[f] * features[f];
    z[k] = acc;
  }
  return z;
}

BayesEstimate bayes_accuracy(const DomainSpec& spec,
                             const std::string& qualified_task,
                             std::span<const std::string> categories,
                             std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw ConfigError("bayes_accuracy needs n_samples >= 1");
  if (categories.empty()) {
    throw ConfigError("bayes_accuracy needs at least one category");
  }
  int ti = spec.task_index(qualified_task);
  if (ti < 0) {
    throw ConfigError("unknown task " + qualified_task + " in domain " +
                      spec.domain_id);
  }
  const auto& task = spec.tasks[static_cast<std::size_t>(ti)];
  std::vector<std::size_t> cat_ids;
  for (const auto& c : categories) cat_ids.push_back(category_index(spec, c));

  Rng rng(Rng::derive(seed, "bayes", static_cast<std::uint64_t>(ti)));
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    std::size_t cat = cat_ids[rng.index(cat_ids.size())];
    auto levels = sample_state_levels(spec, cat, rng);
    std::size_t style = rng.index(spec.n_action_styles);
    std::size_t action_level = rng.index(spec.n_action_levels);
    auto phi = features_from_parts(spec, levels, style, action_level);
    auto logits = task_logits(spec, static_cast<std::size_t>(ti), phi);
    double p_star = 1.0;
    if (task.temperature > 0.0) {
      auto p = softmax_probs(logits, task.temperature);
      p_star = *std::max_element(p.begin(), p.end());
    }
    sum += p_star;
    sum_sq += p_star * p_star;
  }
  BayesEstimate est;
  est.n_samples = n_samples;
  est.accuracy = sum / static_cast<double>(n_samples);
  double var = sum_sq / static_cast<double>(n_samples) -
               est.accuracy * est.accuracy;
  if (var < 0.0) var = 0.0;
  est.std_error = std::sqrt(var / static_cast<double>(n_samples));
  return est;
}

CategorySplit split_categories(const DomainSpec& spec, std::size_t n_holdout,
                               std::uint64_t seed) {
  if (n_holdout == 0 || n_holdout >= spec.categories.size()) {
    throw ConfigError("n_holdout must be in 1.." +
                      std::to_string(spec.categories.size() - 1) + ", got " +
                      std::to_string(n_holdout));
  }
  std::vector<std::string> cats = spec.categories;
  Rng rng(Rng::derive(seed, spec.domain_id + "-split"));
  rng.shuffle(cats);
  CategorySplit split;
  split.holdout.assign(cats.begin(), cats.begin() + static_cast<long>(n_holdout));
  split.train.assign(cats.begin() + static_cast<long>(n_holdout), cats.end());
  std::sort(split.holdout.begin(), split.holdout.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

std::vector<std::string> domain_word_pool(const DomainSpec& spec) {
  std::vector<std::string> words = {"item", "with", "apply"};
  words.insert(words.end(), filler_pool().begin(), filler_pool().end());
  words.insert(words.end(), spec.categories.begin(), spec.categories.end());
  for (std::size_t j = 0; j < spec.n_state_slots; ++j) {
    for (std::size_t v = 0; v < spec.n_levels; ++v) {
      words.push_back(slot_word(spec, j, v));
    }
  }
  for (std::size_t s = 0; s < spec.n_action_styles; ++s) {
    words.push_back(style_word(spec, s));
  }
  for (std::size_t l = 0; l < spec.n_action_levels; ++l) {
    words.push_back(level_word(spec, l));
  }
  return words;
}

}  // namespace ltu
