#include "ltu/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ltu/errors.hpp"
#include "ltu/hash.hpp"
#include "ltu/rng.hpp"

namespace ltu {
namespace {

using nlohmann::json;

const std::vector<std::string>& marker_tokens() {
  static const std::vector<std::string> kMarkers = {
      "<PAD>", "<UNK>", "<BOS>", "<EOS>", "<S>", "<A>", "<R>"};
  return kMarkers;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(std::move(w));
  return out;
}

void hash_mix(std::uint64_t& h, const std::string& s) {
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  h ^= 0x1f;
  h *= 0x100000001b3ull;
}

}  // namespace

std::uint64_t trajectory_hash(const Trajectory& traj) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  hash_mix(h, traj.domain_id);
  hash_mix(h, traj.category_id);
  hash_mix(h, traj.task_id);
  for (const auto& step : traj.steps) {
    hash_mix(h, step.state_text);
    hash_mix(h, step.action_text);
    hash_mix(h, std::to_string(step.reward_label));
  }
  return h;
}

std::string Vocab::reward_token(const std::string& task, int label) {
  return "<R|" + task + "|" + std::to_string(label) + ">";
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumMarkers) {
    throw ConfigError("vocab too small: " + std::to_string(tokens.size()) +
                      " tokens, need at least " + std::to_string(kNumMarkers) +
                      " markers");
  }
  const auto& markers = marker_tokens();
  for (std::size_t i = 0; i < kNumMarkers; ++i) {
    if (tokens[i] != markers[i]) {
      throw ConfigError("vocab id " + std::to_string(i) + " must be " +
                        markers[i] + ", got " + tokens[i]);
    }
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  std::map<std::string, std::vector<std::pair<int, TokenId>>> task_labels;
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const std::string& tok = v.tokens_[i];
    if (tok.empty() ||
        tok.find_first_of(" \t\n\r") != std::string::npos) {
      throw ConfigError("vocab id " + std::to_string(i) +
                        " is empty or contains whitespace");
    }
    if (!v.index_.emplace(tok, static_cast<TokenId>(i)).second) {
      throw ConfigError("duplicate vocab token: " + tok);
    }
    if (i >= kNumMarkers && tok.rfind("<R|", 0) == 0 && tok.back() == '>') {
      std::string body = tok.substr(3, tok.size() - 4);
      auto bar = body.rfind('|');
      if (bar == std::string::npos || bar == 0 || bar + 1 == body.size()) {
        throw ConfigError("malformed reward token: " + tok);
      }
      std::string task = body.substr(0, bar);
      int label = 0;
      try {
        std::size_t used = 0;
        label = std::stoi(body.substr(bar + 1), &used);
        if (used != body.size() - bar - 1) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ConfigError("malformed reward token: " + tok);
      }
      task_labels[task].emplace_back(label, static_cast<TokenId>(i));
    }
  }
  for (auto& [task, labels] : task_labels) {
    std::sort(labels.begin(), labels.end());
    std::vector<TokenId> ids;
    for (std::size_t l = 0; l < labels.size(); ++l) {
      if (labels[l].first != static_cast<int>(l)) {
        throw ConfigError("task " + task + " reward labels are not 0.." +
                          std::to_string(labels.size() - 1));
      }
      if (l > 0 && labels[l].second != labels[l - 1].second + 1) {
        throw ConfigError("task " + task +
                          " reward token ids are not contiguous");
      }
      ids.push_back(labels[l].second);
    }
    v.task_rewards_.emplace(task, std::move(ids));
  }
  return v;
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open vocab file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write vocab file: " + path);
  for (const auto& tok : tokens_) out << tok << '\n';
  if (!out) throw RuntimeError("short write on vocab file: " + path);
}

TokenId Vocab::lookup(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw RuntimeError("token id " + std::to_string(id) +
                       " outside vocab of size " +
                       std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(const std::string& word) const {
  return index_.count(word) > 0;
}

bool Vocab::has_task(const std::string& task) const {
  return task_rewards_.count(task) > 0;
}

std::vector<std::string> Vocab::tasks() const {
  std::vector<std::string> out;
  for (const auto& [task, ids] : task_rewards_) out.push_back(task);
  return out;
}

std::span<const TokenId> Vocab::reward_ids(const std::string& task) const {
  auto it = task_rewards_.find(task);
  if (it == task_rewards_.end()) {
    throw ConfigError("unknown reward task: " + task);
  }
  return it->second;
}

std::optional<std::pair<std::string, int>> Vocab::reward_of(TokenId id) const {
  for (const auto& [task, ids] : task_rewards_) {
    if (!ids.empty() && id >= ids.front() && id <= ids.back()) {
      return std::make_pair(task, static_cast<int>(id - ids.front()));
    }
  }
  return std::nullopt;
}

void VocabBuilder::add_word(const std::string& word) {
  if (word.empty()) throw ConfigError("empty word added to vocab builder");
  words_.push_back(word);
}

void VocabBuilder::add_words(std::span<const std::string> words) {
  for (const auto& w : words) add_word(w);
}

void VocabBuilder::add_text(const std::string& text) {
  for (auto& w : split_words(text)) add_word(w);
}

void VocabBuilder::add_task(const std::string& task, int bin_count) {
  if (bin_count < 2) {
    throw ConfigError("task " + task + " needs at least 2 reward bins, got " +
                      std::to_string(bin_count));
  }
  for (const auto& [name, k] : tasks_) {
    if (name == task) {
      if (k != bin_count) {
        throw ConfigError("task " + task + " registered twice with bin counts " +
                          std::to_string(k) + " and " +
                          std::to_string(bin_count));
      }
      return;
    }
  }
  tasks_.emplace_back(task, bin_count);
}

Vocab VocabBuilder::build() const {
  std::vector<std::string> tokens = marker_tokens();
  for (const auto& [task, k] : tasks_) {
    for (int label = 0; label < k; ++label) {
      tokens.push_back(Vocab::reward_token(task, label));
    }
  }
  std::set<std::string> seen(tokens.begin(), tokens.end());
  std::vector<std::string> words;
  for (const auto& w : words_) {
    if (seen.insert(w).second) words.push_back(w);
  }
  std::sort(words.begin(), words.end());
  tokens.insert(tokens.end(), words.begin(), words.end());
  return Vocab::from_tokens(std::move(tokens));
}

BinningSpec fit_bins(std::span<const double> values, int bin_count,
                     std::string task, std::string provenance) {
  if (bin_count < 2) {
    throw ConfigError("bin_count must be >= 2, got " +
                      std::to_string(bin_count));
  }
  if (values.size() < static_cast<std::size_t>(bin_count)) {
    throw ConfigError("need at least " + std::to_string(bin_count) +
                      " values to fit " + std::to_string(bin_count) +
                      " bins, got " + std::to_string(values.size()));
  }
  std::vector<double> sorted(values.begin(), values.end());
  for (double v : sorted) {
    if (!std::isfinite(v)) {
      throw ConfigError("non-finite value passed to fit_bins");
    }
  }
  std::sort(sorted.begin(), sorted.end());

  BinningSpec spec;
  spec.task = std::move(task);
  spec.bin_count = bin_count;
  spec.provenance = std::move(provenance);
  const std::size_t n = sorted.size();
  for (int i = 1; i < bin_count; ++i) {
    // Linear interpolation between order statistics at quantile i/K.
    double h = static_cast<double>(i) / bin_count * static_cast<double>(n - 1);
    std::size_t lo = static_cast<std::size_t>(h);
    double frac = h - static_cast<double>(lo);
    double edge = sorted[lo];
    if (lo + 1 < n) edge += frac * (sorted[lo + 1] - sorted[lo]);
    spec.edges.push_back(edge);
  }
  for (std::size_t i = 1; i < spec.edges.size(); ++i) {
    if (!(spec.edges[i - 1] < spec.edges[i])) {
      std::ostringstream msg;
      msg << "degenerate bins for task " << spec.task << ": edge "
          << spec.edges[i] << " does not exceed previous edge "
          << spec.edges[i - 1] << " (values too concentrated for "
          << bin_count << " bins)";
      throw ConfigError(msg.str());
    }
  }
  return spec;
}

int discretize(double value, const BinningSpec& spec) {
  if (!std::isfinite(value)) {
    throw RuntimeError("cannot discretize non-finite value");
  }
  if (spec.bin_count < 2 ||
      spec.edges.size() + 1 != static_cast<std::size_t>(spec.bin_count)) {
    throw ConfigError("binning spec for task " + spec.task +
                      " is inconsistent: " + std::to_string(spec.edges.size()) +
                      " edges for " + std::to_string(spec.bin_count) + " bins");
  }
  // A value equal to an edge goes to the higher bin, so count edges <= value.
  auto it = std::upper_bound(spec.edges.begin(), spec.edges.end(), value);
  return static_cast<int>(it - spec.edges.begin());
}

std::string BinningSpec::to_json() const {
  json j;
  j["task"] = task;
  j["bin_count"] = bin_count;
  j["edges"] = edges;
  j["provenance"] = provenance;
  return j.dump(2);
}

BinningSpec BinningSpec::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid binning spec JSON: ") + e.what());
  }
  BinningSpec spec;
  try {
    spec.task = j.at("task").get<std::string>();
    spec.bin_count = j.at("bin_count").get<int>();
    spec.edges = j.at("edges").get<std::vector<double>>();
    spec.provenance = j.value("provenance", std::string());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid binning spec fields: ") + e.what());
  }
  if (spec.edges.size() + 1 != static_cast<std::size_t>(spec.bin_count)) {
    throw ConfigError("binning spec edge count " +
                      std::to_string(spec.edges.size()) +
                      " does not match bin_count " +
                      std::to_string(spec.bin_count));
  }
  for (std::size_t i = 1; i < spec.edges.size(); ++i) {
    if (!(spec.edges[i - 1] < spec.edges[i])) {
      throw ConfigError("binning spec edges are not strictly increasing");
    }
  }
  return spec;
}

void BinningSpec::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write binning spec: " + path);
  out << to_json() << '\n';
}

BinningSpec BinningSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open binning spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {

void validate_trajectory(const Trajectory& traj, const Vocab& vocab) {
  if (traj.steps.empty()) {
    throw RuntimeError("trajectory has no steps (domain " + traj.domain_id +
                       ", task " + traj.task_id + ")");
  }
  if (!vocab.has_task(traj.task_id)) {
    throw ConfigError("vocab has no reward tokens for task: " + traj.task_id);
  }
  const auto ids = vocab.reward_ids(traj.task_id);
  for (const auto& step : traj.steps) {
    if (step.reward_label < 0 ||
        static_cast<std::size_t>(step.reward_label) >= ids.size()) {
      throw RuntimeError("reward label " + std::to_string(step.reward_label) +
                         " outside 0.." + std::to_string(ids.size() - 1) +
                         " for task " + traj.task_id);
    }
  }
}

}  // namespace

std::vector<TokenId> encode_ct(const Trajectory& traj, const Vocab& vocab,
                               std::size_t max_seq_len) {
  validate_trajectory(traj, vocab);
  const auto reward_ids = vocab.reward_ids(traj.task_id);
  std::vector<TokenId> out;
  out.push_back(Vocab::kBos);
  for (const auto& step : traj.steps) {
    out.push_back(Vocab::kState);
    for (const auto& w : split_words(step.state_text)) {
      out.push_back(vocab.lookup(w));
    }
    out.push_back(Vocab::kAction);
    for (const auto& w : split_words(step.action_text)) {
      out.push_back(vocab.lookup(w));
    }
    out.push_back(Vocab::kReward);
    out.push_back(reward_ids[static_cast<std::size_t>(step.reward_label)]);
  }
  out.push_back(Vocab::kEos);
  if (out.size() > max_seq_len) {
    throw RuntimeError("encoded document has " + std::to_string(out.size()) +
                       " tokens, exceeds max_seq_len " +
                       std::to_string(max_seq_len));
  }
  return out;
}

Trajectory decode_ct(std::span<const TokenId> ids, const Vocab& vocab) {
  std::size_t pos = 0;
  auto need = [&](const char* what) {
    if (pos >= ids.size()) {
      throw RuntimeError(std::string("truncated document: expected ") + what);
    }
    return ids[pos];
  };
  if (need("<BOS>") != Vocab::kBos) {
    throw RuntimeError("document does not start with <BOS>");
  }
  ++pos;
  Trajectory traj;
  auto collect_until = [&](std::initializer_list<TokenId> stops) {
    std::string text;
    while (pos < ids.size() &&
           std::find(stops.begin(), stops.end(), ids[pos]) == stops.end()) {
      TokenId id = ids[pos];
      if (id == Vocab::kBos || id == Vocab::kEos || id == Vocab::kState ||
          id == Vocab::kAction || id == Vocab::kReward ||
          vocab.reward_of(id).has_value()) {
        throw RuntimeError("unexpected structural token " + vocab.token(id) +
                           " at position " + std::to_string(pos));
      }
      if (!text.empty()) text += ' ';
      text += vocab.token(id);
      ++pos;
    }
    return text;
  };
  while (need("<S> or <EOS>") != Vocab::kEos) {
    if (ids[pos] != Vocab::kState) {
      throw RuntimeError("expected <S> at position " + std::to_string(pos) +
                         ", got " + vocab.token(ids[pos]));
    }
    ++pos;
    TrajectoryStep step;
    step.state_text = collect_until({Vocab::kAction});
    if (need("<A>") != Vocab::kAction) {
      throw RuntimeError("state run not closed by <A>");
    }
    ++pos;
    step.action_text = collect_until({Vocab::kReward});
    if (need("<R>") != Vocab::kReward) {
      throw RuntimeError("action run not closed by <R>");
    }
    ++pos;
    auto reward = vocab.reward_of(need("reward token"));
    if (!reward) {
      throw RuntimeError("token after <R> is not a reward token: " +
                         vocab.token(ids[pos]));
    }
    ++pos;
    if (traj.task_id.empty()) {
      traj.task_id = reward->first;
    } else if (traj.task_id != reward->first) {
      throw RuntimeError("document mixes reward tasks " + traj.task_id +
                         " and " + reward->first);
    }
    step.reward_label = reward->second;
    traj.steps.push_back(std::move(step));
  }
  ++pos;
  if (pos != ids.size()) {
    throw RuntimeError("trailing tokens after <EOS> at position " +
                       std::to_string(pos));
  }
  if (traj.steps.empty()) {
    throw RuntimeError("document contains no decision steps");
  }
  return traj;
}

SftSample encode_sft(const Trajectory& traj, const Vocab& vocab,
                     std::size_t max_seq_len) {
  // Full encoding first; the sample is strictly shorter (it drops <EOS> and
  // the final reward token), plus one extra position for the shifted target.
  std::vector<TokenId> full = encode_ct(traj, vocab, max_seq_len + 2);
  std::size_t last_r = full.size();
  for (std::size_t i = full.size(); i-- > 0;) {
    if (full[i] == Vocab::kReward) {
      last_r = i;
      break;
    }
  }
  // encode_ct guarantees at least one <R> followed by a reward token.
  SftSample sample;
  sample.task_id = traj.task_id;
  sample.label = traj.steps.back().reward_label;
  sample.traj_hash = trajectory_hash(traj);
  const std::size_t len = last_r + 1;  // input ends at the final <R>
  if (len > max_seq_len) {
    throw RuntimeError("prefix sample has " + std::to_string(len) +
                       " tokens, exceeds max_seq_len " +
                       std::to_string(max_seq_len));
  }
  sample.input.assign(full.begin(), full.begin() + static_cast<long>(len));
  sample.targets.assign(full.begin() + 1,
                        full.begin() + static_cast<long>(len) + 1);
  sample.mask.assign(len, 0);
  sample.mask.back() = 1;
  return sample;
}

std::vector<TokenId> encode_text(const std::string& text, const Vocab& vocab,
                                 std::size_t max_seq_len) {
  std::vector<TokenId> out;
  out.push_back(Vocab::kBos);
  for (const auto& w : split_words(text)) out.push_back(vocab.lookup(w));
  out.push_back(Vocab::kEos);
  if (out.size() > max_seq_len) {
    throw RuntimeError("encoded text has " + std::to_string(out.size()) +
                       " tokens, exceeds max_seq_len " +
                       std::to_string(max_seq_len));
  }
  return out;
}

std::vector<std::vector<TokenId>> mix_corpora(
    std::vector<std::vector<TokenId>> decision_docs,
    std::vector<std::vector<TokenId>> common_docs, double decision_fraction,
    std::uint64_t seed) {
  if (!(decision_fraction > 0.0) || decision_fraction > 1.0) {
    throw ConfigError("decision_fraction must be in (0, 1], got " +
                      std::to_string(decision_fraction));
  }
  if (decision_docs.empty()) {
    throw ConfigError("mix_corpora needs a non-empty decision corpus");
  }
  if (decision_fraction < 1.0 && common_docs.empty()) {
    throw ConfigError(
        "decision_fraction < 1 requires a non-empty common corpus");
  }
  Rng rng(Rng::derive(seed, "mix"));
  std::vector<std::size_t> dec_order(decision_docs.size());
  for (std::size_t i = 0; i < dec_order.size(); ++i) dec_order[i] = i;
  rng.shuffle(dec_order);

  std::vector<std::size_t> common_order(common_docs.size());
  for (std::size_t i = 0; i < common_order.size(); ++i) common_order[i] = i;
  std::size_t common_pos = common_order.size();  // forces initial shuffle

  std::vector<std::vector<TokenId>> out;
  std::size_t dec_pos = 0;
  while (dec_pos < dec_order.size()) {
    if (rng.uniform() < decision_fraction) {
      out.push_back(std::move(decision_docs[dec_order[dec_pos]]));
      ++dec_pos;
    } else {
      if (common_pos >= common_order.size()) {
        rng.shuffle(common_order);
        common_pos = 0;
      }
      out.push_back(common_docs[common_order[common_pos]]);
      ++common_pos;
    }
  }
  return out;
}

const std::vector<std::string>& common_word_pool() {
  static const std::vector<std::string> kPool = [] {
    std::vector<std::string> all;
    for (const char* w :
         {"teams",     "customers", "markets",  "vendors", "analysts",
          "shoppers",  "retailers", "brands",   "platforms", "buyers",
          "sellers",   "suppliers", "compare",  "track",   "prefer",
          "evaluate",  "discuss",   "rank",     "follow",  "study",
          "report",    "adjust",    "measure",  "describe", "prices",
          "trends",    "quality",   "demand",   "inventory", "shipping",
          "discounts", "budgets",   "catalogs", "ratings", "campaigns",
          "traffic",   "seasonal",  "regional", "typical", "steady",
          "broad",     "recent",    "annual",   "modest",  "general",
          "visible",   "and",       "across",   "during",  "within",
          "before",    "after"}) {
      all.emplace_back(w);
    }
    return all;
  }();
  return kPool;
}

std::vector<std::string> make_common_docs(std::size_t count,
                                          std::uint64_t seed) {
  // Index layout of common_word_pool: 12 subjects, 12 verbs, 12 objects,
  // 10 modifiers, 6 connectors.
  const auto& pool = common_word_pool();
  auto subject = [&](Rng& r) { return pool[r.index(12)]; };
  auto verb = [&](Rng& r) { return pool[12 + r.index(12)]; };
  auto object = [&](Rng& r) { return pool[24 + r.index(12)]; };
  auto modifier = [&](Rng& r) { return pool[36 + r.index(10)]; };
  auto connector = [&](Rng& r) { return pool[46 + r.index(6)]; };

  std::vector<std::string> docs;
  docs.reserve(count);
  Rng rng(Rng::derive(seed, "common-docs"));
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t sentences = 1 + rng.index(3);
    std::string doc;
    for (std::size_t s = 0; s < sentences; ++s) {
      if (!doc.empty()) doc += ' ';
      doc += subject(rng);
      doc += ' ';
      doc += verb(rng);
      doc += ' ';
      if (rng.bernoulli(0.6)) {
        doc += modifier(rng);
        doc += ' ';
      }
      doc += object(rng);
      if (rng.bernoulli(0.4)) {
        doc += ' ';
        doc += connector(rng);
        doc += ' ';
        doc += modifier(rng);
        doc += ' ';
        doc += object(rng);
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

void write_trajectories_jsonl(std::span<const Trajectory> trajs,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write trajectory file: " + path);
  for (const auto& traj : trajs) {
    json steps = json::array();
    for (const auto& step : traj.steps) {
      steps.push_back(
          json::array({step.state_text, step.action_text, step.reward_label}));
    }
    json j;
    j["domain"] = traj.domain_id;
    j["category"] = traj.category_id;
    j["task"] = traj.task_id;
    j["steps"] = steps;
    out << j.dump() << '\n';
  }
  if (!out) throw RuntimeError("short write on trajectory file: " + path);
}

std::vector<Trajectory> read_trajectories_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open trajectory file: " + path);
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw RuntimeError(path + ":" + std::to_string(lineno) +
                         ": invalid JSON: " + e.what());
    }
    Trajectory traj;
    try {
      traj.domain_id = j.at("domain").get<std::string>();
      traj.category_id = j.at("category").get<std::string>();
      traj.task_id = j.at("task").get<std::string>();
      for (const auto& s : j.at("steps")) {
        TrajectoryStep step;
        step.state_text = s.at(0).get<std::string>();
        step.action_text = s.at(1).get<std::string>();
        step.reward_label = s.at(2).get<int>();
        traj.steps.push_back(std::move(step));
      }
    } catch (const json::exception& e) {
      throw RuntimeError(path + ":" + std::to_string(lineno) +
                         ": bad trajectory record: " + e.what());
    }
    if (traj.steps.empty()) {
      throw RuntimeError(path + ":" + std::to_string(lineno) +
                         ": trajectory has no steps");
    }
    out.push_back(std::move(traj));
  }
  return out;
}

}  // namespace ltu
