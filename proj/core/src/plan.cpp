#include "ltu/plan.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ltu/errors.hpp"
#include "ltu/hash.hpp"

namespace ltu {
namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError("plan section '" + where + "' must be a JSON object");
  }
}

void reject_unknown(const json& j, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return key == a;
        }) == allowed.end()) {
      throw ConfigError("unknown plan key '" + key + "' in " + where);
    }
  }
}

template <typename T>
T get_field(const json& j, const std::string& where, const char* key) {
  if (!j.contains(key)) {
    throw ConfigError("missing plan key '" + std::string(key) + "' in " +
                      where);
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("plan key '" + std::string(key) + "' in " + where +
                      " has the wrong type");
  }
}

template <typename T>
T get_field_or(const json& j, const std::string& where, const char* key,
               T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("plan key '" + std::string(key) + "' in " + where +
                      " has the wrong type");
  }
}

TrainConfig parse_train(const json& j, const std::string& where) {
  require_object(j, where);
  reject_unknown(j, where,
                 {"steps", "batch_size", "lr", "beta1", "beta2", "adam_eps",
                  "clip_norm", "warmup_fraction", "log_every"});
  TrainConfig cfg;
  cfg.steps = get_field<std::size_t>(j, where, "steps");
  cfg.batch_size = get_field<std::size_t>(j, where, "batch_size");
  cfg.lr = get_field<double>(j, where, "lr");
  cfg.beta1 = get_field_or(j, where, "beta1", cfg.beta1);
  cfg.beta2 = get_field_or(j, where, "beta2", cfg.beta2);
  cfg.adam_eps = get_field_or(j, where, "adam_eps", cfg.adam_eps);
  cfg.clip_norm = get_field_or(j, where, "clip_norm", cfg.clip_norm);
  cfg.warmup_fraction =
      get_field_or(j, where, "warmup_fraction", cfg.warmup_fraction);
  cfg.log_every = get_field_or(j, where, "log_every", cfg.log_every);
  return cfg;
}

}  // namespace

const std::vector<std::string>& known_arms() {
  static const std::vector<std::string> kArms = {
      "sft_only", "ltu_in_domain", "ltu_cross",
      "ltu_mix",  "ltu_common",    "sft_full"};
  return kArms;
}

void PlanFile::validate() const {
  if (seeds.empty()) throw ConfigError("plan needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() !=
      seeds.size()) {
    throw ConfigError("plan seeds must be unique");
  }
  if (arms.empty()) throw ConfigError("plan needs at least one arm");
  const auto& known = known_arms();
  for (const auto& arm : arms) {
    if (std::find(known.begin(), known.end(), arm) == known.end()) {
      std::string all;
      for (const auto& k : known) {
        if (!all.empty()) all += ", ";
        all += k;
      }
      throw ConfigError("unknown arm '" + arm + "' (known: " + all + ")");
    }
  }
  if (std::set<std::string>(arms.begin(), arms.end()).size() != arms.size()) {
    throw ConfigError("plan arms must be unique");
  }
  if (target_kind == aux_kind) {
    throw ConfigError("target and aux domain kinds must differ");
  }
  if (n_holdout_categories == 0 || n_holdout_categories >= n_categories) {
    throw ConfigError("n_holdout_categories must be in 1.." +
                      std::to_string(n_categories - 1));
  }
  if (shared_fraction < 0.0 || shared_fraction > 1.0) {
    throw ConfigError("shared_fraction must be in [0, 1]");
  }
  if (temperature_scale < 0.0) {
    throw ConfigError("temperature_scale must be >= 0");
  }
  if (ct_docs == 0 || common_docs == 0 || sft_train == 0 || sft_eval == 0) {
    throw ConfigError("corpus sizes must all be >= 1");
  }
  if (!(mix_fraction > 0.0) || mix_fraction > 1.0) {
    throw ConfigError("mix_fraction must be in (0, 1]");
  }
  if (steps_per_doc == 0) throw ConfigError("steps_per_doc must be >= 1");
  if (model.d_model == 0 || model.n_heads == 0 || model.n_layers == 0 ||
      model.max_seq_len == 0) {
    throw ConfigError("model extents must be positive");
  }
  if (model.d_model % model.n_heads != 0) {
    throw ConfigError("d_model must be divisible by n_heads");
  }
  if (!(model.init_scale > 0.0)) {
    throw ConfigError("init_scale must be positive");
  }
  ct.validate();
  sft.validate();
  if (bayes_samples == 0) throw ConfigError("bayes_samples must be >= 1");
}

PlanFile PlanFile::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid plan JSON: ") + e.what());
  }
  require_object(j, "plan");
  reject_unknown(j, "plan",
                 {"seeds", "arms", "domains", "corpus", "model", "train",
                  "eval", "out_dir"});

  PlanFile plan;
  plan.seeds = get_field<std::vector<std::uint64_t>>(j, "plan", "seeds");
  plan.arms = get_field<std::vector<std::string>>(j, "plan", "arms");
  plan.out_dir = get_field_or(j, "plan", "out_dir", std::string());

  const json& d = j.contains("domains") ? j.at("domains") : json::object();
  require_object(d, "domains");
  reject_unknown(d, "domains",
                 {"target_kind", "aux_kind", "seed", "n_categories",
                  "n_holdout_categories", "shared_fraction",
                  "temperature_scale"});
  plan.target_kind =
      get_field_or(d, "domains", "target_kind", plan.target_kind);
  plan.aux_kind = get_field_or(d, "domains", "aux_kind", plan.aux_kind);
  plan.domain_seed = get_field<std::uint64_t>(d, "domains", "seed");
  plan.n_categories =
      get_field_or(d, "domains", "n_categories", plan.n_categories);
  plan.n_holdout_categories = get_field_or(
      d, "domains", "n_holdout_categories", plan.n_holdout_categories);
  plan.shared_fraction =
      get_field_or(d, "domains", "shared_fraction", plan.shared_fraction);
  plan.temperature_scale = get_field_or(d, "domains", "temperature_scale",
                                        plan.temperature_scale);

  const json& c = j.contains("corpus") ? j.at("corpus") : json::object();
  require_object(c, "corpus");
  reject_unknown(c, "corpus",
                 {"ct_docs", "common_docs", "sft_train", "sft_eval",
                  "mix_fraction", "steps_per_doc"});
  plan.ct_docs = get_field<std::size_t>(c, "corpus", "ct_docs");
  plan.common_docs = get_field<std::size_t>(c, "corpus", "common_docs");
  plan.sft_train = get_field<std::size_t>(c, "corpus", "sft_train");
  plan.sft_eval = get_field<std::size_t>(c, "corpus", "sft_eval");
  plan.mix_fraction =
      get_field_or(c, "corpus", "mix_fraction", plan.mix_fraction);
  plan.steps_per_doc =
      get_field_or(c, "corpus", "steps_per_doc", plan.steps_per_doc);

  const json& m = j.contains("model") ? j.at("model") : json::object();
  require_object(m, "model");
  reject_unknown(m, "model",
                 {"d_model", "n_heads", "n_layers", "max_seq_len",
                  "init_scale"});
  plan.model.d_model = get_field<std::size_t>(m, "model", "d_model");
  plan.model.n_heads = get_field<std::size_t>(m, "model", "n_heads");
  plan.model.n_layers = get_field<std::size_t>(m, "model", "n_layers");
  plan.model.max_seq_len = get_field<std::size_t>(m, "model", "max_seq_len");
  plan.model.init_scale =
      get_field_or(m, "model", "init_scale", plan.model.init_scale);

  if (!j.contains("train")) throw ConfigError("missing plan section 'train'");
  const json& t = j.at("train");
  require_object(t, "train");
  reject_unknown(t, "train", {"ct", "sft"});
  if (!t.contains("ct") || !t.contains("sft")) {
    throw ConfigError("plan train section needs both 'ct' and 'sft'");
  }
  plan.ct = parse_train(t.at("ct"), "train.ct");
  plan.sft = parse_train(t.at("sft"), "train.sft");

  const json& e = j.contains("eval") ? j.at("eval") : json::object();
  require_object(e, "eval");
  reject_unknown(e, "eval", {"bayes_samples"});
  plan.bayes_samples =
      get_field_or(e, "eval", "bayes_samples", plan.bayes_samples);

  plan.validate();
  return plan;
}

PlanFile PlanFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string PlanFile::canonical_json() const {
  json j;
  j["seeds"] = seeds;
  j["arms"] = arms;
  j["domains"] = {{"target_kind", target_kind},
                  {"aux_kind", aux_kind},
                  {"seed", domain_seed},
                  {"n_categories", n_categories},
                  {"n_holdout_categories", n_holdout_categories},
                  {"shared_fraction", shared_fraction},
                  {"temperature_scale", temperature_scale}};
  j["corpus"] = {{"ct_docs", ct_docs},
                 {"common_docs", common_docs},
                 {"sft_train", sft_train},
                 {"sft_eval", sft_eval},
                 {"mix_fraction", mix_fraction},
                 {"steps_per_doc", steps_per_doc}};
  j["model"] = {{"d_model", model.d_model},
                {"n_heads", model.n_heads},
                {"n_layers", model.n_layers},
                {"max_seq_len", model.max_seq_len},
                {"init_scale", model.init_scale}};
  auto train_json = [](const TrainConfig& cfg) {
    return json{{"steps", cfg.steps},
                {"batch_size", cfg.batch_size},
                {"lr", cfg.lr},
                {"beta1", cfg.beta1},
                {"beta2", cfg.beta2},
                {"adam_eps", cfg.adam_eps},
                {"clip_norm", cfg.clip_norm},
                {"warmup_fraction", cfg.warmup_fraction}};
  };
  j["train"] = {{"ct", train_json(ct)}, {"sft", train_json(sft)}};
  j["eval"] = {{"bayes_samples", bayes_samples}};
  return j.dump();
}

std::string PlanFile::fingerprint() const {
  return to_hex(fnv1a64(canonical_json()));
}

}  // namespace ltu
