#include <doctest.h>

#include <string>

#include <nlohmann/json.hpp>

#include "ltu/errors.hpp"
#include "ltu/plan.hpp"

using namespace ltu;
using nlohmann::json;

namespace {

json base_plan() {
  return json::parse(R"({
    "seeds": [1, 2],
    "arms": ["sft_only", "ltu_in_domain"],
    "domains": {"seed": 42},
    "corpus": {"ct_docs": 100, "common_docs": 50, "sft_train": 80,
               "sft_eval": 40},
    "model": {"d_model": 32, "n_heads": 4, "n_layers": 1, "max_seq_len": 64},
    "train": {
      "ct":  {"steps": 10, "batch_size": 4, "lr": 0.001},
      "sft": {"steps": 10, "batch_size": 4, "lr": 0.001}
    }
  })");
}

PlanFile parse(const json& j) { return PlanFile::from_json(j.dump()); }

}  // namespace

TEST_CASE("a minimal plan parses and fills documented defaults") {
  const PlanFile plan = parse(base_plan());
  CHECK(plan.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(plan.arms.size() == 2);
  CHECK(plan.target_kind == "ppc");
  CHECK(plan.aux_kind == "seo");
  CHECK(plan.domain_seed == 42);
  CHECK(plan.n_categories == 10);
  CHECK(plan.n_holdout_categories == 2);
  CHECK(plan.shared_fraction == 0.5);
  CHECK(plan.temperature_scale == 1.0);
  CHECK(plan.mix_fraction == 0.25);
  CHECK(plan.steps_per_doc == 1);
  CHECK(plan.model.init_scale == 0.02);
  CHECK(plan.ct.beta1 == 0.9);
  CHECK(plan.sft.clip_norm == 1.0);
  CHECK(plan.bayes_samples == 20000);
  CHECK(plan.out_dir.empty());
}

TEST_CASE("unknown keys are rejected by name at every level") {
  auto top = base_plan();
  top["surprise"] = 1;
  CHECK_THROWS_WITH_AS(parse(top), doctest::Contains("surprise"),
                       ConfigError);

  auto dom = base_plan();
  dom["domains"]["shards"] = 4;
  CHECK_THROWS_WITH_AS(parse(dom), doctest::Contains("shards"), ConfigError);

  auto corp = base_plan();
  corp["corpus"]["dedupe"] = true;
  CHECK_THROWS_WITH_AS(parse(corp), doctest::Contains("dedupe"), ConfigError);

  auto model = base_plan();
  model["model"]["dropout"] = 0.1;
  CHECK_THROWS_WITH_AS(parse(model), doctest::Contains("dropout"),
                       ConfigError);

  auto train = base_plan();
  train["train"]["ct"]["momentum"] = 0.9;
  CHECK_THROWS_WITH_AS(parse(train), doctest::Contains("momentum"),
                       ConfigError);

  auto ev = base_plan();
  ev["eval"] = {{"bootstrap", 100}};
  CHECK_THROWS_WITH_AS(parse(ev), doctest::Contains("bootstrap"),
                       ConfigError);
}

TEST_CASE("missing required keys are named") {
  auto no_seed = base_plan();
  no_seed["domains"].erase("seed");
  CHECK_THROWS_WITH_AS(parse(no_seed), doctest::Contains("seed"),
                       ConfigError);

  auto no_lr = base_plan();
  no_lr["train"]["sft"].erase("lr");
  CHECK_THROWS_WITH_AS(parse(no_lr), doctest::Contains("lr"), ConfigError);

  auto no_eval = base_plan();
  no_eval["corpus"].erase("sft_eval");
  CHECK_THROWS_WITH_AS(parse(no_eval), doctest::Contains("sft_eval"),
                       ConfigError);

  auto no_train = base_plan();
  no_train.erase("train");
  CHECK_THROWS_AS(parse(no_train), ConfigError);

  auto no_model_width = base_plan();
  no_model_width["model"].erase("d_model");
  CHECK_THROWS_WITH_AS(parse(no_model_width), doctest::Contains("d_model"),
                       ConfigError);
}

TEST_CASE("semantic validation catches bad values") {
  auto dup_seed = base_plan();
  dup_seed["seeds"] = {3, 3};
  CHECK_THROWS_AS(parse(dup_seed), ConfigError);

  auto bad_arm = base_plan();
  bad_arm["arms"] = {"sft_only", "ltu_everything"};
  CHECK_THROWS_WITH_AS(parse(bad_arm), doctest::Contains("ltu_in_domain"),
                       ConfigError);  // error lists the known arms

  auto same_domain = base_plan();
  same_domain["domains"]["target_kind"] = "seo";
  same_domain["domains"]["aux_kind"] = "seo";
  CHECK_THROWS_AS(parse(same_domain), ConfigError);

  auto bad_holdout = base_plan();
  bad_holdout["domains"]["n_holdout_categories"] = 10;
  CHECK_THROWS_AS(parse(bad_holdout), ConfigError);

  auto bad_fraction = base_plan();
  bad_fraction["domains"]["shared_fraction"] = 1.5;
  CHECK_THROWS_AS(parse(bad_fraction), ConfigError);

  auto bad_heads = base_plan();
  bad_heads["model"]["d_model"] = 30;  // not divisible by 4 heads
  CHECK_THROWS_AS(parse(bad_heads), ConfigError);

  auto bad_mix = base_plan();
  bad_mix["corpus"]["mix_fraction"] = 0.0;
  CHECK_THROWS_AS(parse(bad_mix), ConfigError);

  auto no_steps = base_plan();
  no_steps["train"]["ct"]["steps"] = 0;
  CHECK_THROWS_AS(parse(no_steps), ConfigError);

  auto no_arms = base_plan();
  no_arms["arms"] = json::array();
  CHECK_THROWS_AS(parse(no_arms), ConfigError);
}

TEST_CASE("the fingerprint tracks content, not formatting") {
  const PlanFile a = parse(base_plan());

  // same content, different key order and whitespace
  auto reordered = json::parse(R"({
    "train": {
      "sft": {"lr": 0.001, "steps": 10, "batch_size": 4},
      "ct":  {"batch_size": 4, "lr": 0.001, "steps": 10}
    },
    "model": {"max_seq_len": 64, "d_model": 32, "n_layers": 1, "n_heads": 4},
    "corpus": {"sft_eval": 40, "ct_docs": 100, "common_docs": 50,
               "sft_train": 80},
    "domains": {"seed": 42},
    "arms": ["sft_only", "ltu_in_domain"],
    "seeds": [1, 2]
  })");
  const PlanFile b = parse(reordered);
  CHECK(a.fingerprint() == b.fingerprint());

  auto changed = base_plan();
  changed["corpus"]["ct_docs"] = 101;
  CHECK(parse(changed).fingerprint() != a.fingerprint());

  // out_dir is a destination, not an input: it does not change the identity
  auto moved = base_plan();
  moved["out_dir"] = "/somewhere/else";
  CHECK(parse(moved).fingerprint() == a.fingerprint());
}

TEST_CASE("known_arms lists the six recipes") {
  const auto& arms = known_arms();
  REQUIRE(arms.size() == 6);
  CHECK(arms[0] == "sft_only");
  CHECK(arms[1] == "ltu_in_domain");
  CHECK(arms[2] == "ltu_cross");
  CHECK(arms[3] == "ltu_mix");
  CHECK(arms[4] == "ltu_common");
  CHECK(arms[5] == "sft_full");
}
