#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "ltu/corpus.hpp"
#include "ltu/errors.hpp"
#include "ltu/eval.hpp"
#include "ltu/model.hpp"
#include "ltu/plan.hpp"
#include "ltu/rng.hpp"
#include "ltu/trainer.hpp"
#include "testutil.hpp"

using namespace ltu;

namespace {

struct Tiny {
  Vocab vocab;
  ModelConfig cfg;
  ModelParams model;
  std::vector<TokenId> reward_rows;

  Tiny() {
    VocabBuilder b;
    b.add_task("t.k", 3);
    b.add_text("a b c");
    vocab = b.build();
    cfg.vocab_size = vocab.size();
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.max_seq_len = 8;
    cfg.init_seed = 3;
    model = init_model(cfg);
    const auto ids = vocab.reward_ids("t.k");
    reward_rows.assign(ids.begin(), ids.end());
  }

  // prediction prompt: <BOS> <S> a b <A> c <R>
  std::vector<TokenId> prompt() const {
    return {Vocab::kBos, Vocab::kState,  vocab.lookup("a"), vocab.lookup("b"),
            Vocab::kAction, vocab.lookup("c"), Vocab::kReward};
  }

  void set_reward_row(int label, const std::vector<double>& v) {
    auto all = model.tok_emb.values_mut();
    const std::size_t d = cfg.d_model;
    const std::size_t row = static_cast<std::size_t>(reward_rows[label]);
    std::copy(v.begin(), v.end(), all.begin() + row * d);
  }

  std::vector<double> reward_row(int label) const {
    const auto all = model.tok_emb.values();
    const std::size_t d = cfg.d_model;
    const std::size_t row = static_cast<std::size_t>(reward_rows[label]);
    return {all.begin() + row * d, all.begin() + (row + 1) * d};
  }
};

PlanFile tiny_plan(const std::string& arms_json, const std::string& seeds_json,
                   const std::string& out_dir = "") {
  std::string text = R"({
    "seeds": )" + seeds_json + R"(,
    "arms": )" + arms_json + R"(,
    "domains": {"seed": 5, "n_categories": 6, "n_holdout_categories": 2},
    "corpus": {"ct_docs": 24, "common_docs": 8, "sft_train": 16,
               "sft_eval": 8},
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "max_seq_len": 48},
    "train": {
      "ct":  {"steps": 6, "batch_size": 2, "lr": 0.002, "log_every": 0},
      "sft": {"steps": 8, "batch_size": 4, "lr": 0.002, "log_every": 0}
    },
    "eval": {"bayes_samples": 300})" +
                     (out_dir.empty() ? "" : ",\n    \"out_dir\": \"" +
                                                 out_dir + "\"") +
                     "\n  }";
  return PlanFile::from_json(text);
}

}  // namespace

TEST_CASE("prediction requires the prompt to stop at a reward slot") {
  Tiny t;
  auto bad = t.prompt();
  bad.pop_back();  // no trailing <R>
  CHECK_THROWS_WITH_AS(predict_reward(t.model, bad, t.vocab, "t.k"),
                       doctest::Contains("<R>"), RuntimeError);
  CHECK_THROWS_AS(predict_reward(t.model, t.prompt(), t.vocab, "t.nope"),
                  ConfigError);
}

TEST_CASE("prediction restricts to the task labels and breaks ties low") {
  Tiny t;
  const int pred = predict_reward(t.model, t.prompt(), t.vocab, "t.k");
  CHECK(pred >= 0);
  CHECK(pred < 3);

  // identical embedding rows for all three labels: exact tie, lowest wins
  const auto v = t.reward_row(0);
  t.set_reward_row(1, v);
  t.set_reward_row(2, v);
  CHECK(predict_reward(t.model, t.prompt(), t.vocab, "t.k") == 0);
}

TEST_CASE("surgery on the tied output rows steers the prediction") {
  Tiny t;
  const auto v = t.reward_row(0);
  auto scaled = [&](double c) {
    auto out = v;
    for (double& x : out) x *= c;
    return out;
  };

  // Label logits become (l, 2l, 0) for l = <final hidden, v>. The answer
  // reveals the sign of l, after which (l, 2l, 3l) is fully predictable.
  t.set_reward_row(1, scaled(2.0));
  t.set_reward_row(2, scaled(0.0));
  const int probe = predict_reward(t.model, t.prompt(), t.vocab, "t.k");
  REQUIRE((probe == 1 || probe == 2));  // probe==0 would need l==0 exactly

  t.set_reward_row(2, scaled(3.0));
  if (probe == 1) {
    // l > 0: 3l is the strict maximum
    CHECK(predict_reward(t.model, t.prompt(), t.vocab, "t.k") == 2);
  } else {
    // l < 0: l itself is the strict maximum
    CHECK(predict_reward(t.model, t.prompt(), t.vocab, "t.k") == 0);
  }
}

TEST_CASE("accuracy fills the confusion matrix and guards against overlap") {
  Tiny t;
  Trajectory traj;
  traj.domain_id = "t";
  traj.category_id = "cat";
  traj.task_id = "t.k";
  traj.steps = {{"a b", "c", 1}};
  Trajectory traj2 = traj;
  traj2.steps[0].state_text = "b a";
  traj2.steps[0].reward_label = 2;

  std::vector<SftSample> samples{encode_sft(traj, t.vocab, t.cfg.max_seq_len),
                                 encode_sft(traj2, t.vocab,
                                            t.cfg.max_seq_len)};
  const auto res = accuracy(t.model, samples, t.vocab, {});
  CHECK(res.n == 2);
  REQUIRE(res.confusion.size() == 3);
  std::size_t total = 0;
  for (const auto& row : res.confusion) {
    for (const auto c : row) total += c;
  }
  CHECK(total == 2);
  REQUIRE(res.predictions.size() == 2);
  CHECK(res.predictions[0].first == 1);
  CHECK(res.predictions[1].first == 2);
  CHECK((res.accuracy == 0.0 || res.accuracy == 0.5 || res.accuracy == 1.0));

  // one eval record also in the training pool: hard refusal
  std::unordered_set<std::uint64_t> train{samples[1].traj_hash};
  CHECK_THROWS_WITH_AS(accuracy(t.model, samples, t.vocab, train),
                       doctest::Contains("contamination"), RuntimeError);

  // mixed tasks are a config mistake
  auto mixed = samples;
  mixed[1].task_id = "t.other";
  CHECK_THROWS_AS(accuracy(t.model, mixed, t.vocab, {}), ConfigError);
  CHECK_THROWS_AS(accuracy(t.model, std::vector<SftSample>{}, t.vocab, {}),
                  ConfigError);
}

TEST_CASE("csv report: stable header, blank for NaN, sanitized status") {
  Report rep;
  rep.config_fingerprint = "abc";
  ReportRow ok;
  ok.arm = "sft_only";
  ok.task = "ppc.ctr";
  ok.dataset = "ppc-holdout";
  ok.n_eval = 10;
  ok.accuracy = 0.5;
  ok.majority_baseline = 0.4;
  ok.bayes_ceiling = 0.9;
  ok.bayes_se = 0.01;
  ok.seed = 7;
  ReportRow bad = ok;
  bad.accuracy = std::nan("");
  bad.status = "boom, with\ncomma and newline";
  rep.rows = {ok, bad};

  const std::string csv = rep.to_csv();
  CHECK(csv.find("arm,task,dataset,n_eval,accuracy,majority_baseline,"
                 "bayes_ceiling,bayes_se,seed,status") == 0);
  CHECK(csv.find("sft_only,ppc.ctr,ppc-holdout,10,0.500000") !=
        std::string::npos);
  CHECK(csv.find(",,") != std::string::npos);  // NaN accuracy left blank
  CHECK(csv.find("\"boom; with comma and newline\"") != std::string::npos);
  // exactly header + 2 rows
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("a small grid yields one row per (arm, task, seed) in plan order") {
  const auto dir = testutil::temp_dir("matrix_small");
  PlanFile plan = tiny_plan(R"(["sft_only", "ltu_in_domain"])", "[1, 2, 3]");

  MatrixOptions opt;
  opt.out_dir = (dir / "run").string();
  const Report rep = run_matrix(plan, opt);

  REQUIRE(rep.rows.size() == 12);  // 2 arms x 2 tasks x 3 seeds
  CHECK(rep.config_fingerprint == plan.fingerprint());
  // plan order: arm-major, then task, then seed
  CHECK(rep.rows[0].arm == "sft_only");
  CHECK(rep.rows[0].task == "ppc.ctr");
  CHECK(rep.rows[0].seed == 1);
  CHECK(rep.rows[2].seed == 3);
  CHECK(rep.rows[3].task == "ppc.cpc");
  CHECK(rep.rows[6].arm == "ltu_in_domain");

  for (const auto& row : rep.rows) {
    INFO(row.arm << " " << row.task << " seed " << row.seed << ": " << row.status);
    CHECK(row.status == "ok");
    CHECK(row.dataset == "ppc-holdout");
    CHECK(row.n_eval == 8);
    CHECK(row.accuracy >= 0.0);
    CHECK(row.accuracy <= 1.0);
    CHECK(row.majority_baseline >= 1.0 / 3.0);
    CHECK(row.bayes_ceiling > 1.0 / 3.0);
    CHECK(row.bayes_ceiling <= 1.0);
    CHECK(row.bayes_se > 0.0);
  }

  // lineage: pre-trained arms carry exactly one CT and one SFT stage
  const auto meta = CheckpointMeta::from_json(testutil::read_file(
      dir / "run" / "runs" / "seed1" / "sft_ltu_in_domain.ppc.ctr.ckpt.json"));
  CHECK(meta.lineage == "CT:ppc-seed1 -> SFT:ppc.ctr-seed1");
  const auto fresh = CheckpointMeta::from_json(testutil::read_file(
      dir / "run" / "runs" / "seed1" / "sft_sft_only.ppc.ctr.ckpt.json"));
  CHECK(fresh.lineage == "SFT:ppc.ctr-seed1");

  // outputs exist
  CHECK(std::filesystem::exists(dir / "run" / "report.csv"));
  CHECK(std::filesystem::exists(dir / "run" / "report.md"));
  CHECK(std::filesystem::exists(dir / "run" / "vocab.txt"));
  CHECK(std::filesystem::exists(dir / "run" / "corpora" / "ppc_ct.jsonl"));
  CHECK(std::filesystem::exists(
      dir / "run" / "predictions" / "sft_only.ppc.ctr.seed2.jsonl"));

  const std::string md = testutil::read_file(dir / "run" / "report.md");
  CHECK(md.find("| Task | LTU Accuracy | SFT Accuracy | LTU-Common Accuracy |")
        != std::string::npos);
  CHECK(md.find("## Ceilings and baselines") != std::string::npos);
  CHECK(md.find("ppc.ctr") != std::string::npos);

  SUBCASE("a rerun reproduces the artifacts byte for byte") {
    MatrixOptions opt2;
    opt2.out_dir = (dir / "rerun").string();
    const Report rep2 = run_matrix(plan, opt2);
    CHECK(rep2.to_csv() == rep.to_csv());
    CHECK(testutil::read_file(dir / "rerun" / "report.csv") ==
          testutil::read_file(dir / "run" / "report.csv"));
    for (const char* rel :
         {"corpora/ppc_ct.jsonl", "corpora/seo_ct.jsonl",
          "corpora/common.txt", "corpora/ppc.ctr.train.jsonl",
          "corpora/ppc.ctr.eval.jsonl", "vocab.txt",
          "runs/seed1/ct_in_domain.ckpt",
          "runs/seed2/sft_sft_only.ppc.cpc.ckpt"}) {
      CAPTURE(rel);
      CHECK(testutil::read_file(dir / "rerun" / rel) ==
            testutil::read_file(dir / "run" / rel));
    }
  }

  SUBCASE("corpus generation alone produces the same data files") {
    const auto gen_dir = (dir / "gen").string();
    generate_corpora(plan, gen_dir);
    for (const char* rel :
         {"corpora/ppc_ct.jsonl", "corpora/common.txt", "vocab.txt",
          "corpora/ppc.cpc.eval.jsonl"}) {
      CAPTURE(rel);
      CHECK(testutil::read_file(dir / "gen" / rel) ==
            testutil::read_file(dir / "run" / rel));
    }
  }
}

TEST_CASE("cross-domain and mixed recipes train and report cleanly") {
  const auto dir = testutil::temp_dir("matrix_recipes");
  PlanFile plan = tiny_plan(R"(["ltu_cross", "ltu_mix", "ltu_common"])",
                            "[1]");
  MatrixOptions opt;
  opt.out_dir = (dir / "run").string();
  const Report rep = run_matrix(plan, opt);
  REQUIRE(rep.rows.size() == 6);
  for (const auto& row : rep.rows) {
    INFO(row.arm << " " << row.task << ": " << row.status);
    CHECK(row.status == "ok");
  }

  const auto cross = CheckpointMeta::from_json(testutil::read_file(
      dir / "run" / "runs" / "seed1" / "ct_cross.ckpt.json"));
  CHECK(cross.lineage == "CT:seo-seed1");
  const auto mix = CheckpointMeta::from_json(testutil::read_file(
      dir / "run" / "runs" / "seed1" / "ct_mix.ckpt.json"));
  CHECK(mix.lineage == "CT:ppc+common-seed1");
  const auto common = CheckpointMeta::from_json(testutil::read_file(
      dir / "run" / "runs" / "seed1" / "ct_common.ckpt.json"));
  CHECK(common.lineage == "CT:common-seed1");

  const std::string md = testutil::read_file(dir / "run" / "report.md");
  CHECK(md.find("## Cross-domain and mixed pre-training") !=
        std::string::npos);
  CHECK(md.find("LTU-Cross Accuracy") != std::string::npos);
}

TEST_CASE("the equalized arm consumes exactly the in-domain total") {
  const auto dir = testutil::temp_dir("matrix_equalized");
  PlanFile plan = tiny_plan(R"(["ltu_in_domain", "sft_full"])", "[1]");
  MatrixOptions opt;
  opt.out_dir = (dir / "run").string();
  const Report rep = run_matrix(plan, opt);
  REQUIRE(rep.rows.size() == 4);
  for (const auto& row : rep.rows) {
    INFO(row.arm << ": " << row.status);
    CHECK(row.status == "ok");
  }

  const auto ct = CheckpointMeta::from_json(testutil::read_file(
      dir / "run" / "runs" / "seed1" / "ct_in_domain.ckpt.json"));
  for (const char* task : {"ppc.ctr", "ppc.cpc"}) {
    const auto ltu = CheckpointMeta::from_json(testutil::read_file(
        dir / "run" / "runs" / "seed1" /
        ("sft_ltu_in_domain." + std::string(task) + ".ckpt.json")));
    const auto full = CheckpointMeta::from_json(testutil::read_file(
        dir / "run" / "runs" / "seed1" /
        ("sft_sft_full." + std::string(task) + ".ckpt.json")));
    CAPTURE(task);
    // LTU total consumption: CT docs + SFT samples, matched exactly
    CHECK(full.examples == ct.examples + ltu.examples);
    CHECK(ltu.examples == 8 * 4);  // steps * batch, no budget
  }

  const std::string md = testutil::read_file(dir / "run" / "report.md");
  CHECK(md.find("## Equalized training data") != std::string::npos);
  CHECK(md.find("SFT-Full Accuracy") != std::string::npos);
}

TEST_CASE("worker fan-out does not change the report") {
  const auto dir = testutil::temp_dir("matrix_jobs");
  PlanFile plan = tiny_plan(R"(["sft_only", "ltu_in_domain"])", "[1, 2]");

  MatrixOptions serial;
  serial.out_dir = (dir / "serial").string();
  MatrixOptions parallel;
  parallel.out_dir = (dir / "parallel").string();
  parallel.jobs = 3;

  const Report a = run_matrix(plan, serial);
  const Report b = run_matrix(plan, parallel);
  CHECK(a.to_csv() == b.to_csv());
  CHECK(testutil::read_file(dir / "serial" / "runs" / "seed2" /
                            "ct_in_domain.ckpt") ==
        testutil::read_file(dir / "parallel" / "runs" / "seed2" /
                            "ct_in_domain.ckpt"));
}

TEST_CASE("run_matrix needs an output directory from somewhere") {
  PlanFile plan = tiny_plan(R"(["sft_only"])", "[1]");
  MatrixOptions opt;  // no out_dir, plan has none either
  CHECK_THROWS_AS(run_matrix(plan, opt), ConfigError);

  const auto dir = testutil::temp_dir("matrix_outdir");
  PlanFile with_dir =
      tiny_plan(R"(["sft_only"])", "[1]", (dir / "from_plan").string());
  const Report rep = run_matrix(with_dir, MatrixOptions{});
  CHECK(rep.rows.size() == 2);
  CHECK(std::filesystem::exists(dir / "from_plan" / "report.csv"));
}
