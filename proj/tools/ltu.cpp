// Command-line front end: corpus generation, the two training phases,
// evaluation, checkpoint inspection, and the full ablation matrix.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ltu/corpus.hpp"
#include "ltu/errors.hpp"
#include "ltu/eval.hpp"
#include "ltu/hash.hpp"
#include "ltu/model.hpp"
#include "ltu/plan.hpp"
#include "ltu/rng.hpp"
#include "ltu/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Model template: like a ModelConfig but without vocab_size/init_seed, which
// are filled from the vocab file and the run seed.
ltu::ModelConfig load_model_template(const std::string& path,
                                     std::size_t vocab_size,
                                     std::uint64_t init_seed) {
  std::ifstream in(path);
  if (!in) throw ltu::ConfigError("cannot open model config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ltu::ConfigError(std::string("bad model config JSON: ") + e.what());
  }
  ltu::ModelConfig cfg;
  try {
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    if (j.contains("init_scale")) {
      cfg.init_scale = j.at("init_scale").get<double>();
    }
  } catch (const json::exception& e) {
    throw ltu::ConfigError(std::string("bad model config field: ") + e.what());
  }
  cfg.vocab_size = vocab_size;
  cfg.init_seed = init_seed;
  cfg.validate();
  return cfg;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ltu::RuntimeError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

struct GenArgs {
  std::string plan, out;
};

struct BinsArgs {
  std::string task, values, out, provenance = "cli";
  int bins = 0;
};

struct PretrainArgs {
  std::string data, common, vocab, model, init, out, name;
  double mix_fraction = 0.25;
  std::size_t steps = 0, batch = 8, log_every = 50;
  double lr = 1e-3, warmup = 0.05, clip = 1.0;
  std::uint64_t seed = 1;
};

struct FinetuneArgs {
  std::string data, task, vocab, model, init, out;
  bool fresh = false;
  std::size_t steps = 0, batch = 16, budget = 0, log_every = 50;
  double lr = 1e-3, warmup = 0.05, clip = 1.0;
  std::uint64_t seed = 1;
};

struct EvalArgs {
  std::string ckpt, data, vocab, out;
  std::vector<std::string> train_hashes;
};

struct MatrixArgs {
  std::string plan, out;
  std::size_t jobs = 1;
};

struct InspectArgs {
  std::string ckpt;
};

int cmd_gen(const GenArgs& a) {
  auto plan = ltu::PlanFile::load(a.plan);
  ltu::generate_corpora(plan, a.out, &std::cout);
  std::cout << "corpora written to " << a.out << "\n";
  return 0;
}

int cmd_bins(const BinsArgs& a) {
  std::vector<double> values;
  for (const auto& line : read_lines(a.values)) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(line, &used));
      if (used != line.size()) throw std::invalid_argument(line);
    } catch (const std::exception&) {
      throw ltu::ConfigError("values file has a non-numeric line: " + line);
    }
  }
  auto spec = ltu::fit_bins(values, a.bins, a.task, a.provenance);
  spec.save(a.out);
  std::cout << "fit " << spec.bin_count << " bins for task " << spec.task
            << " from " << values.size() << " values; edges:";
  for (double e : spec.edges) std::cout << ' ' << e;
  std::cout << "\nwrote " << a.out << "\n";
  return 0;
}

int cmd_pretrain(const PretrainArgs& a) {
  if (a.data.empty() && a.common.empty()) {
    throw ltu::ConfigError("pretrain needs --data and/or --common");
  }
  if (a.model.empty() == a.init.empty()) {
    throw ltu::ConfigError(
        "pretrain needs exactly one of --model (fresh) or --init (continue)");
  }
  auto vocab = ltu::Vocab::load(a.vocab);

  ltu::ModelParams model;
  std::string parent_lineage;
  std::unordered_set<std::uint64_t> pool_hashes;
  if (!a.init.empty()) {
    auto [loaded, meta] = ltu::load_checkpoint(a.init);
    model = std::move(loaded);
    parent_lineage = meta.lineage;
    for (auto h : ltu::load_hashes(a.init + ".hashes")) pool_hashes.insert(h);
    if (model.config.vocab_size != vocab.size()) {
      throw ltu::ConfigError("checkpoint vocab size " +
                             std::to_string(model.config.vocab_size) +
                             " does not match vocab file size " +
                             std::to_string(vocab.size()));
    }
  } else {
    auto cfg = load_model_template(a.model, vocab.size(),
                                   ltu::Rng::derive(a.seed, "init"));
    model = ltu::init_model(cfg);
  }
  const std::size_t window = model.config.max_seq_len;

  std::vector<std::vector<ltu::TokenId>> decision, common;
  if (!a.data.empty()) {
    for (const auto& traj : ltu::read_trajectories_jsonl(a.data)) {
      decision.push_back(ltu::encode_ct(traj, vocab, window));
      pool_hashes.insert(ltu::trajectory_hash(traj));
    }
  }
  if (!a.common.empty()) {
    for (const auto& doc : read_lines(a.common)) {
      common.push_back(ltu::encode_text(doc, vocab, window));
      pool_hashes.insert(ltu::fnv1a64(doc));
    }
  }

  ltu::CtData data;
  if (!decision.empty() && !common.empty()) {
    data.docs = ltu::mix_corpora(std::move(decision), std::move(common),
                                 a.mix_fraction,
                                 ltu::Rng::derive(a.seed, "mix"));
  } else {
    data.docs = decision.empty() ? std::move(common) : std::move(decision);
  }

  ltu::TrainConfig cfg;
  cfg.steps = a.steps;
  cfg.batch_size = a.batch;
  cfg.lr = a.lr;
  cfg.warmup_fraction = a.warmup;
  cfg.clip_norm = a.clip;
  cfg.seed = a.seed;
  cfg.log_every = a.log_every;
  auto stats = ltu::run_phase(model, data, cfg, &std::cout);

  std::string name = a.name;
  if (name.empty()) {
    name = a.data.empty() ? "common" : fs::path(a.data).stem().string();
  }
  ltu::CheckpointMeta meta;
  meta.phase = "ct";
  meta.lineage = ltu::extend_lineage(
      parent_lineage, "CT:" + name + "-seed" + std::to_string(a.seed));
  meta.seed = a.seed;
  meta.steps = stats.steps;
  meta.examples = stats.docs_consumed;
  meta.data_fingerprint = ltu::to_hex(stats.data_fingerprint);
  meta.final_loss = stats.final_loss;
  ltu::save_checkpoint(model, meta, a.out);
  std::vector<std::uint64_t> pool(pool_hashes.begin(), pool_hashes.end());
  std::sort(pool.begin(), pool.end());
  ltu::save_hashes(pool, a.out + ".hashes");
  std::cout << "saved " << a.out << " | final loss " << stats.final_loss
            << " | docs consumed " << stats.docs_consumed << "\n";
  return 0;
}

int cmd_finetune(const FinetuneArgs& a) {
  if (a.fresh == !a.init.empty()) {
    throw ltu::ConfigError(
        "finetune needs exactly one of --init <ckpt> or --fresh --model "
        "<cfg>");
  }
  if (a.fresh && a.model.empty()) {
    throw ltu::ConfigError("--fresh requires --model <cfg.json>");
  }
  auto vocab = ltu::Vocab::load(a.vocab);

  ltu::ModelParams model;
  std::string parent_lineage;
  std::unordered_set<std::uint64_t> pool_hashes;
  if (!a.init.empty()) {
    auto [loaded, meta] = ltu::load_checkpoint(a.init);
    model = std::move(loaded);
    parent_lineage = meta.lineage;
    for (auto h : ltu::load_hashes(a.init + ".hashes")) pool_hashes.insert(h);
  } else {
    auto cfg = load_model_template(a.model, vocab.size(),
                                   ltu::Rng::derive(a.seed, "init"));
    model = ltu::init_model(cfg);
  }

  auto trajs = ltu::read_trajectories_jsonl(a.data);
  std::string task = a.task;
  ltu::SftData data;
  for (const auto& traj : trajs) {
    if (task.empty()) task = traj.task_id;
    if (traj.task_id != task) {
      if (!a.task.empty()) continue;  // --task filters a mixed file
      throw ltu::ConfigError("data file mixes tasks " + task + " and " +
                             traj.task_id + "; pass --task to filter");
    }
    data.samples.push_back(
        ltu::encode_sft(traj, vocab, model.config.max_seq_len));
    pool_hashes.insert(ltu::trajectory_hash(traj));
  }
  if (data.samples.empty()) {
    throw ltu::ConfigError("no training samples for task " + task);
  }

  ltu::TrainConfig cfg;
  cfg.steps = a.steps;
  cfg.batch_size = a.batch;
  cfg.lr = a.lr;
  cfg.warmup_fraction = a.warmup;
  cfg.clip_norm = a.clip;
  cfg.seed = a.seed;
  cfg.log_every = a.log_every;
  cfg.sample_budget = a.budget;
  auto stats = ltu::run_phase(model, data, cfg, &std::cout);

  ltu::CheckpointMeta meta;
  meta.phase = "sft";
  meta.lineage = ltu::extend_lineage(
      parent_lineage, "SFT:" + task + "-seed" + std::to_string(a.seed));
  meta.seed = a.seed;
  meta.steps = stats.steps;
  meta.examples = stats.docs_consumed;
  meta.data_fingerprint = ltu::to_hex(stats.data_fingerprint);
  meta.final_loss = stats.final_loss;
  ltu::save_checkpoint(model, meta, a.out);
  std::vector<std::uint64_t> pool(pool_hashes.begin(), pool_hashes.end());
  std::sort(pool.begin(), pool.end());
  ltu::save_hashes(pool, a.out + ".hashes");
  std::cout << "saved " << a.out << " | final loss " << stats.final_loss
            << " | samples consumed " << stats.docs_consumed << "\n";
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  auto [model, meta] = ltu::load_checkpoint(a.ckpt);
  auto vocab = ltu::Vocab::load(a.vocab);
  auto trajs = ltu::read_trajectories_jsonl(a.data);
  if (trajs.empty()) throw ltu::ConfigError("eval data file is empty");
  std::vector<ltu::SftSample> samples;
  for (const auto& traj : trajs) {
    samples.push_back(ltu::encode_sft(traj, vocab, model.config.max_seq_len));
  }
  std::unordered_set<std::uint64_t> train_hashes;
  for (const auto& path : a.train_hashes) {
    for (auto h : ltu::load_hashes(path)) train_hashes.insert(h);
  }
  auto res = ltu::accuracy(model, samples, vocab, train_hashes);

  std::cout << "model: " << a.ckpt << "\n";
  std::cout << "lineage: " << meta.lineage << "\n";
  std::cout << "task: " << samples.front().task_id << "\n";
  std::cout << "n_eval: " << res.n << "\n";
  std::cout << "accuracy: " << res.accuracy << "\n";
  std::cout << "confusion (rows=true, cols=predicted):\n";
  for (const auto& row : res.confusion) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::cout << (c ? " " : "  ") << row[c];
    }
    std::cout << "\n";
  }
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream pred(fs::path(a.out) / "predictions.jsonl");
    for (std::size_t i = 0; i < res.predictions.size(); ++i) {
      json line;
      line["index"] = i;
      line["true"] = res.predictions[i].first;
      line["pred"] = res.predictions[i].second;
      pred << line.dump() << '\n';
    }
    json summary;
    summary["accuracy"] = res.accuracy;
    summary["n_eval"] = res.n;
    summary["task"] = samples.front().task_id;
    summary["confusion"] = res.confusion;
    std::ofstream sum(fs::path(a.out) / "summary.json");
    sum << summary.dump(2) << '\n';
    std::cout << "wrote " << a.out << "\n";
  }
  return 0;
}

int cmd_matrix(const MatrixArgs& a) {
  auto plan = ltu::PlanFile::load(a.plan);
  ltu::MatrixOptions opts;
  opts.out_dir = a.out;
  opts.jobs = a.jobs;
  opts.log = &std::cout;
  auto report = ltu::run_matrix(plan, opts);
  std::size_t ok = 0;
  for (const auto& row : report.rows) {
    if (row.status == "ok") ++ok;
  }
  std::cout << ok << "/" << report.rows.size() << " rows ok\n";
  return ok == report.rows.size() ? 0 : 1;
}

int cmd_inspect(const InspectArgs& a) {
  auto [model, meta] = ltu::load_checkpoint(a.ckpt);
  std::cout << "path: " << a.ckpt << "\n";
  std::cout << "phase: " << meta.phase << "\n";
  std::cout << "lineage: " << meta.lineage << "\n";
  std::cout << "seed: " << meta.seed << "\n";
  std::cout << "steps: " << meta.steps << "\n";
  std::cout << "examples: " << meta.examples << "\n";
  std::cout << "final_loss: " << meta.final_loss << "\n";
  std::cout << "data_fingerprint: " << meta.data_fingerprint << "\n";
  std::cout << "config: " << model.config.to_json() << "\n";
  std::cout << "parameters: " << model.param_count() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decision-trajectory language model toolkit"};
  app.require_subcommand(1);

  GenArgs gen_args;
  auto* gen = app.add_subcommand("gen", "generate domains and corpora");
  gen->add_option("--plan", gen_args.plan, "plan JSON file")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_args.out, "output directory")->required();

  BinsArgs bins_args;
  auto* bins = app.add_subcommand("bins", "fit reward discretization bins");
  bins->add_option("--task", bins_args.task, "task name")->required();
  bins->add_option("--bins", bins_args.bins, "number of bins")->required();
  bins->add_option("--values", bins_args.values,
                   "file with one numeric value per line")
      ->required()
      ->check(CLI::ExistingFile);
  bins->add_option("--out", bins_args.out, "output JSON path")->required();
  bins->add_option("--provenance", bins_args.provenance,
                   "free-form provenance note");

  PretrainArgs pre_args;
  auto* pre = app.add_subcommand(
      "pretrain", "full-sequence training on decision/common docs");
  pre->add_option("--data", pre_args.data, "trajectory JSONL")
      ->check(CLI::ExistingFile);
  pre->add_option("--common", pre_args.common,
                  "plain-text corpus, one doc per line")
      ->check(CLI::ExistingFile);
  pre->add_option("--mix-fraction", pre_args.mix_fraction,
                  "decision-doc fraction when both corpora are given");
  pre->add_option("--vocab", pre_args.vocab, "vocab file")
      ->required()
      ->check(CLI::ExistingFile);
  pre->add_option("--model", pre_args.model, "model template JSON (fresh)")
      ->check(CLI::ExistingFile);
  pre->add_option("--init", pre_args.init, "checkpoint to continue from")
      ->check(CLI::ExistingFile);
  pre->add_option("--steps", pre_args.steps, "optimizer steps")->required();
  pre->add_option("--batch", pre_args.batch, "windows per step");
  pre->add_option("--lr", pre_args.lr, "learning rate");
  pre->add_option("--warmup", pre_args.warmup, "warmup fraction");
  pre->add_option("--clip", pre_args.clip, "grad-norm clip");
  pre->add_option("--log-every", pre_args.log_every, "progress cadence");
  pre->add_option("--seed", pre_args.seed, "run seed");
  pre->add_option("--name", pre_args.name, "corpus label for the lineage");
  pre->add_option("--out", pre_args.out, "checkpoint output path")->required();

  FinetuneArgs ft_args;
  auto* ft = app.add_subcommand("finetune",
                                "reward-prediction fine-tuning");
  ft->add_option("--data", ft_args.data, "trajectory JSONL")
      ->required()
      ->check(CLI::ExistingFile);
  ft->add_option("--task", ft_args.task, "reward task (filters mixed files)");
  ft->add_option("--vocab", ft_args.vocab, "vocab file")
      ->required()
      ->check(CLI::ExistingFile);
  ft->add_option("--init", ft_args.init, "checkpoint to start from")
      ->check(CLI::ExistingFile);
  ft->add_flag("--fresh", ft_args.fresh, "start from a fresh init");
  ft->add_option("--model", ft_args.model,
                 "model template JSON (with --fresh)")
      ->check(CLI::ExistingFile);
  ft->add_option("--steps", ft_args.steps, "optimizer steps");
  ft->add_option("--batch", ft_args.batch, "samples per step");
  ft->add_option("--budget", ft_args.budget,
                 "exact total samples to consume (overrides --steps)");
  ft->add_option("--lr", ft_args.lr, "learning rate");
  ft->add_option("--warmup", ft_args.warmup, "warmup fraction");
  ft->add_option("--clip", ft_args.clip, "grad-norm clip");
  ft->add_option("--log-every", ft_args.log_every, "progress cadence");
  ft->add_option("--seed", ft_args.seed, "run seed");
  ft->add_option("--out", ft_args.out, "checkpoint output path")->required();

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "reward-prediction accuracy");
  ev->add_option("--ckpt", eval_args.ckpt, "checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--data", eval_args.data, "trajectory JSONL")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--vocab", eval_args.vocab, "vocab file")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--train-hashes", eval_args.train_hashes,
                 "hash files for the contamination guard");
  ev->add_option("--out", eval_args.out, "directory for predictions");

  MatrixArgs mat_args;
  auto* mat = app.add_subcommand("matrix", "run the full ablation plan");
  mat->add_option("--plan", mat_args.plan, "plan JSON file")
      ->required()
      ->check(CLI::ExistingFile);
  mat->add_option("--out", mat_args.out, "output directory");
  mat->add_option("--jobs", mat_args.jobs, "parallel workers");

  InspectArgs ins_args;
  auto* ins = app.add_subcommand("inspect", "print checkpoint lineage");
  ins->add_option("--ckpt", ins_args.ckpt, "checkpoint")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(gen)) return cmd_gen(gen_args);
    if (app.got_subcommand(bins)) return cmd_bins(bins_args);
    if (app.got_subcommand(pre)) return cmd_pretrain(pre_args);
    if (app.got_subcommand(ft)) return cmd_finetune(ft_args);
    if (app.got_subcommand(ev)) return cmd_eval(eval_args);
    if (app.got_subcommand(mat)) return cmd_matrix(mat_args);
    if (app.got_subcommand(ins)) return cmd_inspect(ins_args);
  } catch (const ltu::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
