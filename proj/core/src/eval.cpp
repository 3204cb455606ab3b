#include "ltu/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "ltu/errors.hpp"
#include "ltu/hash.hpp"
#include "ltu/rng.hpp"
#include "ltu/synthenv.hpp"
#include "ltu/trainer.hpp"

namespace ltu {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v, int precision = 6) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

int predict_reward(const ModelParams& params, std::span<const TokenId> input,
                   const Vocab& vocab, const std::string& task) {
  const auto ids = vocab.reward_ids(task);  // throws on unknown task
  if (input.empty() || input.back() != Vocab::kReward) {
    throw RuntimeError(
        "prediction input does not end at a reward slot (<R>)");
  }
  Tape tape(false);
  Tensor logits = model_forward(tape, params, input);
  const std::size_t pos = input.size() - 1;
  int best = 0;
  double best_logit =
      logits.at(pos, static_cast<std::size_t>(ids[0]));
  for (std::size_t k = 1; k < ids.size(); ++k) {
    double v = logits.at(pos, static_cast<std::size_t>(ids[k]));
    if (v > best_logit) {  // strict: ties stay at the lower label
      best_logit = v;
      best = static_cast<int>(k);
    }
  }
  return best;
}

AccuracyResult accuracy(const ModelParams& params,
                        std::span<const SftSample> eval_set,
                        const Vocab& vocab,
                        const std::unordered_set<std::uint64_t>& train_hashes) {
  if (eval_set.empty()) {
    throw ConfigError("accuracy needs a non-empty eval set");
  }
  const std::string& task = eval_set.front().task_id;
  for (const auto& s : eval_set) {
    if (s.task_id != task) {
      throw ConfigError("eval set mixes tasks " + task + " and " + s.task_id);
    }
    if (train_hashes.count(s.traj_hash)) {
      throw RuntimeError(
          "contamination: eval sample overlaps the training data (hash " +
          to_hex(s.traj_hash) + "); refusing to report");
    }
  }
  const std::size_t k = vocab.reward_ids(task).size();
  AccuracyResult res;
  res.confusion.assign(k, std::vector<std::size_t>(k, 0));
  res.predictions.reserve(eval_set.size());
  std::size_t hits = 0;
  for (const auto& s : eval_set) {
    int pred = predict_reward(params, s.input, vocab, task);
    res.predictions.emplace_back(s.label, pred);
    res.confusion[static_cast<std::size_t>(s.label)]
                 [static_cast<std::size_t>(pred)]++;
    if (pred == s.label) ++hits;
  }
  res.n = eval_set.size();
  res.accuracy = static_cast<double>(hits) / static_cast<double>(res.n);
  return res;
}

std::string Report::to_csv() const {
  std::ostringstream out;
  out << "arm,task,dataset,n_eval,accuracy,majority_baseline,bayes_ceiling,"
         "bayes_se,seed,status\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out << r.arm << ',' << r.task << ',' << r.dataset << ',' << r.n_eval
        << ',' << fmt(r.accuracy) << ',' << fmt(r.majority_baseline) << ','
        << fmt(r.bayes_ceiling) << ',' << fmt(r.bayes_se) << ',' << r.seed
        << ',' << "\"" << status << "\"" << '\n';
  }
  return out.str();
}

namespace {

const std::map<std::string, std::string>& arm_display_names() {
  static const std::map<std::string, std::string> kNames = {
      {"sft_only", "SFT"},         {"ltu_in_domain", "LTU"},
      {"ltu_cross", "LTU-Cross"},  {"ltu_mix", "LTU-Mix"},
      {"ltu_common", "LTU-Common"}, {"sft_full", "SFT-Full"}};
  return kNames;
}

struct MeanStd {
  double mean = std::nan("");
  double stdev = std::nan("");
  std::size_t n = 0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd ms;
  ms.n = xs.size();
  if (xs.empty()) return ms;
  double sum = 0.0;
  for (double x : xs) sum += x;
  ms.mean = sum / static_cast<double>(xs.size());
  double sq = 0.0;
  for (double x : xs) sq += (x - ms.mean) * (x - ms.mean);
  ms.stdev = xs.size() > 1
                 ? std::sqrt(sq / static_cast<double>(xs.size() - 1))
                 : 0.0;
  return ms;
}

std::string cell(const MeanStd& ms) {
  if (ms.n == 0) return "n/a";
  return fmt(ms.mean, 3) + " ± " + fmt(ms.stdev, 3);
}

}  // namespace

std::string Report::to_markdown() const {
  // mean/std of ok rows keyed by (arm, task)
  std::map<std::pair<std::string, std::string>, std::vector<double>> acc;
  std::set<std::string> tasks;
  std::map<std::string, std::pair<double, double>> ceilings;  // task -> (maj, bayes)
  for (const auto& r : rows) {
    tasks.insert(r.task);
    ceilings[r.task] = {r.majority_baseline, r.bayes_ceiling};
    if (r.status == "ok") acc[{r.arm, r.task}].push_back(r.accuracy);
  }
  auto col = [&](const std::string& arm, const std::string& task) {
    auto it = acc.find({arm, task});
    return cell(it == acc.end() ? MeanStd{} : mean_std(it->second));
  };
  auto has_arm = [&](const std::string& arm) {
    return std::any_of(rows.begin(), rows.end(),
                       [&](const ReportRow& r) { return r.arm == arm; });
  };

  std::ostringstream md;
  md << "# Ablation report\n\n";
  md << "- created: " << created_at << "\n";
  md << "- plan fingerprint: " << config_fingerprint << "\n";
  md << "- values are accuracy mean ± std over seeds\n\n";

  md << "## Main comparison\n\n";
  md << "| Task | LTU Accuracy | SFT Accuracy | LTU-Common Accuracy |\n";
  md << "|---|---|---|---|\n";
  for (const auto& task : tasks) {
    md << "| " << task << " | " << col("ltu_in_domain", task) << " | "
       << col("sft_only", task) << " | " << col("ltu_common", task) << " |\n";
  }
  md << "\n";

  if (has_arm("ltu_cross") || has_arm("ltu_mix")) {
    md << "## Cross-domain and mixed pre-training\n\n";
    md << "| Task | LTU-Cross Accuracy | LTU-Mix Accuracy |\n";
    md << "|---|---|---|\n";
    for (const auto& task : tasks) {
      md << "| " << task << " | " << col("ltu_cross", task) << " | "
         << col("ltu_mix", task) << " |\n";
    }
    md << "\n";
  }

  if (has_arm("sft_full")) {
    md << "## Equalized training data\n\n";
    md << "| Task | LTU Accuracy | SFT-Full Accuracy |\n";
    md << "|---|---|---|\n";
    for (const auto& task : tasks) {
      md << "| " << task << " | " << col("ltu_in_domain", task) << " | "
         << col("sft_full", task) << " |\n";
    }
    md << "\n";
  }

  md << "## Ceilings and baselines\n\n";
  md << "| Task | Majority baseline | Bayes ceiling |\n";
  md << "|---|---|---|\n";
  for (const auto& task : tasks) {
    md << "| " << task << " | " << fmt(ceilings[task].first, 3) << " | "
       << fmt(ceilings[task].second, 3) << " |\n";
  }
  md << "\n";

  md << "## All rows\n\n";
  md << "| Arm | Task | Dataset | n | Accuracy | Majority | Bayes | Seed | "
        "Status |\n";
  md << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    std::string name = r.arm;
    auto it = arm_display_names().find(r.arm);
    if (it != arm_display_names().end()) name = it->second;
    md << "| " << name << " | " << r.task << " | " << r.dataset << " | "
       << r.n_eval << " | " << fmt(r.accuracy, 4) << " | "
       << fmt(r.majority_baseline, 4) << " | " << fmt(r.bayes_ceiling, 4)
       << " | " << r.seed << " | " << r.status << " |\n";
  }
  return md.str();
}

namespace {

struct TaskData {
  std::string task;  // qualified
  std::vector<SftSample> train_samples;
  std::vector<SftSample> eval_samples;
  std::unordered_set<std::uint64_t> train_pool_hashes;
  double majority = 0.0;
  BayesEstimate bayes;
};

struct MatrixContext {
  const PlanFile* plan = nullptr;
  fs::path out;
  DomainSpec target;
  DomainSpec aux;
  CategorySplit split;
  Vocab vocab;
  std::vector<std::vector<TokenId>> target_ct;
  std::vector<std::vector<TokenId>> aux_ct;
  std::vector<std::vector<TokenId>> common_ct;
  std::unordered_set<std::uint64_t> target_ct_hashes;
  std::unordered_set<std::uint64_t> aux_ct_hashes;
  std::unordered_set<std::uint64_t> common_hashes;
  std::vector<TaskData> tasks;
  std::string dataset_name;
};

struct CtResult {
  bool ok = false;
  std::string error;
  std::string ckpt_path;
  std::string lineage;
  std::size_t docs_consumed = 0;
  const std::unordered_set<std::uint64_t>* pool_hashes = nullptr;
};

const std::map<std::string, std::string>& arm_recipes() {
  // arm -> CT recipe ("" = fresh init)
  static const std::map<std::string, std::string> kRecipes = {
      {"sft_only", ""},          {"ltu_in_domain", "in_domain"},
      {"ltu_cross", "cross"},    {"ltu_mix", "mix"},
      {"ltu_common", "common"},  {"sft_full", ""}};
  return kRecipes;
}

std::string recipe_corpus_label(const MatrixContext& ctx,
                                const std::string& recipe) {
  if (recipe == "in_domain") return ctx.plan->target_kind;
  if (recipe == "cross") return ctx.plan->aux_kind;
  if (recipe == "mix") return ctx.plan->target_kind + "+common";
  return "common";
}

// Deterministic per-plan data generation. Everything below is a pure
// function of the plan, so reruns produce byte-identical files.
MatrixContext build_context(const PlanFile& plan, const fs::path& out,
                            std::ostream* log) {
  MatrixContext ctx;
  ctx.plan = &plan;
  ctx.out = out;
  fs::create_directories(out / "domains");
  fs::create_directories(out / "corpora");
  fs::create_directories(out / "runs");
  fs::create_directories(out / "predictions");

  DomainOptions dopt;
  dopt.n_categories = plan.n_categories;
  dopt.temperature_scale = plan.temperature_scale;
  ctx.target =
      make_domain(plan.target_kind, plan.domain_seed, plan.shared_fraction,
                  dopt);
  ctx.aux = make_domain(plan.aux_kind, plan.domain_seed, plan.shared_fraction,
                        dopt);
  ctx.split =
      split_categories(ctx.target, plan.n_holdout_categories, plan.domain_seed);
  ctx.dataset_name = plan.target_kind + "-holdout";
  ctx.target.save((out / "domains" / (plan.target_kind + ".json")).string());
  ctx.aux.save((out / "domains" / (plan.aux_kind + ".json")).string());

  VocabBuilder vb;
  for (std::size_t i = 0; i < ctx.target.tasks.size(); ++i) {
    vb.add_task(ctx.target.qualified_task(i), ctx.target.tasks[i].bin_count);
  }
  for (std::size_t i = 0; i < ctx.aux.tasks.size(); ++i) {
    vb.add_task(ctx.aux.qualified_task(i), ctx.aux.tasks[i].bin_count);
  }
  auto tw = domain_word_pool(ctx.target);
  auto aw = domain_word_pool(ctx.aux);
  vb.add_words(tw);
  vb.add_words(aw);
  vb.add_words(common_word_pool());
  ctx.vocab = vb.build();
  ctx.vocab.save((out / "vocab.txt").string());

  const std::size_t window = plan.model.max_seq_len;

  // Target-domain decision docs from train categories only.
  {
    std::vector<Trajectory> trajs;
    Rng rng(Rng::derive(plan.domain_seed, "gen-ct-" + plan.target_kind));
    for (std::size_t i = 0; i < plan.ct_docs; ++i) {
      const auto& cat = ctx.split.train[rng.index(ctx.split.train.size())];
      auto task = ctx.target.qualified_task(i % ctx.target.tasks.size());
      trajs.push_back(sample_trajectory(ctx.target, cat, task,
                                        plan.steps_per_doc, rng));
    }
    write_trajectories_jsonl(
        trajs, (out / "corpora" / (plan.target_kind + "_ct.jsonl")).string());
    for (const auto& t : trajs) {
      ctx.target_ct.push_back(encode_ct(t, ctx.vocab, window));
      ctx.target_ct_hashes.insert(trajectory_hash(t));
    }
  }

  // Auxiliary-domain docs over all of its categories.
  {
    std::vector<Trajectory> trajs;
    Rng rng(Rng::derive(plan.domain_seed, "gen-ct-" + plan.aux_kind));
    for (std::size_t i = 0; i < plan.ct_docs; ++i) {
      const auto& cat = ctx.aux.categories[rng.index(ctx.aux.categories.size())];
      auto task = ctx.aux.qualified_task(i % ctx.aux.tasks.size());
      trajs.push_back(
          sample_trajectory(ctx.aux, cat, task, plan.steps_per_doc, rng));
    }
    write_trajectories_jsonl(
        trajs, (out / "corpora" / (plan.aux_kind + "_ct.jsonl")).string());
    for (const auto& t : trajs) {
      ctx.aux_ct.push_back(encode_ct(t, ctx.vocab, window));
      ctx.aux_ct_hashes.insert(trajectory_hash(t));
    }
  }

  {
    auto docs = make_common_docs(plan.common_docs, plan.domain_seed);
    std::ofstream f(out / "corpora" / "common.txt");
    if (!f) throw RuntimeError("cannot write common corpus");
    for (const auto& d : docs) f << d << '\n';
    for (const auto& d : docs) {
      ctx.common_ct.push_back(encode_text(d, ctx.vocab, window));
      ctx.common_hashes.insert(fnv1a64(d));
    }
  }

  // Fine-tune and eval pools per target task, from held-out categories and
  // disjoint from the CT pool by category; the eval pool additionally
  // rejects any record hash already seen anywhere.
  for (std::size_t t = 0; t < ctx.target.tasks.size(); ++t) {
    TaskData td;
    td.task = ctx.target.qualified_task(t);

    std::vector<Trajectory> train_trajs;
    Rng train_rng(Rng::derive(plan.domain_seed, "gen-sft-train-" + td.task));
    for (std::size_t i = 0; i < plan.sft_train; ++i) {
      const auto& cat = ctx.split.holdout[train_rng.index(ctx.split.holdout.size())];
      train_trajs.push_back(
          sample_trajectory(ctx.target, cat, td.task, 1, train_rng));
    }
    write_trajectories_jsonl(
        train_trajs,
        (out / "corpora" / (td.task + ".train.jsonl")).string());
    for (const auto& traj : train_trajs) {
      td.train_samples.push_back(encode_sft(traj, ctx.vocab, window));
      td.train_pool_hashes.insert(trajectory_hash(traj));
    }

    std::vector<Trajectory> eval_trajs;
    std::unordered_set<std::uint64_t> eval_hashes;
    Rng eval_rng(Rng::derive(plan.domain_seed, "gen-sft-eval-" + td.task));
    std::size_t attempts = 0;
    const std::size_t max_attempts = plan.sft_eval * 20 + 1000;
    while (eval_trajs.size() < plan.sft_eval) {
      if (++attempts > max_attempts) {
        throw RuntimeError(
            "could not draw a disjoint eval pool for task " + td.task);
      }
      const auto& cat = ctx.split.holdout[eval_rng.index(ctx.split.holdout.size())];
      auto traj = sample_trajectory(ctx.target, cat, td.task, 1, eval_rng);
      std::uint64_t h = trajectory_hash(traj);
      if (td.train_pool_hashes.count(h) || ctx.target_ct_hashes.count(h) ||
          eval_hashes.count(h)) {
        continue;
      }
      eval_hashes.insert(h);
      eval_trajs.push_back(std::move(traj));
    }
    write_trajectories_jsonl(
        eval_trajs, (out / "corpora" / (td.task + ".eval.jsonl")).string());
    std::vector<std::size_t> label_counts(
        static_cast<std::size_t>(ctx.target.tasks[t].bin_count), 0);
    for (const auto& traj : eval_trajs) {
      td.eval_samples.push_back(encode_sft(traj, ctx.vocab, window));
      label_counts[static_cast<std::size_t>(traj.steps.back().reward_label)]++;
    }
    td.majority =
        static_cast<double>(
            *std::max_element(label_counts.begin(), label_counts.end())) /
        static_cast<double>(eval_trajs.size());
    td.bayes = bayes_accuracy(ctx.target, td.task, ctx.split.holdout,
                              plan.bayes_samples, plan.domain_seed);
    ctx.tasks.push_back(std::move(td));
  }

  if (log) {
    *log << "generated corpora: " << ctx.target_ct.size() << " "
         << plan.target_kind << " docs, " << ctx.aux_ct.size() << " "
         << plan.aux_kind << " docs, " << ctx.common_ct.size()
         << " common docs, " << ctx.tasks.size() << " tasks\n";
  }
  return ctx;
}

CtResult run_ct_unit(const MatrixContext& ctx, const std::string& recipe,
                     std::uint64_t seed, std::ostream* log) {
  const PlanFile& plan = *ctx.plan;
  CtResult res;
  try {
    CtData data;
    if (recipe == "in_domain") {
      data.docs = ctx.target_ct;
      res.pool_hashes = &ctx.target_ct_hashes;
    } else if (recipe == "cross") {
      data.docs = ctx.aux_ct;
      res.pool_hashes = &ctx.aux_ct_hashes;
    } else if (recipe == "common") {
      data.docs = ctx.common_ct;
      res.pool_hashes = &ctx.common_hashes;
    } else if (recipe == "mix") {
      data.docs = mix_corpora(ctx.target_ct, ctx.common_ct, plan.mix_fraction,
                              Rng::derive(seed, "mix-recipe"));
      // pool spans both sources; assembled below
    } else {
      throw ConfigError("unknown CT recipe: " + recipe);
    }

    ModelConfig mcfg = plan.model;
    mcfg.vocab_size = ctx.vocab.size();
    mcfg.init_seed = Rng::derive(seed, "init-ct-" + recipe);
    ModelParams model = init_model(mcfg);

    TrainConfig tcfg = plan.ct;
    tcfg.seed = Rng::derive(seed, "ct-order-" + recipe);
    TrainStats stats = run_phase(model, data, tcfg, log);
    res.docs_consumed = stats.docs_consumed;

    fs::path dir = ctx.out / "runs" / ("seed" + std::to_string(seed));
    fs::create_directories(dir);
    res.ckpt_path = (dir / ("ct_" + recipe + ".ckpt")).string();
    res.lineage = "CT:" + recipe_corpus_label(ctx, recipe) + "-seed" +
                  std::to_string(seed);
    CheckpointMeta meta;
    meta.phase = "ct";
    meta.lineage = res.lineage;
    meta.seed = seed;
    meta.steps = stats.steps;
    meta.examples = stats.docs_consumed;
    meta.data_fingerprint = to_hex(stats.data_fingerprint);
    meta.final_loss = stats.final_loss;
    save_checkpoint(model, meta, res.ckpt_path);

    std::vector<std::uint64_t> pool;
    if (recipe == "mix") {
      pool.insert(pool.end(), ctx.target_ct_hashes.begin(),
                  ctx.target_ct_hashes.end());
      pool.insert(pool.end(), ctx.common_hashes.begin(),
                  ctx.common_hashes.end());
    } else {
      pool.assign(res.pool_hashes->begin(), res.pool_hashes->end());
    }
    std::sort(pool.begin(), pool.end());
    save_hashes(pool, res.ckpt_path + ".hashes");
    res.ok = true;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
  }
  return res;
}

ReportRow run_arm_unit(const MatrixContext& ctx, const std::string& arm,
                       std::size_t task_idx, std::uint64_t seed,
                       const CtResult* parent, const CtResult* budget_ref,
                       std::ostream* log) {
  const PlanFile& plan = *ctx.plan;
  const TaskData& td = ctx.tasks[task_idx];
  ReportRow row;
  row.arm = arm;
  row.task = td.task;
  row.dataset = ctx.dataset_name;
  row.seed = seed;
  row.majority_baseline = td.majority;
  row.bayes_ceiling = td.bayes.accuracy;
  row.bayes_se = td.bayes.std_error;
  row.accuracy = std::nan("");
  try {
    if (parent && !parent->ok) {
      throw RuntimeError("CT stage failed: " + parent->error);
    }
    if (arm == "sft_full") {
      if (!budget_ref || !budget_ref->ok) {
        throw RuntimeError(
            "equalized-data budget unavailable: in-domain CT failed" +
            std::string(budget_ref ? ": " + budget_ref->error : ""));
      }
    }

    ModelParams model;
    std::string parent_lineage;
    std::unordered_set<std::uint64_t> train_hashes = td.train_pool_hashes;
    if (parent) {
      auto [loaded, meta] = load_checkpoint(parent->ckpt_path);
      model = std::move(loaded);
      parent_lineage = meta.lineage;
      for (std::uint64_t h : load_hashes(parent->ckpt_path + ".hashes")) {
        train_hashes.insert(h);
      }
    } else {
      ModelConfig mcfg = plan.model;
      mcfg.vocab_size = ctx.vocab.size();
      mcfg.init_seed = Rng::derive(seed, "init-sft-" + arm);
      model = init_model(mcfg);
    }

    TrainConfig tcfg = plan.sft;
    tcfg.seed = Rng::derive(seed, "sft-" + arm + "-" + td.task);
    if (arm == "sft_full") {
      tcfg.sample_budget =
          budget_ref->docs_consumed + plan.sft.steps * plan.sft.batch_size;
    }
    SftData data;
    data.samples = td.train_samples;
    TrainStats stats = run_phase(model, data, tcfg, log);

    fs::path dir = ctx.out / "runs" / ("seed" + std::to_string(seed));
    fs::create_directories(dir);
    std::string ckpt =
        (dir / ("sft_" + arm + "." + td.task + ".ckpt")).string();
    CheckpointMeta meta;
    meta.phase = "sft";
    meta.lineage = extend_lineage(
        parent_lineage, "SFT:" + td.task + "-seed" + std::to_string(seed));
    meta.seed = seed;
    meta.steps = stats.steps;
    meta.examples = stats.docs_consumed;
    meta.data_fingerprint = to_hex(stats.data_fingerprint);
    meta.final_loss = stats.final_loss;
    save_checkpoint(model, meta, ckpt);
    std::vector<std::uint64_t> all_hashes(train_hashes.begin(),
                                          train_hashes.end());
    std::sort(all_hashes.begin(), all_hashes.end());
    save_hashes(all_hashes, ckpt + ".hashes");

    AccuracyResult res =
        accuracy(model, td.eval_samples, ctx.vocab, train_hashes);
    row.accuracy = res.accuracy;
    row.n_eval = res.n;

    std::ofstream pred(ctx.out / "predictions" /
                       (arm + "." + td.task + ".seed" + std::to_string(seed) +
                        ".jsonl"));
    if (!pred) throw RuntimeError("cannot write predictions file");
    for (std::size_t i = 0; i < res.predictions.size(); ++i) {
      json line;
      line["arm"] = arm;
      line["task"] = td.task;
      line["seed"] = seed;
      line["index"] = i;
      line["true"] = res.predictions[i].first;
      line["pred"] = res.predictions[i].second;
      pred << line.dump() << '\n';
    }
    row.status = "ok";
  } catch (const std::exception& e) {
    row.status = e.what();
  }
  return row;
}

// Runs fn(0..n) across up to `jobs` threads. Each unit writes only its own
// result slot, so no synchronization beyond the work queue is needed.
void run_units(std::size_t n, std::size_t jobs,
               const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::size_t workers = std::min(jobs, n);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

void generate_corpora(const PlanFile& plan, const std::string& out_dir,
                      std::ostream* log) {
  plan.validate();
  if (out_dir.empty()) throw ConfigError("gen needs an output directory");
  fs::path out(out_dir);
  fs::create_directories(out);
  build_context(plan, out, log);
}

Report run_matrix(const PlanFile& plan, const MatrixOptions& options) {
  plan.validate();
  std::string out_str = options.out_dir.empty() ? plan.out_dir
                                                : options.out_dir;
  if (out_str.empty()) {
    throw ConfigError("no output directory: pass --out or set plan out_dir");
  }
  fs::path out(out_str);
  fs::create_directories(out);
  std::ostream* log = options.log;

  MatrixContext ctx = build_context(plan, out, log);

  // Which CT recipes are needed. The equalized-data control needs the
  // in-domain consumption numbers even when that arm is not requested.
  std::vector<std::string> recipes;
  bool need_in_domain = false;
  for (const auto& arm : plan.arms) {
    const std::string& recipe = arm_recipes().at(arm);
    if (!recipe.empty() &&
        std::find(recipes.begin(), recipes.end(), recipe) == recipes.end()) {
      recipes.push_back(recipe);
    }
    if (arm == "sft_full") need_in_domain = true;
  }
  if (need_in_domain && std::find(recipes.begin(), recipes.end(),
                                  "in_domain") == recipes.end()) {
    recipes.push_back("in_domain");
  }

  // Stage 1: one CT checkpoint per (recipe, seed), reused by every arm that
  // shares the recipe.
  std::map<std::pair<std::string, std::uint64_t>, CtResult> ct_results;
  {
    std::vector<std::pair<std::string, std::uint64_t>> units;
    for (const auto& recipe : recipes) {
      for (std::uint64_t seed : plan.seeds) units.emplace_back(recipe, seed);
    }
    std::vector<CtResult> results(units.size());
    std::mutex log_mutex;
    run_units(units.size(), options.jobs, [&](std::size_t i) {
      if (log) {
        std::lock_guard<std::mutex> lk(log_mutex);
        *log << "[ct] recipe " << units[i].first << " seed "
             << units[i].second << "\n";
      }
      results[i] = run_ct_unit(ctx, units[i].first, units[i].second,
                               options.jobs <= 1 ? log : nullptr);
    });
    for (std::size_t i = 0; i < units.size(); ++i) {
      ct_results[units[i]] = std::move(results[i]);
    }
  }

  // Stage 2: fine-tune + evaluate per (arm, task, seed).
  struct ArmUnit {
    std::string arm;
    std::size_t task_idx;
    std::uint64_t seed;
  };
  std::vector<ArmUnit> units;
  for (const auto& arm : plan.arms) {
    for (std::size_t t = 0; t < ctx.tasks.size(); ++t) {
      for (std::uint64_t seed : plan.seeds) units.push_back({arm, t, seed});
    }
  }
  std::vector<ReportRow> rows(units.size());
  {
    std::mutex log_mutex;
    run_units(units.size(), options.jobs, [&](std::size_t i) {
      const auto& u = units[i];
      if (log) {
        std::lock_guard<std::mutex> lk(log_mutex);
        *log << "[arm] " << u.arm << " task " << ctx.tasks[u.task_idx].task
             << " seed " << u.seed << "\n";
      }
      const std::string& recipe = arm_recipes().at(u.arm);
      const CtResult* parent =
          recipe.empty() ? nullptr : &ct_results.at({recipe, u.seed});
      const CtResult* budget_ref =
          u.arm == "sft_full" ? &ct_results.at({"in_domain", u.seed})
                              : nullptr;
      rows[i] = run_arm_unit(ctx, u.arm, u.task_idx, u.seed, parent,
                             budget_ref, options.jobs <= 1 ? log : nullptr);
    });
  }

  Report report;
  report.rows = std::move(rows);
  report.created_at = utc_now();
  report.config_fingerprint = plan.fingerprint();

  std::ofstream csv(out / "report.csv");
  if (!csv) throw RuntimeError("cannot write report.csv");
  csv << report.to_csv();
  std::ofstream md(out / "report.md");
  if (!md) throw RuntimeError("cannot write report.md");
  md << report.to_markdown();

  if (log) {
    *log << "report: " << (out / "report.csv").string() << " ("
         << report.rows.size() << " rows)\n";
  }
  return report;
}

}  // namespace ltu
