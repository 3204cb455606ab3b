// Microbenchmarks for the kernels that dominate training time: the matmul
// pair, a full forward pass, and one optimizer step of each phase.

#include <benchmark/benchmark.h>

#include <vector>

#include "ltu/corpus.hpp"
#include "ltu/model.hpp"
#include "ltu/rng.hpp"
#include "ltu/synthenv.hpp"
#include "ltu/tensor.hpp"
#include "ltu/trainer.hpp"

using namespace ltu;

namespace {

void bm_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a = Tensor::randn({n, n}, rng, 1.0);
  Tensor b = Tensor::randn({n, n}, rng, 1.0);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(tape.matmul(a, b));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(2 * n * n * n));
}

void bm_matmul_nt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  Tensor a = Tensor::randn({n, n}, rng, 1.0);
  Tensor b = Tensor::randn({n, n}, rng, 1.0);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(tape.matmul_nt(a, b));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(2 * n * n * n));
}

ModelConfig bench_config(std::size_t d, std::size_t layers) {
  ModelConfig cfg;
  cfg.vocab_size = 192;
  cfg.d_model = d;
  cfg.n_heads = 4;
  cfg.n_layers = layers;
  cfg.max_seq_len = 96;
  cfg.init_seed = 3;
  return cfg;
}

void bm_forward(benchmark::State& state) {
  const auto cfg = bench_config(static_cast<std::size_t>(state.range(0)), 2);
  const ModelParams m = init_model(cfg);
  Rng rng(5);
  std::vector<TokenId> tokens(cfg.max_seq_len);
  for (auto& t : tokens) t = static_cast<TokenId>(rng.index(cfg.vocab_size));
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(model_forward(tape, m, tokens));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(tokens.size()));
}

struct TrainFixture {
  DomainSpec spec = make_domain("ppc", 11, 0.5, DomainOptions{6, 1.0});
  Vocab vocab;
  CtData ct;
  SftData sft;

  TrainFixture() {
    VocabBuilder b;
    for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
      b.add_task(spec.qualified_task(t), spec.tasks[t].bin_count);
    }
    b.add_words(domain_word_pool(spec));
    vocab = b.build();
    Rng gen(Rng::derive(7, "bench-docs"));
    for (std::size_t i = 0; i < 64; ++i) {
      auto traj = sample_trajectory(spec, spec.categories[i % 6],
                                    spec.qualified_task(i % 2), 3, gen);
      ct.docs.push_back(encode_ct(traj, vocab, 96));
      sft.samples.push_back(encode_sft(
          sample_trajectory(spec, spec.categories[i % 6],
                            spec.qualified_task(0), 1, gen),
          vocab, 96));
    }
  }
};

void bm_ct_step(benchmark::State& state) {
  static const TrainFixture fix;
  auto cfg = bench_config(static_cast<std::size_t>(state.range(0)), 2);
  cfg.vocab_size = fix.vocab.size();

  TrainConfig tc;
  tc.steps = 1;
  tc.batch_size = 2;
  tc.lr = 1e-3;
  tc.seed = 9;
  tc.log_every = 0;

  std::size_t tokens = 0;
  for (auto _ : state) {
    // includes the init; one-step phases keep the measurement simple and the
    // relative numbers across d_model are what matters
    ModelParams model = init_model(cfg);
    auto stats = run_phase(model, fix.ct, tc, nullptr);
    tokens += stats.tokens_consumed;
    benchmark::DoNotOptimize(stats.final_loss);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(tokens));
}

void bm_sft_step(benchmark::State& state) {
  static const TrainFixture fix;
  auto cfg = bench_config(static_cast<std::size_t>(state.range(0)), 2);
  cfg.vocab_size = fix.vocab.size();

  TrainConfig tc;
  tc.steps = 1;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  tc.seed = 9;
  tc.log_every = 0;

  std::size_t tokens = 0;
  for (auto _ : state) {
    ModelParams model = init_model(cfg);
    auto stats = run_phase(model, fix.sft, tc, nullptr);
    tokens += stats.tokens_consumed;
    benchmark::DoNotOptimize(stats.final_loss);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(tokens));
}

}  // namespace

BENCHMARK(bm_matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_nt)->Arg(64)->Arg(256);
BENCHMARK(bm_forward)->Arg(32)->Arg(48)->Arg(64);
BENCHMARK(bm_ct_step)->Arg(32)->Arg(48)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_sft_step)->Arg(32)->Arg(48)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
