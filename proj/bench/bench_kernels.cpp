// OpenMP kernels against their serial references. Pass --benchmark_filter to
// pick one; PATCHLENS_THREADS caps the parallel variants.

#include <benchmark/benchmark.h>

#include "patchlens/evalrunner.hpp"
#include "patchlens/model.hpp"
#include "patchlens/parallel.hpp"
#include "patchlens/patchlab.hpp"
#include "patchlens/reference.hpp"
#include "patchlens/scenarios.hpp"

using namespace patchlens;

namespace {

struct Data {
  std::vector<Scenario> scenarios;
  ModelWeights m_p, m_f;
  std::vector<TokenIds> neg;
};

const Data& data() {
  static const Data d = [] {
    Data out;
    out.scenarios = generate_dataset(0);
    out.m_p = init_model(default_model_config(build_tokenizer(out.scenarios)), 0);
    out.neg = token_lists(select_valence(out.scenarios, Valence::negative));
    const auto pos = token_lists(select_valence(out.scenarios, Valence::positive));
    BiasInjectionSpec spec;
    spec.target_layers = {5};
    spec.magnitude_alpha = 1.0;
    spec.direction_v = default_valence_direction(out.m_p, 5, out.neg, pos);
    spec.direction_u = default_rating_direction(out.m_p);
    out.m_f = inject_bias(out.m_p, spec);
    return out;
  }();
  return d;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  RngStream rng(seed, "bench");
  Matrix m(r, c);
  for (float& x : m.data()) x = static_cast<float>(rng_uniform(rng, -1.0, 1.0));
  return m;
}

void BM_matmul_parallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}

void BM_matmul_reference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(reference::matmul(a, b));
}

void BM_run_trials_parallel(benchmark::State& state) {
  TrialOptions opts;
  for (auto _ : state) benchmark::DoNotOptimize(run_trials(data().m_p, data().scenarios, opts));
}

void BM_run_trials_reference(benchmark::State& state) {
  TrialOptions opts;
  for (auto _ : state) benchmark::DoNotOptimize(reference::run_trials(data().m_p, data().scenarios, opts));
}

void BM_mean_residuals_parallel(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(mean_residuals(data().m_p, data().neg));
}

void BM_mean_residuals_reference(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(reference::mean_residuals(data().m_p, data().neg));
}

void BM_patch_sweep_parallel(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(patch_sweep(data().m_p, data().m_f, data().scenarios));
}

void BM_patch_sweep_reference(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(reference::patch_sweep(data().m_p, data().m_f, data().scenarios, {}));
}

}  // namespace

BENCHMARK(BM_matmul_parallel)->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_reference)->Arg(64)->Arg(256);
BENCHMARK(BM_run_trials_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_run_trials_reference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_mean_residuals_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_mean_residuals_reference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_patch_sweep_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_patch_sweep_reference)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  configure_threads_from_env();
  data();  // keep model setup out of the first timed run
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
