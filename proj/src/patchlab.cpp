#include "patchlens/patchlab.hpp"

#include <cmath>
#include <exception>
#include <stdexcept>

#include <fmt/format.h>

#include "patchlens/error.hpp"
#include "sweep_detail.hpp"

namespace patchlens {

std::string_view to_string(ModelTag tag) { return tag == ModelTag::pretrained ? "pretrained" : "finetuned"; }

double expected_rating(std::span<const float> logits, std::span<const std::int32_t> rating_token_ids,
                       double temperature) {
  const auto probs = softmax(rating_logits(logits, rating_token_ids), temperature);
  double e = 0.0;
  for (std::size_t r = 0; r < probs.size(); ++r) e += static_cast<double>(r) * probs[r];
  return e;
}

namespace {

template <typename Fn>
void parallel_for_each_index(std::size_t n, Fn&& fn) {
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical
      failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<std::vector<double>> mean_residuals(const ModelWeights& w, std::span<const TokenIds> prompts) {
  if (prompts.empty()) throw std::invalid_argument("mean_residuals: empty scenario subset");
  std::vector<ResidualTrace> traces(prompts.size());
  parallel_for_each_index(prompts.size(), [&](std::size_t i) { traces[i] = forward(w, prompts[i]).trace; });

  const std::size_t n_idx = w.config.n_layers + 1;
  std::vector<std::vector<double>> mean(n_idx, std::vector<double>(w.config.d_model, 0.0));
  for (const auto& trace : traces) {
    for (std::size_t l = 0; l < n_idx; ++l) {
      const auto row = trace.at(l);
      for (std::size_t c = 0; c < row.size(); ++c) mean[l][c] += row[c];
    }
  }
  const auto n = static_cast<double>(prompts.size());
  for (auto& row : mean) {
    for (double& x : row) x /= n;
  }
  return mean;
}

DeltaMatrix delta_matrix(const ModelWeights& w, std::span<const TokenIds> negative, std::span<const TokenIds> positive,
                         ModelTag tag) {
  const auto mean_neg = mean_residuals(w, negative);
  const auto mean_pos = mean_residuals(w, positive);
  const std::size_t n_layers = w.config.n_layers;
  DeltaMatrix out;
  out.model_tag = tag;
  out.values = Matrix(n_layers, w.config.d_model);
  out.per_layer_norm.assign(n_layers, 0.0);
  for (std::size_t l = 1; l <= n_layers; ++l) {
    auto row = out.values.row(l - 1);
    double ss = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] = static_cast<float>(std::abs(mean_neg[l][c] - mean_pos[l][c]));
      ss += static_cast<double>(row[c]) * row[c];
    }
    out.per_layer_norm[l - 1] = std::sqrt(ss);
  }
  return out;
}

std::vector<double> delta_difference_norms(const DeltaMatrix& a, const DeltaMatrix& b) {
  if (a.values.rows() != b.values.rows() || a.values.cols() != b.values.cols()) {
    throw std::invalid_argument(fmt::format("delta matrices of shapes {} and {}", a.values.shape_string(),
                                            b.values.shape_string()));
  }
  std::vector<double> norms(a.values.rows());
  for (std::size_t l = 0; l < norms.size(); ++l) {
    double ss = 0.0;
    const auto ra = a.values.row(l);
    const auto rb = b.values.row(l);
    for (std::size_t c = 0; c < ra.size(); ++c) {
      const double d = static_cast<double>(ra[c]) - rb[c];
      ss += d * d;
    }
    norms[l] = std::sqrt(ss);
  }
  return norms;
}

double rating_estimate(std::span<const float> logits, const ModelConfig& config, const SweepOptions& opts,
                       const std::string& scenario_id) {
  if (opts.stochastic_tests == 0) {
    return expected_rating(logits, config.rating_token_ids, opts.reference_temperature);
  }
  TrialOptions trial;
  trial.t_min = opts.t_min;
  trial.t_max = opts.t_max;
  trial.master_seed = opts.master_seed;
  long sum = 0;
  for (std::uint32_t t = 1; t <= opts.stochastic_tests; ++t) {
    RngStream stream(opts.master_seed, "sweep/" + scenario_id, t);
    sum += sample_rating(logits, config.rating_token_ids, trial_temperature(trial, t, scenario_id), stream);
  }
  return static_cast<double>(sum) / static_cast<double>(opts.stochastic_tests);
}

std::size_t argmin_abs(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmin over an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (std::abs(values[i]) < std::abs(values[best])) best = i;
  }
  return best + 1;
}

namespace detail {

void check_sweep_inputs(const ModelWeights& m_p, const ModelWeights& m_f, const std::vector<Scenario>& scenarios,
                        const SweepOptions& opts) {
  if (!(m_p.config == m_f.config)) {
    throw DataError("patch sweep: pretrained and finetuned models must share the same architecture and tokenizer");
  }
  bool neg = false, pos = false;
  for (const auto& s : scenarios) (s.valence == Valence::negative ? neg : pos) = true;
  if (!neg || !pos) throw DataError("patch sweep: scenarios must include both valences");
  if (!(opts.reference_temperature > 0.0)) throw std::invalid_argument("patch sweep: temperature must be > 0");
}

// Per-scenario outcomes: [0] unpatched pretrained, [1] unpatched finetuned,
// [2 + l] finetuned patched at layer index l.
std::vector<double> sweep_scenario(const ModelWeights& m_p, const ModelWeights& m_f, const Scenario& s,
                                   const SweepOptions& opts) {
  const auto& config = m_f.config;
  const std::size_t n_layers = config.n_layers;
  std::vector<double> out(n_layers + 3);
  StreamStack streams_p;
  const ForwardResult run_p = forward_with_streams(m_p, s.token_ids, streams_p);
  out[0] = rating_estimate(run_p.logits, config, opts, s.id);
  out[1] = rating_estimate(forward(m_f, s.token_ids).logits, config, opts, s.id);
  for (std::size_t l = 0; l <= n_layers; ++l) {
    const ForwardResult patched = opts.scope == PatchScope::all_positions
                                      ? forward_patched(m_f, s.token_ids, l, streams_p[l])
                                      : forward_patched(m_f, s.token_ids, l, run_p.trace.at(l));
    out[2 + l] = rating_estimate(patched.logits, config, opts, s.id);
  }
  return out;
}

// Folds per-scenario outcomes into the sweep result in dataset order.
PatchSweepResult aggregate_sweep(const std::vector<Scenario>& scenarios,
                                 const std::vector<std::vector<double>>& outcomes, std::size_t n_layers) {
  auto gap = [&](std::size_t column) {
    double neg = 0.0, pos = 0.0;
    std::size_t n_neg = 0, n_pos = 0;
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
      if (scenarios[s].valence == Valence::negative) {
        neg += outcomes[s][column];
        ++n_neg;
      } else {
        pos += outcomes[s][column];
        ++n_pos;
      }
    }
    return neg / static_cast<double>(n_neg) - pos / static_cast<double>(n_pos);
  };
  PatchSweepResult r;
  r.baseline_p = gap(0);
  r.baseline_f = gap(1);
  r.embedding_control = gap(2);
  r.delta_patch.resize(n_layers);
  for (std::size_t l = 1; l <= n_layers; ++l) r.delta_patch[l - 1] = gap(2 + l);
  r.argmin_layer = argmin_abs(r.delta_patch);
  return r;
}

}  // namespace detail

PatchSweepResult patch_sweep(const ModelWeights& m_p, const ModelWeights& m_f, const std::vector<Scenario>& scenarios,
                             const SweepOptions& opts) {
  detail::check_sweep_inputs(m_p, m_f, scenarios, opts);
  std::vector<std::vector<double>> outcomes(scenarios.size());
  parallel_for_each_index(scenarios.size(), [&](std::size_t s) {
    outcomes[s] = detail::sweep_scenario(m_p, m_f, scenarios[s], opts);
  });
  return detail::aggregate_sweep(scenarios, outcomes, m_f.config.n_layers);
}

}  // namespace patchlens
