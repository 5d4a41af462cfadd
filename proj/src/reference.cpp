#include "patchlens/reference.hpp"

#include <stdexcept>

#include <fmt/format.h>

#include "sweep_detail.hpp"

namespace patchlens::reference {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument(
        fmt::format("matmul: shape mismatch {} x {}", a.shape_string(), b.shape_string()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<float>(acc);
    }
  }
  return out;
}

std::vector<TrialRecord> run_trials(const ModelWeights& w, const std::vector<Scenario>& scenarios,
                                    const TrialOptions& opts) {
  if (scenarios.empty()) throw std::invalid_argument("run_trials: no scenarios");
  if (!(opts.t_min < opts.t_max)) throw std::invalid_argument("run_trials: need t_min < t_max");
  std::vector<std::vector<float>> logits;
  logits.reserve(scenarios.size());
  for (const auto& s : scenarios) logits.push_back(forward(w, s.token_ids).logits);
  std::vector<TrialRecord> records;
  records.reserve(opts.n_tests * scenarios.size());
  for (std::uint32_t t = 1; t <= opts.n_tests; ++t) {
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
      TrialRecord rec;
      rec.scenario_id = scenarios[s].id;
      rec.test_index = t;
      rec.temperature = trial_temperature(opts, t, scenarios[s].id);
      RngStream stream(opts.master_seed, scenarios[s].id, t);
      rec.rating = sample_rating(logits[s], w.config.rating_token_ids, rec.temperature, stream);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

std::vector<std::vector<double>> mean_residuals(const ModelWeights& w, std::span<const TokenIds> prompts) {
  if (prompts.empty()) throw std::invalid_argument("mean_residuals: empty scenario subset");
  std::vector<std::vector<double>> mean(w.config.n_layers + 1, std::vector<double>(w.config.d_model, 0.0));
  for (const auto& p : prompts) {
    const auto trace = forward(w, p).trace;
    for (std::size_t l = 0; l < mean.size(); ++l) {
      for (std::size_t c = 0; c < mean[l].size(); ++c) mean[l][c] += trace.at(l)[c];
    }
  }
  for (auto& row : mean) {
    for (double& x : row) x /= static_cast<double>(prompts.size());
  }
  return mean;
}

PatchSweepResult patch_sweep(const ModelWeights& m_p, const ModelWeights& m_f,
                             const std::vector<Scenario>& scenarios, const SweepOptions& opts) {
  detail::check_sweep_inputs(m_p, m_f, scenarios, opts);
  std::vector<std::vector<double>> outcomes;
  outcomes.reserve(scenarios.size());
  for (const auto& s : scenarios) outcomes.push_back(detail::sweep_scenario(m_p, m_f, s, opts));
  return detail::aggregate_sweep(scenarios, outcomes, m_f.config.n_layers);
}

}  // namespace patchlens::reference
