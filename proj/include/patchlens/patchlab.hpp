#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchlens/evalrunner.hpp"
#include "patchlens/model.hpp"
#include "patchlens/scenarios.hpp"

namespace patchlens {

enum class ModelTag { pretrained, finetuned };
std::string_view to_string(ModelTag tag);

// Absolute valence differences of the mean final-position residuals. Row l-1
// holds layer l (l = 1..L); the post-embedding stream is not a row.
struct DeltaMatrix {
  Matrix values;                       // L x d_model, nonnegative
  std::vector<double> per_layer_norm;  // L2 norm of each row
  ModelTag model_tag = ModelTag::pretrained;
};

struct PatchSweepResult {
  std::vector<double> delta_patch;  // index l-1 for layer l = 1..L
  double embedding_control = 0.0;   // patch at layer index 0, excluded from argmin
  double baseline_f = 0.0;          // unpatched finetuned gap
  double baseline_p = 0.0;          // unpatched pretrained gap
  std::size_t argmin_layer = 0;     // 1-based layer of min |delta_patch|, first on ties

  double min_delta_patch() const { return delta_patch.at(argmin_layer - 1); }
};

struct SweepOptions {
  PatchScope scope = PatchScope::all_positions;
  double reference_temperature = 1.0;
  /// 0 selects the deterministic expected rating; n > 0 averages n sampled
  /// ratings per (scenario, layer) under the trial temperature schedule.
  std::size_t stochastic_tests = 0;
  double t_min = 0.85;
  double t_max = 1.15;
  std::uint64_t master_seed = 0;
};

/// Exact expectation of sample_rating: sum_r r * p(r).
double expected_rating(std::span<const float> logits, std::span<const std::int32_t> rating_token_ids,
                       double temperature);

/// Mean final-position trace over the given prompts, per layer index 0..L.
std::vector<std::vector<double>> mean_residuals(const ModelWeights& w, std::span<const TokenIds> prompts);

DeltaMatrix delta_matrix(const ModelWeights& w, std::span<const TokenIds> negative, std::span<const TokenIds> positive,
                         ModelTag tag = ModelTag::pretrained);

/// Elementwise row norms of (a.values - b.values).
std::vector<double> delta_difference_norms(const DeltaMatrix& a, const DeltaMatrix& b);

/// Layer-patching sweep: for every layer, the finetuned model runs with the
/// pretrained residual stream written in at that layer, and the per-valence
/// mean rating gap is recorded.
PatchSweepResult patch_sweep(const ModelWeights& m_p, const ModelWeights& m_f,
                             const std::vector<Scenario>& scenarios, const SweepOptions& opts = {});

/// Rating estimate o_f for one forward result under the sweep options; the
/// stochastic variant uses common random numbers keyed by scenario id.
double rating_estimate(std::span<const float> logits, const ModelConfig& config, const SweepOptions& opts,
                       const std::string& scenario_id);

/// Index (1-based) of the smallest |value|, first on ties.
std::size_t argmin_abs(std::span<const double> values);

}  // namespace patchlens
