#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchlens/model.hpp"
#include "patchlens/numcore.hpp"
#include "patchlens/scenarios.hpp"

namespace patchlens {

struct TrialRecord {
  std::string scenario_id;
  std::uint32_t test_index = 0;  // 1-based
  double temperature = 0.0;
  int rating = 0;

  bool operator==(const TrialRecord&) const = default;
};

struct KnobeSummary {
  double mu_neg = 0.0;
  double mu_pos = 0.0;
  double sigma_neg = 0.0;
  double sigma_pos = 0.0;
  double delta_knobe = 0.0;
  std::size_t n_tests = 0;
  std::size_t n_scenarios_per_valence = 0;
};

inline constexpr const char* kSdConvention = "sample (n-1)";

struct PairedTestResult {
  double t_statistic = 0.0;
  std::size_t degrees_of_freedom = 0;
  double cohens_d = 0.0;
  double mean_difference = 0.0;
  double sd_difference = 0.0;
  std::size_t n = 0;
};

struct Moments {
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
};

struct TrialOptions {
  std::size_t n_tests = 283;
  double t_min = 0.85;
  double t_max = 1.15;
  std::uint64_t master_seed = 0;
  /// Draw one temperature per (scenario, test) instead of one per test.
  bool per_scenario_temperature = false;
};

/// Restricts `logits` to the rating tokens, applies a temperature softmax and
/// draws one rating with a single uniform from `stream`.
int sample_rating(std::span<const float> logits, std::span<const std::int32_t> rating_token_ids,
                  double temperature, RngStream& stream);

/// Rating logits in rating order 0..10.
std::vector<float> rating_logits(std::span<const float> logits, std::span<const std::int32_t> rating_token_ids);

/// Temperature used for test `t` (and scenario, when drawn per scenario).
double trial_temperature(const TrialOptions& opts, std::uint32_t test_index, const std::string& scenario_id);

// Full stochastic protocol. Records are ordered test-major: all scenarios of
// test 1 in dataset order, then test 2, and so on. Parallel over records.
std::vector<TrialRecord> run_trials(const ModelWeights& w, const std::vector<Scenario>& scenarios,
                                    const TrialOptions& opts);

/// Per-test mean rating over the scenarios of valence `v` (length n_tests).
std::vector<double> compute_test_means(const std::vector<TrialRecord>& records,
                                       const std::vector<Scenario>& scenarios, Valence v);

/// mu_neg - mu_pos. Kept separate so externally reported means can be checked.
double knobe_gap(double mu_neg, double mu_pos);

KnobeSummary compute_knobe(const std::vector<TrialRecord>& records, const std::vector<Scenario>& scenarios);

/// Per-test gaps nu_neg,t - nu_pos,t.
std::vector<double> per_test_gaps(const std::vector<TrialRecord>& records, const std::vector<Scenario>& scenarios);

PairedTestResult paired_t_test(std::span<const double> diffs);

// Moment-ratio skewness g1 = m3 / m2^1.5 and excess kurtosis g2 = m4 / m2^2 - 3,
// with m_k = (1/n) sum (x - mean)^k.
Moments compute_moments(std::span<const double> samples);

/// Sample mean and sd (n-1) of a sequence; used by the summaries.
double mean_of(std::span<const double> xs);
double sample_sd(std::span<const double> xs);

/// Rating counts per valence: [rating][0 = negative, 1 = positive].
using RatingHistogram = std::array<std::array<std::size_t, 2>, kNumRatings>;
RatingHistogram rating_histogram(const std::vector<TrialRecord>& records, const std::vector<Scenario>& scenarios);

}  // namespace patchlens
