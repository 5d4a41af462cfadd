#include "patchlens/evalrunner.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <unordered_map>

#include <fmt/format.h>

#include "patchlens/error.hpp"

namespace patchlens {

std::vector<float> rating_logits(std::span<const float> logits, std::span<const std::int32_t> rating_token_ids) {
  if (rating_token_ids.size() != kNumRatings) {
    throw std::invalid_argument(fmt::format("expected {} rating tokens, got {}", kNumRatings, rating_token_ids.size()));
  }
  std::vector<float> out(kNumRatings);
  for (std::size_t r = 0; r < kNumRatings; ++r) {
    const auto id = rating_token_ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) {
      throw std::out_of_range(fmt::format("rating token id {} outside logits of length {}", id, logits.size()));
    }
    out[r] = logits[static_cast<std::size_t>(id)];
  }
  return out;
}

int sample_rating(std::span<const float> logits, std::span<const std::int32_t> rating_token_ids,
                  double temperature, RngStream& stream) {
  const auto probs = softmax(rating_logits(logits, rating_token_ids), temperature);
  const double u = stream.next_unit();
  double cdf = 0.0;
  for (std::size_t r = 0; r < probs.size(); ++r) {
    cdf += probs[r];
    if (u < cdf) return static_cast<int>(r);
  }
  // u landed in the rounding slack above the accumulated cdf; take the last
  // rating with nonzero mass.
  for (std::size_t r = probs.size(); r-- > 0;) {
    if (probs[r] > 0.0) return static_cast<int>(r);
  }
  return static_cast<int>(kNumRatings - 1);
}

double trial_temperature(const TrialOptions& opts, std::uint32_t test_index, const std::string& scenario_id) {
  RngStream stream(opts.master_seed, opts.per_scenario_temperature ? "temp/" + scenario_id : std::string("temp"),
                   test_index);
  return rng_uniform(stream, opts.t_min, opts.t_max);
}

namespace {

// Constant samples are degenerate even when rounding in the mean leaves a
// tiny nonzero spread.
bool all_identical(std::span<const double> xs) {
  return std::adjacent_find(xs.begin(), xs.end(), std::not_equal_to<>()) == xs.end();
}

void check_trial_options(const std::vector<Scenario>& scenarios, const TrialOptions& opts) {
  if (scenarios.empty()) throw std::invalid_argument("run_trials: no scenarios");
  if (opts.n_tests == 0) throw std::invalid_argument("run_trials: n_tests must be > 0");
  if (!(opts.t_min < opts.t_max)) {
    throw std::invalid_argument(fmt::format("run_trials: need t_min < t_max, got {} and {}", opts.t_min, opts.t_max));
  }
  if (!(opts.t_min > 0.0)) throw std::invalid_argument("run_trials: temperatures must be positive");
}

}  // namespace

std::vector<TrialRecord> run_trials(const ModelWeights& w, const std::vector<Scenario>& scenarios,
                                    const TrialOptions& opts) {
  check_trial_options(scenarios, opts);
  const auto n_scen = static_cast<std::ptrdiff_t>(scenarios.size());
  const auto& ids = w.config.rating_token_ids;

  // Logits do not depend on the test index, so each prompt runs once.
  std::vector<std::vector<float>> logits(scenarios.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t s = 0; s < n_scen; ++s) {
    try {
      logits[static_cast<std::size_t>(s)] = forward(w, scenarios[static_cast<std::size_t>(s)].token_ids).logits;
    } catch (...) {
#pragma omp critical
      failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  const auto total = static_cast<std::ptrdiff_t>(opts.n_tests * scenarios.size());
  std::vector<TrialRecord> records(static_cast<std::size_t>(total));
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < total; ++i) {
    const auto s = static_cast<std::size_t>(i % n_scen);
    const auto t = static_cast<std::uint32_t>(i / n_scen + 1);
    const auto& scen = scenarios[s];
    auto& rec = records[static_cast<std::size_t>(i)];
    rec.scenario_id = scen.id;
    rec.test_index = t;
    rec.temperature = trial_temperature(opts, t, scen.id);
    RngStream stream(opts.master_seed, scen.id, t);
    rec.rating = sample_rating(logits[s], ids, rec.temperature, stream);
  }
  return records;
}

namespace {

// ratings[scenario_index][test-1] for one valence; validates completeness.
std::vector<std::vector<int>> rating_grid(const std::vector<TrialRecord>& records,
                                          const std::vector<Scenario>& scenarios, Valence v,
                                          std::size_t& n_tests) {
  std::unordered_map<std::string, std::size_t> index;
  std::vector<const Scenario*> group;
  for (const auto& s : scenarios) {
    if (s.valence != v) continue;
    index.emplace(s.id, group.size());
    group.push_back(&s);
  }
  if (group.empty()) {
    throw DataError(fmt::format("no scenarios of valence {} in the dataset", to_string(v)));
  }
  n_tests = 0;
  for (const auto& r : records) n_tests = std::max<std::size_t>(n_tests, r.test_index);
  if (n_tests == 0) throw DataError("no trial records");

  std::vector<std::vector<int>> grid(group.size(), std::vector<int>(n_tests, -1));
  for (const auto& r : records) {
    auto it = index.find(r.scenario_id);
    if (it == index.end()) continue;
    if (r.test_index < 1) throw DataError(fmt::format("scenario {}: test index 0 is invalid", r.scenario_id));
    if (r.rating < 0 || r.rating > 10) {
      throw DataError(fmt::format("scenario {}, test {}: rating {} outside [0, 10]", r.scenario_id, r.test_index, r.rating));
    }
    int& cell = grid[it->second][r.test_index - 1];
    if (cell != -1) {
      throw DataError(fmt::format("duplicate record for scenario {}, test {}", r.scenario_id, r.test_index));
    }
    cell = r.rating;
  }
  for (std::size_t s = 0; s < group.size(); ++s) {
    for (std::size_t t = 0; t < n_tests; ++t) {
      if (grid[s][t] == -1) {
        throw DataError(fmt::format("missing record for scenario {}, test {}", group[s]->id, t + 1));
      }
    }
  }
  return grid;
}

}  // namespace

std::vector<double> compute_test_means(const std::vector<TrialRecord>& records,
                                       const std::vector<Scenario>& scenarios, Valence v) {
  std::size_t n_tests = 0;
  const auto grid = rating_grid(records, scenarios, v, n_tests);
  std::vector<double> nu(n_tests, 0.0);
  for (std::size_t t = 0; t < n_tests; ++t) {
    long sum = 0;
    for (const auto& row : grid) sum += row[t];
    nu[t] = static_cast<double>(sum) / static_cast<double>(grid.size());
  }
  return nu;
}

double knobe_gap(double mu_neg, double mu_pos) { return mu_neg - mu_pos; }

double mean_of(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("mean of an empty sample");
  double sum = 0.0;
  for (double x : xs) sum += x;
  return sum / static_cast<double>(xs.size());
}

double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) throw DataError("standard deviation needs at least 2 values");
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

KnobeSummary compute_knobe(const std::vector<TrialRecord>& records, const std::vector<Scenario>& scenarios) {
  const auto nu_neg = compute_test_means(records, scenarios, Valence::negative);
  const auto nu_pos = compute_test_means(records, scenarios, Valence::positive);
  if (nu_neg.size() != nu_pos.size()) throw DataError("valence groups cover different numbers of tests");
  if (nu_neg.size() < 2) throw DataError("sigma is undefined with fewer than 2 tests");
  KnobeSummary s;
  s.mu_neg = mean_of(nu_neg);
  s.mu_pos = mean_of(nu_pos);
  s.sigma_neg = sample_sd(nu_neg);
  s.sigma_pos = sample_sd(nu_pos);
  s.delta_knobe = knobe_gap(s.mu_neg, s.mu_pos);
  s.n_tests = nu_neg.size();
  const auto neg = select_valence(scenarios, Valence::negative).size();
  const auto pos = select_valence(scenarios, Valence::positive).size();
  if (neg != pos) throw DataError(fmt::format("unbalanced valence groups: {} negative, {} positive", neg, pos));
  s.n_scenarios_per_valence = neg;
  return s;
}

std::vector<double> per_test_gaps(const std::vector<TrialRecord>& records, const std::vector<Scenario>& scenarios) {
  const auto nu_neg = compute_test_means(records, scenarios, Valence::negative);
  const auto nu_pos = compute_test_means(records, scenarios, Valence::positive);
  if (nu_neg.size() != nu_pos.size()) throw DataError("valence groups cover different numbers of tests");
  std::vector<double> gaps(nu_neg.size());
  for (std::size_t t = 0; t < gaps.size(); ++t) gaps[t] = nu_neg[t] - nu_pos[t];
  return gaps;
}

PairedTestResult paired_t_test(std::span<const double> diffs) {
  if (diffs.size() < 2) throw DataError("paired t-test needs at least 2 differences");
  PairedTestResult r;
  r.n = diffs.size();
  r.mean_difference = mean_of(diffs);
  r.sd_difference = sample_sd(diffs);
  if (all_identical(diffs) || !(r.sd_difference > 0.0)) {
    throw DegenerateSampleError("degenerate sample: paired differences have zero variance");
  }
  r.degrees_of_freedom = r.n - 1;
  r.cohens_d = r.mean_difference / r.sd_difference;
  r.t_statistic = r.mean_difference / (r.sd_difference / std::sqrt(static_cast<double>(r.n)));
  return r;
}

Moments compute_moments(std::span<const double> samples) {
  if (samples.size() < 3) throw DataError("moments need at least 3 samples");
  const double m = mean_of(samples);
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : samples) {
    const double d = x - m;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  const auto n = static_cast<double>(samples.size());
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (all_identical(samples) || !(m2 > 0.0)) throw DegenerateSampleError("degenerate sample: zero variance");
  return {m3 / std::pow(m2, 1.5), m4 / (m2 * m2) - 3.0};
}

RatingHistogram rating_histogram(const std::vector<TrialRecord>& records, const std::vector<Scenario>& scenarios) {
  std::unordered_map<std::string, Valence> valence;
  for (const auto& s : scenarios) valence.emplace(s.id, s.valence);
  RatingHistogram h{};
  for (const auto& r : records) {
    auto it = valence.find(r.scenario_id);
    if (it == valence.end()) throw DataError(fmt::format("record for unknown scenario {}", r.scenario_id));
    if (r.rating < 0 || r.rating > 10) throw DataError(fmt::format("rating {} outside [0, 10]", r.rating));
    ++h[static_cast<std::size_t>(r.rating)][it->second == Valence::negative ? 0 : 1];
  }
  return h;
}

}  // namespace patchlens
