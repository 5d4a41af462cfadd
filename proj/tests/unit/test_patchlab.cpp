#include <doctest.h>

#include <stdexcept>
#include <cmath>
#include <cstring>

#include "fixtures.hpp"
#include "patchlens/error.hpp"
#include "patchlens/evalrunner.hpp"
#include "patchlens/parallel.hpp"
#include "patchlens/patchlab.hpp"
#include "patchlens/reference.hpp"

using namespace patchlens;
using fixtures::world;

namespace {

std::vector<std::int32_t> identity_ids() {
  std::vector<std::int32_t> ids(11);
  for (int i = 0; i < 11; ++i) ids[i] = i;
  return ids;
}

bool same(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

TEST_CASE("expected_rating closed forms") {
  const auto ids = identity_ids();
  CHECK(expected_rating(std::vector<float>(11, 0.5f), ids, 1.0) == doctest::Approx(5.0).epsilon(1e-14));
  std::vector<float> one_hot(11, -200.0f);
  one_hot[9] = 0.0f;
  CHECK(expected_rating(one_hot, ids, 1.0) == doctest::Approx(9.0));
  // Only ratings 0 and 10 reachable with logit gap g: E = 10 / (1 + exp(-g / T)).
  std::vector<float> pair(11, -1e4f);
  pair[0] = 0.0f;
  pair[10] = 1.0f;
  for (double t : {0.5, 1.0, 2.0}) CHECK(expected_rating(pair, ids, t) == doctest::Approx(10.0 / (1 + std::exp(-1.0 / t))));
}

TEST_CASE("expected_rating matches sampled means") {
  const auto ids = identity_ids();
  RngStream gen(2, "er-logits");
  for (int v = 0; v < 3; ++v) {
    std::vector<float> z(11);
    for (float& x : z) x = static_cast<float>(rng_uniform(gen, -3.0, 3.0));
    RngStream rng(v, "er-draws");
    long sum = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) sum += sample_rating(z, ids, 1.1, rng);
    CHECK(std::abs(double(sum) / n - expected_rating(z, ids, 1.1)) < 0.03);
  }
}

TEST_CASE("mean_residuals matches the serial reference bitwise") {
  const auto& w = world();
  const int saved = thread_count();
  const auto expect = reference::mean_residuals(w.m_p, w.neg);
  for (int threads : {1, 4}) {
    set_thread_count(threads);
    const auto got = mean_residuals(w.m_p, w.neg);
    REQUIRE(got.size() == expect.size());
    for (std::size_t l = 0; l < got.size(); ++l) {
      for (std::size_t c = 0; c < got[l].size(); ++c) CHECK(same(got[l][c], expect[l][c]));
    }
  }
  set_thread_count(saved);
  CHECK_THROWS_AS(mean_residuals(w.m_p, {}), std::invalid_argument);
}

TEST_CASE("delta matrix properties") {
  const auto& w = world();
  const auto d = delta_matrix(w.m_p, w.neg, w.pos);
  CHECK(d.values.rows() == w.m_p.config.n_layers);
  CHECK(d.values.cols() == w.m_p.config.d_model);
  for (float x : d.values.data()) CHECK(x >= 0.0f);
  const auto swapped = delta_matrix(w.m_p, w.pos, w.neg, ModelTag::finetuned);
  CHECK(bitwise_equal(d.values, swapped.values));
  CHECK(swapped.model_tag == ModelTag::finetuned);
  const auto zero = delta_matrix(w.m_p, w.neg, w.neg);
  for (double n : zero.per_layer_norm) CHECK(n == 0.0);
  for (std::size_t l = 0; l < d.per_layer_norm.size(); ++l) {
    double ss = 0;
    for (float x : d.values.row(l)) ss += double(x) * x;
    CHECK(d.per_layer_norm[l] == doctest::Approx(std::sqrt(ss)));
  }
}

TEST_CASE("delta difference norms localize the injection") {
  const auto& w = world();
  const auto dp = delta_matrix(w.m_p, w.neg, w.pos);
  const auto same_model = delta_difference_norms(delta_matrix(fixtures::injected({4}, 0.0), w.neg, w.pos), dp);
  for (double n : same_model) CHECK(n == 0.0);
  const auto df = delta_matrix(fixtures::injected({4}, 1.0), w.neg, w.pos, ModelTag::finetuned);
  const auto norms = delta_difference_norms(df, dp);
  for (std::size_t l = 1; l <= norms.size(); ++l) {
    if (l < 4) CHECK(norms[l - 1] == 0.0);
    else CHECK(norms[l - 1] > 1e-5);
  }
  DeltaMatrix small;
  small.values = Matrix(2, 2);
  CHECK_THROWS_AS(delta_difference_norms(small, dp), std::invalid_argument);
}

TEST_CASE("patch_sweep matches the serial reference bitwise") {
  const auto& w = world();
  const auto scen = fixtures::few_scenarios(6);
  const ModelWeights m_f = fixtures::injected({3}, 1.0);
  const int saved = thread_count();
  for (SweepOptions opts : {SweepOptions{}, SweepOptions{PatchScope::final_position, 0.9, 0},
                            SweepOptions{PatchScope::all_positions, 1.0, 9, 0.85, 1.15, 3}}) {
    const auto expect = reference::patch_sweep(w.m_p, m_f, scen, opts);
    for (int threads : {1, 3}) {
      set_thread_count(threads);
      const auto got = patch_sweep(w.m_p, m_f, scen, opts);
      CHECK(same(got.baseline_f, expect.baseline_f));
      CHECK(same(got.baseline_p, expect.baseline_p));
      CHECK(same(got.embedding_control, expect.embedding_control));
      CHECK(got.argmin_layer == expect.argmin_layer);
      for (std::size_t l = 0; l < got.delta_patch.size(); ++l) CHECK(same(got.delta_patch[l], expect.delta_patch[l]));
    }
  }
  set_thread_count(saved);
}

TEST_CASE("sweep over a multi-layer injection") {
  const auto& w = world();
  const ModelWeights m_f = fixtures::injected({3, 5}, 1.0);
  const auto r = patch_sweep(w.m_p, m_f, w.scenarios);
  REQUIRE(r.delta_patch.size() == 8);
  for (std::size_t l = 1; l <= 8; ++l) CHECK(same(r.delta_patch[l - 1], r.baseline_p) == (l >= 5));
  for (std::size_t l = 1; l < 3; ++l) CHECK(same(r.delta_patch[l - 1], r.baseline_f));
  CHECK(same(r.embedding_control, r.baseline_f));
  // Piecewise constant between injected layers.
  CHECK(same(r.delta_patch[2], r.delta_patch[3]));
  CHECK(r.argmin_layer >= 3);
}

TEST_CASE("alpha 0 leaves nothing to patch") {
  const auto& w = world();
  const auto scen = fixtures::few_scenarios(5);
  const auto r = patch_sweep(w.m_p, fixtures::injected({2}, 0.0), scen);
  CHECK(same(r.baseline_f, r.baseline_p));
  for (double d : r.delta_patch) CHECK(same(d, r.baseline_p));
  CHECK(r.argmin_layer == 1);
  SweepOptions stochastic;
  stochastic.stochastic_tests = 20;
  const auto s = patch_sweep(w.m_p, fixtures::injected({2}, 0.0), scen, stochastic);
  CHECK(same(s.baseline_f, s.baseline_p));
}

TEST_CASE("final-position patching after the last block restores the pretrained gap") {
  const auto& w = world();
  const auto scen = fixtures::few_scenarios(8);
  SweepOptions opts;
  opts.scope = PatchScope::final_position;
  const auto r = patch_sweep(w.m_p, fixtures::injected({4}, 1.0), scen, opts);
  CHECK(same(r.delta_patch.back(), r.baseline_p));
  CHECK(same(r.embedding_control, r.baseline_f));
}

TEST_CASE("sweep input checks") {
  const auto& w = world();
  const auto scen = fixtures::few_scenarios(2);
  CHECK_THROWS_AS(patch_sweep(w.m_p, fixtures::small_model(0), scen), DataError);
  CHECK_THROWS_AS(patch_sweep(w.m_p, w.m_p, select_valence(scen, Valence::negative)), DataError);
  SweepOptions bad;
  bad.reference_temperature = 0.0;
  CHECK_THROWS(patch_sweep(w.m_p, w.m_p, scen, bad));
}

TEST_CASE("argmin_abs picks the first smallest magnitude") {
  CHECK(argmin_abs(std::vector<double>{0.5, -0.1, 0.1, 0.3}) == 2);
  CHECK(argmin_abs(std::vector<double>{2.0}) == 1);
  CHECK_THROWS(argmin_abs(std::vector<double>{}));
}
