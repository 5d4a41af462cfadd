#pragma once

// Single-threaded counterparts of the OpenMP kernels. They share the per-item
// arithmetic with the parallel versions and differ only in loop structure, so
// tests can demand bitwise agreement and the benchmark can compare timings.

#include <vector>

#include "patchlens/evalrunner.hpp"
#include "patchlens/numcore.hpp"
#include "patchlens/patchlab.hpp"

namespace patchlens::reference {

/// Naive i-j-k triple loop with float64 accumulation.
Matrix matmul(const Matrix& a, const Matrix& b);

std::vector<TrialRecord> run_trials(const ModelWeights& w, const std::vector<Scenario>& scenarios,
                                    const TrialOptions& opts);

std::vector<std::vector<double>> mean_residuals(const ModelWeights& w, std::span<const TokenIds> prompts);

PatchSweepResult patch_sweep(const ModelWeights& m_p, const ModelWeights& m_f,
                             const std::vector<Scenario>& scenarios, const SweepOptions& opts = {});

}  // namespace patchlens::reference
