#pragma once

#include <vector>

#include "patchlens/patchlab.hpp"

namespace patchlens::detail {

void check_sweep_inputs(const ModelWeights& m_p, const ModelWeights& m_f, const std::vector<Scenario>& scenarios,
                        const SweepOptions& opts);

std::vector<double> sweep_scenario(const ModelWeights& m_p, const ModelWeights& m_f, const Scenario& s,
                                   const SweepOptions& opts);

PatchSweepResult aggregate_sweep(const std::vector<Scenario>& scenarios,
                                 const std::vector<std::vector<double>>& outcomes, std::size_t n_layers);

}  // namespace patchlens::detail
