#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "patchlens/model.hpp"
#include "patchlens/scenarios.hpp"

namespace fixtures {

// Default dataset (seed 0), its tokenizer and the seed-0 model. Built once.
struct World {
  std::vector<patchlens::Scenario> scenarios;
  patchlens::Tokenizer tokenizer;
  patchlens::ModelWeights m_p;
  std::vector<patchlens::TokenIds> neg, pos;
};
const World& world();

/// m_p with the default directions injected at `layers` (v read at the first).
patchlens::ModelWeights injected(const std::set<std::size_t>& layers, double alpha);
patchlens::BiasInjectionSpec default_spec(const std::set<std::size_t>& layers, double alpha);

/// 1 block, d_model 4, 2 heads, vocab 5; every tensor (biases and norms too)
/// filled with nonzero values. The 11 rating ids do not fit a 5-token vocab,
/// so this is assembled by hand rather than through init_model.
patchlens::ModelWeights toy_weights(std::uint64_t seed);

/// Small but complete model with the default tokenizer's vocabulary.
patchlens::ModelWeights small_model(std::uint64_t seed, std::size_t n_layers = 3);

/// A few scenarios of each valence from the default dataset.
std::vector<patchlens::Scenario> few_scenarios(std::size_t pairs);

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

std::string slurp(const std::filesystem::path& p);

}  // namespace fixtures
