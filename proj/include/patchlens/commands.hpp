#pragma once

// Subcommand implementations behind the `patchlens` binary. Each command
// writes its artifacts plus a manifest.json (or <file>.manifest.json for
// single-file outputs) and returns the in-memory result for callers/tests.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "patchlens/evalrunner.hpp"
#include "patchlens/patchlab.hpp"

namespace patchlens {

namespace fs = std::filesystem;

struct CommandContext {
  std::string command_line;
  std::string timestamp;
  std::ostream* log = nullptr;  // progress/summary lines; null for silence
};

struct GenDatasetArgs {
  std::uint64_t seed = 0;
  fs::path out_dir;
};

struct GenModelArgs {
  fs::path config;
  std::uint64_t seed = 0;
  fs::path out;
};

struct InjectArgs {
  fs::path base;
  std::vector<std::size_t> layers;
  double alpha = 1.0;
  fs::path dataset;
  fs::path out;
};

struct RunEvalArgs {
  fs::path model;
  fs::path dataset;
  std::size_t tests = 283;
  double t_min = 0.85;
  double t_max = 1.15;
  std::uint64_t seed = 0;
  bool per_scenario_temperature = false;
  fs::path out_dir;
};

struct DeltaLayersArgs {
  fs::path model_p;
  fs::path model_f;
  fs::path dataset;
  fs::path out_dir;
  bool svg = true;
};

struct PatchSweepArgs {
  fs::path model_p;
  fs::path model_f;
  fs::path dataset;
  fs::path out_dir;
  PatchScope scope = PatchScope::all_positions;
  double temperature = 1.0;
  std::size_t stochastic_tests = 0;
  std::uint64_t seed = 0;
  bool svg = true;
};

struct TtestArgs {
  fs::path trials;
  std::optional<fs::path> against;
  std::optional<fs::path> dataset;
  std::optional<fs::path> out;
};

struct PipelineArgs {
  std::uint64_t seed = 0;
  fs::path out_dir;
  std::vector<std::size_t> layers{5};
  double alpha = 1.0;
  std::size_t tests = 283;
};

struct DeltaLayersReport {
  DeltaMatrix delta_p;
  DeltaMatrix delta_f;
  std::vector<double> difference_norms;
};

struct PipelineReport {
  KnobeSummary pretrained;
  KnobeSummary finetuned;
  DeltaLayersReport delta;
  PatchSweepResult sweep;
  std::optional<PairedTestResult> ttest;
};

void cmd_gen_dataset(const GenDatasetArgs& args, const CommandContext& ctx);
void cmd_gen_model(const GenModelArgs& args, const CommandContext& ctx);
void cmd_inject(const InjectArgs& args, const CommandContext& ctx);
KnobeSummary cmd_run_eval(const RunEvalArgs& args, const CommandContext& ctx);
DeltaLayersReport cmd_delta_layers(const DeltaLayersArgs& args, const CommandContext& ctx);
PatchSweepResult cmd_patch_sweep(const PatchSweepArgs& args, const CommandContext& ctx);
PairedTestResult cmd_ttest(const TtestArgs& args, const CommandContext& ctx);
PipelineReport cmd_pipeline(const PipelineArgs& args, const CommandContext& ctx);

/// Parses "3,5" / "3" into sorted layer indices; throws UsageError.
std::vector<std::size_t> parse_layer_list(const std::string& text);

}  // namespace patchlens
