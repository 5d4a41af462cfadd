#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "patchlens/evalrunner.hpp"
#include "patchlens/model.hpp"
#include "patchlens/patchlab.hpp"
#include "patchlens/scenarios.hpp"

namespace patchlens {

using Json = nlohmann::json;

inline constexpr std::string_view kToolVersion = "patchlens 1.0.0";

// ---------------------------------------------------------------------------
// Files

std::string read_file(const std::filesystem::path& path);

/// Writes `content`, reads it back, and runs `validate` on what was read.
/// Throws DataError with the path on I/O failure or validation failure.
void write_checked(const std::filesystem::path& path, const std::string& content,
                   const std::function<void(const std::string&)>& validate = {});

std::string sha256_hex(std::string_view bytes);

/// Pretty-printed (2-space indent), sorted keys, trailing newline.
std::string dump_json(const Json& j);
Json parse_json(const std::string& text, std::string_view what);

/// Shortest round-trip decimal form.
std::string format_number(double v);

// ---------------------------------------------------------------------------
// JSON conversions

Json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const Json& j);

Json bias_spec_to_json(const BiasInjectionSpec& spec);
BiasInjectionSpec bias_spec_from_json(const Json& j);

// ---------------------------------------------------------------------------
// Dataset JSON-lines. One object per line, fields in this order:
// id, pair_id, valence, actor, action, outcome, prompt_text, token_ids.

std::string dataset_to_jsonl(const std::vector<Scenario>& scenarios);
std::vector<Scenario> dataset_from_jsonl(const std::string& text);
std::vector<Scenario> load_dataset(const std::filesystem::path& path);

std::string vocab_to_json(const Tokenizer& tok);
Tokenizer vocab_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Trials CSV: header "scenario_id,test_index,temperature,rating".

inline constexpr std::string_view kTrialsHeader = "scenario_id,test_index,temperature,rating";

std::string trials_to_csv(const std::vector<TrialRecord>& records);
std::vector<TrialRecord> trials_from_csv(const std::string& text);

/// Scenario stubs (id + valence) recovered from trial ids ending in -neg/-pos.
std::vector<Scenario> scenarios_from_trial_ids(const std::vector<TrialRecord>& records);

/// Histogram CSV: "rating,count_negative,count_positive", ratings 0..10.
std::string histogram_to_csv(const RatingHistogram& h);

Json knobe_summary_to_json(const KnobeSummary& s);
Json paired_test_to_json(const PairedTestResult& r);
Json moments_to_json(const Moments& m);
void validate_summary_json(const std::string& text);

// ---------------------------------------------------------------------------
// Localization and sweep artifacts

/// Header "dim_0,...,dim_{d-1}", then one row per layer 1..L.
std::string delta_to_csv(const DeltaMatrix& d);
Matrix delta_from_csv(const std::string& text);

/// Header "layer,norm_pretrained,norm_finetuned,norm_difference".
std::string delta_norms_to_csv(const DeltaMatrix& p, const DeltaMatrix& f);

/// Header "layer,delta_patch,baseline_f,baseline_p", rows for layers 1..L.
std::string sweep_to_csv(const PatchSweepResult& r);
Json sweep_to_json(const PatchSweepResult& r, const SweepOptions& opts);
void validate_sweep_json(const std::string& text);

// Heatmap: one rectangle per cell, colour from a 5-stop ramp applied to
// value / global max. Stops at t = 0, .25, .5, .75, 1:
// #440154 #3b528b #21918c #5ec962 #fde725.
std::string heatmap_svg(const Matrix& values, std::string_view title);
std::string ramp_color(double t);

// ---------------------------------------------------------------------------
// Run manifest

struct RunManifest {
  std::string tool_version = std::string(kToolVersion);
  std::uint64_t master_seed = 0;
  std::optional<ModelConfig> model_config;
  std::optional<BiasInjectionSpec> bias_spec;
  std::string dataset_hash;  // sha256 of the dataset file, empty if none
  std::string command;
  std::string timestamp;     // ISO-8601 UTC
  std::vector<std::pair<std::string, std::string>> artifacts;  // file name, sha256
};

Json manifest_to_json(const RunManifest& m);

/// SOURCE_DATE_EPOCH when set, otherwise the current time, as YYYY-MM-DDTHH:MM:SSZ.
std::string current_timestamp();

}  // namespace patchlens
