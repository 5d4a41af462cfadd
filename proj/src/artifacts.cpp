#include "patchlens/artifacts.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "patchlens/error.hpp"

namespace patchlens {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open {} for reading", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw DataError(fmt::format("error reading {}", path.string()));
  return ss.str();
}

void write_checked(const fs::path& path, const std::string& content,
                   const std::function<void(const std::string&)>& validate) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw DataError(fmt::format("cannot create directory {}: {}", path.parent_path().string(), ec.message()));
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("cannot open {} for writing", path.string()));
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError(fmt::format("error writing {}", path.string()));
  }
  const std::string back = read_file(path);
  if (back != content) throw DataError(fmt::format("{}: read-back differs from written content", path.string()));
  if (validate) {
    try {
      validate(back);
    } catch (const std::exception& e) {
      throw DataError(fmt::format("{}: schema check failed: {}", path.string(), e.what()));
    }
  }
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw InvariantError("sha256 digest failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

Json parse_json(const std::string& text, std::string_view what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw DataError(fmt::format("{}: invalid JSON ({})", what, e.what()));
  }
}

std::string format_number(double v) { return fmt::format("{}", v); }

// ---------------------------------------------------------------------------

Json config_to_json(const ModelConfig& c) {
  return {
      {"n_layers", c.n_layers},       {"d_model", c.d_model},         {"n_heads", c.n_heads},
      {"d_head", c.d_head},           {"d_mlp", c.d_mlp},             {"vocab_size", c.vocab_size},
      {"max_seq_len", c.max_seq_len}, {"rating_token_ids", c.rating_token_ids},
  };
}

ModelConfig config_from_json(const Json& j) {
  try {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_mlp = j.at("d_mlp").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    const auto ids = j.at("rating_token_ids").get<std::vector<std::int32_t>>();
    if (ids.size() != kNumRatings) throw DataError(fmt::format("rating_token_ids must have {} entries", kNumRatings));
    std::copy(ids.begin(), ids.end(), c.rating_token_ids.begin());
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw DataError(fmt::format("model config: {}", e.what()));
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
}

Json bias_spec_to_json(const BiasInjectionSpec& spec) {
  return {
      {"target_layers", spec.target_layers},
      {"magnitude_alpha", spec.magnitude_alpha},
      {"direction_v", spec.direction_v},
      {"direction_u", spec.direction_u},
  };
}

BiasInjectionSpec bias_spec_from_json(const Json& j) {
  try {
    BiasInjectionSpec spec;
    spec.target_layers = j.at("target_layers").get<std::set<std::size_t>>();
    spec.magnitude_alpha = j.at("magnitude_alpha").get<double>();
    spec.direction_v = j.at("direction_v").get<std::vector<float>>();
    spec.direction_u = j.at("direction_u").get<std::vector<float>>();
    return spec;
  } catch (const Json::exception& e) {
    throw DataError(fmt::format("bias spec: {}", e.what()));
  }
}

// ---------------------------------------------------------------------------
// Dataset

std::string dataset_to_jsonl(const std::vector<Scenario>& scenarios) {
  std::string out;
  for (const auto& s : scenarios) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["pair_id"] = s.pair_id;
    j["valence"] = std::string(to_string(s.valence));
    j["actor"] = s.actor;
    j["action"] = s.action;
    j["outcome"] = s.outcome;
    j["prompt_text"] = s.prompt_text;
    j["token_ids"] = s.token_ids;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<Scenario> dataset_from_jsonl(const std::string& text) {
  std::vector<Scenario> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = Json::parse(line);
      Scenario s;
      s.id = j.at("id").get<std::string>();
      s.pair_id = j.at("pair_id").get<std::string>();
      s.valence = parse_valence(j.at("valence").get<std::string>());
      s.actor = j.at("actor").get<std::string>();
      s.action = j.at("action").get<std::string>();
      s.outcome = j.at("outcome").get<std::string>();
      s.prompt_text = j.at("prompt_text").get<std::string>();
      s.token_ids = j.at("token_ids").get<TokenIds>();
      if (s.token_ids.empty()) throw DataError("empty token_ids");
      if (!ids.insert(s.id).second) throw DataError("duplicate scenario id " + s.id);
      out.push_back(std::move(s));
    } catch (const Json::exception& e) {
      throw DataError(fmt::format("dataset line {}: {}", line_no, e.what()));
    } catch (const std::invalid_argument& e) {
      throw DataError(fmt::format("dataset line {}: {}", line_no, e.what()));
    } catch (const DataError& e) {
      throw DataError(fmt::format("dataset line {}: {}", line_no, e.what()));
    }
  }
  if (out.empty()) throw DataError("dataset is empty");
  return out;
}

std::vector<Scenario> load_dataset(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return dataset_from_jsonl(text);
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string vocab_to_json(const Tokenizer& tok) { return dump_json(Json{{"tokens", tok.tokens()}}); }

Tokenizer vocab_from_json(const std::string& text) {
  const Json j = parse_json(text, "vocabulary");
  try {
    return Tokenizer::from_tokens(j.at("tokens").get<std::vector<std::string>>());
  } catch (const Json::exception& e) {
    throw DataError(fmt::format("vocabulary: {}", e.what()));
  } catch (const std::invalid_argument& e) {
    throw DataError(fmt::format("vocabulary: {}", e.what()));
  }
}

// ---------------------------------------------------------------------------
// Trials

std::string trials_to_csv(const std::vector<TrialRecord>& records) {
  std::string out(kTrialsHeader);
  out += '\n';
  for (const auto& r : records) {
    out += fmt::format("{},{},{},{}\n", r.scenario_id, r.test_index, format_number(r.temperature), r.rating);
  }
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

template <typename T>
T parse_field(const std::string& s, std::string_view what, std::size_t line_no) {
  std::istringstream in(s);
  T v{};
  in >> v;
  if (in.fail() || !in.eof()) throw DataError(fmt::format("line {}: invalid {} '{}'", line_no, what, s));
  return v;
}

double parse_double(const std::string& s, std::string_view what, std::size_t line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v)) {
    throw DataError(fmt::format("line {}: invalid {} '{}'", line_no, what, s));
  }
  return v;
}

}  // namespace

std::vector<TrialRecord> trials_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kTrialsHeader) {
    throw DataError(fmt::format("trials CSV: expected header '{}'", kTrialsHeader));
  }
  std::vector<TrialRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw DataError(fmt::format("trials CSV line {}: expected 4 fields, got {}", line_no, f.size()));
    TrialRecord r;
    r.scenario_id = f[0];
    if (r.scenario_id.empty()) throw DataError(fmt::format("trials CSV line {}: empty scenario_id", line_no));
    r.test_index = parse_field<std::uint32_t>(f[1], "test_index", line_no);
    r.temperature = parse_double(f[2], "temperature", line_no);
    r.rating = parse_field<int>(f[3], "rating", line_no);
    if (r.test_index < 1) throw DataError(fmt::format("trials CSV line {}: test_index must be >= 1", line_no));
    if (r.rating < 0 || r.rating > 10) throw DataError(fmt::format("trials CSV line {}: rating {} outside [0, 10]", line_no, r.rating));
    if (!(r.temperature > 0.0)) throw DataError(fmt::format("trials CSV line {}: temperature must be > 0", line_no));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Scenario> scenarios_from_trial_ids(const std::vector<TrialRecord>& records) {
  std::vector<Scenario> out;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.scenario_id).second) continue;
    const auto& id = r.scenario_id;
    auto ends_with = [&](std::string_view suffix) {
      return id.size() >= suffix.size() && id.compare(id.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    Scenario s;
    s.id = id;
    if (ends_with("-neg")) {
      s.valence = Valence::negative;
    } else if (ends_with("-pos")) {
      s.valence = Valence::positive;
    } else {
      throw DataError(fmt::format("cannot infer valence of scenario '{}' (pass --dataset)", id));
    }
    s.pair_id = id.substr(0, id.size() - 4);
    out.push_back(std::move(s));
  }
  return out;
}

std::string histogram_to_csv(const RatingHistogram& h) {
  std::string out = "rating,count_negative,count_positive\n";
  for (std::size_t r = 0; r < h.size(); ++r) out += fmt::format("{},{},{}\n", r, h[r][0], h[r][1]);
  return out;
}

Json knobe_summary_to_json(const KnobeSummary& s) {
  return {
      {"mu_neg", s.mu_neg},
      {"mu_pos", s.mu_pos},
      {"sigma_neg", s.sigma_neg},
      {"sigma_pos", s.sigma_pos},
      {"delta_knobe", s.delta_knobe},
      {"n_tests", s.n_tests},
      {"n_scenarios_per_valence", s.n_scenarios_per_valence},
      {"sd_convention", kSdConvention},
  };
}

Json paired_test_to_json(const PairedTestResult& r) {
  return {
      {"t_statistic", r.t_statistic},         {"degrees_of_freedom", r.degrees_of_freedom},
      {"cohens_d", r.cohens_d},               {"mean_difference", r.mean_difference},
      {"sd_difference", r.sd_difference},     {"n", r.n},
  };
}

Json moments_to_json(const Moments& m) {
  return {{"skewness", m.skewness}, {"excess_kurtosis", m.excess_kurtosis}};
}

void validate_summary_json(const std::string& text) {
  const Json j = parse_json(text, "summary");
  for (const char* key : {"mu_neg", "mu_pos", "sigma_neg", "sigma_pos", "delta_knobe"}) {
    if (!j.contains(key) || !j[key].is_number()) throw DataError(fmt::format("summary: missing numeric {}", key));
    const double v = j[key].get<double>();
    if (!std::isfinite(v)) throw DataError(fmt::format("summary: {} is not finite", key));
  }
  for (const char* key : {"mu_neg", "mu_pos"}) {
    const double v = j[key].get<double>();
    if (v < 0.0 || v > 10.0) throw DataError(fmt::format("summary: {} = {} outside [0, 10]", key, v));
  }
  if (std::abs(j["delta_knobe"].get<double>() - (j["mu_neg"].get<double>() - j["mu_pos"].get<double>())) != 0.0) {
    throw DataError("summary: delta_knobe != mu_neg - mu_pos");
  }
  for (const char* key : {"n_tests", "n_scenarios_per_valence", "sd_convention", "paired_t_test", "moments"}) {
    if (!j.contains(key)) throw DataError(fmt::format("summary: missing {}", key));
  }
}

// ---------------------------------------------------------------------------
// Localization / sweep

std::string delta_to_csv(const DeltaMatrix& d) {
  std::string out;
  for (std::size_t c = 0; c < d.values.cols(); ++c) out += fmt::format("{}dim_{}", c == 0 ? "" : ",", c);
  out += '\n';
  for (std::size_t r = 0; r < d.values.rows(); ++r) {
    const auto row = d.values.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out += ',';
      out += fmt::format("{}", row[c]);
    }
    out += '\n';
  }
  return out;
}

Matrix delta_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("delta CSV: empty");
  const auto header = split_csv_line(line);
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] != fmt::format("dim_{}", c)) throw DataError(fmt::format("delta CSV: bad header field '{}'", header[c]));
  }
  Matrix m;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw DataError(fmt::format("delta CSV line {}: {} fields, header has {}", line_no, f.size(), header.size()));
    }
    std::vector<float> row;
    for (const auto& s : f) {
      const double v = parse_double(s, "value", line_no);
      if (v < 0.0) throw DataError(fmt::format("delta CSV line {}: negative entry", line_no));
      row.push_back(static_cast<float>(v));
    }
    m.append_row(row);
  }
  return m;
}

std::string delta_norms_to_csv(const DeltaMatrix& p, const DeltaMatrix& f) {
  const auto diff = delta_difference_norms(f, p);
  std::string out = "layer,norm_pretrained,norm_finetuned,norm_difference\n";
  for (std::size_t l = 0; l < diff.size(); ++l) {
    out += fmt::format("{},{},{},{}\n", l + 1, format_number(p.per_layer_norm[l]), format_number(f.per_layer_norm[l]),
                       format_number(diff[l]));
  }
  return out;
}

std::string sweep_to_csv(const PatchSweepResult& r) {
  std::string out = "layer,delta_patch,baseline_f,baseline_p\n";
  for (std::size_t l = 0; l < r.delta_patch.size(); ++l) {
    out += fmt::format("{},{},{},{}\n", l + 1, format_number(r.delta_patch[l]), format_number(r.baseline_f),
                       format_number(r.baseline_p));
  }
  return out;
}

Json sweep_to_json(const PatchSweepResult& r, const SweepOptions& opts) {
  return {
      {"delta_knobe", r.baseline_f},
      {"min_delta_patch", r.min_delta_patch()},
      {"min_abs_delta_patch", std::abs(r.min_delta_patch())},
      {"argmin_layer", r.argmin_layer},
      {"baseline_f", r.baseline_f},
      {"baseline_p", r.baseline_p},
      {"embedding_control", r.embedding_control},
      {"delta_patch", r.delta_patch},
      {"patch_scope", opts.scope == PatchScope::all_positions ? "all_positions" : "final_position"},
      {"reference_temperature", opts.reference_temperature},
      {"stochastic_tests", opts.stochastic_tests},
  };
}

void validate_sweep_json(const std::string& text) {
  const Json j = parse_json(text, "sweep");
  for (const char* key : {"delta_knobe", "min_delta_patch", "argmin_layer", "baseline_p", "delta_patch"}) {
    if (!j.contains(key)) throw DataError(fmt::format("sweep: missing {}", key));
  }
  const auto dp = j["delta_patch"].get<std::vector<double>>();
  const auto argmin = j["argmin_layer"].get<std::size_t>();
  if (argmin < 1 || argmin > dp.size()) throw DataError("sweep: argmin_layer out of range");
  for (double v : dp) {
    if (std::abs(v) < std::abs(dp[argmin - 1])) throw DataError("sweep: argmin_layer is not the minimum");
  }
}

std::string ramp_color(double t) {
  static constexpr unsigned kStops[5][3] = {
      {0x44, 0x01, 0x54}, {0x3b, 0x52, 0x8b}, {0x21, 0x91, 0x8c}, {0x5e, 0xc9, 0x62}, {0xfd, 0xe7, 0x25}};
  if (!std::isfinite(t)) t = 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double pos = t * 4.0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
  const double f = pos - static_cast<double>(i);
  unsigned rgb[3];
  for (int c = 0; c < 3; ++c) {
    rgb[c] = static_cast<unsigned>(std::lround(kStops[i][c] + f * (static_cast<double>(kStops[i + 1][c]) - kStops[i][c])));
  }
  return fmt::format("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2]);
}

std::string heatmap_svg(const Matrix& values, std::string_view title) {
  constexpr int kCell = 8;
  constexpr int kMargin = 24;
  const auto rows = static_cast<int>(values.rows());
  const auto cols = static_cast<int>(values.cols());
  double hi = 0.0;
  for (float v : values.data()) hi = std::max(hi, static_cast<double>(v));
  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n<title>{}</title>\n",
      cols * kCell + 2 * kMargin, rows * kCell + 2 * kMargin, title);
  for (int r = 0; r < rows; ++r) {
    out += fmt::format("<text x=\"2\" y=\"{}\" font-size=\"7\">{}</text>\n", kMargin + r * kCell + kCell - 1, r + 1);
    for (int c = 0; c < cols; ++c) {
      const double t = hi > 0.0 ? values(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) / hi : 0.0;
      out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n", kMargin + c * kCell,
                         kMargin + r * kCell, kCell, kCell, ramp_color(t));
    }
  }
  out += "</svg>\n";
  return out;
}

// ---------------------------------------------------------------------------

Json manifest_to_json(const RunManifest& m) {
  Json artifacts = Json::object();
  for (const auto& [name, digest] : m.artifacts) artifacts[name] = digest;
  return {
      {"tool_version", m.tool_version},
      {"master_seed", m.master_seed},
      {"model_config", m.model_config ? config_to_json(*m.model_config) : Json(nullptr)},
      {"bias_spec", m.bias_spec ? bias_spec_to_json(*m.bias_spec) : Json(nullptr)},
      {"dataset_hash", m.dataset_hash},
      {"command", m.command},
      {"timestamp", m.timestamp},
      {"artifacts", artifacts},
  };
}

std::string current_timestamp() {
  std::time_t t = 0;
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch != nullptr && *epoch != '\0') {
    try {
      t = static_cast<std::time_t>(std::stoll(epoch));
    } catch (const std::exception&) {
      throw UsageError(fmt::format("SOURCE_DATE_EPOCH must be an integer, got '{}'", epoch));
    }
  } else {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace patchlens
