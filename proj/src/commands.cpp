#include "patchlens/commands.hpp"

#include <ostream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "patchlens/artifacts.hpp"
#include "patchlens/error.hpp"
#include "patchlens/weights_file.hpp"

namespace patchlens {

namespace {

template <typename... Args>
void log_line(const CommandContext& ctx, fmt::format_string<Args...> f, Args&&... args) {
  if (ctx.log != nullptr) *ctx.log << fmt::format(f, std::forward<Args>(args)...) << '\n';
}

// Collects written files so the manifest can list their digests.
class OutputDir {
 public:
  explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {}

  void write(const std::string& name, const std::string& content,
             const std::function<void(const std::string&)>& validate = {}) {
    write_checked(dir_ / name, content, validate);
    artifacts_.emplace_back(name, sha256_hex(content));
  }

  void write_manifest(RunManifest m) const {
    m.artifacts = artifacts_;
    write_checked(dir_ / "manifest.json", dump_json(manifest_to_json(m)),
                  [](const std::string& t) { parse_json(t, "manifest"); });
  }

  const fs::path& path() const { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::pair<std::string, std::string>> artifacts_;
};

RunManifest base_manifest(const CommandContext& ctx, std::uint64_t seed) {
  RunManifest m;
  m.master_seed = seed;
  m.command = ctx.command_line;
  m.timestamp = ctx.timestamp;
  return m;
}

void write_file_manifest(const fs::path& file, const std::string& content, RunManifest m) {
  m.artifacts.emplace_back(file.filename().string(), sha256_hex(content));
  fs::path manifest = file;
  manifest += ".manifest.json";
  write_checked(manifest, dump_json(manifest_to_json(m)), [](const std::string& t) { parse_json(t, "manifest"); });
}

struct DatasetFile {
  std::vector<Scenario> scenarios;
  std::string hash;
};

DatasetFile load_dataset_file(const fs::path& path) {
  const std::string text = read_file(path);
  DatasetFile d;
  try {
    d.scenarios = dataset_from_jsonl(text);
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
  d.hash = sha256_hex(text);
  return d;
}

void check_same_architecture(const ModelWeights& p, const ModelWeights& f) {
  if (!(p.config == f.config)) {
    throw DataError("pretrained and finetuned models have different configs; they must share architecture and tokenizer");
  }
}

template <typename Fn>
Json json_or_error(Fn&& fn) {
  try {
    return fn();
  } catch (const DataError& e) {
    return Json{{"error", e.what()}};
  }
}

}  // namespace

std::vector<std::size_t> parse_layer_list(const std::string& text) {
  std::set<std::size_t> layers;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    long v = -1;
    try {
      v = std::stol(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v < 1) {
      throw UsageError(fmt::format("invalid layer '{}' in list '{}'", item, text));
    }
    layers.insert(static_cast<std::size_t>(v));
  }
  if (layers.empty()) throw UsageError("empty layer list");
  return {layers.begin(), layers.end()};
}

void cmd_gen_dataset(const GenDatasetArgs& args, const CommandContext& ctx) {
  const auto scenarios = generate_dataset(args.seed);
  const Tokenizer tok = build_tokenizer(scenarios);
  const ModelConfig config = default_model_config(tok);

  OutputDir out(args.out_dir);
  const std::string dataset_text = dataset_to_jsonl(scenarios);
  out.write("dataset.jsonl", dataset_text, [](const std::string& t) { dataset_from_jsonl(t); });
  out.write("vocab.json", vocab_to_json(tok), [](const std::string& t) { vocab_from_json(t); });
  out.write("model_config.json", dump_json(config_to_json(config)),
            [](const std::string& t) { config_from_json(parse_json(t, "model config")); });

  RunManifest m = base_manifest(ctx, args.seed);
  m.model_config = config;
  m.dataset_hash = sha256_hex(dataset_text);
  out.write_manifest(m);
  log_line(ctx, "dataset: {} scenarios, vocabulary {} tokens -> {}", scenarios.size(), tok.size(),
           args.out_dir.string());
}

void cmd_gen_model(const GenModelArgs& args, const CommandContext& ctx) {
  const ModelConfig config = config_from_json(parse_json(read_file(args.config), args.config.string()));
  const ModelWeights w = init_model(config, args.seed);
  save_weights(args.out, w);
  const std::string bytes = serialize_weights(w);
  RunManifest m = base_manifest(ctx, args.seed);
  m.model_config = config;
  write_file_manifest(args.out, bytes, m);
  log_line(ctx, "model: L={} d_model={} heads={} d_mlp={} vocab={} seed={}", config.n_layers, config.d_model,
           config.n_heads, config.d_mlp, config.vocab_size, args.seed);
  log_line(ctx, "sha256 {}  {}", sha256_hex(bytes), args.out.string());
}

void cmd_inject(const InjectArgs& args, const CommandContext& ctx) {
  const LoadedWeights base = load_weights(args.base);
  const DatasetFile data = load_dataset_file(args.dataset);
  const auto& w = base.weights;
  if (args.layers.empty()) throw UsageError("inject: --layers is required");
  for (auto k : args.layers) {
    if (k < 1 || k > w.config.n_layers) {
      throw UsageError(fmt::format("inject: layer {} outside [1, {}]", k, w.config.n_layers));
    }
  }
  if (!(args.alpha >= 0.0)) throw UsageError(fmt::format("inject: alpha must be >= 0, got {}", args.alpha));

  BiasInjectionSpec spec;
  spec.target_layers = {args.layers.begin(), args.layers.end()};
  spec.magnitude_alpha = args.alpha;
  const auto neg = token_lists(select_valence(data.scenarios, Valence::negative));
  const auto pos = token_lists(select_valence(data.scenarios, Valence::positive));
  spec.direction_v = default_valence_direction(w, *spec.target_layers.begin(), neg, pos);
  spec.direction_u = default_rating_direction(w);

  const ModelWeights injected = inject_bias(w, spec);
  save_weights(args.out, injected, spec);
  RunManifest m = base_manifest(ctx, w.seed);
  m.model_config = w.config;
  m.bias_spec = spec;
  m.dataset_hash = data.hash;
  write_file_manifest(args.out, serialize_weights(injected, spec), m);
  log_line(ctx, "injected alpha={} at layers {} -> {}", args.alpha, fmt::join(args.layers, ","), args.out.string());
}

KnobeSummary cmd_run_eval(const RunEvalArgs& args, const CommandContext& ctx) {
  const LoadedWeights model = load_weights(args.model);
  const DatasetFile data = load_dataset_file(args.dataset);
  if (args.tests == 0) throw UsageError("run-eval: --tests must be > 0");
  if (!(args.t_min < args.t_max)) throw UsageError("run-eval: need --t-min < --t-max");
  if (!(args.t_min > 0.0)) throw UsageError("run-eval: temperatures must be positive");

  TrialOptions opts;
  opts.n_tests = args.tests;
  opts.t_min = args.t_min;
  opts.t_max = args.t_max;
  opts.master_seed = args.seed;
  opts.per_scenario_temperature = args.per_scenario_temperature;
  const auto records = run_trials(model.weights, data.scenarios, opts);
  const KnobeSummary summary = compute_knobe(records, data.scenarios);
  const auto nu_neg = compute_test_means(records, data.scenarios, Valence::negative);
  const auto nu_pos = compute_test_means(records, data.scenarios, Valence::positive);
  const auto gaps = per_test_gaps(records, data.scenarios);

  Json j = knobe_summary_to_json(summary);
  j["paired_t_test"] = json_or_error([&] { return paired_test_to_json(paired_t_test(gaps)); });
  j["moments"] = {
      {"nu_neg", json_or_error([&] { return moments_to_json(compute_moments(nu_neg)); })},
      {"nu_pos", json_or_error([&] { return moments_to_json(compute_moments(nu_pos)); })},
      {"gap", json_or_error([&] { return moments_to_json(compute_moments(gaps)); })},
  };
  j["t_min"] = args.t_min;
  j["t_max"] = args.t_max;
  j["master_seed"] = args.seed;
  j["per_scenario_temperature"] = args.per_scenario_temperature;

  OutputDir out(args.out_dir);
  out.write("trials.csv", trials_to_csv(records), [](const std::string& t) { trials_from_csv(t); });
  out.write("summary.json", dump_json(j), validate_summary_json);
  out.write("histogram.csv", histogram_to_csv(rating_histogram(records, data.scenarios)));
  RunManifest m = base_manifest(ctx, args.seed);
  m.model_config = model.weights.config;
  m.bias_spec = model.bias_spec;
  m.dataset_hash = data.hash;
  out.write_manifest(m);
  log_line(ctx, "eval {}: mu_neg={:.4f} mu_pos={:.4f} delta_knobe={:.4f} ({} records)", args.model.filename().string(),
           summary.mu_neg, summary.mu_pos, summary.delta_knobe, records.size());
  return summary;
}

DeltaLayersReport cmd_delta_layers(const DeltaLayersArgs& args, const CommandContext& ctx) {
  const LoadedWeights mp = load_weights(args.model_p);
  const LoadedWeights mf = load_weights(args.model_f);
  check_same_architecture(mp.weights, mf.weights);
  const DatasetFile data = load_dataset_file(args.dataset);
  const auto neg = token_lists(select_valence(data.scenarios, Valence::negative));
  const auto pos = token_lists(select_valence(data.scenarios, Valence::positive));

  DeltaLayersReport report;
  report.delta_p = delta_matrix(mp.weights, neg, pos, ModelTag::pretrained);
  report.delta_f = delta_matrix(mf.weights, neg, pos, ModelTag::finetuned);
  report.difference_norms = delta_difference_norms(report.delta_f, report.delta_p);

  OutputDir out(args.out_dir);
  auto shape_check = [n = mp.weights.config.n_layers, d = mp.weights.config.d_model](const std::string& t) {
    const Matrix m = delta_from_csv(t);
    if (m.rows() != n || m.cols() != d) throw DataError(fmt::format("delta CSV has shape {}", m.shape_string()));
  };
  out.write("delta_p.csv", delta_to_csv(report.delta_p), shape_check);
  out.write("delta_f.csv", delta_to_csv(report.delta_f), shape_check);
  out.write("norms.csv", delta_norms_to_csv(report.delta_p, report.delta_f));
  if (args.svg) {
    out.write("heatmap_p.svg", heatmap_svg(report.delta_p.values, "delta (pretrained)"));
    out.write("heatmap_f.svg", heatmap_svg(report.delta_f.values, "delta (finetuned)"));
  }
  RunManifest m = base_manifest(ctx, mp.weights.seed);
  m.model_config = mp.weights.config;
  m.bias_spec = mf.bias_spec;
  m.dataset_hash = data.hash;
  out.write_manifest(m);
  for (std::size_t l = 0; l < report.difference_norms.size(); ++l) {
    log_line(ctx, "layer {:2}: |delta_p|={:.6g} |delta_f|={:.6g} |delta_f - delta_p|={:.6g}", l + 1,
             report.delta_p.per_layer_norm[l], report.delta_f.per_layer_norm[l], report.difference_norms[l]);
  }
  return report;
}

PatchSweepResult cmd_patch_sweep(const PatchSweepArgs& args, const CommandContext& ctx) {
  const LoadedWeights mp = load_weights(args.model_p);
  const LoadedWeights mf = load_weights(args.model_f);
  check_same_architecture(mp.weights, mf.weights);
  const DatasetFile data = load_dataset_file(args.dataset);
  if (!(args.temperature > 0.0)) throw UsageError("patch-sweep: --temperature must be > 0");

  SweepOptions opts;
  opts.scope = args.scope;
  opts.reference_temperature = args.temperature;
  opts.stochastic_tests = args.stochastic_tests;
  opts.master_seed = args.seed;
  const PatchSweepResult result = patch_sweep(mp.weights, mf.weights, data.scenarios, opts);

  OutputDir out(args.out_dir);
  out.write("sweep.csv", sweep_to_csv(result));
  out.write("sweep.json", dump_json(sweep_to_json(result, opts)), validate_sweep_json);
  if (args.svg) {
    Matrix row(1, result.delta_patch.size());
    for (std::size_t l = 0; l < result.delta_patch.size(); ++l) row(0, l) = static_cast<float>(std::abs(result.delta_patch[l]));
    out.write("sweep_heatmap.svg", heatmap_svg(row, "|delta_patch| per layer"));
  }
  RunManifest m = base_manifest(ctx, args.seed);
  m.model_config = mp.weights.config;
  m.bias_spec = mf.bias_spec;
  m.dataset_hash = data.hash;
  out.write_manifest(m);
  log_line(ctx, "sweep: delta_knobe(M_f)={:.4f} delta_knobe(M_p)={:.4f} min delta_patch={:.4f} at layer {}",
           result.baseline_f, result.baseline_p, result.min_delta_patch(), result.argmin_layer);
  return result;
}

PairedTestResult cmd_ttest(const TtestArgs& args, const CommandContext& ctx) {
  auto gaps_of = [&](const fs::path& path) {
    std::vector<TrialRecord> records;
    try {
      records = trials_from_csv(read_file(path));
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}: {}", path.string(), e.what()));
    }
    const auto scenarios = args.dataset ? load_dataset_file(*args.dataset).scenarios : scenarios_from_trial_ids(records);
    return per_test_gaps(records, scenarios);
  };
  auto diffs = gaps_of(args.trials);
  if (args.against) {
    const auto other = gaps_of(*args.against);
    if (other.size() != diffs.size()) {
      throw DataError(fmt::format("ttest: {} tests vs {} tests in --against", diffs.size(), other.size()));
    }
    for (std::size_t t = 0; t < diffs.size(); ++t) diffs[t] -= other[t];
  }

  auto emit = [&](const Json& j) {
    const std::string text = dump_json(j);
    if (args.out) {
      write_checked(*args.out, text, [](const std::string& t) { parse_json(t, "ttest"); });
    } else if (ctx.log != nullptr) {
      *ctx.log << text;
    }
  };
  try {
    const PairedTestResult r = paired_t_test(diffs);
    Json j = paired_test_to_json(r);
    j["comparison"] = args.against ? "gap(trials) - gap(against), per test" : "nu_neg - nu_pos, per test";
    emit(j);
    if (args.out) log_line(ctx, "t({}) = {:.3f}, d = {:.3f}", r.degrees_of_freedom, r.t_statistic, r.cohens_d);
    return r;
  } catch (const DegenerateSampleError& e) {
    emit(Json{{"error", "degenerate sample"}, {"message", e.what()}, {"n", diffs.size()}});
    throw;
  }
}

PipelineReport cmd_pipeline(const PipelineArgs& args, const CommandContext& ctx) {
  const fs::path root = args.out_dir;
  const fs::path dataset_dir = root / "dataset";
  const fs::path models = root / "models";
  const fs::path dataset = dataset_dir / "dataset.jsonl";
  const fs::path m_p = models / "pretrained.plw";
  const fs::path m_f = models / "finetuned.plw";

  PipelineReport report;
  cmd_gen_dataset({args.seed, dataset_dir}, ctx);
  cmd_gen_model({dataset_dir / "model_config.json", args.seed, m_p}, ctx);
  cmd_inject({m_p, args.layers, args.alpha, dataset, m_f}, ctx);

  RunEvalArgs eval;
  eval.dataset = dataset;
  eval.tests = args.tests;
  eval.seed = args.seed;
  eval.model = m_p;
  eval.out_dir = root / "eval_pretrained";
  report.pretrained = cmd_run_eval(eval, ctx);
  eval.model = m_f;
  eval.out_dir = root / "eval_finetuned";
  report.finetuned = cmd_run_eval(eval, ctx);

  report.delta = cmd_delta_layers({m_p, m_f, dataset, root / "delta", true}, ctx);

  PatchSweepArgs sweep;
  sweep.model_p = m_p;
  sweep.model_f = m_f;
  sweep.dataset = dataset;
  sweep.out_dir = root / "sweep";
  sweep.seed = args.seed;
  report.sweep = cmd_patch_sweep(sweep, ctx);

  // Pretrained gap minus finetuned gap per test: negative t means a larger
  // effect after finetuning.
  Json ttest_json;
  try {
    report.ttest = cmd_ttest({root / "eval_pretrained" / "trials.csv", root / "eval_finetuned" / "trials.csv",
                              dataset, root / "ttest" / "ttest.json"},
                             ctx);
    ttest_json = paired_test_to_json(*report.ttest);
  } catch (const DataError& e) {
    ttest_json = Json{{"error", e.what()}};
  }

  Json j = {
      {"pretrained",
       {{"mu_neg", report.pretrained.mu_neg}, {"mu_pos", report.pretrained.mu_pos},
        {"sigma_neg", report.pretrained.sigma_neg}, {"sigma_pos", report.pretrained.sigma_pos},
        {"delta_knobe", report.pretrained.delta_knobe}}},
      {"finetuned",
       {{"mu_neg", report.finetuned.mu_neg}, {"mu_pos", report.finetuned.mu_pos},
        {"sigma_neg", report.finetuned.sigma_neg}, {"sigma_pos", report.finetuned.sigma_pos},
        {"delta_knobe", report.finetuned.delta_knobe}}},
      {"patching",
       {{"delta_knobe", report.sweep.baseline_f}, {"min_delta_patch", report.sweep.min_delta_patch()},
        {"argmin_layer", report.sweep.argmin_layer}}},
      {"delta_difference_norms", report.delta.difference_norms},
      {"ttest_pretrained_vs_finetuned", ttest_json},
      {"injection", {{"layers", args.layers}, {"alpha", args.alpha}}},
      {"tests", args.tests},
  };
  OutputDir out(root);
  out.write("report.json", dump_json(j), [](const std::string& t) { parse_json(t, "report"); });
  RunManifest m = base_manifest(ctx, args.seed);
  m.dataset_hash = sha256_hex(read_file(dataset));
  out.write_manifest(m);
  return report;
}

}  // namespace patchlens
