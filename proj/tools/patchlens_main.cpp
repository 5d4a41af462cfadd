#include <cstdlib>
#include <iostream>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>

#include "patchlens/artifacts.hpp"
#include "patchlens/commands.hpp"
#include "patchlens/error.hpp"
#include "patchlens/parallel.hpp"

using namespace patchlens;

namespace {

std::string join_argv(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i > 0) out += ' ';
    out += i == 0 ? std::string("patchlens") : std::string(argv[i]);
  }
  return out;
}

PatchScope parse_scope(const std::string& s) {
  if (s == "all") return PatchScope::all_positions;
  if (s == "final") return PatchScope::final_position;
  throw UsageError("--scope must be 'all' or 'final', got '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knobe-effect interpretability toolkit: evaluation, layer localization and activation patching"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  GenDatasetArgs gen_dataset;
  auto* c_dataset = app.add_subcommand("gen-dataset", "Generate the matched negative/positive scenario dataset");
  c_dataset->add_option("--seed", gen_dataset.seed, "Master seed")->default_val(0);
  c_dataset->add_option("--out-dir", gen_dataset.out_dir, "Output directory")->required();

  GenModelArgs gen_model;
  auto* c_model = app.add_subcommand("gen-model", "Initialize a pretrained-proxy model from a config");
  c_model->add_option("--config", gen_model.config, "model_config.json from gen-dataset")->required()->check(CLI::ExistingFile);
  c_model->add_option("--seed", gen_model.seed, "Initialization seed")->default_val(0);
  c_model->add_option("--out", gen_model.out, "Output weights file")->required();

  InjectArgs inject;
  std::string inject_layers;
  auto* c_inject = app.add_subcommand("inject", "Derive a finetuned-proxy model by synthetic bias injection");
  c_inject->add_option("--base", inject.base, "Base weights file")->required()->check(CLI::ExistingFile);
  c_inject->add_option("--layers", inject_layers, "Target layers, comma separated (1-based)")->required();
  c_inject->add_option("--alpha", inject.alpha, "Injection magnitude")->default_val(1.0);
  c_inject->add_option("--dataset", inject.dataset, "Dataset used to derive the valence direction")
      ->required()->check(CLI::ExistingFile);
  c_inject->add_option("--out", inject.out, "Output weights file")->required();

  RunEvalArgs eval;
  auto* c_eval = app.add_subcommand("run-eval", "Sample ratings and compute the Knobe gap");
  c_eval->add_option("--model", eval.model, "Weights file")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--dataset", eval.dataset, "Dataset JSON-lines")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--tests", eval.tests, "Number of tests")->default_val(283);
  c_eval->add_option("--t-min", eval.t_min, "Lower temperature bound")->default_val(0.85);
  c_eval->add_option("--t-max", eval.t_max, "Upper temperature bound")->default_val(1.15);
  c_eval->add_option("--seed", eval.seed, "Master seed")->default_val(0);
  c_eval->add_flag("--per-scenario-temperature", eval.per_scenario_temperature,
                   "Draw a temperature per (test, scenario) instead of per test");
  c_eval->add_option("--out-dir", eval.out_dir, "Output directory")->required();

  DeltaLayersArgs delta;
  auto* c_delta = app.add_subcommand("delta-layers", "Per-layer mean residual differences for both models");
  c_delta->add_option("--model-p", delta.model_p, "Pretrained weights")->required()->check(CLI::ExistingFile);
  c_delta->add_option("--model-f", delta.model_f, "Finetuned weights")->required()->check(CLI::ExistingFile);
  c_delta->add_option("--dataset", delta.dataset, "Dataset JSON-lines")->required()->check(CLI::ExistingFile);
  c_delta->add_option("--out-dir", delta.out_dir, "Output directory")->required();
  bool delta_no_svg = false;
  c_delta->add_flag("--no-svg", delta_no_svg, "Skip heatmap rendering");

  PatchSweepArgs sweep;
  std::string sweep_scope = "all";
  auto* c_sweep = app.add_subcommand("patch-sweep", "Patch pretrained residual streams into the finetuned model");
  c_sweep->add_option("--model-p", sweep.model_p, "Pretrained weights")->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--model-f", sweep.model_f, "Finetuned weights")->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--dataset", sweep.dataset, "Dataset JSON-lines")->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--out-dir", sweep.out_dir, "Output directory")->required();
  c_sweep->add_option("--scope", sweep_scope, "Patch 'all' positions or only the 'final' position")->default_val("all");
  c_sweep->add_option("--temperature", sweep.temperature, "Reference temperature for expected ratings")
      ->default_val(1.0);
  c_sweep->add_option("--stochastic-tests", sweep.stochastic_tests,
                      "Use sampled ratings over this many tests instead of expectations (0 = expectations)")
      ->default_val(0);
  c_sweep->add_option("--seed", sweep.seed, "Master seed for stochastic mode")->default_val(0);
  bool sweep_no_svg = false;
  c_sweep->add_flag("--no-svg", sweep_no_svg, "Skip heatmap rendering");

  TtestArgs ttest;
  std::string ttest_against, ttest_dataset, ttest_out;
  auto* c_ttest = app.add_subcommand("ttest", "Paired t-test over per-test gaps");
  c_ttest->add_option("--trials-neg-pos", ttest.trials, "trials.csv from run-eval")->required()->check(CLI::ExistingFile);
  c_ttest->add_option("--against", ttest_against, "Second trials.csv; tests gap(first) - gap(second)")
      ->check(CLI::ExistingFile);
  c_ttest->add_option("--dataset", ttest_dataset, "Dataset for valence labels (default: infer from ids)")
      ->check(CLI::ExistingFile);
  c_ttest->add_option("--out", ttest_out, "Output JSON (default: stdout)");

  PipelineArgs pipeline;
  std::string pipeline_layers = "5";
  auto* c_pipe = app.add_subcommand("pipeline", "Run the whole experiment end to end");
  c_pipe->add_option("--seed", pipeline.seed, "Master seed")->default_val(0);
  c_pipe->add_option("--out-dir", pipeline.out_dir, "Output directory")->required();
  c_pipe->add_option("--layers", pipeline_layers, "Injection layers, comma separated")->default_val("5");
  c_pipe->add_option("--alpha", pipeline.alpha, "Injection magnitude")->default_val(1.0);
  c_pipe->add_option("--tests", pipeline.tests, "Number of tests")->default_val(283);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CommandContext ctx;
  ctx.command_line = join_argv(argc, argv);
  ctx.timestamp = current_timestamp();
  ctx.log = &std::cout;

  try {
    configure_threads_from_env();
    if (*c_dataset) {
      cmd_gen_dataset(gen_dataset, ctx);
    } else if (*c_model) {
      cmd_gen_model(gen_model, ctx);
    } else if (*c_inject) {
      inject.layers = parse_layer_list(inject_layers);
      cmd_inject(inject, ctx);
    } else if (*c_eval) {
      cmd_run_eval(eval, ctx);
    } else if (*c_delta) {
      delta.svg = !delta_no_svg;
      cmd_delta_layers(delta, ctx);
    } else if (*c_sweep) {
      sweep.scope = parse_scope(sweep_scope);
      sweep.svg = !sweep_no_svg;
      cmd_patch_sweep(sweep, ctx);
    } else if (*c_ttest) {
      if (!ttest_against.empty()) ttest.against = ttest_against;
      if (!ttest_dataset.empty()) ttest.dataset = ttest_dataset;
      if (!ttest_out.empty()) ttest.out = ttest_out;
      cmd_ttest(ttest, ctx);
    } else if (*c_pipe) {
      pipeline.layers = parse_layer_list(pipeline_layers);
      cmd_pipeline(pipeline, ctx);
    }
  } catch (const UsageError& e) {
    std::cerr << "patchlens: usage error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "patchlens: data error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "patchlens: invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "patchlens: out of range: " << e.what() << '\n';
    return 2;
  } catch (const InvariantError& e) {
    std::cerr << "patchlens: internal invariant violated: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "patchlens: error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
