#include <doctest.h>

#include <stdexcept>
#include <cstdlib>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "patchlens/artifacts.hpp"
#include "patchlens/commands.hpp"
#include "patchlens/error.hpp"
#include "patchlens/weights_file.hpp"

using namespace patchlens;
namespace fs = std::filesystem;

namespace {

CommandContext quiet() { return {"patchlens test", "2024-01-01T00:00:00Z", nullptr}; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PATCHLENS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("layer list parsing") {
  CHECK(parse_layer_list("5") == std::vector<std::size_t>{5});
  CHECK(parse_layer_list("5,3,5") == std::vector<std::size_t>{3, 5});
  CHECK_THROWS_AS(parse_layer_list(""), UsageError);
  CHECK_THROWS_AS(parse_layer_list("0"), UsageError);
  CHECK_THROWS_AS(parse_layer_list("3,x"), UsageError);
  CHECK_THROWS_AS(parse_layer_list("2.5"), UsageError);
}

TEST_CASE("pipeline writes the full artifact tree") {
  fixtures::TempDir dir;
  PipelineArgs args;
  args.out_dir = dir.path();
  args.tests = 6;
  args.layers = {3};
  const auto report = cmd_pipeline(args, quiet());

  for (const char* f : {"dataset/dataset.jsonl", "dataset/vocab.json", "dataset/model_config.json",
                        "dataset/manifest.json", "models/pretrained.plw", "models/pretrained.plw.manifest.json",
                        "models/finetuned.plw", "models/finetuned.plw.manifest.json", "eval_pretrained/trials.csv",
                        "eval_pretrained/summary.json", "eval_pretrained/histogram.csv", "eval_finetuned/manifest.json",
                        "delta/delta_p.csv", "delta/delta_f.csv", "delta/norms.csv", "delta/heatmap_p.svg",
                        "sweep/sweep.csv", "sweep/sweep.json", "ttest/ttest.json", "report.json", "manifest.json"}) {
    CHECK_MESSAGE(fs::exists(dir / f), f);
  }
  const Json summary = Json::parse(fixtures::slurp(dir / "eval_finetuned/summary.json"));
  CHECK(summary["sd_convention"] == "sample (n-1)");
  CHECK(summary["n_tests"] == 6);
  CHECK(summary.contains("paired_t_test"));
  CHECK(summary["moments"].contains("gap"));

  // Manifest digests match the files next to them.
  const Json manifest = Json::parse(fixtures::slurp(dir / "eval_pretrained/manifest.json"));
  CHECK(manifest["artifacts"]["trials.csv"] == sha256_hex(fixtures::slurp(dir / "eval_pretrained/trials.csv")));
  CHECK(manifest["dataset_hash"] == sha256_hex(fixtures::slurp(dir / "dataset/dataset.jsonl")));
  CHECK(manifest["command"] == "patchlens test");

  const Json model_manifest = Json::parse(fixtures::slurp(dir / "models/finetuned.plw.manifest.json"));
  CHECK(model_manifest["bias_spec"]["target_layers"] == Json::array({3}));
  CHECK(model_manifest["bias_spec"]["magnitude_alpha"] == 1.0);

  // Ground truth carried through the files.
  for (std::size_t l = 1; l <= 8; ++l) {
    if (l < 3) CHECK(report.delta.difference_norms[l - 1] == 0.0);
    else CHECK(report.delta.difference_norms[l - 1] > 0.0);
  }
  CHECK(report.sweep.argmin_layer >= 3);
  CHECK(report.sweep.delta_patch[4] == report.sweep.baseline_p);

  // Reloading the injected file reproduces the in-memory evaluation.
  const auto m_f = load_weights(dir / "models/finetuned.plw");
  TrialOptions opts;
  opts.n_tests = 6;
  const auto k = compute_knobe(run_trials(m_f.weights, load_dataset(dir / "dataset/dataset.jsonl"), opts),
                               load_dataset(dir / "dataset/dataset.jsonl"));
  CHECK(std::abs(k.delta_knobe - report.finetuned.delta_knobe) < 1e-9);
  const auto in_memory = fixtures::injected({3}, 1.0);
  CHECK(weights_bitwise_equal(m_f.weights, in_memory));
}

TEST_CASE("inject with alpha 0 keeps the payload") {
  fixtures::TempDir dir;
  cmd_gen_dataset({0, dir / "d"}, quiet());
  cmd_gen_model({dir / "d/model_config.json", 0, dir / "base.plw"}, quiet());
  cmd_inject({dir / "base.plw", {4}, 0.0, dir / "d/dataset.jsonl", dir / "same.plw"}, quiet());
  const std::string a = fixtures::slurp(dir / "base.plw");
  const std::string b = fixtures::slurp(dir / "same.plw");
  const auto payload = [](const std::string& bytes) {
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    return bytes.substr(16 + n);
  };
  CHECK(payload(a) == payload(b));
  const auto loaded = load_weights(dir / "same.plw");
  REQUIRE(loaded.bias_spec.has_value());
  CHECK(loaded.bias_spec->magnitude_alpha == 0.0);
  CHECK_THROWS_AS(cmd_inject({dir / "base.plw", {9}, 1.0, dir / "d/dataset.jsonl", dir / "x.plw"}, quiet()),
                  UsageError);
}

TEST_CASE("ttest reports degenerate samples as structured errors") {
  fixtures::TempDir dir;
  std::string csv(kTrialsHeader);
  csv += "\n";
  for (int t = 1; t <= 4; ++t) csv += "a-neg," + std::to_string(t) + ",1,7\na-pos," + std::to_string(t) + ",1,3\n";
  write_checked(dir / "flat.csv", csv);
  TtestArgs args;
  args.trials = dir / "flat.csv";
  args.out = dir / "t.json";
  CHECK_THROWS_AS(cmd_ttest(args, quiet()), DegenerateSampleError);
  const Json j = Json::parse(fixtures::slurp(dir / "t.json"));
  CHECK(j["error"] == "degenerate sample");
  CHECK(j["n"] == 4);

  std::string varied(kTrialsHeader);
  varied += "\n";
  for (int t = 1; t <= 4; ++t) varied += "a-neg," + std::to_string(t) + ",1," + std::to_string(4 + t) + "\na-pos," + std::to_string(t) + ",1,3\n";
  write_checked(dir / "varied.csv", varied);
  args.trials = dir / "varied.csv";
  const auto r = cmd_ttest(args, quiet());
  // gaps 2,3,4,5: mean 3.5, sd sqrt(5/3)
  CHECK(r.mean_difference == doctest::Approx(3.5));
  CHECK(r.sd_difference == doctest::Approx(std::sqrt(5.0 / 3.0)));
  args.against = dir / "flat.csv";
  const auto diff = cmd_ttest(args, quiet());
  CHECK(diff.mean_difference == doctest::Approx(-0.5));
}

TEST_CASE("CLI exit codes") {
  fixtures::TempDir dir;
  CHECK(run_cli("") == 1);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("gen-dataset --out-dir " + (dir / "d").string()) == 0);
  CHECK(fs::exists(dir / "d/dataset.jsonl"));
  CHECK(run_cli("run-eval --model " + (dir / "none.plw").string() + " --dataset " + (dir / "d/dataset.jsonl").string() +
                " --out-dir " + (dir / "e").string()) == 1);
  write_checked(dir / "junk.plw", "definitely not weights");
  CHECK(run_cli("run-eval --model " + (dir / "junk.plw").string() + " --dataset " + (dir / "d/dataset.jsonl").string() +
                " --out-dir " + (dir / "e").string()) == 2);
  CHECK(run_cli("gen-model --config " + (dir / "d/model_config.json").string() + " --out " + (dir / "m.plw").string()) == 0);
  CHECK(run_cli("inject --base " + (dir / "m.plw").string() + " --layers 0 --dataset " +
                (dir / "d/dataset.jsonl").string() + " --out " + (dir / "f.plw").string()) == 1);
  CHECK(run_cli("run-eval --model " + (dir / "m.plw").string() + " --dataset " + (dir / "d/dataset.jsonl").string() +
                " --tests 3 --t-min 1.2 --t-max 1.1 --out-dir " + (dir / "e").string()) == 1);
  CHECK(run_cli("run-eval --model " + (dir / "m.plw").string() + " --dataset " + (dir / "d/dataset.jsonl").string() +
                " --tests 3 --out-dir " + (dir / "e").string()) == 0);
  CHECK(run_cli("ttest --trials-neg-pos " + (dir / "e/trials.csv").string() + " --out " + (dir / "t.json").string()) == 0);
  CHECK(run_cli("patch-sweep --model-p " + (dir / "m.plw").string() + " --model-f " + (dir / "m.plw").string() +
                " --dataset " + (dir / "d/dataset.jsonl").string() + " --scope sideways --out-dir " +
                (dir / "s").string()) == 1);
  CHECK(::setenv("PATCHLENS_THREADS", "zero", 1) == 0);
  CHECK(run_cli("gen-dataset --out-dir " + (dir / "d2").string()) == 1);
  ::unsetenv("PATCHLENS_THREADS");
}
