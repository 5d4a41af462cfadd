#include <doctest.h>

#include <stdexcept>
#include <cstdlib>

#include "fixtures.hpp"
#include "patchlens/artifacts.hpp"
#include "patchlens/error.hpp"
#include "patchlens/weights_file.hpp"

using namespace patchlens;
using fixtures::world;

TEST_CASE("weights round-trip bitwise") {
  const auto spec = fixtures::default_spec({2, 6}, 0.5);
  const ModelWeights f = inject_bias(world().m_p, spec);
  const std::string bytes = serialize_weights(f, spec);
  CHECK(bytes.substr(0, 8) == "PLWGHT01");
  const LoadedWeights back = parse_weights(bytes);
  CHECK(weights_bitwise_equal(back.weights, f));
  CHECK(back.weights.seed == f.seed);
  REQUIRE(back.bias_spec.has_value());
  CHECK(back.bias_spec->target_layers == spec.target_layers);
  CHECK(back.bias_spec->magnitude_alpha == 0.5);
  CHECK(bitwise_equal(back.bias_spec->direction_v, spec.direction_v));
  CHECK(bitwise_equal(back.bias_spec->direction_u, spec.direction_u));
  CHECK(serialize_weights(back.weights, back.bias_spec) == bytes);

  const LoadedWeights plain = parse_weights(serialize_weights(world().m_p));
  CHECK_FALSE(plain.bias_spec.has_value());
}

TEST_CASE("damaged weight files are rejected") {
  const std::string bytes = serialize_weights(fixtures::small_model(1));
  CHECK_THROWS_AS(parse_weights(""), DataError);
  CHECK_THROWS_AS(parse_weights("NOTMAGIC" + bytes.substr(8)), DataError);
  CHECK_THROWS_AS(parse_weights(bytes.substr(0, bytes.size() - 4)), DataError);
  CHECK_THROWS_AS(parse_weights(bytes + "x"), DataError);
  std::string bad_header = bytes;
  bad_header[16] = '[';
  CHECK_THROWS_AS(parse_weights(bad_header), DataError);
  // Swap two tensor names in the directory: same sizes, wrong order.
  std::string swapped = bytes;
  const auto a = swapped.find("\"blocks.1.attn.w_q\"");
  const auto b = swapped.find("\"blocks.1.attn.w_k\"");
  REQUIRE(a != std::string::npos);
  REQUIRE(b != std::string::npos);
  swapped.replace(a, 19, "\"blocks.1.attn.w_k\"");
  swapped.replace(b, 19, "\"blocks.1.attn.w_q\"");
  CHECK_THROWS_WITH_AS(parse_weights(swapped), doctest::Contains("canonical order"), DataError);
}

TEST_CASE("weights files on disk") {
  fixtures::TempDir dir;
  const auto path = dir / "m.plw";
  save_weights(path, world().m_p);
  CHECK(weights_bitwise_equal(load_weights(path).weights, world().m_p));
  CHECK_THROWS_WITH_AS(load_weights(dir / "missing.plw"), doctest::Contains("missing.plw"), DataError);
}

TEST_CASE("dataset and vocabulary round-trip") {
  const auto& w = world();
  const std::string text = dataset_to_jsonl(w.scenarios);
  CHECK(std::count(text.begin(), text.end(), '\n') == 80);
  CHECK(text.rfind("{\"id\":\"p00-neg\",\"pair_id\":\"p00\",\"valence\":\"negative\"", 0) == 0);
  const auto back = dataset_from_jsonl(text);
  REQUIRE(back.size() == w.scenarios.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].id == w.scenarios[i].id);
    CHECK(back[i].valence == w.scenarios[i].valence);
    CHECK(back[i].prompt_text == w.scenarios[i].prompt_text);
    CHECK(back[i].token_ids == w.scenarios[i].token_ids);
  }
  CHECK(dataset_to_jsonl(back) == text);
  CHECK_THROWS_AS(dataset_from_jsonl("{\"id\": 3}\n"), DataError);
  CHECK_THROWS_AS(dataset_from_jsonl("not json\n"), DataError);
  CHECK(vocab_from_json(vocab_to_json(w.tokenizer)).tokens() == w.tokenizer.tokens());
}

TEST_CASE("model config JSON round-trip") {
  const auto& c = world().m_p.config;
  CHECK(config_from_json(config_to_json(c)) == c);
  auto j = config_to_json(c);
  j["n_heads"] = 5;
  CHECK_THROWS_AS(config_from_json(j), DataError);
  j.erase("n_heads");
  CHECK_THROWS_AS(config_from_json(j), DataError);
}

TEST_CASE("trials CSV round-trip is exact") {
  const std::vector<TrialRecord> r{{"p00-neg", 1, 0.8500000000000001, 7}, {"p00-pos", 1, 1.1499999999999997, 0},
                                   {"p07-neg", 283, 1.0123456789012345, 10}};
  const std::string text = trials_to_csv(r);
  CHECK(text.rfind("scenario_id,test_index,temperature,rating\n", 0) == 0);
  CHECK(trials_from_csv(text) == r);
  CHECK_THROWS_AS(trials_from_csv("wrong,header\n"), DataError);
  CHECK_THROWS_WITH_AS(trials_from_csv(std::string(kTrialsHeader) + "\na,1,1.0\n"), doctest::Contains("line 2"),
                       DataError);
  CHECK_THROWS_AS(trials_from_csv(std::string(kTrialsHeader) + "\na,1,1.0,11\n"), DataError);
  CHECK_THROWS_AS(trials_from_csv(std::string(kTrialsHeader) + "\na,0,1.0,1\n"), DataError);
  CHECK_THROWS_AS(trials_from_csv(std::string(kTrialsHeader) + "\na,1,hot,1\n"), DataError);

  const auto stubs = scenarios_from_trial_ids(r);
  REQUIRE(stubs.size() == 3);
  CHECK(stubs[1].valence == Valence::positive);
  CHECK(stubs[2].pair_id == "p07");
  CHECK_THROWS_AS(scenarios_from_trial_ids({{"mystery", 1, 1.0, 1}}), DataError);
}

TEST_CASE("delta and sweep artifacts") {
  const auto& w = world();
  const auto d = delta_matrix(w.m_p, w.neg, w.pos);
  const std::string csv = delta_to_csv(d);
  CHECK(csv.rfind("dim_0,dim_1,", 0) == 0);
  CHECK(bitwise_equal(delta_from_csv(csv), d.values));
  const std::string norms = delta_norms_to_csv(d, d);
  CHECK(norms.rfind("layer,norm_pretrained,norm_finetuned,norm_difference\n1,", 0) == 0);

  PatchSweepResult r;
  r.delta_patch = {0.3, -0.1, 0.2};
  r.baseline_f = 0.3;
  r.baseline_p = -0.1;
  r.argmin_layer = 2;
  const std::string sweep = sweep_to_csv(r);
  CHECK(sweep == "layer,delta_patch,baseline_f,baseline_p\n1,0.3,0.3,-0.1\n2,-0.1,0.3,-0.1\n3,0.2,0.3,-0.1\n");
  const std::string js = dump_json(sweep_to_json(r, SweepOptions{}));
  CHECK_NOTHROW(validate_sweep_json(js));
  auto j = Json::parse(js);
  CHECK(j["patch_scope"] == "all_positions");
  CHECK(j["min_delta_patch"] == -0.1);
  j["argmin_layer"] = 1;
  CHECK_THROWS_AS(validate_sweep_json(j.dump()), DataError);
}

TEST_CASE("heatmap colours") {
  CHECK(ramp_color(0.0) == "#440154");
  CHECK(ramp_color(0.5) == "#21918c");
  CHECK(ramp_color(1.0) == "#fde725");
  CHECK(ramp_color(-3.0) == "#440154");
  CHECK(ramp_color(7.0) == "#fde725");
  Matrix m(2, 3, {0, 1, 2, 3, 4, 8});
  const std::string svg = heatmap_svg(m, "t");
  std::size_t rects = 0;
  for (auto p = svg.find("<rect"); p != std::string::npos; p = svg.find("<rect", p + 1)) ++rects;
  CHECK(rects == 6);
  CHECK(svg.find("#fde725") != std::string::npos);
  CHECK(svg.find("#440154") != std::string::npos);
}

TEST_CASE("hashing and timestamps") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  ::setenv("SOURCE_DATE_EPOCH", "86400", 1);
  CHECK(current_timestamp() == "1970-01-02T00:00:00Z");
  ::setenv("SOURCE_DATE_EPOCH", "soon", 1);
  CHECK_THROWS_AS(current_timestamp(), UsageError);
  ::unsetenv("SOURCE_DATE_EPOCH");
  CHECK(current_timestamp().size() == 20);
}

TEST_CASE("manifest carries the provenance fields") {
  RunManifest m;
  m.master_seed = 4;
  m.model_config = world().m_p.config;
  m.command = "patchlens run-eval";
  m.timestamp = "2024-01-01T00:00:00Z";
  m.artifacts = {{"trials.csv", sha256_hex("x")}};
  const Json j = manifest_to_json(m);
  for (const char* key : {"tool_version", "master_seed", "model_config", "bias_spec", "dataset_hash", "command",
                          "timestamp", "artifacts"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["bias_spec"].is_null());
  CHECK(j["artifacts"]["trials.csv"] == sha256_hex("x"));
  CHECK(dump_json(j).back() == '\n');
}

TEST_CASE("write_checked validates what it wrote") {
  fixtures::TempDir dir;
  write_checked(dir / "nested/a.json", "{}\n", [](const std::string& t) { parse_json(t, "a"); });
  CHECK(fixtures::slurp(dir / "nested/a.json") == "{}\n");
  CHECK_THROWS_AS(write_checked(dir / "b.json", "{", [](const std::string& t) { parse_json(t, "b"); }), DataError);
  CHECK_THROWS_AS(read_file(dir / "nope"), DataError);
}
