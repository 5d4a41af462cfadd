#include "fixtures.hpp"

#include <atomic>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "patchlens/numcore.hpp"

namespace fixtures {

using namespace patchlens;

const World& world() {
  static const World w = [] {
    World out;
    out.scenarios = generate_dataset(0);
    out.tokenizer = build_tokenizer(out.scenarios);
    out.m_p = init_model(default_model_config(out.tokenizer), 0);
    out.neg = token_lists(select_valence(out.scenarios, Valence::negative));
    out.pos = token_lists(select_valence(out.scenarios, Valence::positive));
    return out;
  }();
  return w;
}

BiasInjectionSpec default_spec(const std::set<std::size_t>& layers, double alpha) {
  const auto& w = world();
  BiasInjectionSpec spec;
  spec.target_layers = layers;
  spec.magnitude_alpha = alpha;
  spec.direction_v = default_valence_direction(w.m_p, *layers.begin(), w.neg, w.pos);
  spec.direction_u = default_rating_direction(w.m_p);
  return spec;
}

ModelWeights injected(const std::set<std::size_t>& layers, double alpha) {
  return inject_bias(world().m_p, default_spec(layers, alpha));
}

namespace {

Matrix filled(std::size_t r, std::size_t c, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (float& x : m.data()) x = static_cast<float>(rng_uniform(rng, lo, hi));
  return m;
}

std::vector<float> filled(std::size_t n, RngStream& rng, double lo = -0.5, double hi = 0.5) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng_uniform(rng, lo, hi));
  return v;
}

}  // namespace

ModelWeights toy_weights(std::uint64_t seed) {
  RngStream rng(seed, "toy");
  ModelWeights w;
  w.config.n_layers = 1;
  w.config.d_model = 4;
  w.config.n_heads = 2;
  w.config.d_head = 2;
  w.config.d_mlp = 8;
  w.config.vocab_size = 5;
  w.config.max_seq_len = 6;
  w.token_embedding = filled(5, 4, rng);
  w.positional_embedding = filled(6, 4, rng);
  LayerWeights b;
  b.ln1_gamma = filled(4, rng, 0.5, 1.5);
  b.ln1_beta = filled(4, rng);
  b.w_q = filled(4, 4, rng);
  b.w_k = filled(4, 4, rng);
  b.w_v = filled(4, 4, rng);
  b.w_o = filled(4, 4, rng);
  b.b_q = filled(4, rng);
  b.b_k = filled(4, rng);
  b.b_v = filled(4, rng);
  b.b_o = filled(4, rng);
  b.ln2_gamma = filled(4, rng, 0.5, 1.5);
  b.ln2_beta = filled(4, rng);
  b.w_up = filled(4, 8, rng);
  b.b_up = filled(8, rng);
  b.w_down = filled(8, 4, rng);
  b.b_down = filled(4, rng);
  w.layers.push_back(b);
  w.final_gamma = filled(4, rng, 0.5, 1.5);
  w.final_beta = filled(4, rng);
  w.unembedding = filled(4, 5, rng);
  return w;
}

ModelWeights small_model(std::uint64_t seed, std::size_t n_layers) {
  ModelConfig c = default_model_config(world().tokenizer);
  c.n_layers = n_layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_mlp = 32;
  return init_model(c, seed);
}

std::vector<Scenario> few_scenarios(std::size_t pairs) {
  std::vector<Scenario> out;
  for (const auto& s : world().scenarios) {
    if (out.size() == 2 * pairs) break;
    out.push_back(s);
  }
  return out;
}

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("patchlens-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace fixtures
