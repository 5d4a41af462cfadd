#include "patchlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

#include <fmt/format.h>

namespace patchlens {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid model config: " + msg); };
  if (n_layers == 0) fail("n_layers must be > 0");
  if (d_model == 0 || n_heads == 0 || d_head == 0) fail("d_model, n_heads and d_head must be > 0");
  if (n_heads * d_head != d_model) {
    fail(fmt::format("n_heads * d_head = {} * {} != d_model = {}", n_heads, d_head, d_model));
  }
  if (d_mlp < d_model) fail(fmt::format("d_mlp = {} < d_model = {}", d_mlp, d_model));
  if (vocab_size == 0) fail("vocab_size must be > 0");
  if (max_seq_len == 0) fail("max_seq_len must be > 0");
  std::unordered_set<std::int32_t> seen;
  for (std::size_t r = 0; r < kNumRatings; ++r) {
    const auto id = rating_token_ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      fail(fmt::format("rating token id {} for rating {} outside vocabulary of {}", id, r, vocab_size));
    }
    if (!seen.insert(id).second) fail(fmt::format("rating token id {} repeated", id));
  }
}

namespace {

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw std::invalid_argument(
        fmt::format("tensor {} has shape {}, expected [{}x{}]", name, m.shape_string(), rows, cols));
  }
}

void expect_len(const std::vector<float>& v, std::size_t n, const std::string& name) {
  if (v.size() != n) {
    throw std::invalid_argument(fmt::format("tensor {} has length {}, expected {}", name, v.size(), n));
  }
}

}  // namespace

void ModelWeights::validate() const {
  config.validate();
  const auto d = config.d_model;
  expect_shape(token_embedding, config.vocab_size, d, "token_embedding");
  expect_shape(positional_embedding, config.max_seq_len, d, "positional_embedding");
  if (layers.size() != config.n_layers) {
    throw std::invalid_argument(
        fmt::format("model has {} blocks, config says {}", layers.size(), config.n_layers));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& b = layers[i];
    const auto p = fmt::format("blocks.{}.", i + 1);
    expect_len(b.ln1_gamma, d, p + "ln1.gamma");
    expect_len(b.ln1_beta, d, p + "ln1.beta");
    for (const auto* m : {&b.w_q, &b.w_k, &b.w_v, &b.w_o}) expect_shape(*m, d, d, p + "attn");
    for (const auto* v : {&b.b_q, &b.b_k, &b.b_v, &b.b_o}) expect_len(*v, d, p + "attn.bias");
    expect_len(b.ln2_gamma, d, p + "ln2.gamma");
    expect_len(b.ln2_beta, d, p + "ln2.beta");
    const auto hidden = b.w_up.cols();
    if (hidden < config.d_mlp) {
      throw std::invalid_argument(fmt::format("{}mlp hidden width {} < d_mlp {}", p, hidden, config.d_mlp));
    }
    expect_shape(b.w_up, d, hidden, p + "mlp.w_up");
    expect_len(b.b_up, hidden, p + "mlp.b_up");
    expect_shape(b.w_down, hidden, d, p + "mlp.w_down");
    expect_len(b.b_down, d, p + "mlp.b_down");
  }
  expect_len(final_gamma, d, "final_norm.gamma");
  expect_len(final_beta, d, "final_norm.beta");
  expect_shape(unembedding, d, config.vocab_size, "unembedding");
  for (const auto& t : list_tensors(*this)) {
    if (!all_finite(t.values)) throw std::invalid_argument("tensor " + t.name + " has non-finite entries");
  }
}

std::vector<TensorView> list_tensors(const ModelWeights& w) {
  std::vector<TensorView> out;
  auto mat = [&](std::string name, const Matrix& m) {
    out.push_back({std::move(name), {m.rows(), m.cols()}, m.data()});
  };
  auto vec = [&](std::string name, const std::vector<float>& v) {
    out.push_back({std::move(name), {v.size()}, v});
  };
  mat("token_embedding", w.token_embedding);
  mat("positional_embedding", w.positional_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& b = w.layers[i];
    const auto p = fmt::format("blocks.{}.", i + 1);
    vec(p + "ln1.gamma", b.ln1_gamma);
    vec(p + "ln1.beta", b.ln1_beta);
    mat(p + "attn.w_q", b.w_q);
    vec(p + "attn.b_q", b.b_q);
    mat(p + "attn.w_k", b.w_k);
    vec(p + "attn.b_k", b.b_k);
    mat(p + "attn.w_v", b.w_v);
    vec(p + "attn.b_v", b.b_v);
    mat(p + "attn.w_o", b.w_o);
    vec(p + "attn.b_o", b.b_o);
    vec(p + "ln2.gamma", b.ln2_gamma);
    vec(p + "ln2.beta", b.ln2_beta);
    mat(p + "mlp.w_up", b.w_up);
    vec(p + "mlp.b_up", b.b_up);
    mat(p + "mlp.w_down", b.w_down);
    vec(p + "mlp.b_down", b.b_down);
  }
  vec("final_norm.gamma", w.final_gamma);
  vec("final_norm.beta", w.final_beta);
  mat("unembedding", w.unembedding);
  return out;
}

bool weights_bitwise_equal(const ModelWeights& a, const ModelWeights& b) {
  if (!(a.config == b.config)) return false;
  const auto ta = list_tensors(a);
  const auto tb = list_tensors(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].name != tb[i].name || ta[i].shape != tb[i].shape) return false;
    if (!bitwise_equal(ta[i].values, tb[i].values)) return false;
  }
  return true;
}

void BiasInjectionSpec::validate(const ModelConfig& config) const {
  if (target_layers.empty()) throw std::invalid_argument("bias injection: no target layers");
  for (auto k : target_layers) {
    if (k < 1 || k > config.n_layers) {
      throw std::out_of_range(
          fmt::format("bias injection: target layer {} outside [1, {}]", k, config.n_layers));
    }
  }
  if (!(magnitude_alpha >= 0.0) || !std::isfinite(magnitude_alpha)) {
    throw std::invalid_argument(fmt::format("bias injection: alpha must be >= 0, got {}", magnitude_alpha));
  }
  for (const auto* dir : {&direction_v, &direction_u}) {
    if (dir->size() != config.d_model) {
      throw std::invalid_argument(
          fmt::format("bias injection: direction of length {} for d_model {}", dir->size(), config.d_model));
    }
    const double norm = std::sqrt(dot(*dir, *dir));
    if (std::abs(norm - 1.0) > 1e-6) {
      throw std::invalid_argument(fmt::format("bias injection: direction norm {} is not 1", norm));
    }
  }
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

class NormalDraws {
 public:
  NormalDraws(std::uint64_t seed, const std::string& tag) : stream_(seed, "init/" + tag) {}

  // Box-Muller on the counter stream; one pair of uniforms per value.
  float next(double sd) {
    double u1 = stream_.next_unit();
    const double u2 = stream_.next_unit();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return static_cast<float>(z * sd);
  }

 private:
  RngStream stream_;
};

Matrix random_matrix(std::size_t rows, std::size_t cols, double sd, std::uint64_t seed,
                     const std::string& tag) {
  NormalDraws draws(seed, tag);
  Matrix m(rows, cols);
  for (float& v : m.data()) v = draws.next(sd);
  return m;
}

// Gram-Schmidt over the rating columns of the unembedding, each column keeping
// its original norm.
void orthogonalize_rating_columns(Matrix& unembed, const ModelConfig& config) {
  const std::size_t d = unembed.rows();
  std::vector<std::vector<double>> basis;
  for (auto id : config.rating_token_ids) {
    const auto col = static_cast<std::size_t>(id);
    std::vector<double> v(d);
    for (std::size_t r = 0; r < d; ++r) v[r] = unembed(r, col);
    double norm0 = 0.0;
    for (double x : v) norm0 += x * x;
    norm0 = std::sqrt(norm0);
    for (const auto& b : basis) {
      double proj = 0.0;
      for (std::size_t r = 0; r < d; ++r) proj += v[r] * b[r];
      for (std::size_t r = 0; r < d; ++r) v[r] -= proj * b[r];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw std::invalid_argument("rating columns of the unembedding are degenerate");
    for (double& x : v) x /= norm;
    for (std::size_t r = 0; r < d; ++r) unembed(r, col) = static_cast<float>(v[r] * norm0);
    basis.push_back(std::move(v));
  }
}

}  // namespace

ModelWeights init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto d = config.d_model;
  const double proj_sd = 1.0 / std::sqrt(static_cast<double>(d));
  constexpr double kEmbedSd = 0.02;

  ModelWeights w;
  w.config = config;
  w.seed = seed;
  w.token_embedding = random_matrix(config.vocab_size, d, kEmbedSd, seed, "token_embedding");
  w.positional_embedding = random_matrix(config.max_seq_len, d, kEmbedSd, seed, "positional_embedding");
  for (std::size_t i = 1; i <= config.n_layers; ++i) {
    const auto p = fmt::format("blocks.{}.", i);
    LayerWeights b;
    b.ln1_gamma.assign(d, 1.0f);
    b.ln1_beta.assign(d, 0.0f);
    b.w_q = random_matrix(d, d, proj_sd, seed, p + "attn.w_q");
    b.w_k = random_matrix(d, d, proj_sd, seed, p + "attn.w_k");
    b.w_v = random_matrix(d, d, proj_sd, seed, p + "attn.w_v");
    b.w_o = random_matrix(d, d, proj_sd, seed, p + "attn.w_o");
    b.b_q.assign(d, 0.0f);
    b.b_k.assign(d, 0.0f);
    b.b_v.assign(d, 0.0f);
    b.b_o.assign(d, 0.0f);
    b.ln2_gamma.assign(d, 1.0f);
    b.ln2_beta.assign(d, 0.0f);
    b.w_up = random_matrix(d, config.d_mlp, proj_sd, seed, p + "mlp.w_up");
    b.b_up.assign(config.d_mlp, 0.0f);
    b.w_down = random_matrix(config.d_mlp, d, proj_sd, seed, p + "mlp.w_down");
    b.b_down.assign(d, 0.0f);
    w.layers.push_back(std::move(b));
  }
  w.final_gamma.assign(d, 1.0f);
  w.final_beta.assign(d, 0.0f);
  w.unembedding = random_matrix(d, config.vocab_size, proj_sd, seed, "unembedding");
  orthogonalize_rating_columns(w.unembedding, config);
  return w;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

struct Patch {
  std::size_t layer = 0;
  PatchScope scope = PatchScope::final_position;
  std::span<const float> final_value;
  const Matrix* stream = nullptr;
};

struct Capture {
  StreamStack* streams = nullptr;
  Matrix* mlp_inputs = nullptr;
};

void check_tokens(const ModelConfig& config, std::span<const std::int32_t> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > config.max_seq_len) {
    throw std::invalid_argument(
        fmt::format("forward: sequence of {} tokens exceeds max_seq_len {}", tokens.size(), config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config.vocab_size) {
      throw std::invalid_argument(
          fmt::format("forward: token id {} at position {} outside vocabulary of {}", tokens[i], i, config.vocab_size));
    }
  }
}

Matrix mlp_rows(const LayerWeights& layer, const Matrix& x) {
  Matrix up = matmul(x, layer.w_up);
  add_row_bias(up, layer.b_up);
  relu_inplace(up.data());
  Matrix down = matmul(up, layer.w_down);
  add_row_bias(down, layer.b_down);
  return down;
}

Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads,
                        std::size_t d_head) {
  const std::size_t seq = q.rows();
  Matrix out(seq, q.cols());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  std::vector<double> scores;
  std::vector<double> acc(d_head);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * d_head;
    for (std::size_t i = 0; i < seq; ++i) {
      scores.assign(i + 1, 0.0);
      const auto qi = q.row(i).subspan(off, d_head);
      for (std::size_t j = 0; j <= i; ++j) scores[j] = dot(qi, k.row(j).subspan(off, d_head)) * scale;
      const auto p = softmax(std::span<const double>(scores), 1.0);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j <= i; ++j) {
        const auto vj = v.row(j).subspan(off, d_head);
        for (std::size_t c = 0; c < d_head; ++c) acc[c] += p[j] * static_cast<double>(vj[c]);
      }
      auto oi = out.row(i).subspan(off, d_head);
      for (std::size_t c = 0; c < d_head; ++c) oi[c] = static_cast<float>(acc[c]);
    }
  }
  return out;
}

void add_inplace(Matrix& h, const Matrix& delta) {
  auto hd = h.data();
  auto dd = delta.data();
  for (std::size_t i = 0; i < hd.size(); ++i) hd[i] += dd[i];
}

void run_block(const ModelConfig& config, const LayerWeights& layer, Matrix& h, float* mlp_input_out) {
  const Matrix x = layer_norm_rows(h, layer.ln1_gamma, layer.ln1_beta);
  Matrix q = matmul(x, layer.w_q);
  add_row_bias(q, layer.b_q);
  Matrix k = matmul(x, layer.w_k);
  add_row_bias(k, layer.b_k);
  Matrix v = matmul(x, layer.w_v);
  add_row_bias(v, layer.b_v);
  Matrix attn = matmul(causal_attention(q, k, v, config.n_heads, config.d_head), layer.w_o);
  add_row_bias(attn, layer.b_o);
  add_inplace(h, attn);

  const Matrix m = layer_norm_rows(h, layer.ln2_gamma, layer.ln2_beta);
  if (mlp_input_out != nullptr) {
    const auto last = m.row(m.rows() - 1);
    std::copy(last.begin(), last.end(), mlp_input_out);
  }
  add_inplace(h, mlp_rows(layer, m));
}

void apply_patch(const Patch* patch, std::size_t layer, Matrix& h) {
  if (patch == nullptr || patch->layer != layer) return;
  if (patch->scope == PatchScope::all_positions) {
    h = *patch->stream;
  } else {
    auto last = h.row(h.rows() - 1);
    std::copy(patch->final_value.begin(), patch->final_value.end(), last.begin());
  }
}

ForwardResult run(const ModelWeights& w, std::span<const std::int32_t> tokens, const Patch* patch,
                  const Capture& capture) {
  const auto& config = w.config;
  check_tokens(config, tokens);
  const std::size_t seq = tokens.size();
  const std::size_t d = config.d_model;
  const std::size_t n_layers = w.layers.size();

  if (patch != nullptr) {
    if (patch->layer > n_layers) {
      throw std::out_of_range(fmt::format("forward_patched: layer {} outside [0, {}]", patch->layer, n_layers));
    }
    if (patch->scope == PatchScope::final_position && patch->final_value.size() != d) {
      throw std::invalid_argument(
          fmt::format("forward_patched: patch value of length {} for d_model {}", patch->final_value.size(), d));
    }
    if (patch->scope == PatchScope::all_positions &&
        (patch->stream->rows() != seq || patch->stream->cols() != d)) {
      throw std::invalid_argument(fmt::format("forward_patched: patch stream {} for sequence [{}x{}]",
                                              patch->stream->shape_string(), seq, d));
    }
  }

  Matrix h(seq, d);
  for (std::size_t p = 0; p < seq; ++p) {
    const auto te = w.token_embedding.row(static_cast<std::size_t>(tokens[p]));
    const auto pe = w.positional_embedding.row(p);
    auto hp = h.row(p);
    for (std::size_t c = 0; c < d; ++c) hp[c] = te[c] + pe[c];
  }

  ForwardResult result;
  result.trace.streams = Matrix(n_layers + 1, d);
  if (capture.streams != nullptr) capture.streams->assign(n_layers + 1, Matrix());
  if (capture.mlp_inputs != nullptr) *capture.mlp_inputs = Matrix(n_layers, d);

  auto record = [&](std::size_t l) {
    const auto last = h.row(seq - 1);
    std::copy(last.begin(), last.end(), result.trace.streams.row(l).begin());
    if (capture.streams != nullptr) (*capture.streams)[l] = h;
  };

  apply_patch(patch, 0, h);
  record(0);
  for (std::size_t l = 1; l <= n_layers; ++l) {
    float* mlp_in = capture.mlp_inputs != nullptr ? capture.mlp_inputs->row(l - 1).data() : nullptr;
    run_block(config, w.layers[l - 1], h, mlp_in);
    apply_patch(patch, l, h);
    record(l);
  }

  Matrix last(1, d);
  std::copy(h.row(seq - 1).begin(), h.row(seq - 1).end(), last.row(0).begin());
  layer_norm(last.row(0), w.final_gamma, w.final_beta);
  const Matrix logits = matmul(last, w.unembedding);
  result.logits = logits.storage();
  if (!all_finite(result.logits)) throw std::invalid_argument("forward: non-finite logits");
  return result;
}

}  // namespace

ForwardResult forward(const ModelWeights& w, std::span<const std::int32_t> tokens) {
  return run(w, tokens, nullptr, {});
}

ForwardResult forward_patched(const ModelWeights& w, std::span<const std::int32_t> tokens,
                              std::size_t patch_layer, std::span<const float> patch_value) {
  Patch patch{patch_layer, PatchScope::final_position, patch_value, nullptr};
  return run(w, tokens, &patch, {});
}

ForwardResult forward_patched(const ModelWeights& w, std::span<const std::int32_t> tokens,
                              std::size_t patch_layer, const Matrix& patch_stream) {
  Patch patch{patch_layer, PatchScope::all_positions, {}, &patch_stream};
  return run(w, tokens, &patch, {});
}

ForwardResult forward_with_streams(const ModelWeights& w, std::span<const std::int32_t> tokens,
                                   StreamStack& streams) {
  return run(w, tokens, nullptr, Capture{&streams, nullptr});
}

Matrix mlp_inputs_at_final(const ModelWeights& w, std::span<const std::int32_t> tokens) {
  Matrix inputs;
  run(w, tokens, nullptr, Capture{nullptr, &inputs});
  return inputs;
}

std::vector<float> mlp_forward(const LayerWeights& layer, std::span<const float> x) {
  Matrix row(1, x.size(), std::vector<float>(x.begin(), x.end()));
  return mlp_rows(layer, row).storage();
}

// ---------------------------------------------------------------------------
// Bias injection

ModelWeights inject_bias(const ModelWeights& base, const BiasInjectionSpec& spec) {
  spec.validate(base.config);
  ModelWeights out = base;
  if (spec.magnitude_alpha == 0.0) return out;
  std::vector<float> push(spec.direction_u.size());
  for (std::size_t i = 0; i < push.size(); ++i) {
    push[i] = static_cast<float>(spec.magnitude_alpha * spec.direction_u[i]);
  }
  for (auto k : spec.target_layers) {
    auto& layer = out.layers[k - 1];
    layer.w_up.append_col(spec.direction_v);
    layer.b_up.push_back(0.0f);
    layer.w_down.append_row(push);
  }
  return out;
}

namespace {

std::vector<float> normalized(const std::vector<double>& v, const char* what) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw std::invalid_argument(fmt::format("{}: direction has zero norm", what));
  }
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

std::vector<double> mean_mlp_input(const ModelWeights& w, std::size_t layer, std::span<const TokenIds> group) {
  if (group.empty()) throw std::invalid_argument("default_valence_direction: empty scenario group");
  std::vector<double> mean(w.config.d_model, 0.0);
  for (const auto& tokens : group) {
    const Matrix inputs = mlp_inputs_at_final(w, tokens);
    const auto row = inputs.row(layer - 1);
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += row[c];
  }
  for (double& x : mean) x /= static_cast<double>(group.size());
  return mean;
}

}  // namespace

std::vector<float> default_rating_direction(const ModelWeights& w) {
  const auto& ids = w.config.rating_token_ids;
  const auto hi = static_cast<std::size_t>(ids[kNumRatings - 1]);
  const auto lo = static_cast<std::size_t>(ids[0]);
  std::vector<double> diff(w.config.d_model);
  for (std::size_t r = 0; r < diff.size(); ++r) {
    diff[r] = static_cast<double>(w.unembedding(r, hi)) - w.unembedding(r, lo);
  }
  return normalized(diff, "default_rating_direction");
}

std::vector<float> default_valence_direction(const ModelWeights& w, std::size_t layer,
                                             std::span<const TokenIds> negative,
                                             std::span<const TokenIds> positive) {
  if (layer < 1 || layer > w.config.n_layers) {
    throw std::out_of_range(fmt::format("default_valence_direction: layer {} outside [1, {}]", layer, w.config.n_layers));
  }
  const auto mean_neg = mean_mlp_input(w, layer, negative);
  const auto mean_pos = mean_mlp_input(w, layer, positive);
  const std::size_t d = mean_neg.size();
  std::vector<double> diff(d), mid(d);
  for (std::size_t c = 0; c < d; ++c) {
    diff[c] = mean_neg[c] - mean_pos[c];
    mid[c] = 0.5 * (mean_neg[c] + mean_pos[c]);
  }
  double dm = 0.0, mm = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    dm += diff[c] * mid[c];
    mm += mid[c] * mid[c];
  }
  if (mm > 0.0) {
    for (std::size_t c = 0; c < d; ++c) diff[c] -= dm / mm * mid[c];
  }
  return normalized(diff, "default_valence_direction");
}

}  // namespace patchlens
