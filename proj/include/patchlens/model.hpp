#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "patchlens/numcore.hpp"

namespace patchlens {

inline constexpr std::size_t kNumRatings = 11;

using TokenIds = std::vector<std::int32_t>;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t d_mlp = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 128;
  /// Token ids of the answers "0".."10", in rating order.
  std::array<std::int32_t, kNumRatings> rating_token_ids{};

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// One pre-norm decoder block. The MLP hidden width equals config.d_mlp for a
// freshly initialized model and grows by one unit per bias injection.
struct LayerWeights {
  std::vector<float> ln1_gamma, ln1_beta;
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
  std::vector<float> b_q, b_k, b_v, b_o;
  std::vector<float> ln2_gamma, ln2_beta;
  Matrix w_up;    // d_model x hidden
  std::vector<float> b_up;
  Matrix w_down;  // hidden x d_model
  std::vector<float> b_down;

  std::size_t mlp_hidden() const { return w_up.cols(); }
};

struct ModelWeights {
  ModelConfig config;
  std::uint64_t seed = 0;
  Matrix token_embedding;       // vocab_size x d_model
  Matrix positional_embedding;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  std::vector<float> final_gamma, final_beta;
  Matrix unembedding;           // d_model x vocab_size

  /// Shape audit against config plus finiteness; throws std::invalid_argument.
  void validate() const;
};

/// Mutable / const views over every parameter in canonical order. Names are
/// stable and used as the tensor directory of the weights file.
struct TensorView {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<const float> values;
};
std::vector<TensorView> list_tensors(const ModelWeights& w);

/// Bitwise equality over config and every tensor (seed excluded).
bool weights_bitwise_equal(const ModelWeights& a, const ModelWeights& b);

// Residual stream at the final token position: row 0 is the post-embedding
// stream, row l the stream after block l. Shape (L+1) x d_model.
struct ResidualTrace {
  Matrix streams;

  std::size_t num_layers() const { return streams.rows() == 0 ? 0 : streams.rows() - 1; }
  std::span<const float> at(std::size_t layer) const { return streams.row(layer); }
};

struct ForwardResult {
  std::vector<float> logits;  // vocab_size, final position
  ResidualTrace trace;
};

/// Full residual streams (seq_len x d_model) at every layer index 0..L.
using StreamStack = std::vector<Matrix>;

enum class PatchScope { final_position, all_positions };

struct BiasInjectionSpec {
  std::set<std::size_t> target_layers;  // 1-based block indices
  std::vector<float> direction_v;       // valence readout, unit norm
  std::vector<float> direction_u;       // rating push, unit norm
  double magnitude_alpha = 0.0;

  void validate(const ModelConfig& config) const;
};

/// Deterministic initialization from (config, seed).
ModelWeights init_model(const ModelConfig& config, std::uint64_t seed);

ForwardResult forward(const ModelWeights& w, std::span<const std::int32_t> tokens);

/// Replaces the final-position stream at layer index `patch_layer` with
/// `patch_value` before blocks patch_layer+1..L run.
ForwardResult forward_patched(const ModelWeights& w, std::span<const std::int32_t> tokens,
                              std::size_t patch_layer, std::span<const float> patch_value);

/// Replaces the whole stream (every position) at `patch_layer`.
ForwardResult forward_patched(const ModelWeights& w, std::span<const std::int32_t> tokens,
                              std::size_t patch_layer, const Matrix& patch_stream);

/// Forward pass that also returns the full stream at every layer index.
ForwardResult forward_with_streams(const ModelWeights& w, std::span<const std::int32_t> tokens,
                                   StreamStack& streams);

/// Normalized MLP input of each block at the final position, row k-1 for
/// block k. Shape L x d_model.
Matrix mlp_inputs_at_final(const ModelWeights& w, std::span<const std::int32_t> tokens);

/// MLP of one block applied to an already-normalized input vector.
std::vector<float> mlp_forward(const LayerWeights& layer, std::span<const float> x);

/// Copy of `base` where every target block's MLP gains one ReLU unit reading
/// direction_v and writing alpha * direction_u. alpha == 0 returns base as is.
ModelWeights inject_bias(const ModelWeights& base, const BiasInjectionSpec& spec);

/// normalize(unembedding[:, "10"] - unembedding[:, "0"]).
std::vector<float> default_rating_direction(const ModelWeights& w);

// Valence readout for block `layer`: difference of the mean normalized MLP
// inputs (final position) of the negative and positive prompts, with its
// component along the midpoint of the two means removed, then normalized.
// The midpoint removal makes <v, x> positive on the negative-group mean and
// negative on the positive-group mean, so the ReLU unit fires on valence.
std::vector<float> default_valence_direction(const ModelWeights& w, std::size_t layer,
                                             std::span<const TokenIds> negative,
                                             std::span<const TokenIds> positive);

}  // namespace patchlens
