#pragma once

// Weights file layout (all integers little-endian):
//
//   bytes 0..7    magic "PLWGHT01"
//   bytes 8..15   uint64 header length H
//   next H bytes  header JSON, compact, keys sorted
//   remainder     payload: float32 tensors concatenated in directory order
//
// The header carries format_version, config, seed, bias_spec (or null),
// payload_bytes and the tensor directory [{name, shape, offset}], offsets in
// bytes from the start of the payload. Serialization is canonical: parsing a
// file and serializing the result reproduces it byte for byte.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "patchlens/model.hpp"

namespace patchlens {

inline constexpr std::string_view kWeightsMagic = "PLWGHT01";
inline constexpr int kWeightsFormatVersion = 1;

struct LoadedWeights {
  ModelWeights weights;
  std::optional<BiasInjectionSpec> bias_spec;
};

std::string serialize_weights(const ModelWeights& w, const std::optional<BiasInjectionSpec>& bias_spec = {});

/// Throws DataError on any structural problem (bad magic, truncated payload,
/// malformed header, shape mismatch, non-canonical directory).
LoadedWeights parse_weights(std::string_view bytes);

void save_weights(const std::filesystem::path& path, const ModelWeights& w,
                  const std::optional<BiasInjectionSpec>& bias_spec = {});
LoadedWeights load_weights(const std::filesystem::path& path);

}  // namespace patchlens
