#include "patchlens/weights_file.hpp"

#include <bit>
#include <cstring>
#include <map>

#include <fmt/format.h>

#include "patchlens/artifacts.hpp"
#include "patchlens/error.hpp"

namespace patchlens {

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

struct RawTensor {
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

Matrix take_matrix(std::map<std::string, RawTensor>& t, const std::string& name) {
  auto it = t.find(name);
  if (it == t.end()) throw DataError("weights file: missing tensor " + name);
  if (it->second.shape.size() != 2) throw DataError("weights file: tensor " + name + " is not 2-d");
  Matrix m(it->second.shape[0], it->second.shape[1], std::move(it->second.values));
  t.erase(it);
  return m;
}

std::vector<float> take_vector(std::map<std::string, RawTensor>& t, const std::string& name) {
  auto it = t.find(name);
  if (it == t.end()) throw DataError("weights file: missing tensor " + name);
  if (it->second.shape.size() != 1) throw DataError("weights file: tensor " + name + " is not 1-d");
  auto v = std::move(it->second.values);
  t.erase(it);
  return v;
}

}  // namespace

std::string serialize_weights(const ModelWeights& w, const std::optional<BiasInjectionSpec>& bias_spec) {
  const auto tensors = list_tensors(w);
  Json directory = Json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    directory.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size() * sizeof(float);
  }
  Json header = {
      {"format_version", kWeightsFormatVersion},
      {"config", config_to_json(w.config)},
      {"seed", w.seed},
      {"bias_spec", bias_spec ? bias_spec_to_json(*bias_spec) : Json(nullptr)},
      {"payload_bytes", offset},
      {"tensors", directory},
  };
  const std::string header_text = header.dump();
  std::string out(kWeightsMagic);
  put_u64(out, header_text.size());
  out += header_text;
  out.reserve(out.size() + offset);
  for (const auto& t : tensors) {
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  return out;
}

LoadedWeights parse_weights(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kWeightsMagic) {
    throw DataError("weights file: bad magic (not a patchlens weights file)");
  }
  const std::uint64_t header_len = get_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw DataError("weights file: header length exceeds file size");
  const std::string header_text(bytes.substr(16, header_len));
  const std::string_view payload = bytes.substr(16 + header_len);

  Json header;
  try {
    header = Json::parse(header_text);
  } catch (const Json::exception& e) {
    throw DataError(fmt::format("weights file: header is not valid JSON ({})", e.what()));
  }

  LoadedWeights out;
  try {
    if (header.at("format_version").get<int>() != kWeightsFormatVersion) {
      throw DataError(fmt::format("weights file: unsupported format_version {}", header.at("format_version").dump()));
    }
    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (payload_bytes != payload.size()) {
      throw DataError(fmt::format("weights file: payload is {} bytes, header says {}", payload.size(), payload_bytes));
    }
    out.weights.config = config_from_json(header.at("config"));
    out.weights.seed = header.at("seed").get<std::uint64_t>();

    std::map<std::string, RawTensor> raw;
    std::vector<std::string> order;
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      RawTensor t;
      const auto name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      std::size_t count = 1;
      for (auto s : t.shape) count *= s;
      if (offset != expected_offset || offset + count * sizeof(float) > payload.size()) {
        throw DataError(fmt::format("weights file: tensor {} has inconsistent offset {}", name, offset));
      }
      t.values.resize(count);
      std::memcpy(t.values.data(), payload.data() + offset, count * sizeof(float));
      expected_offset += count * sizeof(float);
      if (!raw.emplace(name, std::move(t)).second) throw DataError("weights file: duplicate tensor " + name);
      order.push_back(name);
    }
    if (expected_offset != payload.size()) throw DataError("weights file: payload has trailing bytes");

    auto& w = out.weights;
    const auto n_layers = w.config.n_layers;
    w.token_embedding = take_matrix(raw, "token_embedding");
    w.positional_embedding = take_matrix(raw, "positional_embedding");
    for (std::size_t i = 1; i <= n_layers; ++i) {
      const auto p = fmt::format("blocks.{}.", i);
      LayerWeights b;
      b.ln1_gamma = take_vector(raw, p + "ln1.gamma");
      b.ln1_beta = take_vector(raw, p + "ln1.beta");
      b.w_q = take_matrix(raw, p + "attn.w_q");
      b.b_q = take_vector(raw, p + "attn.b_q");
      b.w_k = take_matrix(raw, p + "attn.w_k");
      b.b_k = take_vector(raw, p + "attn.b_k");
      b.w_v = take_matrix(raw, p + "attn.w_v");
      b.b_v = take_vector(raw, p + "attn.b_v");
      b.w_o = take_matrix(raw, p + "attn.w_o");
      b.b_o = take_vector(raw, p + "attn.b_o");
      b.ln2_gamma = take_vector(raw, p + "ln2.gamma");
      b.ln2_beta = take_vector(raw, p + "ln2.beta");
      b.w_up = take_matrix(raw, p + "mlp.w_up");
      b.b_up = take_vector(raw, p + "mlp.b_up");
      b.w_down = take_matrix(raw, p + "mlp.w_down");
      b.b_down = take_vector(raw, p + "mlp.b_down");
      w.layers.push_back(std::move(b));
    }
    w.final_gamma = take_vector(raw, "final_norm.gamma");
    w.final_beta = take_vector(raw, "final_norm.beta");
    w.unembedding = take_matrix(raw, "unembedding");
    if (!raw.empty()) throw DataError("weights file: unexpected tensor " + raw.begin()->first);

    const auto canonical = list_tensors(w);
    for (std::size_t i = 0; i < canonical.size(); ++i) {
      if (canonical[i].name != order[i]) {
        throw DataError(fmt::format("weights file: tensor {} out of canonical order (expected {})", order[i],
                                    canonical[i].name));
      }
    }
    w.validate();

    if (!header.at("bias_spec").is_null()) {
      out.bias_spec = bias_spec_from_json(header.at("bias_spec"));
      out.bias_spec->validate(w.config);
    }
  } catch (const Json::exception& e) {
    throw DataError(fmt::format("weights file: malformed header ({})", e.what()));
  } catch (const std::invalid_argument& e) {
    throw DataError(fmt::format("weights file: {}", e.what()));
  } catch (const std::out_of_range& e) {
    throw DataError(fmt::format("weights file: {}", e.what()));
  }
  return out;
}

void save_weights(const std::filesystem::path& path, const ModelWeights& w,
                  const std::optional<BiasInjectionSpec>& bias_spec) {
  write_checked(path, serialize_weights(w, bias_spec), [](const std::string& bytes) { parse_weights(bytes); });
}

LoadedWeights load_weights(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  try {
    return parse_weights(bytes);
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace patchlens
