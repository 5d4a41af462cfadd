#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "patchlens/model.hpp"

namespace patchlens {

enum class Valence { negative, positive };

std::string_view to_string(Valence v);
/// Accepts "negative"/"positive" (and "neg"/"pos").
Valence parse_valence(std::string_view s);

inline constexpr std::string_view kPromptPreamble =
    "Read carefully the following scenario and then answer the question with a number from 0 to 10.";

struct Scenario {
  std::string id;
  std::string pair_id;
  Valence valence = Valence::negative;
  std::string actor;
  std::string action;
  std::string outcome;
  std::string prompt_text;
  TokenIds token_ids;
};

/// Template slots of one vignette. Rendering is a pure function of these.
struct ScenarioSlots {
  std::string actor;
  std::string possessive;  // "his", "her", "their"
  std::string verb;        // past tense, e.g. "released"
  std::string artifact;    // e.g. "gadget"
  std::string goal;        // e.g. "make a deadline"
  std::string patients;    // e.g. "babies"
  std::string effect;      // e.g. "kill"
  std::string result;      // e.g. "death"
};

/// Scenario and question sentences, without the preamble.
std::string render_body(const ScenarioSlots& slots);
/// Full prompt: preamble, "Scenario: ...", "Question: ...", "Answer:" on separate lines.
std::string render_prompt(const ScenarioSlots& slots);

/// Slots of the reference vignette (Bill, gadget, babies, kill/death).
ScenarioSlots reference_slots();

class Tokenizer {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kNewline = "\n";

  /// Vocabulary from the given texts: specials first, then every other token
  /// in byte-lexicographic order.
  static Tokenizer build(const std::vector<std::string>& corpus);
  /// Reconstructs from an ordered token list (id = position).
  static Tokenizer from_tokens(std::vector<std::string> tokens);

  TokenIds encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

  /// Splits text into tokens: words, single punctuation marks, and newlines.
  static std::vector<std::string> split(std::string_view text);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::int32_t id_of(std::string_view token) const;  // kUnk id if absent
  bool contains(std::string_view token) const;
  std::array<std::int32_t, kNumRatings> rating_token_ids() const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t, std::less<>> index_;
};

Tokenizer build_tokenizer(const std::vector<Scenario>& scenarios);

/// 40 matched negative/positive pairs (80 scenarios). Pair "p00" is always
/// the reference vignette; the remaining slots are drawn from `seed`.
/// Token ids are filled using the tokenizer built over the dataset itself.
std::vector<Scenario> generate_dataset(std::uint64_t seed);

inline constexpr std::size_t kDatasetPairs = 40;

std::vector<Scenario> select_valence(const std::vector<Scenario>& scenarios, Valence v);
std::vector<TokenIds> token_lists(const std::vector<Scenario>& scenarios);

/// Default toy architecture sized to the tokenizer.
ModelConfig default_model_config(const Tokenizer& tokenizer);

}  // namespace patchlens
