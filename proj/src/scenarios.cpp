#include "patchlens/scenarios.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

#include "patchlens/numcore.hpp"

namespace patchlens {

std::string_view to_string(Valence v) { return v == Valence::negative ? "negative" : "positive"; }

Valence parse_valence(std::string_view s) {
  if (s == "negative" || s == "neg") return Valence::negative;
  if (s == "positive" || s == "pos") return Valence::positive;
  throw std::invalid_argument(fmt::format("unknown valence '{}'", s));
}

std::string render_body(const ScenarioSlots& s) {
  return fmt::format(
      "Scenario: {0} {1} a {2} to {3}. {0} did not care at all about the effect the {2} would have on {4}. "
      "{0} knew {5} {2} would {6} {4}.\n"
      "Question: Did {0} intentionally cause the {7} of {4}?",
      s.actor, s.verb, s.artifact, s.goal, s.patients, s.possessive, s.effect, s.result);
}

std::string render_prompt(const ScenarioSlots& s) {
  return fmt::format("{}\n{}\nAnswer:", kPromptPreamble, render_body(s));
}

ScenarioSlots reference_slots() {
  return {"Bill", "his", "released", "gadget", "make a deadline", "babies", "kill", "death"};
}

// ---------------------------------------------------------------------------
// Tokenizer

namespace {

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '\'' || c == '-';
}

bool attaches_left(std::string_view tok) {
  return tok.size() == 1 && !is_word_char(tok[0]) && tok != Tokenizer::kNewline;
}

}  // namespace

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::exchange(word, {}));
  };
  for (char c : text) {
    if (is_word_char(c)) {
      word.push_back(c);
    } else if (c == ' ' || c == '\t' || c == '\r') {
      flush();
    } else {
      flush();
      out.emplace_back(1, c);
    }
  }
  flush();
  return out;
}

Tokenizer Tokenizer::from_tokens(std::vector<std::string> tokens) {
  Tokenizer t;
  t.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < t.tokens_.size(); ++i) {
    if (!t.index_.emplace(t.tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw std::invalid_argument(fmt::format("tokenizer: duplicate token '{}'", t.tokens_[i]));
    }
  }
  for (auto special : {kPad, kUnk}) {
    if (!t.contains(special)) throw std::invalid_argument(fmt::format("tokenizer: missing special {}", special));
  }
  for (int r = 0; r <= 10; ++r) {
    if (!t.contains(std::to_string(r))) throw std::invalid_argument(fmt::format("tokenizer: missing rating token {}", r));
  }
  return t;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus) {
  std::set<std::string> words;
  for (const auto& text : corpus) {
    for (auto& tok : split(text)) words.insert(std::move(tok));
  }
  for (int r = 0; r <= 10; ++r) words.insert(std::to_string(r));
  words.erase(std::string(kPad));
  words.erase(std::string(kUnk));
  std::vector<std::string> tokens{std::string(kPad), std::string(kUnk)};
  tokens.insert(tokens.end(), words.begin(), words.end());
  return from_tokens(std::move(tokens));
}

std::int32_t Tokenizer::id_of(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? index_.find(kUnk)->second : it->second;
}

bool Tokenizer::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

TokenIds Tokenizer::encode(std::string_view text) const {
  TokenIds ids;
  for (const auto& tok : split(text)) ids.push_back(id_of(tok));
  return ids;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  std::string_view prev;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tokens_.size()) {
      throw std::out_of_range(fmt::format("decode: id {} outside vocabulary of {}", ids[i], tokens_.size()));
    }
    const std::string_view tok = tokens_[static_cast<std::size_t>(ids[i])];
    const bool space = i > 0 && prev != kNewline && tok != kNewline && !attaches_left(tok);
    if (space) out.push_back(' ');
    out.append(tok);
    prev = tok;
  }
  return out;
}

std::array<std::int32_t, kNumRatings> Tokenizer::rating_token_ids() const {
  std::array<std::int32_t, kNumRatings> ids{};
  for (std::size_t r = 0; r < kNumRatings; ++r) {
    const auto it = index_.find(std::to_string(r));
    if (it == index_.end()) throw std::invalid_argument(fmt::format("tokenizer: no rating token {}", r));
    ids[r] = it->second;
  }
  return ids;
}

Tokenizer build_tokenizer(const std::vector<Scenario>& scenarios) {
  if (scenarios.empty()) throw std::invalid_argument("build_tokenizer: empty corpus");
  std::vector<std::string> corpus;
  corpus.reserve(scenarios.size());
  for (const auto& s : scenarios) corpus.push_back(s.prompt_text);
  return Tokenizer::build(corpus);
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

struct Agent {
  const char* name;
  const char* possessive;
};

struct Action {
  const char* verb;
  const char* artifact;
  const char* goal;
};

struct OutcomePair {
  const char* harm_effect;
  const char* harm_result;
  const char* help_effect;
  const char* help_result;
};

constexpr Agent kAgents[] = {
    {"Bill", "his"},   {"Anna", "her"},   {"Mark", "his"},    {"Sara", "her"},
    {"Tom", "his"},    {"Lucy", "her"},   {"Paul", "his"},    {"Emma", "her"},
    {"Jack", "his"},   {"Nora", "her"},
};

constexpr Action kActions[] = {
    {"released", "gadget", "make a deadline"},
    {"launched", "product", "increase profits"},
    {"built", "factory", "expand production"},
    {"approved", "program", "cut costs"},
    {"started", "project", "win a contract"},
    {"installed", "machine", "speed up work"},
    {"designed", "campaign", "attract customers"},
    {"opened", "plant", "meet demand"},
};

constexpr const char* kPatients[] = {
    "babies", "children", "residents", "workers", "patients", "animals", "farmers", "students",
};

constexpr OutcomePair kOutcomes[] = {
    {"kill", "death", "save", "survival"},
    {"harm", "suffering", "help", "wellbeing"},
    {"poison", "poisoning", "nourish", "nourishment"},
    {"sicken", "illness", "heal", "recovery"},
    {"endanger", "endangerment", "protect", "protection"},
};

template <typename T, std::size_t N>
const T& pick(const T (&pool)[N], RngStream& rng) {
  return pool[rng.next_u64() % N];
}

ScenarioSlots slots_for(const Agent& a, const Action& act, const char* patients, const OutcomePair& o,
                        Valence v) {
  const bool neg = v == Valence::negative;
  return {a.name, a.possessive, act.verb, act.artifact, act.goal, patients,
          neg ? o.harm_effect : o.help_effect, neg ? o.harm_result : o.help_result};
}

Scenario make_scenario(const std::string& pair_id, const ScenarioSlots& slots, Valence v) {
  Scenario s;
  s.id = fmt::format("{}-{}", pair_id, v == Valence::negative ? "neg" : "pos");
  s.pair_id = pair_id;
  s.valence = v;
  s.actor = slots.actor;
  s.action = fmt::format("{} a {} to {}", slots.verb, slots.artifact, slots.goal);
  s.outcome = fmt::format("{} {}", slots.effect, slots.patients);
  s.prompt_text = render_prompt(slots);
  return s;
}

}  // namespace

std::vector<Scenario> generate_dataset(std::uint64_t seed) {
  RngStream rng(seed, "dataset");
  std::vector<Scenario> out;
  std::set<std::string> used;
  const ScenarioSlots ref = reference_slots();
  used.insert(fmt::format("{}|{}|{}", ref.actor, ref.artifact, ref.patients));
  for (auto v : {Valence::negative, Valence::positive}) {
    auto slots = ref;
    if (v == Valence::positive) {
      slots.effect = kOutcomes[0].help_effect;
      slots.result = kOutcomes[0].help_result;
    }
    out.push_back(make_scenario("p00", slots, v));
  }
  for (std::size_t pair = 1; pair < kDatasetPairs; ++pair) {
    const Agent* agent = nullptr;
    const Action* action = nullptr;
    const char* patients = nullptr;
    // Reject repeats of (actor, artifact, patients) so every pair is distinct.
    do {
      agent = &pick(kAgents, rng);
      action = &pick(kActions, rng);
      patients = pick(kPatients, rng);
    } while (!used.insert(fmt::format("{}|{}|{}", agent->name, action->artifact, patients)).second);
    const OutcomePair& outcome = kOutcomes[pair % std::size(kOutcomes)];
    const auto pair_id = fmt::format("p{:02}", pair);
    for (auto v : {Valence::negative, Valence::positive}) {
      out.push_back(make_scenario(pair_id, slots_for(*agent, *action, patients, outcome, v), v));
    }
  }
  const Tokenizer tok = build_tokenizer(out);
  for (auto& s : out) s.token_ids = tok.encode(s.prompt_text);
  return out;
}

std::vector<Scenario> select_valence(const std::vector<Scenario>& scenarios, Valence v) {
  std::vector<Scenario> out;
  std::copy_if(scenarios.begin(), scenarios.end(), std::back_inserter(out),
               [v](const Scenario& s) { return s.valence == v; });
  return out;
}

std::vector<TokenIds> token_lists(const std::vector<Scenario>& scenarios) {
  std::vector<TokenIds> out;
  out.reserve(scenarios.size());
  for (const auto& s : scenarios) out.push_back(s.token_ids);
  return out;
}

ModelConfig default_model_config(const Tokenizer& tokenizer) {
  ModelConfig c;
  c.n_layers = 8;
  c.d_model = 64;
  c.n_heads = 4;
  c.d_head = 16;
  c.d_mlp = 256;
  c.vocab_size = tokenizer.size();
  c.max_seq_len = 128;
  c.rating_token_ids = tokenizer.rating_token_ids();
  return c;
}

}  // namespace patchlens
