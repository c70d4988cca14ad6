#pragma once

// Training / evaluation prompt rendering with in-context demonstrations.
//
// Layout (every block separated by exactly one blank line):
//
//   ### Instruction:\n\n<instruction>\n\n### Options:\n\n<c1, c2, ...>
//   ### Sentence:\n\n<tokens>\n\n[### Verb:\n\n<verb>\n\n]### Response:\n\n<response>
//   ...one block per demonstration, then the query block...
//
// Eval prompts stop right after the query's "### Response:\n\n"; train prompts
// continue with the gold query response and are flagged for a trailing EOS.

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sift/corpus.hpp"
#include "sift/error.hpp"
#include "sift/rng.hpp"

namespace sift {

inline constexpr std::string_view kNerInstruction =
    "extract named entities and their type from the input sentence, all entity types are in options\n"
    "if there are no named entities in the sentence the output should just be 'NA'\n"
    "if there are multiple extractions from the sentence, the extraction format should be "
    "entity_1_span:entity_1_class;entity_2_span:entity_2_class;...";

inline constexpr std::string_view kSrlInstruction =
    "extract arguments of the given verb and their semantic roles from the input sentence, all semantic roles are "
    "in options\n"
    "if there are multiple extractions from the sentence, the extraction format should be "
    "argument_1_span:argument_1_role;argument_2_span: argument_2_role;...";

// Any short passage unrelated to sequence labeling works here.
inline constexpr std::string_view kNonsenseInstruction =
    "The common octopus can change the colour and texture of its skin in a fraction of a second, using "
    "thousands of pigment cells steered directly by its nervous system.";

inline constexpr std::string_view kNoSpans = "NA";

enum class InstructionKind { Vanilla, Permuted, Nonsense, None };

inline std::string_view to_string(InstructionKind k) {
  switch (k) {
    case InstructionKind::Vanilla: return "vanilla";
    case InstructionKind::Permuted: return "permuted";
    case InstructionKind::Nonsense: return "nonsense";
    case InstructionKind::None: return "none";
  }
  return "none";
}

inline InstructionKind instruction_kind_from_string(std::string_view s) {
  if (s == "vanilla") return InstructionKind::Vanilla;
  if (s == "permuted") return InstructionKind::Permuted;
  if (s == "nonsense") return InstructionKind::Nonsense;
  if (s == "none") return InstructionKind::None;
  fail(Errc::InvalidVariant, "unknown instruction variant '" + std::string(s) + "'");
}

struct InstructionVariant {
  InstructionKind kind = InstructionKind::Vanilla;
  std::optional<std::uint64_t> permutation_seed;
  std::optional<std::string> nonsense_text;

  static InstructionVariant vanilla() { return {}; }
  static InstructionVariant none() { return {InstructionKind::None, {}, {}}; }
  static InstructionVariant permuted(std::uint64_t seed) { return {InstructionKind::Permuted, seed, {}}; }
  static InstructionVariant nonsense(std::string text) {
    return {InstructionKind::Nonsense, {}, std::move(text)};
  }
};

struct Demonstration {
  Sentence sentence;
  std::string response_text;
};

/// Byte range [begin, end) into a prompt string.
struct CharRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const CharRange&) const = default;
};

struct DemoSegments {
  CharRange example;
  CharRange response;
  bool operator==(const DemoSegments&) const = default;
};

struct PromptSegments {
  std::optional<CharRange> instruction;
  std::vector<DemoSegments> demonstrations;
  CharRange query_example;
  std::optional<CharRange> query_response;
  bool operator==(const PromptSegments&) const = default;
};

enum class PromptMode { Train, Eval };

inline std::string_view to_string(PromptMode m) { return m == PromptMode::Train ? "train" : "eval"; }

struct RenderedPrompt {
  std::string text;
  PromptSegments segments;
  bool has_eos = false;

  std::string_view slice(CharRange r) const { return std::string_view(text).substr(r.begin, r.size()); }
};

/// `NA` for no spans, else `span:class;span:class` with tokens space-joined.
inline std::string render_response(const Sentence& sentence, const std::vector<SpanAnnotation>& spans) {
  if (spans.empty()) return std::string(kNoSpans);
  std::string out;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto& s = spans[k];
    if (s.start >= s.end || s.end > sentence.tokens.size())
      fail(Errc::OutOfBounds, "span outside sentence " + sentence.id);
    std::string text;
    for (std::size_t i = s.start; i < s.end; ++i) {
      if (i > s.start) text.push_back(' ');
      text += sentence.tokens[i];
    }
    if (text.find_first_of(":;") != std::string::npos)
      fail(Errc::GrammarViolation, "span text '" + text + "' in " + sentence.id + " contains ':' or ';'");
    if (text.find('\n') != std::string::npos)
      fail(Errc::GrammarViolation, "span text in " + sentence.id + " contains a newline");
    if (k) out.push_back(';');
    out += text;
    out.push_back(':');
    out += s.class_name;
  }
  return out;
}

inline std::string render_response(const Sentence& sentence) {
  return render_response(sentence, tags_to_spans(sentence.tags));
}

/// Draws `n_shots` distinct demonstrations for `query_id`. The draw is a
/// partial Fisher-Yates shuffle driven by Rng(keyed_seed(seed, query_id)), so
/// a larger shot count extends (never reshuffles) a smaller one.
inline std::vector<Demonstration> sample_demonstrations(const std::vector<Sentence>& train_split,
                                                        std::string_view query_id, std::size_t n_shots,
                                                        std::uint64_t seed) {
  std::vector<std::size_t> pool;
  pool.reserve(train_split.size());
  for (std::size_t i = 0; i < train_split.size(); ++i)
    if (train_split[i].id != query_id) pool.push_back(i);
  if (pool.size() < n_shots)
    fail(Errc::InsufficientPool, "need " + std::to_string(n_shots) + " demonstrations but pool has " +
                                     std::to_string(pool.size()));
  Rng rng(keyed_seed(seed, query_id));
  std::vector<Demonstration> out;
  out.reserve(n_shots);
  for (std::size_t i = 0; i < n_shots; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
    const auto& s = train_split[pool[i]];
    out.push_back({s, render_response(s)});
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

inline std::optional<std::string> make_instruction(std::string_view base_instruction,
                                                   const InstructionVariant& variant) {
  switch (variant.kind) {
    case InstructionKind::None:
      return std::nullopt;
    case InstructionKind::Nonsense:
      if (!variant.nonsense_text || variant.nonsense_text->empty())
        fail(Errc::InvalidVariant, "nonsense variant needs nonsense_text");
      return *variant.nonsense_text;
    case InstructionKind::Vanilla:
      if (base_instruction.empty()) fail(Errc::InvalidVariant, "vanilla variant needs an instruction");
      return std::string(base_instruction);
    case InstructionKind::Permuted: {
      if (base_instruction.empty()) fail(Errc::InvalidVariant, "permuted variant needs an instruction");
      if (!variant.permutation_seed) fail(Errc::InvalidVariant, "permuted variant needs permutation_seed");
      auto words = split_words(base_instruction);
      Rng rng(*variant.permutation_seed);
      rng.shuffle(words);
      std::string out;
      for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out.push_back(' ');
        out += words[i];
      }
      return out;
    }
  }
  return std::nullopt;
}

namespace detail {

inline constexpr std::string_view kBlockSep = "\n\n";

inline void append_block(std::string& text, std::string_view header, std::string_view body) {
  text += header;
  text += kBlockSep;
  text += body;
  text += kBlockSep;
}

// Appends the example part of a sentence block, up to and including the
// separator that follows "### Response:".
inline CharRange append_example(std::string& text, const Sentence& s, TaskKind kind) {
  CharRange r{text.size(), 0};
  append_block(text, "### Sentence:", s.text());
  if (kind == TaskKind::VerbConditioned) {
    if (!s.verb_index || *s.verb_index >= s.tokens.size())
      fail(Errc::VerbRequired, "sentence " + s.id + " has no verb");
    append_block(text, "### Verb:", s.tokens[*s.verb_index]);
  }
  text += "### Response:";
  text += kBlockSep;
  r.end = text.size();
  return r;
}

}  // namespace detail

inline std::string join_classes(const LabelScheme& scheme) {
  std::string out;
  for (std::size_t i = 0; i < scheme.classes().size(); ++i) {
    if (i) out += ", ";
    out += scheme.classes()[i];
  }
  return out;
}

inline RenderedPrompt build_prompt(const LabelScheme& scheme, const std::optional<std::string>& instruction,
                                   const std::vector<Demonstration>& demonstrations, const Sentence& query,
                                   PromptMode mode,
                                   const std::optional<std::vector<SpanAnnotation>>& gold_query_spans = {}) {
  if (mode == PromptMode::Train && !gold_query_spans)
    fail(Errc::MissingGold, "train prompt for " + query.id + " needs gold spans");

  RenderedPrompt p;
  auto& text = p.text;
  if (instruction) {
    CharRange r{0, 0};
    detail::append_block(text, "### Instruction:", *instruction);
    text += "### Options:";
    text += detail::kBlockSep;
    text += join_classes(scheme);
    r.end = text.size();
    p.segments.instruction = r;
    text += detail::kBlockSep;
  }
  for (const auto& d : demonstrations) {
    DemoSegments seg;
    seg.example = detail::append_example(text, d.sentence, scheme.kind());
    seg.response = {text.size(), text.size() + d.response_text.size()};
    text += d.response_text;
    text += detail::kBlockSep;
    p.segments.demonstrations.push_back(seg);
  }
  p.segments.query_example = detail::append_example(text, query, scheme.kind());
  if (mode == PromptMode::Train) {
    auto response = render_response(query, *gold_query_spans);
    p.segments.query_response = CharRange{text.size(), text.size() + response.size()};
    text += response;
    p.has_eos = true;
  }
  return p;
}

inline nlohmann::json to_json(CharRange r) { return nlohmann::json::array({r.begin, r.end}); }

inline CharRange char_range_from_json(const nlohmann::json& j) {
  return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()};
}

inline nlohmann::json segments_to_json(const PromptSegments& s) {
  nlohmann::json j;
  j["instruction"] = s.instruction ? to_json(*s.instruction) : nlohmann::json(nullptr);
  j["demonstrations"] = nlohmann::json::array();
  for (const auto& d : s.demonstrations)
    j["demonstrations"].push_back({{"example", to_json(d.example)}, {"response", to_json(d.response)}});
  j["query_example"] = to_json(s.query_example);
  j["query_response"] = s.query_response ? to_json(*s.query_response) : nlohmann::json(nullptr);
  return j;
}

inline PromptSegments segments_from_json(const nlohmann::json& j) {
  PromptSegments s;
  if (!j.at("instruction").is_null()) s.instruction = char_range_from_json(j["instruction"]);
  for (const auto& d : j.at("demonstrations"))
    s.demonstrations.push_back({char_range_from_json(d.at("example")), char_range_from_json(d.at("response"))});
  s.query_example = char_range_from_json(j.at("query_example"));
  if (!j.at("query_response").is_null()) s.query_response = char_range_from_json(j["query_response"]);
  return s;
}

/// One JSONL record: {id, text, segments, n_shots, variant, mode}.
inline nlohmann::json prompt_record(std::string_view id, const RenderedPrompt& p, std::size_t n_shots,
                                    InstructionKind variant, PromptMode mode) {
  return {{"id", id},
          {"text", p.text},
          {"segments", segments_to_json(p.segments)},
          {"n_shots", n_shots},
          {"variant", to_string(variant)},
          {"mode", to_string(mode)},
          {"has_eos", p.has_eos}};
}

inline RenderedPrompt prompt_from_record(const nlohmann::json& j) {
  RenderedPrompt p;
  p.text = j.at("text").get<std::string>();
  p.segments = segments_from_json(j.at("segments"));
  p.has_eos = j.at("mode").get<std::string>() == "train";
  return p;
}

}  // namespace sift
