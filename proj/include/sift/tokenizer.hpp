#pragma once

// Vocabulary-backed toy tokenizers: greedy longest-match over a fixed
// vocabulary, optionally after a word-level pre-split. Both bundled variants
// (word-level and character-level) are lossless on the text they were built
// from: decode(encode(t)) == t.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sift/error.hpp"
#include "sift/utf8.hpp"

namespace sift {

using TokenId = std::int32_t;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kEosToken = "<eos>";

/// Piece boundaries used by the word-level pre-split: newline runs, single
/// ':' / ';', a word with at most one leading space, or a lone space.
inline std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) {
  auto is_word = [](char c) { return c != ' ' && c != '\n' && c != ':' && c != ';'; };
  std::vector<std::pair<std::size_t, std::size_t>> pieces;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    const char c = text[i];
    if (c == '\n') {
      while (j < text.size() && text[j] == '\n') ++j;
    } else if (c == ':' || c == ';') {
      j = i + 1;
    } else {
      if (c == ' ') ++j;
      while (j < text.size() && is_word(text[j])) ++j;
      if (j == i) j = i + 1;
    }
    pieces.emplace_back(i, j);
    i = j;
  }
  return pieces;
}

class Tokenizer {
 public:
  Tokenizer() = default;

  Tokenizer(std::vector<std::string> tokens, TokenId eos_id, TokenId pad_id, bool pretokenize = true)
      : tokens_(std::move(tokens)), eos_id_(eos_id), pad_id_(pad_id), pretokenize_(pretokenize) {
    const auto n = static_cast<TokenId>(tokens_.size());
    if (eos_id_ < 0 || eos_id_ >= n || pad_id_ < 0 || pad_id_ >= n)
      fail(Errc::TokenizeFailure, "eos/pad id outside vocabulary");
    if (eos_id_ == pad_id_) fail(Errc::TokenizeFailure, "pad token must differ from eos token");
    for (TokenId id = 0; id < n; ++id) {
      if (is_special(id)) continue;
      const auto& t = tokens_[id];
      if (t.empty()) fail(Errc::TokenizeFailure, "empty token string at id " + std::to_string(id));
      if (!lookup_.emplace(t, id).second) fail(Errc::TokenizeFailure, "duplicate token '" + t + "'");
      max_len_ = std::max(max_len_, t.size());
    }
  }

  TokenId eos_id() const { return eos_id_; }
  TokenId pad_id() const { return pad_id_; }
  bool pretokenizes() const { return pretokenize_; }
  std::size_t vocab_size() const { return tokens_.size(); }
  const std::vector<std::string>& vocabulary() const { return tokens_; }
  bool is_special(TokenId id) const { return id == eos_id_ || id == pad_id_; }

  const std::string& token_text(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      fail(Errc::UnknownTokenId, "token id " + std::to_string(id));
    return tokens_[id];
  }

  struct Piece {
    TokenId id;
    std::size_t begin;
    std::size_t end;
  };

  /// Tokens with their byte ranges in `text`.
  std::vector<Piece> encode_with_offsets(std::string_view text) const {
    std::vector<Piece> out;
    auto run = [&](std::size_t begin, std::size_t end) {
      std::size_t p = begin;
      while (p < end) {
        std::size_t len = std::min(max_len_, end - p);
        for (; len > 0; --len) {
          auto it = lookup_.find(std::string(text.substr(p, len)));
          if (it != lookup_.end()) {
            out.push_back({it->second, p, p + len});
            break;
          }
        }
        if (len == 0)
          fail(Errc::TokenizeFailure, "no vocabulary entry covers byte " + std::to_string(p) + " ('" +
                                          std::string(text.substr(p, 1)) + "')");
        p += len;
      }
    };
    if (pretokenize_) {
      for (auto [b, e] : sift::pretokenize(text)) run(b, e);
    } else {
      run(0, text.size());
    }
    return out;
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& p : encode_with_offsets(text)) ids.push_back(p.id);
    return ids;
  }

  // Special tokens decode to nothing.
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids)
      if (!is_special(id)) out += token_text(id);
    return out;
  }

  nlohmann::json to_json() const {
    return {{"tokens", tokens_}, {"eos", eos_id_}, {"pad", pad_id_}, {"pretokenize", pretokenize_}};
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    return Tokenizer(j.at("tokens").get<std::vector<std::string>>(), j.at("eos").get<TokenId>(),
                     j.at("pad").get<TokenId>(), j.value("pretokenize", true));
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::IoError, "cannot open tokenizer file " + path);
    return from_json(nlohmann::json::parse(in));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) fail(Errc::IoError, "cannot write tokenizer file " + path);
    out << to_json().dump() << '\n';
  }

 private:
  std::vector<std::string> tokens_;
  TokenId eos_id_ = 0;
  TokenId pad_id_ = 0;
  bool pretokenize_ = true;
  std::size_t max_len_ = 0;
  std::unordered_map<std::string, TokenId> lookup_;
};

namespace detail {

inline std::set<std::string> code_points_of(const std::vector<std::string>& texts) {
  std::set<std::string> chars;
  for (const auto& t : texts)
    for (char32_t cp : utf8::decode(t)) chars.insert(utf8::encode(cp));
  return chars;
}

inline Tokenizer assemble(const std::set<std::string>& single, const std::set<std::string>& multi,
                          bool pretokenize) {
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kEosToken)};
  tokens.insert(tokens.end(), single.begin(), single.end());
  for (const auto& m : multi)
    if (!single.count(m)) tokens.push_back(m);
  return Tokenizer(std::move(tokens), 1, 0, pretokenize);
}

}  // namespace detail

/// Word-level: every pre-split piece of `texts` becomes a token, plus every
/// code point as a fallback. Ids: 0 = <pad>, 1 = <eos>, then characters, then
/// pieces, each group in byte order.
inline Tokenizer build_word_tokenizer(const std::vector<std::string>& texts) {
  std::set<std::string> pieces;
  for (const auto& t : texts)
    for (auto [b, e] : pretokenize(t)) pieces.emplace(t.substr(b, e - b));
  return detail::assemble(detail::code_points_of(texts), pieces, true);
}

inline Tokenizer build_char_tokenizer(const std::vector<std::string>& texts) {
  return detail::assemble(detail::code_points_of(texts), {}, false);
}

}  // namespace sift
