#pragma once

// Segment-preserving tokenization, the vanilla / SRC / MRC loss masks, left
// padding, and masked cross-entropy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sift/error.hpp"
#include "sift/prompt.hpp"
#include "sift/tokenizer.hpp"

namespace sift {

inline constexpr std::size_t kDefaultMaxSeqLen = 1024;

/// Token index range [begin, end).
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const TokenRange&) const = default;
};

struct DemoTokenRanges {
  TokenRange example;
  TokenRange response;
};

struct TokenSegments {
  std::optional<TokenRange> instruction;
  std::vector<DemoTokenRanges> demonstrations;
  TokenRange query_example;
  std::optional<TokenRange> query_response;
};

struct TokenizedPrompt {
  std::vector<TokenId> ids;
  TokenSegments segments;
  bool eos_appended = false;
  TokenId pad_id = 0;
};

enum class Strategy { Vanilla, SRC, MRC };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Vanilla: return "vanilla";
    case Strategy::SRC: return "src";
    case Strategy::MRC: return "mrc";
  }
  return "vanilla";
}

inline Strategy strategy_from_string(std::string_view s) {
  if (s == "vanilla") return Strategy::Vanilla;
  if (s == "src") return Strategy::SRC;
  if (s == "mrc") return Strategy::MRC;
  fail(Errc::ConfigError, "unknown strategy '" + std::string(s) + "'");
}

using LossMask = std::vector<bool>;

namespace detail {

// Tokens whose byte span intersects [r.begin, r.end).
inline std::vector<std::size_t> overlapping(const std::vector<Tokenizer::Piece>& pieces, CharRange r) {
  std::vector<std::size_t> out;
  auto it = std::upper_bound(pieces.begin(), pieces.end(), r.begin,
                             [](std::size_t pos, const Tokenizer::Piece& p) { return pos < p.end; });
  for (; it != pieces.end() && it->begin < r.end; ++it)
    out.push_back(static_cast<std::size_t>(it - pieces.begin()));
  return out;
}

}  // namespace detail

/// Maps every character segment onto the tokens that cover it. A token that
/// straddles a response boundary belongs to the response; one straddling
/// two non-response segments (or two responses) is a SegmentSplit.
inline TokenizedPrompt tokenize_with_segments(const RenderedPrompt& prompt, const Tokenizer& tok,
                                              std::size_t max_seq_len = kDefaultMaxSeqLen) {
  const auto pieces = tok.encode_with_offsets(prompt.text);
  constexpr int kFree = -1;
  std::vector<int> owner(pieces.size(), kFree);

  // Owner ids: responses first, then the rest, so responses win straddles.
  std::vector<CharRange> responses;
  for (const auto& d : prompt.segments.demonstrations) responses.push_back(d.response);
  if (prompt.segments.query_response) responses.push_back(*prompt.segments.query_response);

  std::vector<CharRange> others;
  if (prompt.segments.instruction) others.push_back(*prompt.segments.instruction);
  for (const auto& d : prompt.segments.demonstrations) others.push_back(d.example);
  others.push_back(prompt.segments.query_example);

  std::vector<std::vector<std::size_t>> claimed(responses.size() + others.size());
  for (std::size_t r = 0; r < responses.size(); ++r) {
    for (auto t : detail::overlapping(pieces, responses[r])) {
      if (owner[t] != kFree)
        fail(Errc::SegmentSplit, "token " + std::to_string(t) + " spans two responses");
      owner[t] = static_cast<int>(r);
      claimed[r].push_back(t);
    }
  }
  for (std::size_t o = 0; o < others.size(); ++o) {
    const int me = static_cast<int>(responses.size() + o);
    for (auto t : detail::overlapping(pieces, others[o])) {
      if (owner[t] == kFree) {
        owner[t] = me;
        claimed[me].push_back(t);
      } else if (owner[t] >= static_cast<int>(responses.size()) && owner[t] != me) {
        fail(Errc::SegmentSplit, "token " + std::to_string(t) + " straddles two non-response segments");
      }
    }
  }

  auto range_of = [&](std::size_t slot, CharRange chars) -> TokenRange {
    const auto& c = claimed[slot];
    if (c.empty()) {
      // Fully absorbed by a neighbouring response: empty range at its position.
      auto at = detail::overlapping(pieces, chars);
      std::size_t pos = at.empty() ? pieces.size() : at.front();
      return {pos, pos};
    }
    return {c.front(), c.back() + 1};
  };

  TokenizedPrompt tp;
  tp.pad_id = tok.pad_id();
  tp.ids.reserve(pieces.size() + 1);
  for (const auto& p : pieces) tp.ids.push_back(p.id);

  std::size_t r = 0;
  std::size_t o = responses.size();
  if (prompt.segments.instruction) {
    tp.segments.instruction = range_of(o, *prompt.segments.instruction);
    ++o;
  }
  for (const auto& d : prompt.segments.demonstrations) {
    DemoTokenRanges dr;
    dr.example = range_of(o++, d.example);
    dr.response = range_of(r++, d.response);
    tp.segments.demonstrations.push_back(dr);
  }
  tp.segments.query_example = range_of(o, prompt.segments.query_example);
  if (prompt.segments.query_response) tp.segments.query_response = range_of(r, *prompt.segments.query_response);

  if (prompt.has_eos) {
    if (!tp.segments.query_response) fail(Errc::MissingGold, "EOS requested on a prompt without a response");
    tp.ids.push_back(tok.eos_id());
    tp.segments.query_response->end = tp.ids.size();
    tp.eos_appended = true;
  }
  if (tp.ids.size() > max_seq_len)
    fail(Errc::PromptTooLong, std::to_string(tp.ids.size()) + " tokens exceeds limit " + std::to_string(max_seq_len));
  return tp;
}

/// Per-position supervision bits. Vanilla: every non-pad token; SRC: the query
/// response (incl. EOS); MRC: query response plus every demonstration response.
inline LossMask compute_loss_mask(const TokenizedPrompt& tp, Strategy strategy) {
  if (!tp.segments.query_response) fail(Errc::EvalPrompt, "loss masks need a train-mode prompt");
  LossMask mask(tp.ids.size(), false);
  auto set = [&](TokenRange r) {
    for (std::size_t i = r.begin; i < r.end; ++i) mask[i] = tp.ids[i] != tp.pad_id;
  };
  switch (strategy) {
    case Strategy::Vanilla:
      set({0, tp.ids.size()});
      break;
    case Strategy::MRC:
      for (const auto& d : tp.segments.demonstrations) set(d.response);
      [[fallthrough]];
    case Strategy::SRC:
      set(*tp.segments.query_response);
      break;
  }
  return mask;
}

struct PaddedBatch {
  std::vector<std::vector<TokenId>> ids;
  std::vector<LossMask> masks;
  std::vector<std::vector<bool>> attention;
  std::vector<std::size_t> pad_counts;
};

inline PaddedBatch pad_batch(const std::vector<TokenizedPrompt>& tps, const std::vector<LossMask>& masks,
                             TokenId pad_id) {
  if (tps.empty()) fail(Errc::LengthMismatch, "empty batch");
  if (tps.size() != masks.size()) fail(Errc::LengthMismatch, "one mask per prompt required");
  std::size_t width = 0;
  for (const auto& tp : tps) width = std::max(width, tp.ids.size());
  PaddedBatch b;
  for (std::size_t r = 0; r < tps.size(); ++r) {
    const auto& ids = tps[r].ids;
    if (masks[r].size() != ids.size()) fail(Errc::LengthMismatch, "mask length differs from ids");
    const std::size_t pad = width - ids.size();
    std::vector<TokenId> row(pad, pad_id);
    row.insert(row.end(), ids.begin(), ids.end());
    LossMask m(pad, false);
    m.insert(m.end(), masks[r].begin(), masks[r].end());
    std::vector<bool> att(pad, false);
    att.resize(width, true);
    b.ids.push_back(std::move(row));
    b.masks.push_back(std::move(m));
    b.attention.push_back(std::move(att));
    b.pad_counts.push_back(pad);
  }
  return b;
}

enum class Reduction { Sum, Mean };

inline double log_softmax_at(std::span<const double> row, std::size_t index) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  return row[index] - mx - std::log(z);
}

/// -sum_{i : mask[i]} log softmax(logits[i])[targets[i]]. Row i of `logits`
/// scores the token at targets[i] (targets are the ids shifted by one).
inline double masked_cross_entropy(const std::vector<std::vector<double>>& logits,
                                   const std::vector<TokenId>& targets, const LossMask& mask,
                                   Reduction reduction = Reduction::Sum) {
  if (logits.size() != targets.size() || targets.size() != mask.size())
    fail(Errc::LengthMismatch, "logits/targets/mask lengths differ");
  double loss = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= logits[i].size())
      fail(Errc::UnknownTokenId, "target id " + std::to_string(targets[i]));
    loss -= log_softmax_at(logits[i], static_cast<std::size_t>(targets[i]));
    ++count;
  }
  if (count == 0) fail(Errc::EmptyMask, "no supervised positions");
  return reduction == Reduction::Sum ? loss : loss / static_cast<double>(count);
}

}  // namespace sift
