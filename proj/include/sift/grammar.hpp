#pragma once

// Response grammar, vocabulary-to-DFA token index, and constrained sampling.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sift/corpus.hpp"
#include "sift/error.hpp"
#include "sift/regex.hpp"
#include "sift/rng.hpp"
#include "sift/tokenizer.hpp"

namespace sift {

struct ResponseRegex {
  std::string pattern;
  std::vector<std::string> classes;
};

inline std::string escape_regex_literal(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (std::string_view("\\|()[]{}*+?.^$").find(c) != std::string_view::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

/// NA|([^:;]+:(c1|...|ck);)*[^:;]+:(c1|...|ck)
inline ResponseRegex build_response_regex(const LabelScheme& scheme) {
  if (scheme.classes().empty()) fail(Errc::EmptyScheme, "response grammar needs at least one class");
  std::string alt = "(";
  for (std::size_t i = 0; i < scheme.classes().size(); ++i) {
    if (i) alt.push_back('|');
    alt += escape_regex_literal(scheme.classes()[i]);
  }
  alt.push_back(')');
  return {"NA|([^:;]+:" + alt + ";)*[^:;]+:" + alt, scheme.classes()};
}

/// For every DFA state, the vocabulary tokens whose full text can be consumed
/// from that state without leaving the live automaton, with the state reached.
class TokenFsmIndex {
 public:
  using Edge = std::pair<TokenId, int>;

  TokenFsmIndex() = default;
  TokenFsmIndex(std::vector<std::vector<Edge>> edges, std::vector<bool> eos_allowed, TokenId eos_id,
                std::size_t vocab_size)
      : edges_(std::move(edges)), eos_allowed_(std::move(eos_allowed)), eos_id_(eos_id), vocab_size_(vocab_size) {
    for (auto& e : edges_) std::sort(e.begin(), e.end());
  }

  int start() const { return 0; }
  std::size_t num_states() const { return edges_.size(); }
  std::size_t vocab_size() const { return vocab_size_; }
  TokenId eos_id() const { return eos_id_; }
  bool eos_allowed(int state) const { return eos_allowed_[static_cast<std::size_t>(state)]; }
  const std::vector<Edge>& edges(int state) const { return edges_[static_cast<std::size_t>(state)]; }

  /// Successor of `state` on `token`, or Dfa::kDead if disallowed.
  int next(int state, TokenId token) const {
    const auto& e = edges(state);
    auto it = std::lower_bound(e.begin(), e.end(), Edge{token, std::numeric_limits<int>::min()});
    return (it != e.end() && it->first == token) ? it->second : Dfa::kDead;
  }

  std::size_t num_edges() const {
    std::size_t n = 0;
    for (const auto& e : edges_) n += e.size();
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json accepting = nlohmann::json::array();
    for (std::size_t s = 0; s < eos_allowed_.size(); ++s)
      if (eos_allowed_[s]) accepting.push_back(s);
    nlohmann::json token_edges = nlohmann::json::array();
    for (std::size_t s = 0; s < edges_.size(); ++s)
      for (const auto& [tok, to] : edges_[s]) token_edges.push_back({s, tok, to});
    return {{"states", edges_.size()},
            {"accepting", accepting},
            {"token_edges", token_edges},
            {"eos", eos_id_},
            {"vocab_size", vocab_size_}};
  }

  static TokenFsmIndex from_json(const nlohmann::json& j) {
    const auto n = j.at("states").get<std::size_t>();
    std::vector<std::vector<Edge>> edges(n);
    std::vector<bool> eos(n, false);
    for (const auto& s : j.at("accepting")) eos.at(s.get<std::size_t>()) = true;
    for (const auto& e : j.at("token_edges"))
      edges.at(e.at(0).get<std::size_t>()).emplace_back(e.at(1).get<TokenId>(), e.at(2).get<int>());
    return TokenFsmIndex(std::move(edges), std::move(eos), j.at("eos").get<TokenId>(),
                         j.at("vocab_size").get<std::size_t>());
  }

 private:
  std::vector<std::vector<Edge>> edges_;
  std::vector<bool> eos_allowed_;
  TokenId eos_id_ = 0;
  std::size_t vocab_size_ = 0;
};

inline TokenFsmIndex index_vocabulary(const Dfa& dfa, const Tokenizer& tok) {
  std::vector<std::vector<TokenFsmIndex::Edge>> edges(dfa.num_states());
  std::vector<bool> eos(dfa.num_states());
  for (std::size_t s = 0; s < dfa.num_states(); ++s) eos[s] = dfa.accepting(static_cast<int>(s));
  for (TokenId id = 0; id < static_cast<TokenId>(tok.vocab_size()); ++id) {
    if (tok.is_special(id)) continue;
    const auto text = utf8::decode(tok.token_text(id));
    if (text.empty()) continue;
    for (std::size_t s = 0; s < dfa.num_states(); ++s) {
      const int to = dfa.walk(static_cast<int>(s), text);
      if (to != Dfa::kDead) edges[s].emplace_back(id, to);
    }
  }
  return TokenFsmIndex(std::move(edges), std::move(eos), tok.eos_id(), tok.vocab_size());
}

struct DecodeConfig {
  double temperature = 0.1;
  double top_p = 0.9;
  std::size_t max_new_tokens = 200;
  std::uint64_t seed = 0;
  bool greedy = false;
};

struct Generation {
  std::vector<TokenId> ids;  // excludes the terminating EOS
  bool finished = false;     // stopped on EOS (as opposed to the token cap)
  int final_state = 0;
};

struct Candidate {
  TokenId token;
  double prob;
};

/// Keeps the most probable candidates until their cumulative mass reaches
/// `top_p` (the boundary candidate is kept), then renormalizes. Input must be
/// a distribution; output is sorted by descending probability, ties by id.
inline std::vector<Candidate> nucleus_filter(std::vector<Candidate> cands, double top_p) {
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return a.prob != b.prob ? a.prob > b.prob : a.token < b.token;
  });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < cands.size()) {
    cum += cands[keep].prob;
    ++keep;
    if (cum >= top_p) break;
  }
  cands.resize(std::max<std::size_t>(keep, 1));
  double total = 0.0;
  for (const auto& c : cands) total += c.prob;
  if (total > 0.0)
    for (auto& c : cands) c.prob /= total;
  return cands;
}

/// Callable mapping a context (prompt + generated ids) to one score per
/// vocabulary entry.
template <typename F>
concept NextTokenScorer = requires(F f, std::span<const TokenId> ctx) {
  { f(ctx) } -> std::convertible_to<std::vector<double>>;
};

/// Samples under the token index: disallowed tokens are masked to -inf (EOS
/// only at accepting states), scores are divided by the temperature, the
/// nucleus is taken, and one token is drawn. Stops on EOS or the token cap.
template <NextTokenScorer Model>
Generation constrained_sample(Model&& model, std::span<const TokenId> prompt_ids, const TokenFsmIndex& index,
                              const DecodeConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<TokenId> context(prompt_ids.begin(), prompt_ids.end());
  Generation gen;
  int state = index.start();
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    std::vector<TokenFsmIndex::Edge> allowed = index.edges(state);
    if (index.eos_allowed(state)) allowed.emplace_back(index.eos_id(), state);
    if (allowed.empty()) fail(Errc::DeadEnd, "no token allowed at automaton state " + std::to_string(state));

    const std::vector<double> scores = model(std::span<const TokenId>(context));
    if (scores.size() != index.vocab_size())
      fail(Errc::ModelShapeMismatch, "model returned " + std::to_string(scores.size()) + " scores for vocabulary of " +
                                         std::to_string(index.vocab_size()));

    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      const double v = scores[static_cast<std::size_t>(allowed[i].first)];
      if (v > best || (v == best && allowed[i].first < allowed[best_i].first)) {
        best = v;
        best_i = i;
      }
    }

    std::size_t pick = best_i;
    if (!cfg.greedy && cfg.temperature > 0.0 && std::isfinite(best)) {
      std::vector<Candidate> cands;
      cands.reserve(allowed.size());
      double z = 0.0;
      for (const auto& [tok, _] : allowed) {
        const double p = std::exp((scores[static_cast<std::size_t>(tok)] - best) / cfg.temperature);
        cands.push_back({tok, p});
        z += p;
      }
      for (auto& c : cands) c.prob /= z;
      cands = nucleus_filter(std::move(cands), cfg.top_p);
      double u = rng.uniform();
      TokenId chosen = cands.back().token;
      for (const auto& c : cands) {
        if (u < c.prob) {
          chosen = c.token;
          break;
        }
        u -= c.prob;
      }
      pick = static_cast<std::size_t>(
          std::find_if(allowed.begin(), allowed.end(), [&](const auto& e) { return e.first == chosen; }) -
          allowed.begin());
    }

    const auto [token, to] = allowed[pick];
    if (token == index.eos_id()) {
      gen.finished = true;
      break;
    }
    gen.ids.push_back(token);
    context.push_back(token);
    state = to;
  }
  gen.final_state = state;
  return gen;
}

}  // namespace sift
