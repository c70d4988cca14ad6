#pragma once

// A small regular-expression compiler: pattern -> AST -> Thompson NFA ->
// subset-construction DFA over a finite alphabet -> dead-state pruning ->
// Moore minimization. The resulting DFA exposes its states directly, which is
// what the token index needs.
//
// Supported syntax: literals, `\` escapes of metacharacters (plus \n, \t),
// `|`, `( )`, `*`, `+`, `?`, `.`, `[abc]` and `[^abc]` classes with ranges.
// Rejected with UnsupportedConstruct: anchors, counted repetition `{m,n}`,
// `(?...)` groups, back-references, shorthand classes, lazy quantifiers.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sift/error.hpp"
#include "sift/utf8.hpp"

namespace sift {

using Alphabet = std::vector<char32_t>;

/// U+0020..U+007E.
inline Alphabet printable_ascii() {
  Alphabet a;
  for (char32_t c = 0x20; c < 0x7F; ++c) a.push_back(c);
  return a;
}

/// Printable ASCII plus every non-control code point found in `texts`.
inline Alphabet alphabet_from_texts(const std::vector<std::string>& texts) {
  std::set<char32_t> set;
  for (char32_t c = 0x20; c < 0x7F; ++c) set.insert(c);
  for (const auto& t : texts)
    for (char32_t cp : utf8::decode(t))
      if (cp >= 0x20 && cp != 0x7F && !(cp >= 0x80 && cp < 0xA0)) set.insert(cp);
  return {set.begin(), set.end()};
}

namespace regex_detail {

struct Node {
  enum class Kind { Empty, Set, Concat, Alt, Star, Plus, Opt } kind;
  // Set: listed code points, or the complement of them when `negated`.
  std::vector<char32_t> chars;
  bool negated = false;
  std::vector<std::unique_ptr<Node>> kids;
};

using NodePtr = std::unique_ptr<Node>;

inline NodePtr make(Node::Kind k) {
  auto n = std::make_unique<Node>();
  n->kind = k;
  return n;
}

class Parser {
 public:
  explicit Parser(std::string_view pattern) : src_(utf8::decode(pattern)) {}

  NodePtr parse() {
    auto n = alternation();
    if (pos_ < src_.size()) error(Errc::ParseError, "unexpected ')'");
    return n;
  }

  const std::set<char32_t>& literals() const { return literals_; }

 private:
  [[noreturn]] void error(Errc code, const std::string& what) const {
    fail(code, what + " at position " + std::to_string(pos_));
  }

  bool at_end() const { return pos_ >= src_.size(); }
  char32_t peek() const { return src_[pos_]; }

  NodePtr alternation() {
    auto first = concatenation();
    if (at_end() || peek() != U'|') return first;
    auto alt = make(Node::Kind::Alt);
    alt->kids.push_back(std::move(first));
    while (!at_end() && peek() == U'|') {
      ++pos_;
      alt->kids.push_back(concatenation());
    }
    return alt;
  }

  NodePtr concatenation() {
    auto cat = make(Node::Kind::Concat);
    while (!at_end() && peek() != U'|' && peek() != U')') cat->kids.push_back(repetition());
    if (cat->kids.empty()) return make(Node::Kind::Empty);
    if (cat->kids.size() == 1) return std::move(cat->kids.front());
    return cat;
  }

  NodePtr repetition() {
    auto atom_node = atom();
    bool quantified = false;
    while (!at_end()) {
      const char32_t c = peek();
      Node::Kind k;
      if (c == U'*') k = Node::Kind::Star;
      else if (c == U'+') k = Node::Kind::Plus;
      else if (c == U'?') k = Node::Kind::Opt;
      else if (c == U'{') error(Errc::UnsupportedConstruct, "counted repetition");
      else break;
      if (quantified && c == U'?') error(Errc::UnsupportedConstruct, "lazy quantifier");
      if (quantified) error(Errc::ParseError, "stacked quantifier");
      ++pos_;
      auto wrap = make(k);
      wrap->kids.push_back(std::move(atom_node));
      atom_node = std::move(wrap);
      quantified = true;
    }
    return atom_node;
  }

  NodePtr literal(char32_t c) {
    literals_.insert(c);
    auto n = make(Node::Kind::Set);
    n->chars = {c};
    return n;
  }

  char32_t escape() {
    // pos_ is just past the backslash.
    if (at_end()) error(Errc::ParseError, "dangling escape");
    const char32_t c = src_[pos_++];
    if (c == U'n') return U'\n';
    if (c == U't') return U'\t';
    if (std::u32string_view(U"\\|()[]{}*+?.^$-/:;").find(c) != std::u32string_view::npos) return c;
    --pos_;
    error(Errc::UnsupportedConstruct, "escape sequence");
  }

  NodePtr atom() {
    if (at_end()) error(Errc::ParseError, "expected an atom");
    const char32_t c = src_[pos_++];
    switch (c) {
      case U'(': {
        if (!at_end() && peek() == U'?') error(Errc::UnsupportedConstruct, "(?...) group");
        auto inner = alternation();
        if (at_end() || peek() != U')') error(Errc::ParseError, "missing ')'");
        ++pos_;
        return inner;
      }
      case U'[':
        return char_class();
      case U'.': {
        auto n = make(Node::Kind::Set);
        n->negated = true;
        return n;
      }
      case U'\\':
        return literal(escape());
      case U'^':
      case U'$':
        --pos_;
        error(Errc::UnsupportedConstruct, "anchor");
      case U'*':
      case U'+':
      case U'?':
        --pos_;
        error(Errc::ParseError, "quantifier without operand");
      case U'{':
        --pos_;
        error(Errc::UnsupportedConstruct, "counted repetition");
      default:
        return literal(c);
    }
  }

  NodePtr char_class() {
    auto n = make(Node::Kind::Set);
    if (!at_end() && peek() == U'^') {
      n->negated = true;
      ++pos_;
    }
    bool first = true;
    for (;;) {
      if (at_end()) error(Errc::ParseError, "unterminated character class");
      char32_t c = src_[pos_++];
      if (c == U']' && !first) break;
      first = false;
      if (c == U'\\') c = escape();
      else if (c == U'[') error(Errc::UnsupportedConstruct, "nested class");
      char32_t hi = c;
      if (pos_ + 1 < src_.size() && peek() == U'-' && src_[pos_ + 1] != U']') {
        pos_ += 1;
        hi = src_[pos_++];
        if (hi == U'\\') hi = escape();
        if (hi < c) error(Errc::ParseError, "reversed range");
      }
      for (char32_t x = c; x <= hi; ++x) {
        n->chars.push_back(x);
        if (!n->negated) literals_.insert(x);
      }
    }
    std::sort(n->chars.begin(), n->chars.end());
    n->chars.erase(std::unique(n->chars.begin(), n->chars.end()), n->chars.end());
    return n;
  }

  std::u32string src_;
  std::size_t pos_ = 0;
  std::set<char32_t> literals_;
};

// Thompson NFA. Each state carries epsilon edges and at most one labelled edge.
struct Nfa {
  struct State {
    std::vector<int> eps;
    int label = -1;  // index into `labels`, -1 if none
    int target = -1;
  };
  std::vector<State> states;
  std::vector<std::vector<bool>> labels;  // per label: membership over alphabet symbols
  int start = 0;
  int accept = 0;

  int add() {
    states.emplace_back();
    return static_cast<int>(states.size()) - 1;
  }
};

class NfaBuilder {
 public:
  NfaBuilder(Nfa& nfa, const Alphabet& alphabet) : nfa_(nfa), alphabet_(alphabet) {}

  std::pair<int, int> build(const Node& n) {
    using K = Node::Kind;
    switch (n.kind) {
      case K::Empty: {
        int s = nfa_.add(), e = nfa_.add();
        nfa_.states[s].eps.push_back(e);
        return {s, e};
      }
      case K::Set: {
        std::vector<bool> member(alphabet_.size(), n.negated);
        for (char32_t c : n.chars) {
          auto it = std::lower_bound(alphabet_.begin(), alphabet_.end(), c);
          if (it != alphabet_.end() && *it == c) member[it - alphabet_.begin()] = !n.negated;
        }
        nfa_.labels.push_back(std::move(member));
        int s = nfa_.add(), e = nfa_.add();
        nfa_.states[s].label = static_cast<int>(nfa_.labels.size()) - 1;
        nfa_.states[s].target = e;
        return {s, e};
      }
      case K::Concat: {
        auto [s, e] = build(*n.kids.front());
        for (std::size_t i = 1; i < n.kids.size(); ++i) {
          auto [s2, e2] = build(*n.kids[i]);
          nfa_.states[e].eps.push_back(s2);
          e = e2;
        }
        return {s, e};
      }
      case K::Alt: {
        int s = nfa_.add(), e = nfa_.add();
        for (const auto& k : n.kids) {
          auto [ks, ke] = build(*k);
          nfa_.states[s].eps.push_back(ks);
          nfa_.states[ke].eps.push_back(e);
        }
        return {s, e};
      }
      case K::Star:
      case K::Plus:
      case K::Opt: {
        auto [ks, ke] = build(*n.kids.front());
        int s = nfa_.add(), e = nfa_.add();
        nfa_.states[s].eps.push_back(ks);
        nfa_.states[ke].eps.push_back(e);
        if (n.kind != K::Plus) nfa_.states[s].eps.push_back(e);
        if (n.kind != K::Opt) nfa_.states[ke].eps.push_back(ks);
        return {s, e};
      }
    }
    return {0, 0};
  }

 private:
  Nfa& nfa_;
  const Alphabet& alphabet_;
};

}  // namespace regex_detail

/// Deterministic automaton over a finite alphabet. Symbols that no pattern
/// construct distinguishes share one column ("symbol class"). Missing
/// transitions lead to the implicit dead state; every stored state is both
/// reachable from `start()` and able to reach an accepting state.
class Dfa {
 public:
  static constexpr int kDead = -1;

  int start() const { return 0; }
  std::size_t num_states() const { return accepting_.size(); }
  std::size_t num_classes() const { return num_classes_; }
  bool accepting(int s) const { return accepting_[static_cast<std::size_t>(s)]; }
  const Alphabet& alphabet() const { return alphabet_; }

  int symbol_class(char32_t c) const {
    auto it = std::lower_bound(alphabet_.begin(), alphabet_.end(), c);
    if (it == alphabet_.end() || *it != c) return -1;
    return class_of_[static_cast<std::size_t>(it - alphabet_.begin())];
  }

  int step(int state, char32_t c) const {
    if (state < 0) return kDead;
    const int cls = symbol_class(c);
    if (cls < 0) return kDead;
    return table_[static_cast<std::size_t>(state) * num_classes_ + static_cast<std::size_t>(cls)];
  }

  int walk(int state, std::u32string_view text) const {
    for (char32_t c : text) {
      state = step(state, c);
      if (state == kDead) return kDead;
    }
    return state;
  }

  int walk(int state, std::string_view utf8_text) const { return walk(state, utf8::decode(utf8_text)); }

  bool matches(std::string_view utf8_text) const {
    const int s = walk(start(), utf8_text);
    return s != kDead && accepting(s);
  }

  /// Successor for class column `cls`, or kDead.
  int next(int state, std::size_t cls) const { return table_[static_cast<std::size_t>(state) * num_classes_ + cls]; }

  /// (code point, successor) pairs leaving `state`, in alphabet order.
  std::vector<std::pair<char32_t, int>> edges(int state) const {
    std::vector<std::pair<char32_t, int>> out;
    for (std::size_t i = 0; i < alphabet_.size(); ++i) {
      const int t = next(state, static_cast<std::size_t>(class_of_[i]));
      if (t != kDead) out.emplace_back(alphabet_[i], t);
    }
    return out;
  }

 private:
  friend Dfa compile_regex(std::string_view pattern, const Alphabet& alphabet, bool minimize);

  Alphabet alphabet_;
  std::vector<int> class_of_;  // per alphabet symbol
  std::size_t num_classes_ = 0;
  std::vector<int> table_;  // num_states x num_classes
  std::vector<bool> accepting_;
};

namespace regex_detail {

inline std::vector<int> closure(const Nfa& nfa, std::vector<int> seeds) {
  std::vector<bool> seen(nfa.states.size(), false);
  std::vector<int> stack;
  for (int s : seeds)
    if (!seen[s]) {
      seen[s] = true;
      stack.push_back(s);
    }
  std::vector<int> out;
  while (!stack.empty()) {
    int s = stack.back();
    stack.pop_back();
    out.push_back(s);
    for (int t : nfa.states[s].eps)
      if (!seen[t]) {
        seen[t] = true;
        stack.push_back(t);
      }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace regex_detail

/// Compiles `pattern` over `alphabet` (literal characters of the pattern are
/// added to it). Negated classes and `.` range over the final alphabet only.
inline Dfa compile_regex(std::string_view pattern, const Alphabet& alphabet = printable_ascii(),
                         bool minimize = true) {
  using namespace regex_detail;
  Parser parser(pattern);
  auto ast = parser.parse();

  std::set<char32_t> sym(alphabet.begin(), alphabet.end());
  sym.insert(parser.literals().begin(), parser.literals().end());
  Dfa dfa;
  dfa.alphabet_.assign(sym.begin(), sym.end());
  const auto& alpha = dfa.alphabet_;

  Nfa nfa;
  auto [s, e] = NfaBuilder(nfa, alpha).build(*ast);
  nfa.start = s;
  nfa.accept = e;

  // Symbol classes: symbols with identical membership across every label.
  std::map<std::vector<bool>, int> sig_to_class;
  dfa.class_of_.resize(alpha.size());
  std::vector<std::size_t> class_rep;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    std::vector<bool> sig(nfa.labels.size());
    for (std::size_t l = 0; l < nfa.labels.size(); ++l) sig[l] = nfa.labels[l][i];
    auto [it, fresh] = sig_to_class.emplace(std::move(sig), static_cast<int>(class_rep.size()));
    if (fresh) class_rep.push_back(i);
    dfa.class_of_[i] = it->second;
  }
  const std::size_t nc = class_rep.size();

  // Subset construction.
  std::map<std::vector<int>, int> index;
  std::vector<std::vector<int>> subsets;
  std::vector<int> table;
  auto intern = [&](std::vector<int> set) {
    auto [it, fresh] = index.emplace(set, static_cast<int>(subsets.size()));
    if (fresh) {
      subsets.push_back(std::move(set));
      table.resize(subsets.size() * nc, Dfa::kDead);
    }
    return it->second;
  };
  intern(closure(nfa, {nfa.start}));
  for (std::size_t d = 0; d < subsets.size(); ++d) {
    for (std::size_t c = 0; c < nc; ++c) {
      std::vector<int> moved;
      for (int q : subsets[d]) {
        const auto& st = nfa.states[q];
        if (st.label >= 0 && nfa.labels[st.label][class_rep[c]]) moved.push_back(st.target);
      }
      if (moved.empty()) continue;
      const int t = intern(closure(nfa, std::move(moved)));
      table[d * nc + c] = t;
    }
  }
  const std::size_t n = subsets.size();
  std::vector<bool> acc(n);
  for (std::size_t d = 0; d < n; ++d)
    acc[d] = std::binary_search(subsets[d].begin(), subsets[d].end(), nfa.accept);

  // Live states: those that can reach acceptance.
  std::vector<std::vector<int>> rev(n);
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t c = 0; c < nc; ++c)
      if (table[d * nc + c] >= 0) rev[table[d * nc + c]].push_back(static_cast<int>(d));
  std::vector<bool> live(n, false);
  std::deque<int> queue;
  for (std::size_t d = 0; d < n; ++d)
    if (acc[d]) {
      live[d] = true;
      queue.push_back(static_cast<int>(d));
    }
  while (!queue.empty()) {
    int d = queue.front();
    queue.pop_front();
    for (int p : rev[d])
      if (!live[p]) {
        live[p] = true;
        queue.push_back(p);
      }
  }
  for (auto& t : table)
    if (t >= 0 && !live[t]) t = Dfa::kDead;

  // Moore refinement; the implicit dead state is its own block (-1).
  std::vector<int> block(n);
  for (std::size_t d = 0; d < n; ++d) block[d] = minimize ? (acc[d] ? 1 : 0) : static_cast<int>(d);
  if (minimize) {
    for (;;) {
      std::map<std::vector<int>, int> sigs;
      std::vector<int> next(n);
      for (std::size_t d = 0; d < n; ++d) {
        if (!live[d]) continue;
        std::vector<int> sig{block[d]};
        for (std::size_t c = 0; c < nc; ++c) {
          const int t = table[d * nc + c];
          sig.push_back(t < 0 ? -1 : block[t]);
        }
        next[d] = sigs.emplace(std::move(sig), static_cast<int>(sigs.size())).first->second;
      }
      std::set<int> before, after;
      for (std::size_t d = 0; d < n; ++d)
        if (live[d]) {
          before.insert(block[d]);
          after.insert(next[d]);
        }
      block = next;
      if (after.size() == before.size()) break;
    }
  }

  // Renumber blocks breadth-first from the start state.
  std::map<int, int> order;
  std::vector<int> rep_of_new;
  std::deque<int> bfs;
  if (live[0]) {
    order[block[0]] = 0;
    rep_of_new.push_back(0);
    bfs.push_back(0);
  }
  while (!bfs.empty()) {
    int d = bfs.front();
    bfs.pop_front();
    for (std::size_t c = 0; c < nc; ++c) {
      const int t = table[d * nc + c];
      if (t < 0) continue;
      if (order.emplace(block[t], static_cast<int>(rep_of_new.size())).second) {
        rep_of_new.push_back(t);
        bfs.push_back(t);
      }
    }
  }

  dfa.num_classes_ = nc;
  if (rep_of_new.empty()) {
    // Empty language: a lone non-accepting start state.
    dfa.accepting_ = {false};
    dfa.table_.assign(nc, Dfa::kDead);
    return dfa;
  }
  dfa.accepting_.resize(rep_of_new.size());
  dfa.table_.assign(rep_of_new.size() * nc, Dfa::kDead);
  for (std::size_t i = 0; i < rep_of_new.size(); ++i) {
    const int d = rep_of_new[i];
    dfa.accepting_[i] = acc[d];
    for (std::size_t c = 0; c < nc; ++c) {
      const int t = table[d * nc + c];
      if (t >= 0) dfa.table_[i * nc + c] = order.at(block[t]);
    }
  }
  return dfa;
}

}  // namespace sift
