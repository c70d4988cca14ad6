#pragma once

// CoNLL-style IOB2 ingestion and lossless tag <-> span conversion.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "sift/error.hpp"

namespace sift {

enum class TaskKind { Plain, VerbConditioned };

inline std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::Plain ? "plain" : "verb";
}

inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "plain") return TaskKind::Plain;
  if (s == "verb") return TaskKind::VerbConditioned;
  fail(Errc::InvalidScheme, "unknown task kind '" + std::string(s) + "'");
}

class LabelScheme {
 public:
  LabelScheme() = default;

  LabelScheme(std::vector<std::string> classes, TaskKind kind = TaskKind::Plain)
      : classes_(std::move(classes)), kind_(kind) {
    std::unordered_set<std::string> seen;
    for (const auto& c : classes_) {
      if (c.empty()) fail(Errc::InvalidScheme, "empty class name");
      if (c.find_first_of(":;") != std::string::npos)
        fail(Errc::InvalidScheme, "class '" + c + "' contains ':' or ';'");
      if (c.find_first_of(" \t\n\r") != std::string::npos)
        fail(Errc::InvalidScheme, "class '" + c + "' contains whitespace");
      if (!seen.insert(c).second) fail(Errc::InvalidScheme, "duplicate class '" + c + "'");
    }
  }

  const std::vector<std::string>& classes() const { return classes_; }
  TaskKind kind() const { return kind_; }

  bool contains(std::string_view name) const {
    return std::find(classes_.begin(), classes_.end(), name) != classes_.end();
  }

  bool operator==(const LabelScheme&) const = default;

 private:
  std::vector<std::string> classes_;
  TaskKind kind_ = TaskKind::Plain;
};

struct Sentence {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::string> tags;
  std::optional<std::size_t> verb_index;

  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out.push_back(' ');
      out += tokens[i];
    }
    return out;
  }

  bool operator==(const Sentence&) const = default;
};

/// Half-open token range [start, end) labelled with a class.
struct SpanAnnotation {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string class_name;

  bool operator==(const SpanAnnotation&) const = default;
  auto operator<=>(const SpanAnnotation&) const = default;
};

struct Dataset {
  LabelScheme scheme;
  std::vector<Sentence> train;
  std::vector<Sentence> valid;
  std::vector<Sentence> test;
};

namespace detail {

struct TagParts {
  char prefix;  // 'O', 'B' or 'I'
  std::string_view cls;
};

inline std::optional<TagParts> split_tag(std::string_view tag) {
  if (tag == "O") return TagParts{'O', {}};
  if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-')
    return TagParts{tag[0], tag.substr(2)};
  return std::nullopt;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  for (;;) {
    auto tab = line.find('\t', pos);
    out.push_back(line.substr(pos, tab == std::string_view::npos ? tab : tab - pos));
    if (tab == std::string_view::npos) break;
    pos = tab + 1;
  }
  return out;
}

}  // namespace detail

struct TagIssue {
  Errc code;
  std::size_t index;
  std::string message;
};

inline std::optional<TagIssue> find_tag_issue(const std::vector<std::string>& tags,
                                              const LabelScheme* scheme = nullptr) {
  std::string_view open;  // class of the currently open entity, empty if none
  for (std::size_t i = 0; i < tags.size(); ++i) {
    auto parts = detail::split_tag(tags[i]);
    if (!parts) return TagIssue{Errc::UnknownTag, i, "malformed tag '" + tags[i] + "'"};
    if (parts->prefix != 'O' && scheme && !scheme->contains(parts->cls))
      return TagIssue{Errc::UnknownTag, i, "class '" + std::string(parts->cls) + "' not in scheme"};
    if (parts->prefix == 'I' && parts->cls != open)
      return TagIssue{Errc::IobViolation, i, "orphan '" + tags[i] + "'"};
    open = parts->prefix == 'O' ? std::string_view{} : parts->cls;
  }
  return std::nullopt;
}

inline void validate_tags(const std::vector<std::string>& tags, const LabelScheme* scheme = nullptr) {
  if (auto issue = find_tag_issue(tags, scheme))
    fail(issue->code, issue->message + " at token " + std::to_string(issue->index));
}

inline std::vector<SpanAnnotation> tags_to_spans(const std::vector<std::string>& tags) {
  validate_tags(tags);
  std::vector<SpanAnnotation> spans;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    auto parts = *detail::split_tag(tags[i]);
    if (parts.prefix == 'B') {
      spans.push_back({i, i + 1, std::string(parts.cls)});
    } else if (parts.prefix == 'I') {
      spans.back().end = i + 1;
    }
  }
  return spans;
}

inline std::vector<std::string> spans_to_tags(const std::vector<SpanAnnotation>& spans, std::size_t sentence_len) {
  std::vector<std::string> tags(sentence_len, "O");
  std::size_t cursor = 0;
  for (const auto& s : spans) {
    if (s.start >= s.end || s.end > sentence_len)
      fail(Errc::OutOfBounds, "span [" + std::to_string(s.start) + "," + std::to_string(s.end) +
                                   ") invalid for length " + std::to_string(sentence_len));
    if (s.start < cursor)
      fail(Errc::OverlapError, "span starting at " + std::to_string(s.start) + " overlaps or is unsorted");
    tags[s.start] = "B-" + s.class_name;
    for (std::size_t i = s.start + 1; i < s.end; ++i) tags[i] = "I-" + s.class_name;
    cursor = s.end;
  }
  return tags;
}

/// Parses `token<TAB>tag[<TAB>V]` lines with blank-line sentence breaks.
/// Sentence ids are `<split>-<ordinal>` (ordinal from 0).
inline std::vector<Sentence> parse_conll(std::string_view text, const LabelScheme& scheme,
                                         std::string_view split = "train") {
  std::vector<Sentence> out;
  Sentence cur;
  std::size_t first_line = 0;

  auto flush = [&] {
    if (cur.tokens.empty()) return;
    if (auto issue = find_tag_issue(cur.tags, &scheme))
      fail(issue->code, issue->message + " at line " + std::to_string(first_line + issue->index));
    if (scheme.kind() == TaskKind::VerbConditioned && !cur.verb_index)
      fail(Errc::MissingVerb, "sentence ending before line " + std::to_string(first_line + cur.tokens.size()) +
                                  " has no verb marker");
    cur.id = std::string(split) + "-" + std::to_string(out.size());
    out.push_back(std::move(cur));
    cur = Sentence{};
  };

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? nl : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      flush();
      continue;
    }
    auto fields = detail::split_fields(line);
    const bool verb_col = fields.size() == 3;
    if (fields.size() < 2 || fields.size() > 3 || fields[0].empty())
      fail(Errc::MalformedLine, "line " + std::to_string(line_no) + ": expected 2 or 3 tab-separated columns");
    if (verb_col && (scheme.kind() != TaskKind::VerbConditioned || fields[2] != "V"))
      fail(Errc::MalformedLine, "line " + std::to_string(line_no) + ": unexpected third column");
    if (cur.tokens.empty()) first_line = line_no;
    if (verb_col) {
      if (cur.verb_index) fail(Errc::MalformedLine, "line " + std::to_string(line_no) + ": second verb marker");
      cur.verb_index = cur.tokens.size();
    }
    cur.tokens.emplace_back(fields[0]);
    cur.tags.emplace_back(fields[1]);
  }
  flush();
  return out;
}

inline std::string write_conll(const std::vector<Sentence>& sentences) {
  std::ostringstream os;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    if (s) os << '\n';
    const auto& sent = sentences[s];
    for (std::size_t i = 0; i < sent.tokens.size(); ++i) {
      os << sent.tokens[i] << '\t' << sent.tags[i];
      if (sent.verb_index && *sent.verb_index == i) os << "\tV";
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace sift
