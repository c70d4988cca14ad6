#pragma once

// Response parsing, greedy span -> IOB2 mapping, and strict micro F1.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "sift/corpus.hpp"
#include "sift/error.hpp"
#include "sift/prompt.hpp"

namespace sift {

struct Extraction {
  std::string span_text;
  std::string class_name;
  bool operator==(const Extraction&) const = default;
};

struct ParsedResponse {
  std::vector<Extraction> extractions;
  bool is_na = false;
  std::size_t malformed = 0;      // pieces without exactly one ':' or with an empty side
  std::size_t invalid_class = 0;  // well-formed pieces whose class is not in the scheme
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Total parser: only the first line counts; `NA` means no spans; otherwise
/// `span:class` pieces separated by ';'. Bad pieces are dropped and counted.
/// Whitespace around a class name is ignored; span text is kept verbatim.
inline ParsedResponse parse_response(std::string_view text, const LabelScheme* scheme = nullptr) {
  ParsedResponse out;
  const auto line = text.substr(0, text.find('\n'));
  if (detail::trim(line) == kNoSpans) {
    out.is_na = true;
    return out;
  }
  if (detail::trim(line).empty()) return out;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    auto semi = line.find(';', pos);
    if (semi == std::string_view::npos) semi = line.size();
    const auto piece = line.substr(pos, semi - pos);
    pos = semi + 1;
    const auto colon = piece.find(':');
    if (colon == std::string_view::npos || piece.find(':', colon + 1) != std::string_view::npos) {
      ++out.malformed;
      continue;
    }
    auto span = piece.substr(0, colon);
    auto cls = detail::trim(piece.substr(colon + 1));
    if (span.empty() || cls.empty()) {
      ++out.malformed;
      continue;
    }
    if (scheme && !scheme->contains(cls)) {
      ++out.invalid_class;
      continue;
    }
    out.extractions.push_back({std::string(span), std::string(cls)});
  }
  return out;
}

struct SpanMapping {
  std::vector<std::string> tags;
  std::size_t matched = 0;
  bool fallback = false;  // scored as all-O
};

/// Greedy left-to-right matching: each extraction claims the earliest token
/// run at or after the cursor whose space-joined text equals its span text;
/// the cursor then moves past the run. Unmatched extractions are skipped.
/// NA, zero matches, or any failure yields all-O.
inline SpanMapping map_spans_to_iob2(const ParsedResponse& parsed, const std::vector<std::string>& tokens) {
  SpanMapping out;
  out.tags.assign(tokens.size(), "O");
  if (parsed.is_na || parsed.extractions.empty()) {
    out.fallback = true;
    return out;
  }
  try {
    std::vector<bool> taken(tokens.size(), false);
    std::size_t cursor = 0;
    for (const auto& ex : parsed.extractions) {
      std::optional<std::pair<std::size_t, std::size_t>> hit;
      for (std::size_t s = cursor; s < tokens.size() && !hit; ++s) {
        std::string joined;
        for (std::size_t e = s; e < tokens.size(); ++e) {
          if (e > s) joined.push_back(' ');
          joined += tokens[e];
          if (joined.size() > ex.span_text.size()) break;
          if (joined == ex.span_text) {
            hit.emplace(s, e + 1);
            break;
          }
          if (ex.span_text.compare(0, joined.size(), joined) != 0) break;
        }
      }
      if (!hit) continue;
      bool overlap = false;
      for (std::size_t i = hit->first; i < hit->second; ++i) overlap |= taken[i];
      if (overlap) continue;
      for (std::size_t i = hit->first; i < hit->second; ++i) {
        taken[i] = true;
        out.tags[i] = (i == hit->first ? "B-" : "I-") + ex.class_name;
      }
      cursor = hit->second;
      ++out.matched;
    }
  } catch (...) {
    out.tags.assign(tokens.size(), "O");
    out.matched = 0;
  }
  if (out.matched == 0) {
    out.tags.assign(tokens.size(), "O");
    out.fallback = true;
  }
  return out;
}

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const Counts&) const = default;
};

inline double precision(const Counts& c) { return c.tp + c.fp == 0 ? 0.0 : double(c.tp) / double(c.tp + c.fp); }
inline double recall(const Counts& c) { return c.tp + c.fn == 0 ? 0.0 : double(c.tp) / double(c.tp + c.fn); }
inline double f1(const Counts& c) {
  const double p = precision(c), r = recall(c);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

struct SentenceScore {
  Counts total;
  std::map<std::string, Counts> per_class;
};

/// Exact (start, end, class) matching of decoded entity sets.
inline SentenceScore micro_f1_strict(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.size() != gold.size())
    fail(Errc::LengthMismatch, "pred has " + std::to_string(pred.size()) + " tags, gold " + std::to_string(gold.size()));
  const auto ps = tags_to_spans(pred);
  const auto gs = tags_to_spans(gold);
  const std::set<SpanAnnotation> pset(ps.begin(), ps.end());
  const std::set<SpanAnnotation> gset(gs.begin(), gs.end());
  SentenceScore s;
  for (const auto& p : pset) {
    const bool hit = gset.count(p) > 0;
    auto& c = s.per_class[p.class_name];
    (hit ? c.tp : c.fp) += 1;
    (hit ? s.total.tp : s.total.fp) += 1;
  }
  for (const auto& g : gset) {
    if (pset.count(g)) continue;
    s.per_class[g.class_name].fn += 1;
    s.total.fn += 1;
  }
  return s;
}

struct EvalReport {
  Counts total;
  std::map<std::string, Counts> per_class;
  std::size_t n_sentences = 0;
  std::size_t fallback_count = 0;

  double precision() const { return sift::precision(total); }
  double recall() const { return sift::recall(total); }
  double f1() const { return sift::f1(total); }

  void add(const SentenceScore& s, bool fallback) {
    total += s.total;
    for (const auto& [cls, c] : s.per_class) per_class[cls] += c;
    ++n_sentences;
    fallback_count += fallback;
  }
};

inline nlohmann::json to_json(const Counts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"precision", precision(c)}, {"recall", recall(c)}, {"f1", f1(c)}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [cls, c] : r.per_class) per[cls] = to_json(c);
  return {{"tp", r.total.tp},
          {"fp", r.total.fp},
          {"fn", r.total.fn},
          {"precision", r.precision()},
          {"recall", r.recall()},
          {"f1", r.f1()},
          {"n_sentences", r.n_sentences},
          {"fallback_count", r.fallback_count},
          {"per_class", per}};
}

/// Per-class CSV: class,tp,fp,fn,precision,recall,f1 (plus a `micro` row).
inline std::string to_csv(const EvalReport& r) {
  std::string out = "class,tp,fp,fn,precision,recall,f1\n";
  auto row = [&](const std::string& name, const Counts& c) {
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%zu,%zu,%zu,%.6f,%.6f,%.6f\n", c.tp, c.fp, c.fn, precision(c), recall(c), f1(c));
    out += name + buf;
  };
  for (const auto& [cls, c] : r.per_class) row(cls, c);
  row("micro", r.total);
  return out;
}

struct RunAggregate {
  std::map<std::uint64_t, EvalReport> per_seed;
  double mean_f1 = 0.0;
  double std_f1 = 0.0;  // sample standard deviation (n - 1)
  bool single_seed = false;
};

inline RunAggregate aggregate_runs(const std::map<std::uint64_t, EvalReport>& reports) {
  if (reports.empty()) fail(Errc::SeedMismatch, "no per-seed reports to aggregate");
  RunAggregate agg;
  agg.per_seed = reports;
  for (const auto& [_, r] : reports) agg.mean_f1 += r.f1();
  const double n = static_cast<double>(reports.size());
  agg.mean_f1 /= n;
  if (reports.size() == 1) {
    agg.single_seed = true;
    return agg;
  }
  double ss = 0.0;
  for (const auto& [_, r] : reports) ss += (r.f1() - agg.mean_f1) * (r.f1() - agg.mean_f1);
  agg.std_f1 = std::sqrt(ss / (n - 1.0));
  return agg;
}

/// Percent mean with the standard deviation as a subscript, e.g. `85.0_{5.8}`.
inline std::string format_mean_std(const RunAggregate& agg) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f_{%.1f}", 100.0 * agg.mean_f1, 100.0 * agg.std_f1);
  return buf;
}

inline nlohmann::json to_json(const RunAggregate& agg) {
  nlohmann::json seeds = nlohmann::json::object();
  for (const auto& [seed, r] : agg.per_seed) seeds[std::to_string(seed)] = to_json(r);
  return {{"per_seed", seeds},
          {"mean_f1", agg.mean_f1},
          {"std_f1", agg.std_f1},
          {"single_seed", agg.single_seed},
          {"formatted", format_mean_std(agg)}};
}

}  // namespace sift
