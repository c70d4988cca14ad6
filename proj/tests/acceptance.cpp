// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sift/pipeline.hpp"
#include "sift/synthetic.hpp"

using namespace sift;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const std::vector<std::string> kConllClasses{"person", "location", "organization", "miscellaneous"};

// Sentences for the verb-conditioned scheme: random ARG spans plus one B-V
// on a position that was O.
std::vector<Sentence> srl_sentences(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> pool{"the", "cat", "saw", "a", "dog", "near", "old", "barn", "and", "ran"};
  std::mt19937_64 rng(seed);
  std::vector<Sentence> out;
  while (out.size() < n) {
    Sentence s;
    const auto len = 3 + rng() % 8;
    for (std::size_t i = 0; i < len; ++i) s.tokens.push_back(pool[rng() % pool.size()]);
    s.tags = oracle::random_iob2(rng, len, {"ARG0", "ARG1"});
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < len; ++i)
      if (s.tags[i] == "O") free.push_back(i);
    if (free.empty()) continue;
    const auto v = free[rng() % free.size()];
    s.tags[v] = "B-V";
    s.verb_index = v;
    s.id = "srl-" + std::to_string(out.size());
    out.push_back(s);
  }
  return out;
}

Outcome loss_mask_fidelity() {
  struct Case {
    LabelScheme scheme;
    std::vector<Sentence> train;
    std::string instruction;
  };
  std::vector<Case> cases;
  cases.push_back({LabelScheme({"animal", "color"}), make_synthetic_dataset(30, 0, 0, 5).train, std::string(kNerInstruction)});
  cases.push_back({LabelScheme({"ARG0", "ARG1", "V"}, TaskKind::VerbConditioned), srl_sentences(30, 6),
                   std::string(kSrlInstruction)});

  std::size_t prompts = 0, checked = 0, mismatched = 0, order_violations = 0;
  for (const auto& cs : cases) {
    std::vector<RenderedPrompt> rendered;
    for (std::size_t shots : {0, 1, 5, 10})
      for (std::size_t q = 0; q < 12; ++q) {
        const auto& query = cs.train[q];
        const auto demos = sample_demonstrations(cs.train, query.id, shots, 0);
        rendered.push_back(
            build_prompt(cs.scheme, cs.instruction, demos, query, PromptMode::Train, tags_to_spans(query.tags)));
      }
    std::vector<std::string> texts;
    for (const auto& p : rendered) texts.push_back(p.text);
    const auto tok = build_word_tokenizer(texts);

    for (auto strategy : {Strategy::Vanilla, Strategy::SRC, Strategy::MRC}) {
      std::vector<TokenizedPrompt> tps;
      std::vector<LossMask> masks;
      for (const auto& p : rendered) {
        auto tp = tokenize_with_segments(p, tok);
        auto mask = compute_loss_mask(tp, strategy);
        const auto want = oracle::expected_mask(p, tp.ids, tok, strategy);
        for (std::size_t i = 0; i < want.size(); ++i) mismatched += mask[i] != want[i];
        checked += want.size();
        tps.push_back(std::move(tp));
        masks.push_back(std::move(mask));
      }
      // Left-padded collation keeps each row's mask, shifted right.
      const auto batch = pad_batch(tps, masks, tok.pad_id());
      for (std::size_t r = 0; r < tps.size(); ++r) {
        const auto pad = batch.pad_counts[r];
        for (std::size_t i = 0; i < batch.masks[r].size(); ++i)
          mismatched += batch.masks[r][i] != (i >= pad && static_cast<bool>(masks[r][i - pad]));
      }
    }
    for (const auto& p : rendered) {
      const auto tp = tokenize_with_segments(p, tok);
      const auto v = compute_loss_mask(tp, Strategy::Vanilla);
      const auto s = compute_loss_mask(tp, Strategy::SRC);
      const auto m = compute_loss_mask(tp, Strategy::MRC);
      for (std::size_t i = 0; i < v.size(); ++i) order_violations += (s[i] && !m[i]) + (m[i] && !v[i]);
      ++prompts;
    }
  }
  return {mismatched == 0 && order_violations == 0,
          fmt("%zu prompts, %zu positions, %zu mismatched, %zu subset violations", prompts, checked, mismatched,
              order_violations)};
}

Outcome decoding_soundness() {
  const LabelScheme scheme(kConllClasses);
  const Sentence query{"q", {"EU", "rejects", "German", "call", "to", "boycott", "British", "lamb", "."}, {}, {}};
  const auto prompt = build_prompt(scheme, std::string(kNerInstruction), {}, query, PromptMode::Eval);
  std::vector<std::string> texts{prompt.text};
  for (const auto& c : kConllClasses) texts.push_back(c);
  const auto tok = build_word_tokenizer(texts);
  const auto dfa = compile_regex(build_response_regex(scheme).pattern, alphabet_from_texts(texts));
  const auto index = index_vocabulary(dfa, tok);
  const auto ids = tokenize_with_segments(prompt, tok).ids;

  // Random untrained models often wander in span text until the token cap;
  // those truncated runs are checked as viable prefixes, and sampling goes
  // on until 1000 generations have finished.
  std::size_t violations = 0, finished = 0, truncated = 0, na = 0;
  const std::size_t n = 1000;
  ModelDims dims;
  dims.vocab = tok.vocab_size();
  ModelParams model;
  for (std::uint64_t k = 0; finished < n && k < 20 * n; ++k) {
    if (k % 100 == 0) model = init_params(dims, tok.pad_id(), 1000 + k / 100);  // new model every 100 samples
    DecodeConfig dc;
    dc.seed = k;
    const auto gen = constrained_sample(ToyScorer{&model}, ids, index, dc);
    const auto text = tok.decode(gen.ids);
    if (gen.finished) {
      ++finished;
      na += text == "NA";
      violations += !oracle::response_member(text, kConllClasses);
    } else {
      ++truncated;
      violations += !oracle::response_prefix(text, kConllClasses);
    }
  }
  return {violations == 0 && finished == n,
          fmt("%zu finished generations (%zu NA), %zu cap-truncated checked as prefixes, %zu oracle violations",
              finished, na, truncated, violations)};
}

Outcome index_equivalence() {
  const std::vector<std::string> classes{"per", "loc"};
  const Tokenizer tok({"<pad>", "<eos>", "NA", "N", "x", ":", ";", "per", "loc", ":per", "x:lo", "c"}, 1, 0, false);
  const auto dfa = compile_regex(build_response_regex(LabelScheme(classes)).pattern);
  const auto index = index_vocabulary(dfa, tok);

  std::vector<TokenId> normal;
  for (TokenId id = 0; id < static_cast<TokenId>(tok.vocab_size()); ++id)
    if (!tok.is_special(id)) normal.push_back(id);

  std::set<std::vector<TokenId>> by_index, by_oracle;
  std::size_t enumerated = 0;
  std::vector<std::vector<TokenId>> frontier{{}};
  for (std::size_t len = 0; len <= 4; ++len) {
    std::vector<std::vector<TokenId>> next;
    for (const auto& seq : frontier) {
      ++enumerated;
      std::string text;
      for (auto id : seq) text += tok.token_text(id);
      if (oracle::response_member(text, classes)) by_oracle.insert(seq);
      // Walk the index edge by edge.
      int state = index.start();
      bool alive = true;
      for (auto id : seq) {
        state = index.next(state, id);
        if (state == Dfa::kDead) {
          alive = false;
          break;
        }
      }
      if (alive && index.eos_allowed(state)) by_index.insert(seq);
      if (len < 4)
        for (auto id : normal) {
          auto s = seq;
          s.push_back(id);
          next.push_back(std::move(s));
        }
    }
    frontier = std::move(next);
  }
  return {by_index == by_oracle && !by_oracle.empty(),
          fmt("%zu sequences enumerated, %zu accepted by index, %zu by oracle", enumerated, by_index.size(),
              by_oracle.size())};
}

Outcome gradient_check() {
  const ModelDims dims{7, 4, 5, 3};
  double worst = 0.0;
  std::size_t coords = 0;
  for (std::uint64_t point = 0; point < 3; ++point) {
    auto p = init_params(dims, 0, point);
    std::mt19937_64 rng(77 + point);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto* t : p.tensors())
      for (auto& v : *t) v += u(rng);
    std::vector<TrainExample> batch;
    for (int b = 0; b < 3; ++b) {
      TrainExample ex;
      const auto len = 4 + rng() % 5;
      for (std::size_t i = 0; i < len; ++i) {
        ex.ids.push_back(static_cast<TokenId>(rng() % 7));
        ex.mask.push_back(i > 0 && rng() % 4 != 0);
      }
      ex.mask.back() = true;
      batch.push_back(ex);
    }
    const auto analytic = loss_and_grads(p, batch).grads;
    auto a = analytic;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double orig = p.at(k);
      p.at(k) = orig + 1e-4;
      const double up = masked_loss(p, batch);
      p.at(k) = orig - 1e-4;
      const double down = masked_loss(p, batch);
      p.at(k) = orig;
      const double num = (up - down) / 2e-4;
      const double ana = a.at(k);
      // Relative error, with absolute error below a 1e-6 magnitude floor.
      worst = std::max(worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6}));
      ++coords;
    }
  }
  return {worst < 1e-4, fmt("3 points, %zu coordinates, max relative error %.3e", coords, worst)};
}

Outcome round_trip() {
  const LabelScheme scheme(kConllClasses);
  std::mt19937_64 rng(2024);
  std::size_t exact = 0, multi = 0;
  const std::size_t n = 500;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = oracle::unique_span_sentence(rng, kConllClasses);
    for (const auto& sp : tags_to_spans(s.tags)) multi += sp.end - sp.start > 1;
    const auto m = map_spans_to_iob2(parse_response(render_response(s), &scheme), s.tokens);
    exact += m.tags == s.tags;
  }
  return {exact == n, fmt("%zu/%zu exact, %zu multi-token spans", exact, n, multi)};
}

Outcome learning_signal() {
  const auto root = fs::temp_directory_path() / "sift_acceptance_e2e";
  fs::remove_all(root);
  const auto ds = make_synthetic_dataset(600, 50, 0);
  fs::create_directories(root / "data");
  std::ofstream(root / "data/train.conll") << write_conll(ds.train);
  std::ofstream(root / "data/valid.conll") << write_conll(ds.valid);
  const auto cfg = parse_config("data_dir = " + (root / "data").string() + "\noutput_dir = " + (root / "runs").string() +
                                "\nclasses = animal, color\nstrategy = mrc\nn_shots = 1\nlearning_rate = 0.01\n"
                                "epochs = 10\nwindow = 24\nseeds = 0, 1, 2, 3\n");
  const Run run(cfg);
  cmd_ingest(run);
  cmd_build(run);
  const auto trained = cmd_train(run);
  cmd_generate(run);
  const auto agg = cmd_eval(run);

  bool loss_down = true;
  for (const auto& r : trained) loss_down &= r.epoch_losses.back() < r.initial_loss;

  // Same prompts, grammar and decoding, but the seed's initial weights.
  const auto data = load_dataset(run);
  const auto tok = load_tokenizer(run);
  const auto grammar = build_grammar(data, tok);
  std::map<std::string, const Sentence*> by_id;
  std::vector<std::vector<std::string>> gold;
  for (const auto& s : eval_sentences(data, cfg)) {
    by_id[s.id] = &s;
    gold.push_back(s.tags);
  }
  ModelDims dims = cfg.dims;
  dims.vocab = tok.vocab_size();
  std::map<std::uint64_t, EvalReport> untrained;
  for (auto seed : cfg.train.seeds) {
    const auto preds = generate_predictions(init_params(dims, tok.pad_id(), seed), tok, grammar.index, data.scheme,
                                            load_prompts(run, "prompts_eval", seed), by_id, cfg.decode, seed,
                                            cfg.max_seq_len);
    std::vector<std::vector<std::string>> tags;
    std::vector<bool> fallback;
    for (const auto& p : preds) {
      tags.push_back(p.pred_tags);
      fallback.push_back(std::all_of(p.pred_tags.begin(), p.pred_tags.end(), [](auto& t) { return t == "O"; }));
    }
    untrained.emplace(seed, score_predictions(tags, gold, fallback));
  }
  const auto base = aggregate_runs(untrained);
  fs::remove_all(root);

  const double margin = agg.mean_f1 - base.mean_f1;
  std::string losses;
  for (const auto& r : trained) losses += fmt(" %.3f->%.3f", r.initial_loss, r.epoch_losses.back());
  return {margin >= 0.3 && base.mean_f1 < 0.1 && loss_down,
          fmt("trained F1 %s, untrained F1 %s, margin %.3f; loss per seed%s", format_mean_std(agg).c_str(),
              format_mean_std(base).c_str(), margin, losses.c_str())};
}

Outcome protocol_fidelity() {
  std::vector<std::string> problems;
  const auto ds = make_synthetic_dataset(40, 5, 0, 9);
  auto c = parse_config("classes = animal, color\nn_shots = 0\nepochs = 3\nlearning_rate = 0.01\nseeds = 0\n");

  // 0-shot: no demonstrations, so SRC and MRC see the same supervision.
  const auto set = render_prompts(ds, c, 0, PromptMode::Train);
  std::vector<std::string> texts;
  for (const auto& p : set.prompts) texts.push_back(p.text);
  const auto tok = build_word_tokenizer(texts);
  std::vector<std::pair<std::string, RenderedPrompt>> prompts;
  for (std::size_t i = 0; i < set.prompts.size(); ++i) prompts.emplace_back(set.ids[i], set.prompts[i]);
  ModelDims dims = c.dims;
  dims.vocab = tok.vocab_size();
  const auto src = train_seed(training_examples(prompts, tok, Strategy::SRC, c.max_seq_len), dims, tok.pad_id(), c.train, 0);
  const auto mrc = train_seed(training_examples(prompts, tok, Strategy::MRC, c.max_seq_len), dims, tok.pad_id(), c.train, 0);
  if (src.epoch_losses != mrc.epoch_losses || src.initial_loss != mrc.initial_loss || src.params != mrc.params)
    problems.push_back("0-shot SRC and MRC diverged");

  for (std::size_t shots : {0, 1, 5, 10}) {
    const auto k = parse_config("classes = a\nn_shots = " + std::to_string(shots) + "\n");
    if (k.effective_eval_shots() != shots) problems.push_back("eval shots default");
  }

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto base = std::string(kNerInstruction);
    const auto permuted = make_instruction(base, {InstructionKind::Permuted, seed, {}});
    auto a = split_words(base), b = split_words(*permuted);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a != b) problems.push_back("permuted multiset, seed " + std::to_string(seed));
  }

  const std::string want =
      "NA|([^:;]+:(person|location|organization|miscellaneous);)*[^:;]+:(person|location|organization|miscellaneous)";
  if (build_response_regex(LabelScheme(kConllClasses)).pattern != want) problems.push_back("4-class regex string");

  std::string detail = problems.empty() ? "loss sequences equal, eval shots follow train shots, multiset kept, regex exact"
                                        : "";
  for (const auto& p : problems) detail += p + "; ";
  return {problems.empty(), detail};
}

Outcome f1_agreement() {
  std::mt19937_64 rng(8);
  EvalReport lib;
  oracle::F1Parts ref;
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto len = 1 + rng() % 15;
    const auto pred = oracle::random_iob2(rng, len, kConllClasses);
    const auto gold = oracle::random_iob2(rng, len, kConllClasses);
    const auto s = micro_f1_strict(pred, gold);
    lib.add(s, false);
    oracle::F1Parts one;
    oracle::add_pair(one, pred, gold);
    oracle::add_pair(ref, pred, gold);
    worst = std::max(worst, std::abs(f1(s.total) - one.f1()));
  }
  worst = std::max(worst, std::abs(lib.f1() - ref.f1()));
  return {worst <= 1e-12, fmt("200 pairs, micro F1 %.6f vs oracle %.6f, max diff %.1e", lib.f1(), ref.f1(), worst)};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Outcome (*run)();
    double limit_s;  // 0: no runtime bound
  };
  const std::vector<Criterion> criteria{
      {"loss-mask fidelity", loss_mask_fidelity, 10},
      {"constrained-decoding soundness", decoding_soundness, 30},
      {"fsm-index equivalence", index_equivalence, 60},
      {"gradient correctness", gradient_check, 0},
      {"round-trip labeling", round_trip, 0},
      {"end-to-end learning signal", learning_signal, 300},
      {"protocol fidelity", protocol_fidelity, 5},
      {"micro-F1 oracle agreement", f1_agreement, 0},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0 || secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s %zu %s: %s [%.2fs%s]\n", pass ? "PASS" : "FAIL", i + 1, c.name, o.detail.c_str(), secs,
                in_time ? "" : fmt(" > %.0fs limit", c.limit_s).c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
