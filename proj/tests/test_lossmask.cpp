#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sift/lossmask.hpp"
#include "sift/prompt.hpp"
#include "sift/synthetic.hpp"
#include "sift/tokenizer.hpp"
#include "test_util.hpp"

using namespace sift;

namespace {

struct Fixture {
  Dataset ds = make_synthetic_dataset(30, 0, 0, 5);
  std::optional<std::string> instr = std::string(kNerInstruction);

  RenderedPrompt prompt(std::size_t q, std::size_t shots, PromptMode mode = PromptMode::Train) const {
    const auto& s = ds.train[q];
    std::optional<std::vector<SpanAnnotation>> gold;
    if (mode == PromptMode::Train) gold = tags_to_spans(s.tags);
    return build_prompt(ds.scheme, instr, sample_demonstrations(ds.train, s.id, shots, 9), s, mode, gold);
  }

  Tokenizer word_tokenizer() const {
    std::vector<std::string> texts;
    for (std::size_t q = 0; q < ds.train.size(); ++q) texts.push_back(prompt(q, 2).text);
    return build_word_tokenizer(texts);
  }
};

std::size_t count(const LossMask& m) { return static_cast<std::size_t>(std::count(m.begin(), m.end(), true)); }

}  // namespace

TEST(Pretokenize, Pieces) {
  const std::string t = "### Response:\n\nLOS ANGELES:organization;x";
  std::vector<std::string> got;
  for (auto [b, e] : pretokenize(t)) got.push_back(t.substr(b, e - b));
  EXPECT_EQ(got, (std::vector<std::string>{"###", " Response", ":", "\n\n", "LOS", " ANGELES", ":", "organization",
                                           ";", "x"}));
  std::vector<std::string> spaces;
  for (auto [b, e] : pretokenize("a  b")) spaces.push_back(std::string("a  b").substr(b, e - b));
  EXPECT_EQ(spaces, (std::vector<std::string>{"a", " ", " b"}));
}

TEST(Tokenizer, RoundTripAndLongestMatch) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  for (std::size_t q = 0; q < 10; ++q) {
    const auto text = f.prompt(q, 3, PromptMode::Eval).text;
    EXPECT_EQ(tok.decode(tok.encode(text)), text);
  }
  // Unseen word falls back to shorter entries.
  const auto ids = tok.encode("ResponseSentence");
  EXPECT_EQ(tok.decode(ids), "ResponseSentence");
  EXPECT_GT(ids.size(), 1u);

  const Tokenizer small({"<pad>", "<eos>", "a", "b", "ab", "abc"}, 1, 0, false);
  EXPECT_EQ(small.encode("abcab"), (std::vector<TokenId>{5, 4}));
  EXPECT_EQ(code_of([&] { small.encode("abd"); }), Errc::TokenizeFailure);
  EXPECT_EQ(code_of([&] { small.token_text(9); }), Errc::UnknownTokenId);
}

TEST(Tokenizer, Validation) {
  EXPECT_EQ(code_of([] { Tokenizer({"<pad>", "a"}, 0, 0); }), Errc::TokenizeFailure);
  EXPECT_EQ(code_of([] { Tokenizer({"<pad>", "<eos>", "a", "a"}, 1, 0); }), Errc::TokenizeFailure);
  EXPECT_EQ(code_of([] { Tokenizer({"<pad>", "<eos>", ""}, 1, 0); }), Errc::TokenizeFailure);
  const Tokenizer t({"<pad>", "<eos>", "x"}, 1, 0);
  EXPECT_NE(t.pad_id(), t.eos_id());
}

TEST(Tokenizer, JsonRoundTrip) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  const auto back = Tokenizer::from_json(nlohmann::json::parse(tok.to_json().dump()));
  EXPECT_EQ(back.vocabulary(), tok.vocabulary());
  EXPECT_EQ(back.eos_id(), tok.eos_id());
  EXPECT_EQ(back.pad_id(), tok.pad_id());
  EXPECT_EQ(back.pretokenizes(), tok.pretokenizes());
}

TEST(TokenizeWithSegments, SegmentsDecodeToCharacterSegments) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  const auto p = f.prompt(0, 0);
  const auto tp = tokenize_with_segments(p, tok);
  auto text_of = [&](TokenRange r) {
    std::vector<TokenId> ids(tp.ids.begin() + r.begin, tp.ids.begin() + r.end);
    return tok.decode(ids);
  };
  EXPECT_EQ(text_of(*tp.segments.instruction), p.slice(*p.segments.instruction));
  EXPECT_EQ(text_of(tp.segments.query_example), p.slice(p.segments.query_example));
  EXPECT_EQ(text_of(*tp.segments.query_response), p.slice(*p.segments.query_response));
  EXPECT_TRUE(tp.eos_appended);
  EXPECT_EQ(tp.ids.back(), tok.eos_id());
  EXPECT_EQ(tp.segments.query_response->end, tp.ids.size());

  const auto ev = tokenize_with_segments(f.prompt(0, 2, PromptMode::Eval), tok);
  EXPECT_FALSE(ev.eos_appended);
  EXPECT_FALSE(ev.segments.query_response.has_value());
  EXPECT_NE(ev.ids.back(), tok.eos_id());
}

TEST(TokenizeWithSegments, PromptTooLong) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  EXPECT_EQ(code_of([&] { tokenize_with_segments(f.prompt(0, 2), tok, 10); }), Errc::PromptTooLong);
}

// A token overlapping the start of a response belongs to the response.
TEST(TokenizeWithSegments, StraddlingTokenGoesToResponse) {
  const LabelScheme scheme{{"x"}};
  const Sentence q{"q", {"a"}, {"B-x"}, {}};
  const auto p = build_prompt(scheme, std::nullopt, {}, q, PromptMode::Train, tags_to_spans(q.tags));
  // Text: "### Sentence:\n\na\n\n### Response:\n\na:x"
  std::vector<std::string> vocab{"<pad>", "<eos>"};
  for (char c : std::string("# SentcRspo:\nax")) vocab.emplace_back(1, c);
  vocab.push_back(":\n\na");  // crosses example -> response
  const Tokenizer tok(vocab, 1, 0, false);
  const auto tp = tokenize_with_segments(p, tok);
  const auto& qr = *tp.segments.query_response;
  EXPECT_EQ(tok.token_text(tp.ids[qr.begin]), ":\n\na");
  EXPECT_EQ(tp.segments.query_example.end, qr.begin);
  const auto mask = compute_loss_mask(tp, Strategy::SRC);
  EXPECT_TRUE(mask[qr.begin]);
  EXPECT_FALSE(mask[qr.begin - 1]);

  // A token spanning two non-response segments cannot be assigned.
  const std::vector<Demonstration> demos{{q, "a:x"}};
  const auto p2 = build_prompt(scheme, std::string("i"), demos, q, PromptMode::Eval);
  // Instruction segment ends with "x" (options), the demo example starts with "#".
  std::vector<std::string> v2{"<pad>", "<eos>"};
  for (char c : std::string("# SentcRspoIruiO:\nax")) v2.emplace_back(1, c);
  v2.push_back("x\n\n#");
  EXPECT_EQ(code_of([&] { tokenize_with_segments(p2, Tokenizer(v2, 1, 0, false)); }), Errc::SegmentSplit);
}

TEST(ComputeLossMask, Definitions) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  const auto tp = tokenize_with_segments(f.prompt(1, 2), tok);
  const auto van = compute_loss_mask(tp, Strategy::Vanilla);
  const auto src = compute_loss_mask(tp, Strategy::SRC);
  const auto mrc = compute_loss_mask(tp, Strategy::MRC);
  EXPECT_EQ(count(van), tp.ids.size());
  EXPECT_EQ(count(src), tp.segments.query_response->size());
  const auto& d = tp.segments.demonstrations;
  EXPECT_EQ(count(mrc), tp.segments.query_response->size() + d[0].response.size() + d[1].response.size());
  for (std::size_t i = 0; i < tp.ids.size(); ++i) {
    EXPECT_LE(src[i], mrc[i]);
    EXPECT_LE(mrc[i], van[i]);
  }
  EXPECT_TRUE(src.back() && mrc.back() && van.back());
  // Independent offset arithmetic.
  const auto p = f.prompt(1, 2);
  EXPECT_EQ(mrc, oracle::expected_mask(p, tp.ids, tok, Strategy::MRC));
}

TEST(ComputeLossMask, ZeroShotSrcEqualsMrc) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  const auto tp = tokenize_with_segments(f.prompt(2, 0), tok);
  EXPECT_EQ(compute_loss_mask(tp, Strategy::SRC), compute_loss_mask(tp, Strategy::MRC));
}

TEST(ComputeLossMask, EvalPromptRejected) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  const auto tp = tokenize_with_segments(f.prompt(2, 1, PromptMode::Eval), tok);
  EXPECT_EQ(code_of([&] { compute_loss_mask(tp, Strategy::SRC); }), Errc::EvalPrompt);
}

TEST(PadBatch, LeftPadding) {
  TokenizedPrompt a, b;
  a.ids = {5, 6, 7};
  b.ids = {5, 6, 7, 8, 9};
  const auto batch = pad_batch({a, b}, {{false, true, true}, {true, true, true, true, true}}, 0);
  EXPECT_EQ(batch.ids[0], (std::vector<TokenId>{0, 0, 5, 6, 7}));
  EXPECT_EQ(batch.masks[0], (LossMask{false, false, false, true, true}));
  EXPECT_EQ(batch.attention[0], (std::vector<bool>{false, false, true, true, true}));
  EXPECT_EQ(batch.ids[1], b.ids);
  EXPECT_EQ(batch.pad_counts, (std::vector<std::size_t>{2, 0}));
  const auto same = pad_batch({a, a}, {{true, true, true}, {true, true, true}}, 0);
  EXPECT_EQ(same.ids[0], a.ids);
}

// Padding then masking equals masking then padding; pads never supervised.
TEST(PadBatch, MaskingCommutesWithPadding) {
  Fixture f;
  const auto tok = f.word_tokenizer();
  std::vector<TokenizedPrompt> tps;
  std::vector<LossMask> masks;
  for (std::size_t q = 0; q < 6; ++q) {
    tps.push_back(tokenize_with_segments(f.prompt(q, q % 3), tok));
    masks.push_back(compute_loss_mask(tps.back(), Strategy::MRC));
  }
  const auto batch = pad_batch(tps, masks, tok.pad_id());
  for (std::size_t r = 0; r < tps.size(); ++r) {
    TokenizedPrompt padded = tps[r];
    const auto pad = batch.pad_counts[r];
    padded.ids = batch.ids[r];
    auto shift = [&](TokenRange& t) {
      t.begin += pad;
      t.end += pad;
    };
    for (auto& d : padded.segments.demonstrations) shift(d.response);
    shift(*padded.segments.query_response);
    EXPECT_EQ(compute_loss_mask(padded, Strategy::MRC), batch.masks[r]);
    for (std::size_t i = 0; i < pad; ++i) EXPECT_FALSE(batch.masks[r][i]);
    std::vector<TokenId> suffix(batch.ids[r].begin() + static_cast<std::ptrdiff_t>(pad), batch.ids[r].end());
    EXPECT_EQ(tok.decode(suffix), f.prompt(r, r % 3).text);
    EXPECT_EQ(count(compute_loss_mask(padded, Strategy::Vanilla)), padded.ids.size() - pad);
  }
}

TEST(MaskedCrossEntropy, Analytic) {
  const std::size_t V = 6;
  std::vector<std::vector<double>> uniform(4, std::vector<double>(V, 0.3));
  EXPECT_NEAR(masked_cross_entropy(uniform, {1, 2, 3, 4}, {true, false, true, true}), 3 * std::log(6.0), 1e-12);
  EXPECT_NEAR(masked_cross_entropy(uniform, {1, 2, 3, 4}, {true, false, true, true}, Reduction::Mean), std::log(6.0),
              1e-12);
  std::vector<std::vector<double>> sharp(2, std::vector<double>(V, 0.0));
  sharp[0][3] = sharp[1][1] = 100.0;
  EXPECT_LT(masked_cross_entropy(sharp, {3, 1}, {true, true}), 1e-40);
  EXPECT_EQ(code_of([&] { masked_cross_entropy(sharp, {3, 1}, {false, false}); }), Errc::EmptyMask);
  EXPECT_EQ(code_of([&] { masked_cross_entropy(sharp, {3}, {true, true}); }), Errc::LengthMismatch);
}

TEST(MaskedCrossEntropy, AgainstScalarRecompute) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<std::vector<double>> logits(3, std::vector<double>(5));
  for (auto& row : logits)
    for (auto& v : row) v = u(rng);
  const std::vector<TokenId> targets{4, 0, 2};
  double expect = 0;
  for (int i = 0; i < 3; ++i) {
    double z = 0;
    for (double v : logits[i]) z += std::exp(v);
    expect += -std::log(std::exp(logits[i][targets[i]]) / z);
  }
  EXPECT_NEAR(masked_cross_entropy(logits, targets, {true, true, true}), expect, 1e-10);
}
