#pragma once

// End-to-end driver behind the `sift` CLI: ingest -> build -> train ->
// generate -> eval -> report. Every command resolves the full run config,
// hashes it, and works inside `<output_dir>/<config-hash>/`. Artifacts carry
// that hash and are refused when it does not match.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sift/corpus.hpp"
#include "sift/error.hpp"
#include "sift/eval.hpp"
#include "sift/grammar.hpp"
#include "sift/lossmask.hpp"
#include "sift/prompt.hpp"
#include "sift/regex.hpp"
#include "sift/rng.hpp"
#include "sift/tokenizer.hpp"
#include "sift/toylm.hpp"

namespace sift {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct RunConfig {
  std::string data_dir = "data";
  std::string output_dir = "runs";
  std::vector<std::string> classes;
  TaskKind task_kind = TaskKind::Plain;
  std::string base_instruction;  // empty: NER / SRL default by task kind
  InstructionKind train_instruction = InstructionKind::Vanilla;
  std::optional<InstructionKind> eval_instruction;  // defaults to train_instruction
  std::uint64_t permutation_seed = 13;
  std::string nonsense_text{kNonsenseInstruction};
  Strategy strategy = Strategy::MRC;
  std::size_t n_shots = 0;
  std::optional<std::size_t> eval_shots;  // defaults to n_shots
  std::string eval_split = "valid";
  std::string tokenizer = "word";
  std::size_t max_seq_len = kDefaultMaxSeqLen;
  ModelDims dims{};
  TrainConfig train{};
  DecodeConfig decode{};

  std::size_t effective_eval_shots() const { return eval_shots.value_or(n_shots); }
  InstructionKind effective_eval_instruction() const { return eval_instruction.value_or(train_instruction); }

  std::string effective_base_instruction() const {
    if (!base_instruction.empty()) return base_instruction;
    return std::string(task_kind == TaskKind::Plain ? kNerInstruction : kSrlInstruction);
  }

  LabelScheme scheme() const { return LabelScheme(classes, task_kind); }
};

namespace detail {

inline std::string trim_copy(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto c = s.find(',', pos);
    if (c == std::string_view::npos) c = s.size();
    auto item = trim_copy(s.substr(pos, c - pos));
    if (!item.empty()) out.push_back(item);
    pos = c + 1;
  }
  return out;
}

inline std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char n = s[++i];
      out.push_back(n == 'n' ? '\n' : n == 't' ? '\t' : n);
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

inline std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '\n') out += "\\n";
    else if (c == '\t') out += "\\t";
    else if (c == '\\') out += "\\\\";
    else out.push_back(c);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_floating_point_v<T>) out = static_cast<T>(std::stod(v, &used));
    else {
      if (v.find('-') != std::string::npos) throw std::invalid_argument(v);  // stoull wraps negatives
      out = static_cast<T>(std::stoull(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail(Errc::ConfigError, "key '" + key + "': bad number '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(Errc::ConfigError, "key '" + key + "': bad boolean '" + v + "'");
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string fmt_double(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  return os.str();
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are errors.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = unescape(raw);
  if (key == "data_dir") c.data_dir = v;
  else if (key == "output_dir") c.output_dir = v;
  else if (key == "classes") c.classes = split_list(v);
  else if (key == "task_kind") c.task_kind = task_kind_from_string(v);
  else if (key == "base_instruction") c.base_instruction = v;
  else if (key == "train_instruction") c.train_instruction = instruction_kind_from_string(v);
  else if (key == "eval_instruction") c.eval_instruction = instruction_kind_from_string(v);
  else if (key == "permutation_seed") c.permutation_seed = parse_number<std::uint64_t>(key, v);
  else if (key == "nonsense_text") c.nonsense_text = v;
  else if (key == "strategy") c.strategy = strategy_from_string(v);
  else if (key == "n_shots") c.n_shots = parse_number<std::size_t>(key, v);
  else if (key == "eval_shots") c.eval_shots = parse_number<std::size_t>(key, v);
  else if (key == "eval_split") {
    if (v != "valid" && v != "test") fail(Errc::ConfigError, "eval_split must be valid or test");
    c.eval_split = v;
  } else if (key == "tokenizer") {
    if (v != "word" && v != "char") fail(Errc::ConfigError, "tokenizer must be word or char");
    c.tokenizer = v;
  } else if (key == "max_seq_len") c.max_seq_len = parse_number<std::size_t>(key, v);
  else if (key == "embed_dim") c.dims.embed = parse_number<std::size_t>(key, v);
  else if (key == "hidden_dim") c.dims.hidden = parse_number<std::size_t>(key, v);
  else if (key == "window") c.dims.window = parse_number<std::size_t>(key, v);
  else if (key == "learning_rate") c.train.learning_rate = parse_number<double>(key, v);
  else if (key == "epochs") c.train.epochs = parse_number<std::size_t>(key, v);
  else if (key == "batch_size") c.train.batch_size = parse_number<std::size_t>(key, v);
  else if (key == "beta1") c.train.beta1 = parse_number<double>(key, v);
  else if (key == "beta2") c.train.beta2 = parse_number<double>(key, v);
  else if (key == "eps") c.train.eps = parse_number<double>(key, v);
  else if (key == "weight_decay") c.train.weight_decay = parse_number<double>(key, v);
  else if (key == "grad_clip") c.train.grad_clip = parse_number<double>(key, v);
  else if (key == "seeds") {
    c.train.seeds.clear();
    for (const auto& s : split_list(v)) c.train.seeds.push_back(parse_number<std::uint64_t>(key, s));
    if (c.train.seeds.empty()) fail(Errc::ConfigError, "seeds must not be empty");
  } else if (key == "temperature") c.decode.temperature = parse_number<double>(key, v);
  else if (key == "top_p") c.decode.top_p = parse_number<double>(key, v);
  else if (key == "max_new_tokens") c.decode.max_new_tokens = parse_number<std::size_t>(key, v);
  else if (key == "greedy") c.decode.greedy = parse_bool(key, v);
  else fail(Errc::ConfigError, "unknown config key '" + key + "'");
}

/// Flat `key = value` text; `#` starts a comment line; `\n` escapes allowed.
inline RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = detail::trim_copy(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(Errc::ConfigError, "line " + std::to_string(line_no) + ": expected key = value");
    set_config_value(c, detail::trim_copy(line.substr(0, eq)), detail::trim_copy(line.substr(eq + 1)));
  }
  if (c.classes.empty()) fail(Errc::ConfigError, "config must list classes");
  if (c.decode.temperature <= 0.0 || c.decode.top_p <= 0.0 || c.decode.top_p > 1.0)
    fail(Errc::ConfigError, "temperature must be > 0 and top_p in (0, 1]");
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every effective setting as sorted `key = value` lines. output_dir is
/// excluded: it locates artifacts but does not change them.
inline std::string canonical_config(const RunConfig& c) {
  using namespace detail;
  std::map<std::string, std::string> kv{
      {"data_dir", c.data_dir},
      {"classes", join(c.classes)},
      {"task_kind", std::string(to_string(c.task_kind))},
      {"base_instruction", escape(c.effective_base_instruction())},
      {"train_instruction", std::string(to_string(c.train_instruction))},
      {"eval_instruction", std::string(to_string(c.effective_eval_instruction()))},
      {"permutation_seed", std::to_string(c.permutation_seed)},
      {"nonsense_text", escape(c.nonsense_text)},
      {"strategy", std::string(to_string(c.strategy))},
      {"n_shots", std::to_string(c.n_shots)},
      {"eval_shots", std::to_string(c.effective_eval_shots())},
      {"eval_split", c.eval_split},
      {"tokenizer", c.tokenizer},
      {"max_seq_len", std::to_string(c.max_seq_len)},
      {"embed_dim", std::to_string(c.dims.embed)},
      {"hidden_dim", std::to_string(c.dims.hidden)},
      {"window", std::to_string(c.dims.window)},
      {"learning_rate", fmt_double(c.train.learning_rate)},
      {"epochs", std::to_string(c.train.epochs)},
      {"batch_size", std::to_string(c.train.batch_size)},
      {"beta1", fmt_double(c.train.beta1)},
      {"beta2", fmt_double(c.train.beta2)},
      {"eps", fmt_double(c.train.eps)},
      {"weight_decay", fmt_double(c.train.weight_decay)},
      {"grad_clip", fmt_double(c.train.grad_clip)},
      {"seeds", join(c.train.seeds)},
      {"temperature", fmt_double(c.decode.temperature)},
      {"top_p", fmt_double(c.decode.top_p)},
      {"max_new_tokens", std::to_string(c.decode.max_new_tokens)},
      {"greedy", c.decode.greedy ? "true" : "false"},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline std::string config_hash(const RunConfig& c) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(canonical_config(c));
  return os.str();
}

using Logger = std::function<void(const std::string&)>;

/// Resolved run: config, its hash, and the artifact directory.
class Run {
 public:
  explicit Run(RunConfig cfg, Logger log = {})
      : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), dir_(fs::path(cfg_.output_dir) / hash_), log_(std::move(log)) {}

  const RunConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const fs::path& dir() const { return dir_; }

  fs::path path(const std::string& name) const { return dir_ / name; }
  fs::path seed_path(const std::string& stem, std::uint64_t seed, const std::string& ext) const {
    return dir_ / (stem + "_seed" + std::to_string(seed) + ext);
  }

  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }

  void write_json(const fs::path& p, json j) const {
    j["config_hash"] = hash_;
    write_text(p, j.dump() + "\n");
  }

  void write_jsonl(const fs::path& p, const std::vector<json>& rows) const {
    std::string out;
    for (auto r : rows) {
      r["config_hash"] = hash_;
      out += r.dump() + "\n";
    }
    write_text(p, out);
  }

  json read_json(const fs::path& p) const {
    auto j = json::parse(read_text(p));
    check_hash(j, p);
    return j;
  }

  std::vector<json> read_jsonl(const fs::path& p) const {
    std::vector<json> rows;
    std::istringstream in(read_text(p));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      rows.push_back(json::parse(line));
      check_hash(rows.back(), p);
    }
    return rows;
  }

  void write_text(const fs::path& p, const std::string& text) const {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(Errc::IoError, "cannot write " + p.string());
    out << text;
  }

  static std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(Errc::MissingArtifact, p.string() + " not found (run the earlier pipeline step first)");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

 private:
  void check_hash(const json& j, const fs::path& p) const {
    if (!j.contains("config_hash") || j["config_hash"] != hash_)
      fail(Errc::ConfigHashMismatch, p.string() + " was produced under a different config");
  }

  RunConfig cfg_;
  std::string hash_;
  fs::path dir_;
  Logger log_;
};

inline json sentence_to_json(const Sentence& s) {
  json j{{"id", s.id}, {"tokens", s.tokens}, {"tags", s.tags}};
  j["verb_index"] = s.verb_index ? json(*s.verb_index) : json(nullptr);
  return j;
}

inline Sentence sentence_from_json(const json& j) {
  Sentence s;
  s.id = j.at("id").get<std::string>();
  s.tokens = j.at("tokens").get<std::vector<std::string>>();
  s.tags = j.at("tags").get<std::vector<std::string>>();
  if (!j.at("verb_index").is_null()) s.verb_index = j["verb_index"].get<std::size_t>();
  return s;
}

inline json dataset_to_json(const Dataset& ds) {
  json splits;
  auto dump = [](const std::vector<Sentence>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back(sentence_to_json(s));
    return a;
  };
  splits["train"] = dump(ds.train);
  splits["valid"] = dump(ds.valid);
  splits["test"] = dump(ds.test);
  return {{"scheme", {{"classes", ds.scheme.classes()}, {"task_kind", to_string(ds.scheme.kind())}}}, {"splits", splits}};
}

inline Dataset dataset_from_json(const json& j) {
  Dataset ds;
  ds.scheme = LabelScheme(j.at("scheme").at("classes").get<std::vector<std::string>>(),
                          task_kind_from_string(j.at("scheme").at("task_kind").get<std::string>()));
  auto load = [&](const char* name, std::vector<Sentence>& out) {
    for (const auto& s : j.at("splits").at(name)) out.push_back(sentence_from_json(s));
  };
  load("train", ds.train);
  load("valid", ds.valid);
  load("test", ds.test);
  return ds;
}

inline const std::vector<Sentence>& eval_sentences(const Dataset& ds, const RunConfig& c) {
  return c.eval_split == "test" ? ds.test : ds.valid;
}

// ---------------------------------------------------------------- ingest

/// Reads `<data_dir>/{train,valid,test}.conll` (train required).
inline Dataset cmd_ingest(const Run& run) {
  const auto& c = run.config();
  const auto scheme = c.scheme();
  const fs::path dir(c.data_dir);
  Dataset ds;
  ds.scheme = scheme;
  bool any_file = false;
  for (auto [name, split] : {std::pair{"train", &ds.train}, {"valid", &ds.valid}, {"test", &ds.test}}) {
    const auto file = dir / (std::string(name) + ".conll");
    if (!fs::exists(file)) continue;
    any_file = true;
    try {
      *split = parse_conll(Run::read_text(file), scheme, name);
    } catch (const Error& e) {
      throw Error(e.code(), file.string() + ": " + std::string(e.what()));
    }
  }
  if (!any_file) fail(Errc::EmptyDataset, "no train/valid/test .conll files in " + dir.string());
  if (ds.train.empty() && ds.valid.empty() && ds.test.empty())
    fail(Errc::EmptyDataset, "all splits in " + dir.string() + " are empty");
  if (ds.train.empty()) fail(Errc::EmptyDataset, dir.string() + "/train.conll has no sentences");
  run.write_json(run.path("dataset.json"), dataset_to_json(ds));
  run.write_text(run.path("config.txt"), canonical_config(c));
  run.log("ingested train=" + std::to_string(ds.train.size()) + " valid=" + std::to_string(ds.valid.size()) +
          " test=" + std::to_string(ds.test.size()) + " -> " + run.dir().string());
  return ds;
}

inline Dataset load_dataset(const Run& run) { return dataset_from_json(run.read_json(run.path("dataset.json"))); }

// ---------------------------------------------------------------- build

struct PromptSet {
  std::vector<std::string> ids;
  std::vector<RenderedPrompt> prompts;
};

inline PromptSet render_prompts(const Dataset& ds, const RunConfig& c, std::uint64_t seed, PromptMode mode) {
  const bool train = mode == PromptMode::Train;
  const auto& queries = train ? ds.train : eval_sentences(ds, c);
  const std::size_t shots = train ? c.n_shots : c.effective_eval_shots();
  const auto kind = train ? c.train_instruction : c.effective_eval_instruction();
  InstructionVariant variant{kind, {}, {}};
  if (kind == InstructionKind::Permuted) variant.permutation_seed = c.permutation_seed;
  if (kind == InstructionKind::Nonsense) variant.nonsense_text = c.nonsense_text;
  const auto instruction = make_instruction(c.effective_base_instruction(), variant);

  PromptSet out;
  for (const auto& q : queries) {
    auto demos = sample_demonstrations(ds.train, q.id, shots, seed);
    std::optional<std::vector<SpanAnnotation>> gold;
    if (train) gold = tags_to_spans(q.tags);
    out.ids.push_back(q.id);
    out.prompts.push_back(build_prompt(ds.scheme, instruction, demos, q, mode, gold));
  }
  return out;
}

inline std::vector<json> prompt_rows(const PromptSet& set, std::size_t shots, InstructionKind variant, PromptMode mode) {
  std::vector<json> rows;
  for (std::size_t i = 0; i < set.prompts.size(); ++i)
    rows.push_back(prompt_record(set.ids[i], set.prompts[i], shots, variant, mode));
  return rows;
}

inline Tokenizer load_tokenizer(const Run& run) { return Tokenizer::from_json(run.read_json(run.path("tokenizer.json"))); }

/// Renders train and eval prompts per seed and fits the tokenizer over all of
/// them. Returns the number of prompts written.
inline std::size_t cmd_build(const Run& run) {
  const auto& c = run.config();
  const auto ds = load_dataset(run);
  std::map<std::uint64_t, std::pair<PromptSet, PromptSet>> sets;
  std::vector<std::string> texts;
  for (auto seed : c.train.seeds) {
    auto tr = render_prompts(ds, c, seed, PromptMode::Train);
    auto ev = render_prompts(ds, c, seed, PromptMode::Eval);
    for (const auto& p : tr.prompts) texts.push_back(p.text);
    for (const auto& p : ev.prompts) texts.push_back(p.text);
    sets.emplace(seed, std::pair{std::move(tr), std::move(ev)});
  }
  // Entity strings must stay tokenizable at generation time even if the
  // eval split is empty.
  for (const auto& cls : ds.scheme.classes()) texts.push_back(cls);
  const Tokenizer tok = c.tokenizer == "char" ? build_char_tokenizer(texts) : build_word_tokenizer(texts);

  std::size_t written = 0;
  for (const auto& [seed, pair] : sets) {
    for (const auto* set : {&pair.first, &pair.second})
      for (std::size_t i = 0; i < set->prompts.size(); ++i) {
        try {
          (void)tokenize_with_segments(set->prompts[i], tok, c.max_seq_len);
        } catch (const Error& e) {
          throw Error(e.code(), "prompt " + set->ids[i] + ": " + e.what());
        }
      }
    run.write_jsonl(run.seed_path("prompts_train", seed, ".jsonl"),
                    prompt_rows(pair.first, c.n_shots, c.train_instruction, PromptMode::Train));
    run.write_jsonl(run.seed_path("prompts_eval", seed, ".jsonl"),
                    prompt_rows(pair.second, c.effective_eval_shots(), c.effective_eval_instruction(), PromptMode::Eval));
    written += pair.first.prompts.size() + pair.second.prompts.size();
  }
  run.write_json(run.path("tokenizer.json"), tok.to_json());
  run.log("built " + std::to_string(written) + " prompts, vocabulary " + std::to_string(tok.vocab_size()));
  return written;
}

inline std::vector<std::pair<std::string, RenderedPrompt>> load_prompts(const Run& run, const std::string& stem,
                                                                        std::uint64_t seed) {
  std::vector<std::pair<std::string, RenderedPrompt>> out;
  for (const auto& row : run.read_jsonl(run.seed_path(stem, seed, ".jsonl")))
    out.emplace_back(row.at("id").get<std::string>(), prompt_from_record(row));
  return out;
}

// ---------------------------------------------------------------- train

inline std::vector<TrainExample> training_examples(const std::vector<std::pair<std::string, RenderedPrompt>>& prompts,
                                                   const Tokenizer& tok, Strategy strategy, std::size_t max_seq_len) {
  std::vector<TrainExample> data;
  for (const auto& [id, p] : prompts) {
    auto tp = tokenize_with_segments(p, tok, max_seq_len);
    auto mask = compute_loss_mask(tp, strategy);
    data.push_back({std::move(tp.ids), std::move(mask)});
  }
  return data;
}

inline std::vector<TrainResult> cmd_train(const Run& run) {
  const auto& c = run.config();
  const auto tok = load_tokenizer(run);
  ModelDims dims = c.dims;
  dims.vocab = tok.vocab_size();
  std::vector<TrainResult> results;
  for (auto seed : c.train.seeds) {
    const auto data = training_examples(load_prompts(run, "prompts_train", seed), tok, c.strategy, c.max_seq_len);
    auto res = train_seed(data, dims, tok.pad_id(), c.train, seed, [&](std::uint64_t s, std::size_t e, double loss) {
      run.log("seed " + std::to_string(s) + " epoch " + std::to_string(e + 1) + " loss " + std::to_string(loss));
    });
    json ckpt = params_to_json(res.params);
    ckpt["seed"] = seed;
    run.write_json(run.seed_path("checkpoint", seed, ".json"), ckpt);
    run.write_json(run.seed_path("train_log", seed, ".json"), {{"seed", seed},
                                                               {"strategy", to_string(c.strategy)},
                                                               {"initial_loss", res.initial_loss},
                                                               {"epoch_losses", res.epoch_losses},
                                                               {"steps", res.steps},
                                                               {"final_lr", res.final_lr}});
    results.push_back(std::move(res));
  }
  return results;
}

inline ModelParams load_checkpoint(const Run& run, std::uint64_t seed) {
  return params_from_json(run.read_json(run.seed_path("checkpoint", seed, ".json")));
}

// ---------------------------------------------------------------- generate

struct Prediction {
  std::string id;
  std::string response_text;
  std::vector<std::string> pred_tags;
  bool finished = false;
  std::size_t n_tokens = 0;
};

inline json to_json(const Prediction& p) {
  return {{"id", p.id}, {"response_text", p.response_text}, {"pred_tags", p.pred_tags}, {"finished", p.finished},
          {"n_tokens", p.n_tokens}};
}

/// Grammar pieces shared by every seed of a run.
struct GrammarBundle {
  ResponseRegex regex;
  Dfa dfa;
  TokenFsmIndex index;
};

inline GrammarBundle build_grammar(const Dataset& ds, const Tokenizer& tok) {
  std::vector<std::string> texts;
  for (const auto* split : {&ds.train, &ds.valid, &ds.test})
    for (const auto& s : *split) texts.push_back(s.text());
  GrammarBundle g{build_response_regex(ds.scheme), {}, {}};
  g.dfa = compile_regex(g.regex.pattern, alphabet_from_texts(texts));
  g.index = index_vocabulary(g.dfa, tok);
  return g;
}

/// Constrained generation for one model over eval prompts; `sentences` maps
/// prompt ids to the sentences used for span matching.
inline std::vector<Prediction> generate_predictions(const ModelParams& model, const Tokenizer& tok,
                                                    const TokenFsmIndex& index, const LabelScheme& scheme,
                                                    const std::vector<std::pair<std::string, RenderedPrompt>>& prompts,
                                                    const std::map<std::string, const Sentence*>& sentences,
                                                    const DecodeConfig& decode, std::uint64_t seed,
                                                    std::size_t max_seq_len) {
  if (model.dims.vocab != tok.vocab_size())
    fail(Errc::ModelShapeMismatch, "checkpoint vocabulary " + std::to_string(model.dims.vocab) + " != tokenizer " +
                                       std::to_string(tok.vocab_size()));
  std::vector<Prediction> out;
  for (const auto& [id, prompt] : prompts) {
    const auto tp = tokenize_with_segments(prompt, tok, max_seq_len);
    DecodeConfig dc = decode;
    dc.seed = keyed_seed(seed, id);
    const auto gen = constrained_sample(ToyScorer{&model}, tp.ids, index, dc);
    Prediction p;
    p.id = id;
    p.response_text = tok.decode(gen.ids);
    p.finished = gen.finished;
    p.n_tokens = gen.ids.size();
    const auto it = sentences.find(id);
    if (it == sentences.end()) fail(Errc::MissingArtifact, "no sentence for prompt " + id);
    auto parsed = parse_response(p.response_text, &scheme);
    p.pred_tags = map_spans_to_iob2(parsed, it->second->tokens).tags;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::map<std::uint64_t, std::vector<Prediction>> cmd_generate(const Run& run) {
  const auto& c = run.config();
  const auto ds = load_dataset(run);
  const auto tok = load_tokenizer(run);
  const auto grammar = build_grammar(ds, tok);
  json idx = grammar.index.to_json();
  idx["pattern"] = grammar.regex.pattern;
  run.write_json(run.path("fsm_index.json"), idx);
  run.log("response grammar " + grammar.regex.pattern + " -> " + std::to_string(grammar.dfa.num_states()) +
          " states, " + std::to_string(grammar.index.num_edges()) + " token edges");

  std::map<std::string, const Sentence*> by_id;
  for (const auto& s : eval_sentences(ds, c)) by_id[s.id] = &s;
  std::map<std::uint64_t, std::vector<Prediction>> all;
  for (auto seed : c.train.seeds) {
    const auto model = load_checkpoint(run, seed);
    auto preds = generate_predictions(model, tok, grammar.index, ds.scheme, load_prompts(run, "prompts_eval", seed),
                                      by_id, c.decode, seed, c.max_seq_len);
    std::vector<json> rows;
    for (const auto& p : preds) rows.push_back(to_json(p));
    run.write_jsonl(run.seed_path("predictions", seed, ".jsonl"), rows);
    run.log("seed " + std::to_string(seed) + ": " + std::to_string(preds.size()) + " predictions");
    all.emplace(seed, std::move(preds));
  }
  return all;
}

// ---------------------------------------------------------------- eval

inline EvalReport score_predictions(const std::vector<std::vector<std::string>>& preds,
                                    const std::vector<std::vector<std::string>>& gold,
                                    const std::vector<bool>& fallback) {
  if (preds.size() != gold.size()) fail(Errc::LengthMismatch, "prediction and gold sentence counts differ");
  EvalReport r;
  for (std::size_t i = 0; i < preds.size(); ++i) r.add(micro_f1_strict(preds[i], gold[i]), fallback[i]);
  return r;
}

inline RunAggregate cmd_eval(const Run& run) {
  const auto& c = run.config();
  const auto ds = load_dataset(run);
  std::map<std::string, const Sentence*> gold;
  for (const auto& s : eval_sentences(ds, c)) gold[s.id] = &s;

  // Prediction files on disk must be exactly the configured seeds.
  std::set<std::uint64_t> on_disk;
  if (fs::exists(run.dir()))
    for (const auto& entry : fs::directory_iterator(run.dir())) {
      const auto name = entry.path().filename().string();
      const std::string prefix = "predictions_seed";
      if (name.rfind(prefix, 0) == 0 && entry.path().extension() == ".jsonl")
        on_disk.insert(std::stoull(name.substr(prefix.size(), name.size() - prefix.size() - 6)));
    }
  const std::set<std::uint64_t> wanted(c.train.seeds.begin(), c.train.seeds.end());
  if (on_disk != wanted)
    fail(Errc::SeedMismatch, "prediction seeds {" + detail::join(std::vector<std::uint64_t>(on_disk.begin(), on_disk.end())) +
                                 "} differ from config seeds {" + detail::join(c.train.seeds) + "}");

  std::map<std::uint64_t, EvalReport> reports;
  for (auto seed : c.train.seeds) {
    EvalReport r;
    for (const auto& row : run.read_jsonl(run.seed_path("predictions", seed, ".jsonl"))) {
      const auto id = row.at("id").get<std::string>();
      const auto it = gold.find(id);
      if (it == gold.end()) fail(Errc::MissingArtifact, "prediction for unknown sentence " + id);
      const auto tags = row.at("pred_tags").get<std::vector<std::string>>();
      const bool fallback = std::all_of(tags.begin(), tags.end(), [](const auto& t) { return t == "O"; });
      r.add(micro_f1_strict(tags, it->second->tags), fallback);
    }
    run.write_text(run.seed_path("report", seed, ".csv"), to_csv(r));
    reports.emplace(seed, std::move(r));
  }
  auto agg = aggregate_runs(reports);
  json j = to_json(agg);
  j["strategy"] = to_string(c.strategy);
  j["n_shots"] = c.n_shots;
  j["eval_shots"] = c.effective_eval_shots();
  j["eval_instruction"] = to_string(c.effective_eval_instruction());
  j["eval_split"] = c.eval_split;
  run.write_json(run.path("report.json"), j);
  run.log("micro F1 " + format_mean_std(agg));
  return agg;
}

/// Human-readable summary of report.json.
inline std::string cmd_report(const Run& run) {
  const auto j = run.read_json(run.path("report.json"));
  std::ostringstream os;
  os << "run " << run.hash() << "  strategy=" << j.at("strategy").get<std::string>()
     << "  shots=" << j.at("n_shots").get<std::size_t>() << "  eval_shots=" << j.at("eval_shots").get<std::size_t>()
     << "  instruction=" << j.at("eval_instruction").get<std::string>() << "\n";
  os << "micro F1 (mean_{std}, %): " << j.at("formatted").get<std::string>() << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& [seed, r] : j.at("per_seed").items())
    os << "  seed " << seed << ": P=" << r.at("precision").get<double>() << " R=" << r.at("recall").get<double>()
       << " F1=" << r.at("f1").get<double>() << " fallback=" << r.at("fallback_count").get<std::size_t>() << "/"
       << r.at("n_sentences").get<std::size_t>() << "\n";
  return os.str();
}

}  // namespace sift
