#pragma once

// Bundled synthetic labeling task. Sentences are short runs of filler words;
// a marked subset of the vocabulary forms single-token entities of two
// classes. Entity words never repeat inside a sentence, so every gold span is
// the unique occurrence of its text.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "sift/corpus.hpp"
#include "sift/rng.hpp"

namespace sift {

struct SyntheticTask {
  LabelScheme scheme{{"animal", "color"}};
  std::vector<std::string> fillers{"the", "a", "big", "small", "runs", "sees", "near", "and", "with", "old", "new", "far"};
  std::vector<std::vector<std::string>> entities{{"cat", "dog", "fox", "owl", "elk", "yak"},
                                                 {"red", "blue", "teal", "gold", "pink", "gray"}};
  std::size_t min_len = 3;
  std::size_t max_len = 6;
};

inline Sentence make_synthetic_sentence(const SyntheticTask& task, Rng& rng, std::string id) {
  Sentence s;
  s.id = std::move(id);
  const std::size_t len = task.min_len + static_cast<std::size_t>(rng.below(task.max_len - task.min_len + 1));
  // 20% none, 50% one, 30% two entities.
  const double u = rng.uniform();
  const std::size_t n_ent = std::min<std::size_t>(len, u < 0.2 ? 0 : (u < 0.7 ? 1 : 2));

  std::vector<std::size_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = i;
  rng.shuffle(positions);
  positions.resize(n_ent);

  s.tokens.resize(len);
  s.tags.assign(len, "O");
  for (std::size_t i = 0; i < len; ++i)
    s.tokens[i] = task.fillers[static_cast<std::size_t>(rng.below(task.fillers.size()))];
  std::vector<std::string> used;
  for (auto pos : positions) {
    for (;;) {
      const auto cls = static_cast<std::size_t>(rng.below(task.entities.size()));
      const auto& words = task.entities[cls];
      const auto& w = words[static_cast<std::size_t>(rng.below(words.size()))];
      if (std::find(used.begin(), used.end(), w) != used.end()) continue;
      used.push_back(w);
      s.tokens[pos] = w;
      s.tags[pos] = "B-" + task.scheme.classes()[cls];
      break;
    }
  }
  return s;
}

inline Dataset make_synthetic_dataset(std::size_t n_train, std::size_t n_valid, std::size_t n_test,
                                      std::uint64_t seed = 7, const SyntheticTask& task = {}) {
  Dataset ds;
  ds.scheme = task.scheme;
  Rng rng(seed);
  for (std::size_t i = 0; i < n_train; ++i) ds.train.push_back(make_synthetic_sentence(task, rng, "train-" + std::to_string(i)));
  for (std::size_t i = 0; i < n_valid; ++i) ds.valid.push_back(make_synthetic_sentence(task, rng, "valid-" + std::to_string(i)));
  for (std::size_t i = 0; i < n_test; ++i) ds.test.push_back(make_synthetic_sentence(task, rng, "test-" + std::to_string(i)));
  return ds;
}

}  // namespace sift
