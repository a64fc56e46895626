#pragma once

#include <string>
#include <vector>

#include "lego/corpus.hpp"

namespace lego::synth {

// Four toy languages over the letters a..j, all derived from a shared base
// sentence so every direction has an exact translation:
//   aa  the base sentence
//   bb  each word reversed
//   cc  substitution cipher 1
//   dd  substitution cipher 2
// Directions touching "aa" receive pairs_per_direction sentences, the rest
// a quarter of that, giving distinct resource levels.
struct TaskSpec {
  std::vector<std::string> langs = {"aa", "bb", "cc", "dd"};
  int pairs_per_direction = 2000;
  std::uint64_t seed = 7;
  int min_words = 3;
  int max_words = 8;
};

std::string render(const std::vector<std::string>& base_words,
                   const std::string& lang, std::uint64_t seed);

std::vector<corpus::ParallelPair> generate(const TaskSpec& spec);

}  // namespace lego::synth
