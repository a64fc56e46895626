#include "lego/synth.hpp"

#include "lego/common.hpp"

#include <algorithm>

namespace lego::synth {

namespace {

constexpr char kAlphabet[] = "abcdefghij";
constexpr int kLetters = 10;

// Rotation ciphers: letter i maps to letter (i + k) % 10. The two cipher
// languages always get distinct nonzero offsets, whatever the seed.
int rotation_offset(std::uint64_t seed, const std::string& lang) {
  const int k_cc = 1 + static_cast<int>(derive_seed(seed, "cipher:cc") % 9);
  if (lang == "cc") return k_cc;
  const int hop = 1 + static_cast<int>(derive_seed(seed, "cipher:dd") % 8);
  return 1 + (k_cc - 1 + hop) % 9;
}

std::vector<char> cipher_table(std::uint64_t seed, const std::string& lang) {
  const int k = rotation_offset(seed, lang);
  std::vector<char> table(kLetters);
  for (int i = 0; i < kLetters; ++i) table[i] = kAlphabet[(i + k) % kLetters];
  return table;
}

std::string apply_cipher(const std::string& word, const std::vector<char>& table) {
  std::string out = word;
  for (char& c : out) c = table[c - 'a'];
  return out;
}

std::vector<std::string> random_sentence(Rng& rng, int min_words, int max_words) {
  const int n = min_words + static_cast<int>(rng.below(max_words - min_words + 1));
  std::vector<std::string> words;
  for (int i = 0; i < n; ++i) {
    const int len = 2 + static_cast<int>(rng.below(3));
    std::string w;
    for (int j = 0; j < len; ++j) {
      w.push_back(kAlphabet[rng.below(kLetters)]);
    }
    words.push_back(std::move(w));
  }
  return words;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

}  // namespace

std::string render(const std::vector<std::string>& base_words,
                   const std::string& lang, std::uint64_t seed) {
  if (lang == "aa") return join(base_words);
  if (lang == "bb") {
    std::vector<std::string> words = base_words;
    for (auto& w : words) std::reverse(w.begin(), w.end());
    return join(words);
  }
  if (lang == "cc" || lang == "dd") {
    const auto table = cipher_table(seed, lang);
    std::vector<std::string> words;
    for (const auto& w : base_words) words.push_back(apply_cipher(w, table));
    return join(words);
  }
  throw ConfigError("no synthetic language '" + lang + "'");
}

std::vector<corpus::ParallelPair> generate(const TaskSpec& spec) {
  if (spec.langs.size() < 2) throw ConfigError("need at least two languages");
  if (spec.min_words < 1 || spec.max_words < spec.min_words) {
    throw ConfigError("bad sentence length bounds");
  }
  const auto& table = corpus::CodeTable::builtin();
  std::vector<corpus::ParallelPair> out;
  for (const auto& src : spec.langs) {
    for (const auto& tgt : spec.langs) {
      if (src == tgt) continue;
      const bool high = src == spec.langs.front() || tgt == spec.langs.front();
      const int count =
          high ? spec.pairs_per_direction : std::max(1, spec.pairs_per_direction / 4);
      Rng rng(derive_seed(spec.seed, "synth:" + src + ">" + tgt));
      for (int i = 0; i < count; ++i) {
        const auto base = random_sentence(rng, spec.min_words, spec.max_words);
        corpus::ParallelPair p;
        p.src_lang = table.normalize(src);
        p.tgt_lang = table.normalize(tgt);
        p.src_text = render(base, src, spec.seed);
        p.tgt_text = render(base, tgt, spec.seed);
        p.origin = "synth";
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

}  // namespace lego::synth
