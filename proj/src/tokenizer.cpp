#include "lego/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lego/common.hpp"
#include "lego/utf8.hpp"

namespace lego::tok {

using nlohmann::json;

int Vocabulary::tag(const std::string& code) const {
  auto it = lang_tags.find(code);
  if (it == lang_tags.end()) {
    throw UnknownLanguageTag("no tag for language '" + code + "'");
  }
  return it->second;
}

namespace {

// Builds the fixed prefix of the id space: specials, lang tags, byte tokens.
Vocabulary base_vocab(const std::vector<std::string>& lang_codes) {
  Vocabulary v;
  v.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& code : lang_codes) {
    if (v.lang_tags.count(code)) continue;
    v.lang_tags[code] = static_cast<int>(v.id_to_token.size());
    v.id_to_token.push_back("__" + code + "__");
  }
  for (int b = 0; b < 256; ++b) {
    v.id_to_token.push_back(std::string(1, static_cast<char>(b)));
  }
  for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

}  // namespace

Vocabulary train_bpe(const std::vector<std::string>& corpus, int vocab_size,
                     const std::vector<std::string>& lang_codes) {
  Vocabulary v = base_vocab(lang_codes);
  if (vocab_size <= v.size()) {
    throw VocabTooSmall("vocab_size " + std::to_string(vocab_size) +
                        " <= base size " + std::to_string(v.size()));
  }
  const int n_merges = vocab_size - v.size();

  std::vector<std::vector<int>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& line : corpus) {
    std::vector<int> s;
    s.reserve(line.size());
    for (unsigned char c : line) s.push_back(v.byte_token(c));
    if (!s.empty()) seqs.push_back(std::move(s));
  }

  for (int m = 0; m < n_merges; ++m) {
    std::map<std::pair<int, int>, std::size_t> counts;
    for (const auto& s : seqs) {
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        counts[{s[i], s[i + 1]}]++;
      }
    }
    if (counts.empty()) break;
    // Highest frequency; ties broken by lexicographically smallest pair of
    // token byte strings.
    std::pair<int, int> best{-1, -1};
    std::size_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      } else if (count == best_count) {
        auto key = [&](const std::pair<int, int>& p) {
          return std::make_pair(v.id_to_token[p.first], v.id_to_token[p.second]);
        };
        if (key(pair) < key(best)) best = pair;
      }
    }
    const int merged_id = v.size();
    v.merges.push_back(best);
    v.id_to_token.push_back(v.id_to_token[best.first] + v.id_to_token[best.second]);
    v.token_to_id[v.id_to_token.back()] = merged_id;
    for (auto& s : seqs) {
      std::size_t w = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          s[w++] = merged_id;
          ++i;
        } else {
          s[w++] = s[i];
        }
      }
      s.resize(w);
    }
  }

  v.content_hash = compute_content_hash(v);
  return v;
}

namespace {

std::vector<int> apply_merges(std::vector<int> s, const Vocabulary& v) {
  // rank of each merge pair, lower applies first
  std::map<std::pair<int, int>, int> rank;
  for (std::size_t r = 0; r < v.merges.size(); ++r) {
    rank[v.merges[r]] = static_cast<int>(r);
  }
  while (s.size() >= 2) {
    int best_rank = INT32_MAX;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      auto it = rank.find({s[i], s[i + 1]});
      if (it != rank.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == INT32_MAX) break;
    const auto& pair = v.merges[best_rank];
    const int merged_id = v.size() - static_cast<int>(v.merges.size()) + best_rank;
    std::vector<int> out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i + 1 < s.size() && s[i] == pair.first && s[i + 1] == pair.second) {
        out.push_back(merged_id);
        ++i;
      } else {
        out.push_back(s[i]);
      }
    }
    s = std::move(out);
  }
  return s;
}

std::vector<int> bpe_ids(const std::string& text, const Vocabulary& v) {
  std::vector<int> s;
  s.reserve(text.size());
  for (unsigned char c : text) s.push_back(v.byte_token(c));
  return apply_merges(std::move(s), v);
}

}  // namespace

TokenSeq encode(const std::string& text, const std::string& src_code,
                const Vocabulary& vocab) {
  TokenSeq seq;
  seq.ids.push_back(vocab.tag(src_code));
  auto body = bpe_ids(text, vocab);
  seq.ids.insert(seq.ids.end(), body.begin(), body.end());
  seq.ids.push_back(vocab.specials.eos);
  return seq;
}

TokenSeq encode(const std::string& text, const corpus::LanguageCode& src_tag,
                const Vocabulary& vocab) {
  return encode(text, src_tag.normalized, vocab);
}

std::string decode(const TokenSeq& seq, const Vocabulary& vocab) {
  std::string bytes;
  for (int id : seq.ids) {
    if (id < 0 || id >= vocab.size()) {
      throw ShapeMismatch("token id " + std::to_string(id) + " out of range");
    }
    if (vocab.is_special_or_tag(id)) continue;
    bytes += vocab.id_to_token[id];
  }
  return utf8::sanitize(bytes);
}

std::vector<int> content_ids(const std::string& text, const std::string& code,
                             const Vocabulary& vocab) {
  (void)code;
  return bpe_ids(text, vocab);
}

std::uint64_t compute_content_hash(const Vocabulary& vocab) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& t : vocab.id_to_token) {
    h = fnv1a(t, h);
    h = fnv1a(std::string(1, '\x1f'), h);
  }
  for (const auto& [l, r] : vocab.merges) {
    h = fnv1a(&l, sizeof(l), h);
    h = fnv1a(&r, sizeof(r), h);
  }
  for (const auto& [code, id] : vocab.lang_tags) {
    h = fnv1a(code, h);
    h = fnv1a(&id, sizeof(id), h);
  }
  return h;
}

std::string to_json(const Vocabulary& vocab) {
  json j;
  j["version"] = 1;
  std::vector<std::string> codes;
  for (const auto& [code, id] : vocab.lang_tags) codes.push_back(code);
  j["lang_codes"] = codes;
  json merges = json::array();
  for (const auto& [l, r] : vocab.merges) merges.push_back({l, r});
  j["merges"] = merges;
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(vocab.content_hash));
  j["content_hash"] = hex;
  return j.dump();
}

Vocabulary from_json(const std::string& text) {
  json j = json::parse(text);
  std::vector<std::string> codes = j.at("lang_codes").get<std::vector<std::string>>();
  Vocabulary v = base_vocab(codes);
  for (const auto& m : j.at("merges")) {
    const int l = m.at(0).get<int>();
    const int r = m.at(1).get<int>();
    v.merges.push_back({l, r});
    v.id_to_token.push_back(v.id_to_token.at(l) + v.id_to_token.at(r));
    v.token_to_id[v.id_to_token.back()] = v.size() - 1;
  }
  v.content_hash = compute_content_hash(v);
  const std::string stored = j.at("content_hash").get<std::string>();
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(v.content_hash));
  if (stored != hex) {
    throw DigestMismatch("vocabulary content hash mismatch: stored " + stored +
                         ", recomputed " + hex);
  }
  return v;
}

void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write vocab: " + path);
  out << to_json(vocab) << "\n";
}

Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open vocab: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace lego::tok
