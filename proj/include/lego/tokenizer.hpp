#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lego/corpus.hpp"

namespace lego::tok {

// Token ids: 0..3 specials, then one tag per registered language, then the
// 256 byte values, then merge products in learned order.
struct Specials {
  int pad = 0;
  int bos = 1;
  int eos = 2;
  int unk = 3;
  static constexpr int count = 4;
};

struct Vocabulary {
  std::vector<std::string> id_to_token;        // byte strings; specials/tags are reserved names
  std::map<std::string, int> token_to_id;
  std::vector<std::pair<int, int>> merges;     // pairs of token ids, learned order
  Specials specials;
  std::map<std::string, int> lang_tags;        // normalized code -> tag id
  std::uint64_t content_hash = 0;

  int size() const { return static_cast<int>(id_to_token.size()); }
  int byte_token(unsigned char b) const {
    return Specials::count + static_cast<int>(lang_tags.size()) + b;
  }
  int tag(const std::string& code) const;
  bool is_special_or_tag(int id) const {
    return id < Specials::count + static_cast<int>(lang_tags.size());
  }
};

struct TokenSeq {
  std::vector<int> ids;  // ids[0] is a lang tag, last id is EOS
};

Vocabulary train_bpe(const std::vector<std::string>& corpus, int vocab_size,
                     const std::vector<std::string>& lang_codes);

TokenSeq encode(const std::string& text, const corpus::LanguageCode& src_tag,
                const Vocabulary& vocab);
TokenSeq encode(const std::string& text, const std::string& src_code,
                const Vocabulary& vocab);

std::string decode(const TokenSeq& seq, const Vocabulary& vocab);

// Content tokens only: tag, EOS and PAD stripped. Used by the metric.
std::vector<int> content_ids(const std::string& text, const std::string& code,
                             const Vocabulary& vocab);

std::uint64_t compute_content_hash(const Vocabulary& vocab);

std::string to_json(const Vocabulary& vocab);
Vocabulary from_json(const std::string& text);
void save_vocab(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocab(const std::string& path);

}  // namespace lego::tok
