#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace lego::corpus {

struct LanguageCode {
  std::string raw;
  std::string normalized;
  bool unknown = false;  // out of ISO 639 series, kept verbatim

  friend bool operator==(const LanguageCode& a, const LanguageCode& b) {
    return a.normalized == b.normalized;
  }
};

struct ParallelPair {
  LanguageCode src_lang;
  LanguageCode tgt_lang;
  std::string src_text;
  std::string tgt_text;
  std::string origin;
};

// (src, tgt) normalized codes; ordered so per-direction processing is
// deterministic.
using Direction = std::pair<std::string, std::string>;

inline Direction direction_of(const ParallelPair& p) {
  return {p.src_lang.normalized, p.tgt_lang.normalized};
}

struct CorpusManifest {
  std::vector<ParallelPair> pairs;
  std::map<Direction, std::size_t> direction_index;
  std::size_t language_count = 0;
};

CorpusManifest make_manifest(std::vector<ParallelPair> pairs);

struct CleanReport {
  std::size_t duplicates = 0;
  std::size_t missing_translation = 0;  // empty side or self-translation
  std::size_t too_long = 0;             // > 250 units
  std::size_t length_ratio = 0;         // max/min > 3
  std::size_t input_pairs = 0;
  std::size_t output_pairs = 0;

  std::size_t removed() const {
    return duplicates + missing_translation + too_long + length_ratio;
  }
};

struct SplitAssignment {
  struct DirectionSplit {
    std::vector<ParallelPair> train, dev, test;
  };
  std::map<Direction, DirectionSplit> directions;
  std::uint64_t seed = 0;
  // Directions with < 10 pairs: everything went to train.
  std::set<Direction> too_small;
};

struct Shard {
  int shard_id = 0;
  LanguageCode center_language;
  std::vector<ParallelPair> one_to_many;   // src == center
  std::vector<ParallelPair> many_to_one;   // tgt == center
  std::vector<ParallelPair> multilingual_sample;
};

// Language-code normalization table (replacement map + known unknown codes),
// loaded from a versioned JSON data file.
class CodeTable {
 public:
  static CodeTable load(const std::string& path);
  // Loads from the data directory compiled into the binary.
  static const CodeTable& builtin();

  LanguageCode normalize(const std::string& raw) const;

 private:
  std::map<std::string, std::string> replacements_;
  std::set<std::string> unknown_;
};

LanguageCode normalize_code(const std::string& raw, const CodeTable& table);

ParallelPair unify_pair(const ParallelPair& pair, const CodeTable& table);

CorpusManifest merge(const std::vector<CorpusManifest>& manifests);

std::pair<CorpusManifest, CleanReport> clean(const CorpusManifest& manifest);

SplitAssignment split(const CorpusManifest& manifest, std::uint64_t seed);

SplitAssignment filter_benchmark_overlap(const SplitAssignment& split,
                                         const std::vector<ParallelPair>& benchmark);

std::vector<Shard> shard(const SplitAssignment& split,
                         const std::vector<LanguageCode>& center_languages,
                         int shard_count, std::uint64_t seed);

// JSONL I/O: one {"src_lang","tgt_lang","src_text","tgt_text","origin"}
// object per line. Envelope fields ("split", "shard_id", "center") are
// written by the emitters below and ignored by the reader.
std::vector<ParallelPair> read_pairs_jsonl(std::istream& in,
                                           const CodeTable& table);
std::vector<ParallelPair> read_pairs_file(const std::string& path,
                                          const CodeTable& table);
void write_pairs_jsonl(std::ostream& out, const std::vector<ParallelPair>& pairs);
void write_split_jsonl(std::ostream& out, const SplitAssignment& split);
void write_shard_jsonl(std::ostream& out, const Shard& shard,
                       const std::string& split_name);
std::string clean_report_json(const CleanReport& report);

}  // namespace lego::corpus
