#include "lego/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lego/common.hpp"
#include "lego/utf8.hpp"

#ifndef LEGO_DATA_DIR
#define LEGO_DATA_DIR "data"
#endif

namespace lego::corpus {

using nlohmann::json;

// ---------------------------------------------------------------------------
// CodeTable

CodeTable CodeTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open code table: " + path);
  json j = json::parse(in);
  CodeTable t;
  for (auto& [k, v] : j.at("replacements").items()) {
    t.replacements_[k] = v.get<std::string>();
  }
  for (auto& c : j.at("unknown_codes")) {
    t.unknown_.insert(c.get<std::string>());
  }
  return t;
}

const CodeTable& CodeTable::builtin() {
  static const CodeTable t = load(std::string(LEGO_DATA_DIR) + "/lang_codes.json");
  return t;
}

static std::string ascii_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

LanguageCode CodeTable::normalize(const std::string& raw) const {
  LanguageCode lc;
  lc.raw = raw;
  if (auto it = replacements_.find(raw); it != replacements_.end()) {
    lc.normalized = it->second;
    return lc;
  }
  std::string code = raw;
  if (auto pos = code.find('_'); pos != std::string::npos && pos > 0) {
    code = code.substr(0, pos);  // strip region id: xx_YY -> xx
  }
  code = ascii_lower(code);
  // Re-check the map after stripping, so e.g. region-suffixed forms of
  // replaced codes still land on the canonical code.
  if (auto it = replacements_.find(code); it != replacements_.end()) {
    lc.normalized = it->second;
    return lc;
  }
  lc.normalized = code;
  lc.unknown = unknown_.count(code) > 0;
  return lc;
}

LanguageCode normalize_code(const std::string& raw, const CodeTable& table) {
  return table.normalize(raw);
}

// ---------------------------------------------------------------------------
// Unification

namespace {

bool is_ws(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == 0x3000;
}

bool is_cjk(char32_t c) {
  return (c >= 0x3000 && c <= 0x303F) ||   // CJK punctuation
         (c >= 0x3040 && c <= 0x30FF) ||   // kana
         (c >= 0x3400 && c <= 0x4DBF) ||
         (c >= 0x4E00 && c <= 0x9FFF) ||
         (c >= 0xF900 && c <= 0xFAFF) ||
         (c >= 0xFF00 && c <= 0xFFEF);     // fullwidth forms
}

bool cjk_language(const std::string& code) {
  return code == "zh" || code == "zhtrad" || code == "ja";
}

// Collapses whitespace runs to single spaces; for CJK languages a run
// flanked by CJK characters on both sides is deleted outright.
std::string detokenize(const std::string& text, const std::string& code) {
  const bool cjk = cjk_language(code);
  auto cps = utf8::decode(text);
  std::string out;
  std::size_t i = 0;
  while (i < cps.size()) {
    if (!is_ws(cps[i])) {
      utf8::append(out, cps[i]);
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < cps.size() && is_ws(cps[j])) ++j;
    const bool leading = i == 0;
    const bool trailing = j == cps.size();
    if (!leading && !trailing) {
      if (cjk && is_cjk(cps[i - 1]) && is_cjk(cps[j])) {
        // drop the run
      } else {
        out += ' ';
      }
    }
    i = j;
  }
  return out;
}

std::size_t length_units(const std::string& text, const std::string& code) {
  auto cps = utf8::decode(text);
  if (cjk_language(code)) {
    std::size_t n = 0;
    for (auto c : cps) {
      if (!is_ws(c)) ++n;
    }
    return n;
  }
  std::size_t n = 0;
  bool in_tok = false;
  for (auto c : cps) {
    if (is_ws(c)) {
      in_tok = false;
    } else if (!in_tok) {
      in_tok = true;
      ++n;
    }
  }
  return n;
}

}  // namespace

ParallelPair unify_pair(const ParallelPair& pair, const CodeTable& table) {
  ParallelPair out;
  out.src_lang = table.normalize(pair.src_lang.raw.empty() ? pair.src_lang.normalized
                                                           : pair.src_lang.raw);
  out.tgt_lang = table.normalize(pair.tgt_lang.raw.empty() ? pair.tgt_lang.normalized
                                                           : pair.tgt_lang.raw);
  out.src_text = detokenize(pair.src_text, out.src_lang.normalized);
  out.tgt_text = detokenize(pair.tgt_text, out.tgt_lang.normalized);
  out.origin = pair.origin;
  if (out.src_text.empty() || out.tgt_text.empty()) {
    throw EmptyText("pair became empty after unification (" +
                    out.src_lang.normalized + "->" + out.tgt_lang.normalized + ")");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest ops

CorpusManifest make_manifest(std::vector<ParallelPair> pairs) {
  CorpusManifest m;
  m.pairs = std::move(pairs);
  std::set<std::string> langs;
  for (const auto& p : m.pairs) {
    m.direction_index[direction_of(p)]++;
    langs.insert(p.src_lang.normalized);
    langs.insert(p.tgt_lang.normalized);
  }
  m.language_count = langs.size();
  return m;
}

CorpusManifest merge(const std::vector<CorpusManifest>& manifests) {
  std::vector<ParallelPair> pooled;
  for (const auto& m : manifests) {
    pooled.insert(pooled.end(), m.pairs.begin(), m.pairs.end());
  }
  // Pool by direction, keeping input order within each direction.
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const ParallelPair& a, const ParallelPair& b) {
                     return direction_of(a) < direction_of(b);
                   });
  return make_manifest(std::move(pooled));
}

std::pair<CorpusManifest, CleanReport> clean(const CorpusManifest& manifest) {
  CleanReport report;
  report.input_pairs = manifest.pairs.size();
  std::map<Direction, std::set<std::pair<std::string, std::string>>> seen;
  std::vector<ParallelPair> kept;
  for (const auto& p : manifest.pairs) {
    auto& dir_seen = seen[direction_of(p)];
    if (!dir_seen.insert({p.src_text, p.tgt_text}).second) {
      report.duplicates++;
      continue;
    }
    if (p.src_text.empty() || p.tgt_text.empty() || p.src_text == p.tgt_text) {
      report.missing_translation++;
      continue;
    }
    const std::size_t src_len = length_units(p.src_text, p.src_lang.normalized);
    const std::size_t tgt_len = length_units(p.tgt_text, p.tgt_lang.normalized);
    if (src_len > 250 || tgt_len > 250) {
      report.too_long++;
      continue;
    }
    const std::size_t lo = std::min(src_len, tgt_len);
    const std::size_t hi = std::max(src_len, tgt_len);
    if (lo >= 1 && hi > 3 * lo) {
      report.length_ratio++;
      continue;
    }
    kept.push_back(p);
  }
  report.output_pairs = kept.size();
  return {make_manifest(std::move(kept)), report};
}

SplitAssignment split(const CorpusManifest& manifest, std::uint64_t seed) {
  SplitAssignment out;
  out.seed = seed;
  std::map<Direction, std::vector<const ParallelPair*>> by_dir;
  for (const auto& p : manifest.pairs) by_dir[direction_of(p)].push_back(&p);

  for (const auto& [dir, ptrs] : by_dir) {
    auto& ds = out.directions[dir];
    const std::size_t n = ptrs.size();
    if (n < 10) {
      for (auto* p : ptrs) ds.train.push_back(*p);
      out.too_small.insert(dir);
      continue;
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, "split:" + dir.first + ">" + dir.second));
    rng.shuffle(idx);

    std::size_t n_dev, n_test;
    if (n > 6000) {
      n_dev = n_test = 2000;
    } else {
      n_dev = n_test = n / 10;
    }
    std::vector<bool> held(n, false);
    for (std::size_t i = 0; i < n_dev; ++i) {
      ds.dev.push_back(*ptrs[idx[i]]);
      held[idx[i]] = true;
    }
    for (std::size_t i = n_dev; i < n_dev + n_test; ++i) {
      ds.test.push_back(*ptrs[idx[i]]);
      held[idx[i]] = true;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!held[i]) ds.train.push_back(*ptrs[i]);
    }
  }
  return out;
}

SplitAssignment filter_benchmark_overlap(const SplitAssignment& split,
                                         const std::vector<ParallelPair>& benchmark) {
  std::set<std::string> bench;
  for (const auto& p : benchmark) {
    bench.insert(p.src_text);
    bench.insert(p.tgt_text);
  }
  auto overlaps = [&](const ParallelPair& p) {
    return bench.count(p.src_text) > 0 || bench.count(p.tgt_text) > 0;
  };
  SplitAssignment out;
  out.seed = split.seed;
  out.too_small = split.too_small;
  for (const auto& [dir, ds] : split.directions) {
    auto& o = out.directions[dir];
    for (const auto& p : ds.train) {
      if (!overlaps(p)) o.train.push_back(p);
    }
    for (const auto& p : ds.dev) {
      if (!overlaps(p)) o.dev.push_back(p);
    }
    o.test = ds.test;  // test is left untouched
  }
  return out;
}

std::vector<Shard> shard(const SplitAssignment& split,
                         const std::vector<LanguageCode>& center_languages,
                         int shard_count, std::uint64_t seed) {
  if (shard_count < 1) throw ConfigError("shard_count must be >= 1");
  if (center_languages.empty()) throw ConfigError("no center languages");

  // Directions with non-empty train sets, for the multilingual sample.
  std::vector<const std::vector<ParallelPair>*> train_dirs;
  for (const auto& [dir, ds] : split.directions) {
    if (!ds.train.empty()) train_dirs.push_back(&ds.train);
  }

  std::vector<Shard> shards;
  for (const auto& center : center_languages) {
    std::vector<ParallelPair> o2m, m2o;
    for (const auto& [dir, ds] : split.directions) {
      for (const auto& p : ds.train) {
        if (p.src_lang.normalized == center.normalized) o2m.push_back(p);
        if (p.tgt_lang.normalized == center.normalized) m2o.push_back(p);
      }
    }
    Rng rng_o(derive_seed(seed, "shard:o2m:" + center.normalized));
    Rng rng_m(derive_seed(seed, "shard:m2o:" + center.normalized));
    rng_o.shuffle(o2m);
    rng_m.shuffle(m2o);

    std::vector<Shard> center_shards(shard_count);
    for (int s = 0; s < shard_count; ++s) {
      center_shards[s].shard_id = s;
      center_shards[s].center_language = center;
    }
    for (std::size_t i = 0; i < o2m.size(); ++i) {
      center_shards[i % shard_count].one_to_many.push_back(o2m[i]);
    }
    for (std::size_t i = 0; i < m2o.size(); ++i) {
      center_shards[i % shard_count].many_to_one.push_back(m2o[i]);
    }
    // Mix-Flow sample: uniform over directions, then uniform over pairs.
    for (auto& sh : center_shards) {
      if (train_dirs.empty()) break;
      Rng rng(derive_seed(seed, "shard:mix:" + center.normalized + ":" +
                                    std::to_string(sh.shard_id)));
      const std::size_t want = sh.one_to_many.size() + sh.many_to_one.size();
      for (std::size_t k = 0; k < want; ++k) {
        const auto& dir = *train_dirs[rng.below(train_dirs.size())];
        sh.multilingual_sample.push_back(dir[rng.below(dir.size())]);
      }
    }
    for (auto& sh : center_shards) shards.push_back(std::move(sh));
  }
  return shards;
}

// ---------------------------------------------------------------------------
// JSONL I/O

static json pair_json(const ParallelPair& p) {
  json j;
  j["src_lang"] = p.src_lang.normalized.empty() ? p.src_lang.raw : p.src_lang.normalized;
  j["tgt_lang"] = p.tgt_lang.normalized.empty() ? p.tgt_lang.raw : p.tgt_lang.normalized;
  j["src_text"] = p.src_text;
  j["tgt_text"] = p.tgt_text;
  j["origin"] = p.origin;
  return j;
}

std::vector<ParallelPair> read_pairs_jsonl(std::istream& in, const CodeTable& table) {
  std::vector<ParallelPair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    ParallelPair p;
    p.src_lang = table.normalize(j.at("src_lang").get<std::string>());
    p.tgt_lang = table.normalize(j.at("tgt_lang").get<std::string>());
    p.src_text = j.at("src_text").get<std::string>();
    p.tgt_text = j.at("tgt_text").get<std::string>();
    p.origin = j.value("origin", "");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::vector<ParallelPair> read_pairs_file(const std::string& path,
                                          const CodeTable& table) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open pair file: " + path);
  return read_pairs_jsonl(in, table);
}

void write_pairs_jsonl(std::ostream& out, const std::vector<ParallelPair>& pairs) {
  for (const auto& p : pairs) out << pair_json(p).dump() << "\n";
}

void write_split_jsonl(std::ostream& out, const SplitAssignment& split) {
  for (const auto& [dir, ds] : split.directions) {
    auto emit = [&](const std::vector<ParallelPair>& v, const char* name) {
      for (const auto& p : v) {
        json j = pair_json(p);
        j["split"] = name;
        out << j.dump() << "\n";
      }
    };
    emit(ds.train, "train");
    emit(ds.dev, "dev");
    emit(ds.test, "test");
  }
}

void write_shard_jsonl(std::ostream& out, const Shard& shard,
                       const std::string& split_name) {
  auto emit = [&](const std::vector<ParallelPair>& v, const char* group) {
    for (const auto& p : v) {
      json j = pair_json(p);
      j["split"] = split_name;
      j["shard_id"] = shard.shard_id;
      j["center"] = shard.center_language.normalized;
      j["group"] = group;
      out << j.dump() << "\n";
    }
  };
  emit(shard.one_to_many, "one_to_many");
  emit(shard.many_to_one, "many_to_one");
  emit(shard.multilingual_sample, "multilingual");
}

std::string clean_report_json(const CleanReport& r) {
  json j;
  j["input_pairs"] = r.input_pairs;
  j["output_pairs"] = r.output_pairs;
  j["removed"]["duplicates"] = r.duplicates;
  j["removed"]["missing_translation"] = r.missing_translation;
  j["removed"]["too_long"] = r.too_long;
  j["removed"]["length_ratio"] = r.length_ratio;
  return j.dump(2);
}

}  // namespace lego::corpus
