#include "lego/metric.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "lego/common.hpp"

namespace lego::metric {

using nlohmann::json;

BleuScore corpus_bleu(const std::vector<std::vector<int>>& hyps,
                      const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size() || hyps.empty()) {
    throw LengthMismatch("hypotheses " + std::to_string(hyps.size()) +
                         " vs references " + std::to_string(refs.size()));
  }
  BleuScore b;
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};

  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& hyp = hyps[s];
    const auto& ref = refs[s];
    b.hyp_len += hyp.size();
    b.ref_len += ref.size();
    for (int n = 1; n <= 4; ++n) {
      if (hyp.size() < static_cast<std::size_t>(n)) continue;
      std::map<std::vector<int>, std::size_t> ref_ngrams;
      if (ref.size() >= static_cast<std::size_t>(n)) {
        for (std::size_t i = 0; i + n <= ref.size(); ++i) {
          ref_ngrams[{ref.begin() + i, ref.begin() + i + n}]++;
        }
      }
      std::map<std::vector<int>, std::size_t> hyp_ngrams;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
        hyp_ngrams[{hyp.begin() + i, hyp.begin() + i + n}]++;
      }
      for (const auto& [gram, count] : hyp_ngrams) {
        totals[n - 1] += count;
        auto it = ref_ngrams.find(gram);
        if (it != ref_ngrams.end()) {
          matches[n - 1] += std::min(count, it->second);  // clipped
        }
      }
    }
  }

  double log_sum = 0.0;
  bool zero = false;
  for (int n = 0; n < 4; ++n) {
    double p;
    if (totals[n] == 0) {
      p = 1.0;  // hypothesis too short to form any n-gram
    } else if (matches[n] == 0) {
      if (n == 0) {
        p = 0.0;
        zero = true;
      } else {
        p = 1.0 / static_cast<double>(totals[n] + 1);  // add-one smoothing
      }
    } else {
      p = static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
    }
    b.precisions[n] = p;
    if (p > 0) log_sum += std::log(p);
  }

  if (b.hyp_len == 0 || zero) {
    b.score = 0.0;
    b.brevity_penalty = b.hyp_len >= b.ref_len ? 1.0 : 0.0;
    return b;
  }
  b.brevity_penalty =
      b.hyp_len >= b.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(b.ref_len) /
                               static_cast<double>(b.hyp_len));
  b.score = b.brevity_penalty * std::exp(log_sum / 4.0) * 100.0;
  return b;
}

BleuScore spbleu(const std::vector<std::string>& hypotheses,
                 const std::vector<std::string>& references,
                 const tok::Vocabulary& vocab) {
  if (hypotheses.size() != references.size() || hypotheses.empty()) {
    throw LengthMismatch("hypotheses " + std::to_string(hypotheses.size()) +
                         " vs references " + std::to_string(references.size()));
  }
  std::vector<std::vector<int>> hyps, refs;
  hyps.reserve(hypotheses.size());
  refs.reserve(references.size());
  for (const auto& h : hypotheses) hyps.push_back(tok::content_ids(h, "", vocab));
  for (const auto& r : references) refs.push_back(tok::content_ids(r, "", vocab));
  return corpus_bleu(hyps, refs);
}

Report direction_table(const DirectionScores& results,
                       const std::vector<std::string>& centers) {
  if (results.empty()) throw ConfigError("no direction scores");
  Report rep;
  double grand_sum = 0.0;
  std::size_t grand_count = 0;
  for (const auto& center : centers) {
    Report::Row row;
    row.center = center;
    double x2c_sum = 0, c2x_sum = 0;
    std::size_t x2c_n = 0, c2x_n = 0;
    for (const auto& [dir, score] : results) {
      if (dir.second == center && dir.first != center) {
        x2c_sum += score.score;
        x2c_n++;
      }
      if (dir.first == center && dir.second != center) {
        c2x_sum += score.score;
        c2x_n++;
      }
    }
    if (x2c_n > 0) {
      row.x2c = x2c_sum / x2c_n;
      row.has_x2c = true;
      grand_sum += row.x2c;
      grand_count++;
    }
    if (c2x_n > 0) {
      row.c2x = c2x_sum / c2x_n;
      row.has_c2x = true;
      grand_sum += row.c2x;
      grand_count++;
    }
    rep.rows.push_back(row);
  }
  rep.avg = grand_count ? grand_sum / grand_count : 0.0;
  return rep;
}

std::string report_json(const Report& report) {
  json j;
  j["rows"] = json::array();
  for (const auto& r : report.rows) {
    json row;
    row["center"] = r.center;
    if (r.has_x2c) row["x2c"] = r.x2c; else row["x2c"] = nullptr;
    if (r.has_c2x) row["c2x"] = r.c2x; else row["c2x"] = nullptr;
    j["rows"].push_back(row);
  }
  j["avg"] = report.avg;
  return j.dump(2);
}

std::string report_text(const Report& report) {
  std::ostringstream os;
  os << "center    X->lg     lg->X\n";
  char buf[64];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%-8s", r.center.c_str());
    os << buf;
    if (r.has_x2c) {
      std::snprintf(buf, sizeof(buf), "%8.2f  ", r.x2c);
      os << buf;
    } else {
      os << "       -  ";
    }
    if (r.has_c2x) {
      std::snprintf(buf, sizeof(buf), "%8.2f", r.c2x);
      os << buf;
    } else {
      os << "       -";
    }
    os << "\n";
  }
  std::snprintf(buf, sizeof(buf), "AVG  %8.2f\n", report.avg);
  os << buf;
  return os.str();
}

}  // namespace lego::metric
