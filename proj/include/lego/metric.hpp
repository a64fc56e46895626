#pragma once

#include <map>
#include <string>
#include <vector>

#include "lego/tokenizer.hpp"

namespace lego::metric {

struct BleuScore {
  double score = 0.0;             // in [0, 100]
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 1.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

// Corpus BLEU over subword tokenizations (tag and EOS stripped before
// counting). Modified n-gram precisions n=1..4; add-one smoothing for n>=2
// when a numerator is zero; exponential brevity penalty.
BleuScore spbleu(const std::vector<std::string>& hypotheses,
                 const std::vector<std::string>& references,
                 const tok::Vocabulary& vocab);

// Same computation on pre-tokenized sequences; spbleu() delegates here.
BleuScore corpus_bleu(const std::vector<std::vector<int>>& hyps,
                      const std::vector<std::vector<int>>& refs);

struct Report {
  struct Row {
    std::string center;
    double x2c = 0.0;   // mean over X -> center
    double c2x = 0.0;   // mean over center -> X
    bool has_x2c = false;
    bool has_c2x = false;
  };
  std::vector<Row> rows;
  double avg = 0.0;
};

using DirectionScores =
    std::map<std::pair<std::string, std::string>, BleuScore>;

Report direction_table(const DirectionScores& results,
                       const std::vector<std::string>& centers);

std::string report_json(const Report& report);
std::string report_text(const Report& report);

}  // namespace lego::metric
