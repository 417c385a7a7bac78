#pragma once

// Caption evaluation: corpus BLEU, ROUGE-L, CIDEr, and the pooled mean
// cross-entropy used for cross-corpus loss comparisons. Conventions are
// pinned here so the emitted numbers are reproducible: BLEU uses clipped
// precisions with uniform 1/n weights, the closest-reference-length
// brevity penalty, and no smoothing; ROUGE-L is the LCS F-measure with
// beta = 1.2, max over references; CIDEr is the raw-count TF-IDF cosine
// variant (idf = log(corpus / df), df floored at 1), averaged over
// references and over n = 1..4, scaled by 10.

#include <string>
#include <vector>

#include "vlm/data.hpp"

namespace vlm {

struct EvalPair {
    std::vector<std::string> candidate;
    std::vector<std::vector<std::string>> references;  // at least one
};

// Corpus-level BLEU-n_max in [0,1]. n_max in {1,2,3,4}.
double bleu(const std::vector<EvalPair>& pairs, int n_max);

// Mean over the corpus of the per-pair best-reference LCS F-measure.
double rouge_l(const std::vector<EvalPair>& pairs);

// Document frequencies come from the pairs' own reference sets, so the
// corpus needs at least two images.
double cider(const std::vector<EvalPair>& pairs);

// Total supervised cross-entropy over the dataset divided by the total
// number of supervised positions (pooled, not per-sample averaged).
// Captions evaluate with next-token labels, conversations with
// answer-only labels, both under the prefix mask.
double corpus_mean_ce(const std::vector<Sample>& dataset, const Vocabulary& vocab,
                      const VLMParams& params, const VLMConfig& cfg);

}  // namespace vlm
