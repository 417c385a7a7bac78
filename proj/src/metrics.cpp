#include "vlm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "vlm/training.hpp"

namespace vlm {

namespace {

using Gram = std::vector<std::string>;
using GramCounts = std::map<Gram, std::int64_t>;

GramCounts count_ngrams(const std::vector<std::string>& tokens, int n) {
    GramCounts counts;
    const std::int64_t len = static_cast<std::int64_t>(tokens.size());
    for (std::int64_t i = 0; i + n <= len; ++i) {
        Gram g(tokens.begin() + i, tokens.begin() + i + n);
        ++counts[g];
    }
    return counts;
}

void validate_pairs(const std::vector<EvalPair>& pairs, const char* who) {
    if (pairs.empty()) throw std::invalid_argument(std::string(who) + ": empty corpus");
    for (const EvalPair& p : pairs) {
        if (p.candidate.empty()) {
            throw std::invalid_argument(std::string(who) + ": empty candidate");
        }
        if (p.references.empty()) {
            throw std::invalid_argument(std::string(who) + ": pair without references");
        }
        for (const auto& r : p.references) {
            if (r.empty()) throw std::invalid_argument(std::string(who) + ": empty reference");
        }
    }
}

}  // namespace

double bleu(const std::vector<EvalPair>& pairs, int n_max) {
    if (n_max < 1 || n_max > 4) throw std::invalid_argument("bleu: n_max must be 1..4");
    validate_pairs(pairs, "bleu");

    std::vector<double> matched(static_cast<std::size_t>(n_max), 0.0);
    std::vector<double> total(static_cast<std::size_t>(n_max), 0.0);
    double cand_len = 0.0, ref_len = 0.0;

    for (const EvalPair& p : pairs) {
        const std::int64_t c = static_cast<std::int64_t>(p.candidate.size());
        cand_len += static_cast<double>(c);

        // closest reference length; ties prefer the shorter
        std::int64_t best = static_cast<std::int64_t>(p.references[0].size());
        for (const auto& r : p.references) {
            const std::int64_t rl = static_cast<std::int64_t>(r.size());
            if (std::llabs(rl - c) < std::llabs(best - c) ||
                (std::llabs(rl - c) == std::llabs(best - c) && rl < best)) {
                best = rl;
            }
        }
        ref_len += static_cast<double>(best);

        for (int n = 1; n <= n_max; ++n) {
            const GramCounts cand = count_ngrams(p.candidate, n);
            GramCounts clip;
            for (const auto& r : p.references) {
                for (const auto& [g, cnt] : count_ngrams(r, n)) {
                    clip[g] = std::max(clip[g], cnt);
                }
            }
            for (const auto& [g, cnt] : cand) {
                auto it = clip.find(g);
                const std::int64_t allowed = it == clip.end() ? 0 : it->second;
                matched[static_cast<std::size_t>(n - 1)] +=
                    static_cast<double>(std::min(cnt, allowed));
                total[static_cast<std::size_t>(n - 1)] += static_cast<double>(cnt);
            }
        }
    }

    double log_sum = 0.0;
    for (int n = 0; n < n_max; ++n) {
        const std::size_t i = static_cast<std::size_t>(n);
        if (total[i] == 0.0 || matched[i] == 0.0) return 0.0;  // no smoothing
        log_sum += std::log(matched[i] / total[i]) / n_max;
    }
    const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return bp * std::exp(log_sum);
}

namespace {

std::int64_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t m = a.size(), n = b.size();
    std::vector<std::int64_t> prev(n + 1, 0), cur(n + 1, 0);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= n; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[n];
}

}  // namespace

double rouge_l(const std::vector<EvalPair>& pairs) {
    validate_pairs(pairs, "rouge_l");
    constexpr double kBetaSq = 1.2 * 1.2;
    double sum = 0.0;
    for (const EvalPair& p : pairs) {
        double best = 0.0;
        for (const auto& r : p.references) {
            const double lcs = static_cast<double>(lcs_length(p.candidate, r));
            if (lcs == 0.0) continue;
            const double prec = lcs / static_cast<double>(p.candidate.size());
            const double rec = lcs / static_cast<double>(r.size());
            const double f = ((1.0 + kBetaSq) * prec * rec) / (rec + kBetaSq * prec);
            best = std::max(best, f);
        }
        sum += best;
    }
    return sum / static_cast<double>(pairs.size());
}

double cider(const std::vector<EvalPair>& pairs) {
    validate_pairs(pairs, "cider");
    if (pairs.size() < 2) {
        throw std::invalid_argument(
            "cider: document frequencies need a corpus of at least two images");
    }
    const double corpus_size = static_cast<double>(pairs.size());

    // df: how many images' reference sets contain each n-gram
    std::vector<GramCounts> df(4);
    for (const EvalPair& p : pairs) {
        for (int n = 1; n <= 4; ++n) {
            GramCounts seen;
            for (const auto& r : p.references) {
                for (const auto& [g, cnt] : count_ngrams(r, n)) seen[g] = 1;
            }
            for (const auto& [g, one] : seen) df[static_cast<std::size_t>(n - 1)][g] += 1;
        }
    }
    auto idf = [&](int n, const Gram& g) {
        const auto& table = df[static_cast<std::size_t>(n - 1)];
        auto it = table.find(g);
        const double freq =
            it == table.end() ? 1.0 : std::max(1.0, static_cast<double>(it->second));
        return std::log(corpus_size / freq);
    };

    double corpus_sum = 0.0;
    for (const EvalPair& p : pairs) {
        double pair_score = 0.0;
        for (int n = 1; n <= 4; ++n) {
            std::map<Gram, double> cand;
            double cand_norm_sq = 0.0;
            for (const auto& [g, cnt] : count_ngrams(p.candidate, n)) {
                const double w = static_cast<double>(cnt) * idf(n, g);
                cand[g] = w;
                cand_norm_sq += w * w;
            }
            double ref_mean = 0.0;
            for (const auto& r : p.references) {
                double dot = 0.0, ref_norm_sq = 0.0;
                for (const auto& [g, cnt] : count_ngrams(r, n)) {
                    const double w = static_cast<double>(cnt) * idf(n, g);
                    ref_norm_sq += w * w;
                    auto it = cand.find(g);
                    if (it != cand.end()) dot += it->second * w;
                }
                if (cand_norm_sq > 0.0 && ref_norm_sq > 0.0) {
                    ref_mean += dot / (std::sqrt(cand_norm_sq) * std::sqrt(ref_norm_sq));
                }
            }
            pair_score += ref_mean / static_cast<double>(p.references.size());
        }
        corpus_sum += 10.0 * pair_score / 4.0;
    }
    return corpus_sum / corpus_size;
}

double corpus_mean_ce(const std::vector<Sample>& dataset, const Vocabulary& vocab,
                      const VLMParams& params, const VLMConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("corpus_mean_ce: empty dataset");
    double total = 0.0;
    std::int64_t positions = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Sample& s = dataset[i];
        const Batch batch = build_batch({s}, s.is_conversation() ? 3 : 1, vocab, cfg, 0,
                                        {static_cast<std::int64_t>(i)});
        std::int64_t supervised = 0;
        for (std::int64_t label : batch.labels[0]) supervised += label != kIgnoreIndex;
        const double mean = forward_stage(batch, params, cfg).value();
        total += mean * static_cast<double>(supervised);
        positions += supervised;
    }
    if (positions == 0) throw std::invalid_argument("corpus_mean_ce: no supervised positions");
    return total / static_cast<double>(positions);
}

}  // namespace vlm
