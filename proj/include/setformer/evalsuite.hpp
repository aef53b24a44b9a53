#pragma once

// MCQ evaluation: option scoring and prediction under both prompting modes,
// permutation sweeps, the Best-of/Worst-of robustness metrics over
// normal+reversed orderings, and corpus perplexity.

#include "setformer/common.hpp"
#include "setformer/data.hpp"
#include "setformer/finetune.hpp"
#include "setformer/losses.hpp"
#include "setformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace setformer {

enum class PromptMode {
    kStandard,
    kSbp,
};

inline PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "standard") {
        return PromptMode::kStandard;
    }
    if (s == "sbp") {
        return PromptMode::kSbp;
    }
    throw ConfigError("unknown mode \"" + s + "\" (expected standard or sbp)");
}

inline std::string to_string(PromptMode m) {
    return m == PromptMode::kStandard ? "standard" : "sbp";
}

// Mean log-probability of every candidate answer, always reported in
// dataset order regardless of how the permutation displays the options.
// In standard mode the permutation reorders the rendered option list; in
// sbp mode it reorders the parallel segments (a physically different layout
// that must score identically).
inline std::vector<double> option_scores(const ModelState& st, const McqItem& item,
                                         PromptMode mode,
                                         const std::vector<std::size_t>& permutation) {
    check_permutation(permutation, item.options.size());
    SbpLayout prompt;
    std::vector<std::vector<TokenId>> answers;
    if (mode == PromptMode::kStandard) {
        StandardPrompt sp = format_standard(item, permutation);
        prompt = build_causal_layout(sp.tokens);
        answers = std::move(sp.answers);
    } else {
        SbpPrompt sp = format_sbp(item);
        prompt = build_sbp_layout(permute_segments(sp.prompt, permutation));
        answers = std::move(sp.answers);
    }
    std::vector<double> scores;
    scores.reserve(answers.size());
    for (const auto& a : answers) {
        scores.push_back(answer_logprob(nullptr, st, prompt, a).item());
    }
    return scores;
}

// Argmax over option scores; ties go to the lowest dataset index.
inline std::size_t predict(const ModelState& st, const McqItem& item, PromptMode mode,
                           const std::vector<std::size_t>& permutation) {
    const std::vector<double> scores = option_scores(st, item, mode, permutation);
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) {
            best = i;
        }
    }
    return best;
}

inline std::vector<std::size_t> reversed_permutation(std::size_t n) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) {
        perm[i] = n - 1 - i;
    }
    return perm;
}

// All n! permutations in lexicographic order.
inline std::vector<std::vector<std::size_t>> enumerate_permutations(std::size_t n) {
    std::vector<std::size_t> perm = identity_permutation(n);
    std::vector<std::vector<std::size_t>> out;
    do {
        out.push_back(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return out;
}

inline std::size_t factorial(std::size_t n) {
    std::size_t f = 1;
    for (std::size_t i = 2; i <= n; ++i) {
        f *= i;
    }
    return f;
}

// Seeded distinct permutations: repeated Fisher-Yates draws with rejection
// of duplicates, reported in draw order.
inline std::vector<std::vector<std::size_t>> sample_permutations(std::size_t n,
                                                                 std::size_t n_perms,
                                                                 Rng& rng) {
    const std::size_t total = factorial(n);
    if (n_perms > total) {
        throw ConfigError("requested " + std::to_string(n_perms) + " permutations but only " +
                          std::to_string(total) + " exist for " + std::to_string(n) + " options");
    }
    std::vector<std::vector<std::size_t>> out;
    std::set<std::vector<std::size_t>> seen;
    std::vector<std::size_t> perm = identity_permutation(n);
    while (out.size() < n_perms) {
        rng.shuffle(perm);
        if (seen.insert(perm).second) {
            out.push_back(perm);
        }
    }
    return out;
}

struct PermutationReport {
    PromptMode mode = PromptMode::kStandard;
    std::uint64_t seed = 0;
    std::size_t n_questions = 0;
    std::vector<std::vector<std::size_t>> permutations;
    std::vector<double> accuracies;                     // one per permutation
    std::vector<std::vector<std::uint8_t>> correctness; // [permutation][question]
    bool sample_clipped = false;

    double max_accuracy() const { return *std::max_element(accuracies.begin(), accuracies.end()); }
    double min_accuracy() const { return *std::min_element(accuracies.begin(), accuracies.end()); }
    double spread() const { return max_accuracy() - min_accuracy(); }
};

// Evaluates accuracy under n_perms option orderings on a seeded question
// sample. With n_perms equal to the full factorial the orderings are the
// exact lexicographic enumeration; otherwise they are seeded distinct
// draws. Every permutation sees the same question subset.
inline PermutationReport permutation_sweep(const ModelState& st, const std::vector<McqItem>& items,
                                           PromptMode mode, std::size_t n_perms,
                                           std::size_t sample_size, std::uint64_t seed) {
    if (items.empty()) {
        throw ConfigError("permutation_sweep: no items");
    }
    if (n_perms == 0) {
        throw ConfigError("permutation_sweep: n_perms must be >= 1");
    }
    const std::size_t n_options = items[0].options.size();
    for (const auto& item : items) {
        if (item.options.size() != n_options) {
            throw ConfigError("permutation_sweep: items must all have the same option count");
        }
    }

    PermutationReport report;
    report.mode = mode;
    report.seed = seed;

    Rng rng(seed);
    Rng perm_rng = rng.fork(1);
    Rng sample_rng = rng.fork(2);

    const std::size_t total = factorial(n_options);
    if (n_perms > total) {
        throw ConfigError("permutation_sweep: n_perms " + std::to_string(n_perms) +
                          " exceeds the " + std::to_string(total) + " possible orderings");
    }
    report.permutations = n_perms == total ? enumerate_permutations(n_options)
                                           : sample_permutations(n_options, n_perms, perm_rng);

    std::vector<std::size_t> question_idx(items.size());
    for (std::size_t i = 0; i < question_idx.size(); ++i) {
        question_idx[i] = i;
    }
    if (sample_size < items.size()) {
        sample_rng.shuffle(question_idx);
        question_idx.resize(sample_size);
        std::sort(question_idx.begin(), question_idx.end());
    } else if (sample_size > items.size()) {
        report.sample_clipped = true;
    }
    report.n_questions = question_idx.size();

    for (const auto& perm : report.permutations) {
        std::vector<std::uint8_t> row;
        row.reserve(question_idx.size());
        std::size_t hits = 0;
        for (std::size_t qi : question_idx) {
            const bool ok = predict(st, items[qi], mode, perm) == items[qi].correct_index;
            row.push_back(ok ? 1 : 0);
            hits += ok ? 1 : 0;
        }
        report.accuracies.push_back(static_cast<double>(hits) /
                                    static_cast<double>(question_idx.size()));
        report.correctness.push_back(std::move(row));
    }
    return report;
}

// ----------------------------------------------------------------------
// Robustness metrics over the normal and reversed orderings
// ----------------------------------------------------------------------

struct RobustnessMetrics {
    double best_of_2 = 0.0;            // correct under at least one ordering
    double best_of_1 = 0.0;            // correct under the normal ordering
    double worst_of_1 = 0.0;           // incorrect under at least one ordering
    double all_orderings_correct = 0.0; // correct under both
};

namespace detail {

// Straightforward counting over (normal, reversed) correctness pairs.
inline RobustnessMetrics metrics_by_counting(
    const std::vector<std::pair<bool, bool>>& pairs) {
    std::size_t any = 0, normal = 0, any_wrong = 0, both = 0;
    for (const auto& [n, r] : pairs) {
        any += (n || r) ? 1 : 0;
        normal += n ? 1 : 0;
        any_wrong += (!n || !r) ? 1 : 0;
        both += (n && r) ? 1 : 0;
    }
    const double total = static_cast<double>(pairs.size());
    return RobustnessMetrics{static_cast<double>(any) / total,
                             static_cast<double>(normal) / total,
                             static_cast<double>(any_wrong) / total,
                             static_cast<double>(both) / total};
}

// Independent recomputation used as the always-on self-check: enumerates
// each metric from its definition in a separate pass, then cross-checks the
// complement identities.
inline RobustnessMetrics metrics_by_enumeration(
    const std::vector<std::pair<bool, bool>>& pairs) {
    const double total = static_cast<double>(pairs.size());
    std::size_t c = 0;
    for (const auto& p : pairs) {
        c += (p.first || p.second) ? 1 : 0;
    }
    const std::size_t any = c;
    c = 0;
    for (const auto& p : pairs) {
        c += p.first ? 1 : 0;
    }
    const std::size_t normal = c;
    c = 0;
    for (const auto& p : pairs) {
        c += !(p.first && p.second) ? 1 : 0;
    }
    const std::size_t any_wrong = c;
    c = 0;
    for (const auto& p : pairs) {
        c += (p.first && p.second) ? 1 : 0;
    }
    const std::size_t both = c;

    std::size_t both_wrong = 0;
    for (const auto& p : pairs) {
        both_wrong += (!p.first && !p.second) ? 1 : 0;
    }
    // The complements must tile the table exactly; checked on the integer
    // counts because the divided values round independently.
    if (any + both_wrong != pairs.size() || any_wrong + both != pairs.size()) {
        throw NumericError("robustness metrics: complement identities violated");
    }

    RobustnessMetrics m;
    m.best_of_2 = static_cast<double>(any) / total;
    m.best_of_1 = static_cast<double>(normal) / total;
    m.worst_of_1 = static_cast<double>(any_wrong) / total;
    m.all_orderings_correct = static_cast<double>(both) / total;
    return m;
}

} // namespace detail

// Metrics from a raw correctness table; both computation paths must agree
// exactly or the call aborts.
inline RobustnessMetrics metrics_from_pairs(const std::vector<std::pair<bool, bool>>& pairs) {
    if (pairs.empty()) {
        throw ConfigError("robustness metrics: empty correctness table");
    }
    const RobustnessMetrics a = detail::metrics_by_counting(pairs);
    const RobustnessMetrics b = detail::metrics_by_enumeration(pairs);
    if (a.best_of_2 != b.best_of_2 || a.best_of_1 != b.best_of_1 ||
        a.worst_of_1 != b.worst_of_1 || a.all_orderings_correct != b.all_orderings_correct) {
        throw NumericError("robustness metrics: self-check recomputation disagrees");
    }
    return a;
}

// Evaluates each item under exactly the identity and the fully reversed
// ordering, then reduces the correctness pairs.
inline std::vector<std::pair<bool, bool>> correctness_pairs(const ModelState& st,
                                                            const std::vector<McqItem>& items,
                                                            PromptMode mode) {
    std::vector<std::pair<bool, bool>> pairs;
    pairs.reserve(items.size());
    for (const auto& item : items) {
        const auto n = item.options.size();
        const bool normal = predict(st, item, mode, identity_permutation(n)) ==
                            item.correct_index;
        const bool reversed = predict(st, item, mode, reversed_permutation(n)) ==
                              item.correct_index;
        pairs.emplace_back(normal, reversed);
    }
    return pairs;
}

inline RobustnessMetrics robustness_metrics(const ModelState& st,
                                            const std::vector<McqItem>& items, PromptMode mode) {
    if (items.empty()) {
        throw ConfigError("robustness_metrics: no items");
    }
    return metrics_from_pairs(correctness_pairs(st, items, mode));
}

// ----------------------------------------------------------------------
// Perplexity
// ----------------------------------------------------------------------

inline std::vector<std::vector<TokenId>> chunk_corpus(const std::vector<TokenId>& corpus,
                                                      std::size_t max_seq_len) {
    if (max_seq_len == 0) {
        throw ConfigError("chunk_corpus: max_seq_len must be >= 1");
    }
    std::vector<std::vector<TokenId>> chunks;
    for (std::size_t i = 0; i < corpus.size(); i += max_seq_len) {
        chunks.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(i),
                            corpus.begin() +
                                static_cast<std::ptrdiff_t>(std::min(i + max_seq_len,
                                                                     corpus.size())));
    }
    return chunks;
}

// exp of the mean negative log-likelihood over every corpus token, with the
// corpus split into causal chunks of at most max_seq_len tokens, each
// conditioned on its own BOS.
inline double perplexity(const ModelState& st, const std::vector<TokenId>& corpus,
                         std::size_t max_seq_len) {
    if (corpus.empty()) {
        throw ConfigError("perplexity: empty corpus");
    }
    double nll_sum = 0.0;
    std::size_t n_tokens = 0;
    for (const auto& chunk : chunk_corpus(corpus, max_seq_len)) {
        const double mean_nll = lm_loss(nullptr, st, chunk).item();
        nll_sum += mean_nll * static_cast<double>(chunk.size());
        n_tokens += chunk.size();
    }
    return std::exp(nll_sum / static_cast<double>(n_tokens));
}

} // namespace setformer
