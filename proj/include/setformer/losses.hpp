#pragma once

// The two fine-tuning objectives over MCQ items: plain cross-entropy on the
// correct answer, and the margin contrastive hinge that pushes the correct
// answer's score above the best distractor by at least m. Scores are mean
// per-token log-probabilities from answer_logprob, so both objectives see
// the prompt only through the layout.

#include "setformer/common.hpp"
#include "setformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace setformer {

enum class LossKind {
    kCrossEntropy,
    kMargin,
};

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "cross_entropy") {
        return LossKind::kCrossEntropy;
    }
    if (s == "margin") {
        return LossKind::kMargin;
    }
    throw ConfigError("unknown loss kind \"" + s + "\" (expected cross_entropy or margin)");
}

inline std::string to_string(LossKind k) {
    return k == LossKind::kCrossEntropy ? "cross_entropy" : "margin";
}

inline constexpr double kDefaultMargin = 1.0;

// One training example: a prompt layout (causal or SBP) plus the correct
// answer tokens and at least one incorrect candidate.
struct LossBatchItem {
    SbpLayout prompt;
    std::vector<TokenId> correct;
    std::vector<std::vector<TokenId>> incorrect;
};

inline void validate_loss_item(const LossBatchItem& item, bool need_incorrect) {
    if (item.correct.empty()) {
        throw ConfigError("loss item: correct answer is empty");
    }
    for (const auto& n : item.incorrect) {
        if (n.empty()) {
            throw ConfigError("loss item: incorrect answer is empty");
        }
    }
    if (need_incorrect && item.incorrect.empty()) {
        throw ConfigError("margin loss needs at least one incorrect answer");
    }
}

inline Tensor cross_entropy_loss(Tape* tape, const ModelState& st, const LossBatchItem& item,
                                 const ForwardOptions& opts = {}) {
    validate_loss_item(item, false);
    return scale(tape, answer_logprob(tape, st, item.prompt, item.correct, opts), -1.0);
}

// L = max(0, m − (p − max(n₁…n_k))). The max over distractors routes the
// subgradient to the first maximal one; the hinge kink contributes zero.
inline Tensor margin_contrastive_loss(Tape* tape, const ModelState& st,
                                      const LossBatchItem& item, double m = kDefaultMargin,
                                      const ForwardOptions& opts = {}) {
    validate_loss_item(item, true);
    Tensor p = answer_logprob(tape, st, item.prompt, item.correct, opts);
    std::vector<Tensor> ns;
    ns.reserve(item.incorrect.size());
    for (const auto& n : item.incorrect) {
        ns.push_back(answer_logprob(tape, st, item.prompt, n, opts));
    }
    Tensor worst = max_of(tape, ns);
    Tensor gap = sub(tape, p, worst);
    return relu(tape, sub(tape, Tensor::scalar(static_cast<float>(m)), gap));
}

// Double-precision reference for the same formula, used wherever the loss
// value is needed without a computation graph (reports, oracles).
inline double margin_from_scores(double p, const std::vector<double>& ns,
                                 double m = kDefaultMargin) {
    if (ns.empty()) {
        throw ConfigError("margin loss needs at least one incorrect answer");
    }
    const double worst = *std::max_element(ns.begin(), ns.end());
    return std::max(0.0, m - (p - worst));
}

inline Tensor item_loss(Tape* tape, const ModelState& st, const LossBatchItem& item,
                        LossKind kind, double margin = kDefaultMargin,
                        const ForwardOptions& opts = {}) {
    return kind == LossKind::kCrossEntropy ? cross_entropy_loss(tape, st, item, opts)
                                           : margin_contrastive_loss(tape, st, item, margin, opts);
}

// Arithmetic mean of per-item losses, accumulated in index order.
inline Tensor batch_loss(Tape* tape, const ModelState& st, const std::vector<LossBatchItem>& items,
                         LossKind kind, double margin = kDefaultMargin,
                         const ForwardOptions& opts = {}) {
    if (items.empty()) {
        throw ConfigError("batch_loss: empty batch");
    }
    Tensor total = item_loss(tape, st, items[0], kind, margin, opts);
    for (std::size_t i = 1; i < items.size(); ++i) {
        total = add(tape, total, item_loss(tape, st, items[i], kind, margin, opts));
    }
    return scale(tape, total, 1.0 / static_cast<double>(items.size()));
}

} // namespace setformer
