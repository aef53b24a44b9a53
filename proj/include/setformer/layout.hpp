#pragma once

// Attention-permission geometry. A SegmentedPrompt (prefix, parallel
// segments, suffix) compiles into an SbpLayout: a flat token list, a
// per-token position index, and a boolean query-may-attend-key matrix.
// Segments all start at position len(prefix) and are mutually invisible;
// the suffix starts past the longest segment and sees everything.

#include "setformer/common.hpp"

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace setformer {

struct SegmentedPrompt {
    std::vector<TokenId> prefix;
    std::vector<std::vector<TokenId>> segments;
    std::vector<TokenId> suffix;
};

// Checks the structural rules: at least two non-empty segments, no
// delimiter tokens anywhere, BOS permitted only in the prefix.
inline void validate_segmented_prompt(const SegmentedPrompt& p) {
    if (p.segments.size() < 2) {
        throw ConfigError("SegmentedPrompt: need at least 2 segments, got " +
                          std::to_string(p.segments.size()));
    }
    auto check_part = [](const std::vector<TokenId>& part, const char* name, bool allow_bos) {
        for (TokenId t : part) {
            if (t < 0 || static_cast<std::size_t>(t) >= tokens::kVocabSize) {
                throw ConfigError(std::string("SegmentedPrompt: token id ") + std::to_string(t) +
                                  " out of range in " + name);
            }
            if (t == tokens::kStart2d || t == tokens::kSplit2d || t == tokens::kEnd2d ||
                (t == tokens::kBos && !allow_bos)) {
                throw ConfigError(std::string("SegmentedPrompt: special token ") +
                                  std::to_string(t) + " not allowed in " + name);
            }
        }
    };
    check_part(p.prefix, "prefix", true);
    for (std::size_t i = 0; i < p.segments.size(); ++i) {
        if (p.segments[i].empty()) {
            throw ConfigError("SegmentedPrompt: segment " + std::to_string(i) + " is empty");
        }
        check_part(p.segments[i], "segment", false);
    }
    check_part(p.suffix, "suffix", false);
}

// Half-open token index range [begin, end).
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t len() const { return end - begin; }
};

struct SbpLayout {
    std::vector<TokenId> tokens;
    std::vector<int> positions;
    std::vector<std::uint8_t> mask; // row-major n x n; 1 = query row may attend key column
    Span prefix_span;
    std::vector<Span> segment_spans; // empty for causal layouts
    Span suffix_span;                // grows as continuations are appended

    std::size_t size() const { return tokens.size(); }

    bool attends(std::size_t q, std::size_t k) const { return mask[q * tokens.size() + k] != 0; }
};

inline SbpLayout build_sbp_layout(const SegmentedPrompt& p) {
    validate_segmented_prompt(p);

    std::size_t max_seg = 0;
    for (const auto& s : p.segments) {
        max_seg = std::max(max_seg, s.size());
    }
    const std::size_t pre = p.prefix.size();

    SbpLayout out;
    out.tokens.reserve(pre + p.suffix.size() + max_seg * p.segments.size());

    out.tokens.insert(out.tokens.end(), p.prefix.begin(), p.prefix.end());
    out.prefix_span = {0, pre};
    for (std::size_t i = 0; i < pre; ++i) {
        out.positions.push_back(static_cast<int>(i));
    }
    for (const auto& s : p.segments) {
        Span span{out.tokens.size(), out.tokens.size() + s.size()};
        out.tokens.insert(out.tokens.end(), s.begin(), s.end());
        for (std::size_t i = 0; i < s.size(); ++i) {
            out.positions.push_back(static_cast<int>(pre + i));
        }
        out.segment_spans.push_back(span);
    }
    out.suffix_span = {out.tokens.size(), out.tokens.size() + p.suffix.size()};
    out.tokens.insert(out.tokens.end(), p.suffix.begin(), p.suffix.end());
    for (std::size_t i = 0; i < p.suffix.size(); ++i) {
        out.positions.push_back(static_cast<int>(pre + max_seg + i));
    }

    const std::size_t n = out.tokens.size();
    out.mask.assign(n * n, 0);
    auto allow = [&](std::size_t q, std::size_t k) { out.mask[q * n + k] = 1; };

    // Prefix: causal within itself.
    for (std::size_t q = 0; q < pre; ++q) {
        for (std::size_t k = 0; k <= q; ++k) {
            allow(q, k);
        }
    }
    // Segments: full prefix plus causal within the own segment. Sibling
    // segments stay blocked in both directions.
    for (const Span& span : out.segment_spans) {
        for (std::size_t q = span.begin; q < span.end; ++q) {
            for (std::size_t k = 0; k < pre; ++k) {
                allow(q, k);
            }
            for (std::size_t k = span.begin; k <= q; ++k) {
                allow(q, k);
            }
        }
    }
    // Suffix: everything before it, causal within itself.
    for (std::size_t q = out.suffix_span.begin; q < n; ++q) {
        for (std::size_t k = 0; k <= q; ++k) {
            allow(q, k);
        }
    }
    return out;
}

inline SbpLayout build_causal_layout(const std::vector<TokenId>& tokens) {
    SbpLayout out;
    out.tokens = tokens;
    const std::size_t n = tokens.size();
    out.positions.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.positions[i] = static_cast<int>(i);
    }
    out.mask.assign(n * n, 0);
    for (std::size_t q = 0; q < n; ++q) {
        for (std::size_t k = 0; k <= q; ++k) {
            out.mask[q * n + k] = 1;
        }
    }
    out.prefix_span = {0, n};
    out.suffix_span = {n, n};
    return out;
}

// Appends answer tokens as additional suffix rows: each new row attends to
// every earlier token and itself, and positions continue one past the
// current maximum (which equals len(prefix) + max segment length when the
// suffix was empty).
inline SbpLayout append_continuation(const SbpLayout& layout,
                                     const std::vector<TokenId>& answer_tokens) {
    if (answer_tokens.empty()) {
        throw ConfigError("append_continuation: answer_tokens must be non-empty");
    }
    const std::size_t old_n = layout.size();
    const std::size_t n = old_n + answer_tokens.size();

    SbpLayout out;
    out.tokens = layout.tokens;
    out.tokens.insert(out.tokens.end(), answer_tokens.begin(), answer_tokens.end());
    out.positions = layout.positions;
    int next = 0;
    if (!layout.positions.empty()) {
        next = *std::max_element(layout.positions.begin(), layout.positions.end()) + 1;
    }
    for (std::size_t i = 0; i < answer_tokens.size(); ++i) {
        out.positions.push_back(next + static_cast<int>(i));
    }
    out.prefix_span = layout.prefix_span;
    out.segment_spans = layout.segment_spans;
    out.suffix_span = {layout.suffix_span.begin, n};

    out.mask.assign(n * n, 0);
    for (std::size_t q = 0; q < old_n; ++q) {
        const std::uint8_t* src = layout.mask.data() + q * old_n;
        std::copy_n(src, old_n, out.mask.data() + q * n);
    }
    for (std::size_t q = old_n; q < n; ++q) {
        for (std::size_t k = 0; k <= q; ++k) {
            out.mask[q * n + k] = 1;
        }
    }
    return out;
}

// Reorders the parallel segments; prefix and suffix are untouched. The
// whole point of the layout is that this must not change model outputs.
inline SegmentedPrompt permute_segments(const SegmentedPrompt& p,
                                        const std::vector<std::size_t>& perm) {
    if (perm.size() != p.segments.size()) {
        throw ConfigError("permute_segments: permutation length " + std::to_string(perm.size()) +
                          " does not match " + std::to_string(p.segments.size()) + " segments");
    }
    std::vector<bool> seen(perm.size(), false);
    SegmentedPrompt out;
    out.prefix = p.prefix;
    out.suffix = p.suffix;
    out.segments.reserve(perm.size());
    for (std::size_t idx : perm) {
        if (idx >= perm.size() || seen[idx]) {
            throw ConfigError("permute_segments: not a permutation");
        }
        seen[idx] = true;
        out.segments.push_back(p.segments[idx]);
    }
    return out;
}

} // namespace setformer
