#pragma once

// Byte-level tokenization, delimiter-tag parsing, MCQ dataset handling and
// prompt formatting for both the standard (ordered) and set-based modes.

#include "setformer/common.hpp"
#include "setformer/layout.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace setformer {

// ----------------------------------------------------------------------
// Vocabulary: ids 0..255 are raw bytes; 256..259 are reserved markers with
// literal text forms used only in tagged prompts.
// ----------------------------------------------------------------------

inline const std::vector<std::pair<std::string, TokenId>>& tag_table() {
    static const std::vector<std::pair<std::string, TokenId>> table = {
        {"<|start_2d|>", tokens::kStart2d},
        {"<|split_2d|>", tokens::kSplit2d},
        {"<|end_2d|>", tokens::kEnd2d},
        {"<|bos|>", tokens::kBos},
    };
    return table;
}

// Encodes text to byte tokens. With tag_mode, the literal marker strings
// become their reserved ids; otherwise every byte maps to itself, so
// ordinary encoding can never produce a special id.
inline std::vector<TokenId> encode(const std::string& text, bool tag_mode = false) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        if (tag_mode && text[i] == '<') {
            bool matched = false;
            for (const auto& [tag, id] : tag_table()) {
                if (text.compare(i, tag.size(), tag) == 0) {
                    out.push_back(id);
                    i += tag.size();
                    matched = true;
                    break;
                }
            }
            if (matched) {
                continue;
            }
        }
        out.push_back(static_cast<TokenId>(static_cast<unsigned char>(text[i])));
        ++i;
    }
    return out;
}

inline std::string token_text(TokenId t) {
    if (t >= 0 && t < 256) {
        return std::string(1, static_cast<char>(static_cast<unsigned char>(t)));
    }
    for (const auto& [tag, id] : tag_table()) {
        if (id == t) {
            return tag;
        }
    }
    throw ConfigError("decode: unknown token id " + std::to_string(t));
}

inline std::string decode(const std::vector<TokenId>& toks) {
    std::string out;
    out.reserve(toks.size());
    for (TokenId t : toks) {
        out += token_text(t);
    }
    return out;
}

// ----------------------------------------------------------------------
// Delimiter-tag parsing / rendering
// ----------------------------------------------------------------------

// Splits a token stream containing exactly one <|start_2d|> ... <|end_2d|>
// block into prefix / segments / suffix. Error positions are reported as
// byte offsets into the rendered text form.
inline SegmentedPrompt parse_sbp_tags(const std::vector<TokenId>& toks) {
    auto offset_of = [&](std::size_t idx) {
        std::size_t bytes = 0;
        for (std::size_t i = 0; i < idx && i < toks.size(); ++i) {
            bytes += token_text(toks[i]).size();
        }
        return bytes;
    };
    auto fail = [&](std::size_t idx, const std::string& what) -> void {
        throw ParseError("byte offset " + std::to_string(offset_of(idx)) + ": " + what);
    };

    std::size_t start = toks.size(), end = toks.size();
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (toks[i] == tokens::kStart2d) {
            if (start != toks.size()) {
                fail(i, "duplicate <|start_2d|> (nesting is not supported)");
            }
            start = i;
        } else if (toks[i] == tokens::kEnd2d) {
            if (start == toks.size()) {
                fail(i, "<|end_2d|> before <|start_2d|>");
            }
            if (end != toks.size()) {
                fail(i, "duplicate <|end_2d|>");
            }
            end = i;
        } else if (toks[i] == tokens::kSplit2d && (start == toks.size() || end != toks.size())) {
            fail(i, "<|split_2d|> outside the parallel block");
        }
    }
    if (start == toks.size()) {
        throw ParseError("byte offset " + std::to_string(offset_of(toks.size())) +
                         ": no parallel block (missing <|start_2d|>)");
    }
    if (end == toks.size()) {
        fail(toks.size(), "unterminated parallel block (missing <|end_2d|>)");
    }

    SegmentedPrompt p;
    p.prefix.assign(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(start));
    p.suffix.assign(toks.begin() + static_cast<std::ptrdiff_t>(end) + 1, toks.end());
    std::vector<TokenId> current;
    std::size_t seg_start = start + 1;
    for (std::size_t i = start + 1; i <= end; ++i) {
        if (i == end || toks[i] == tokens::kSplit2d) {
            if (current.empty()) {
                fail(seg_start, "empty segment");
            }
            p.segments.push_back(current);
            current.clear();
            seg_start = i + 1;
        } else {
            current.push_back(toks[i]);
        }
    }
    if (p.segments.size() < 2) {
        fail(end, "parallel block needs at least one <|split_2d|>");
    }
    validate_segmented_prompt(p);
    return p;
}

// Inverse of parse_sbp_tags: renders the prompt as tagged text.
inline std::string render_tagged(const SegmentedPrompt& p) {
    validate_segmented_prompt(p);
    std::string out = decode(p.prefix);
    out += "<|start_2d|>";
    for (std::size_t i = 0; i < p.segments.size(); ++i) {
        if (i > 0) {
            out += "<|split_2d|>";
        }
        out += decode(p.segments[i]);
    }
    out += "<|end_2d|>";
    out += decode(p.suffix);
    return out;
}

// ----------------------------------------------------------------------
// MCQ items
// ----------------------------------------------------------------------

struct McqItem {
    std::string question;
    std::vector<std::string> options;
    std::size_t correct_index = 0;
};

// Structural checks shared by loading and generation. The ≥4-option rule
// from the eval protocol is applied by filter_items (items are dropped, not
// rejected), so plain loading accepts any ≥2-option item.
inline void validate_mcq_item(const McqItem& item) {
    if (item.options.size() < 2) {
        throw ParseError("item needs at least 2 options, got " +
                         std::to_string(item.options.size()));
    }
    if (item.correct_index >= item.options.size()) {
        throw ParseError("correct_index " + std::to_string(item.correct_index) +
                         " out of range for " + std::to_string(item.options.size()) + " options");
    }
    std::set<std::string> seen;
    for (const auto& o : item.options) {
        if (!seen.insert(o).second) {
            throw ParseError("duplicate option text: \"" + o + "\"");
        }
    }
}

inline std::vector<McqItem> load_mcq_jsonl(std::istream& in, const std::string& source = "input") {
    std::vector<McqItem> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = source + " line " + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
        McqItem item;
        try {
            item.question = j.at("question").get<std::string>();
            const auto& opts = j.at("options");
            if (!opts.is_array()) {
                throw ParseError(where + ": options must be an array");
            }
            for (const auto& o : opts) {
                item.options.push_back(o.get<std::string>());
            }
            const auto ci = j.at("correct_index").get<long long>();
            if (ci < 0) {
                throw ParseError(where + ": correct_index must be non-negative");
            }
            item.correct_index = static_cast<std::size_t>(ci);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
        try {
            validate_mcq_item(item);
        } catch (const ParseError& e) {
            throw ParseError(where + ": " + e.what());
        }
        items.push_back(std::move(item));
    }
    return items;
}

inline std::vector<McqItem> load_mcq_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open dataset file: " + path);
    }
    return load_mcq_jsonl(in, path);
}

inline void save_mcq_jsonl(const std::vector<McqItem>& items, std::ostream& out) {
    for (const auto& item : items) {
        nlohmann::json j;
        j["question"] = item.question;
        j["options"] = item.options;
        j["correct_index"] = item.correct_index;
        out << j.dump() << "\n";
    }
}

// ----------------------------------------------------------------------
// Prompt formatting
//
// Template bytes (fixed here for reproducibility): the question, a space,
// the options each as a quoted snippet "..." separated by ", ", then a
// newline and the literal cue `Answer:`. Candidate answers are the quoted
// option texts, always listed in dataset order so score vectors stay
// comparable across display permutations.
// ----------------------------------------------------------------------

inline std::string quoted_option(const std::string& text) { return "\"" + text + "\""; }

inline std::vector<std::size_t> identity_permutation(std::size_t n) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) {
        perm[i] = i;
    }
    return perm;
}

inline void check_permutation(const std::vector<std::size_t>& perm, std::size_t n) {
    if (perm.size() != n) {
        throw ConfigError("permutation length " + std::to_string(perm.size()) +
                          " does not match " + std::to_string(n) + " options");
    }
    std::vector<bool> seen(n, false);
    for (std::size_t idx : perm) {
        if (idx >= n || seen[idx]) {
            throw ConfigError("invalid permutation (not a bijection on option indices)");
        }
        seen[idx] = true;
    }
}

inline std::vector<std::vector<TokenId>> answer_token_lists(const McqItem& item) {
    std::vector<std::vector<TokenId>> answers;
    answers.reserve(item.options.size());
    for (const auto& o : item.options) {
        answers.push_back(encode(quoted_option(o)));
    }
    return answers;
}

struct StandardPrompt {
    std::vector<TokenId> tokens;               // BOS + rendered prompt text
    std::vector<std::vector<TokenId>> answers; // dataset order
};

inline StandardPrompt format_standard(const McqItem& item, const std::vector<std::size_t>& perm) {
    validate_mcq_item(item);
    check_permutation(perm, item.options.size());
    std::string text = item.question + " ";
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (i > 0) {
            text += ", ";
        }
        text += quoted_option(item.options[perm[i]]);
    }
    text += "\nAnswer:";
    StandardPrompt out;
    out.tokens.push_back(tokens::kBos);
    const auto body = encode(text);
    out.tokens.insert(out.tokens.end(), body.begin(), body.end());
    out.answers = answer_token_lists(item);
    return out;
}

struct SbpPrompt {
    SegmentedPrompt prompt;                    // segments in dataset order
    std::vector<std::vector<TokenId>> answers; // dataset order
};

inline SbpPrompt format_sbp(const McqItem& item) {
    validate_mcq_item(item);
    SbpPrompt out;
    out.prompt.prefix.push_back(tokens::kBos);
    const auto q = encode(item.question + " ");
    out.prompt.prefix.insert(out.prompt.prefix.end(), q.begin(), q.end());
    for (const auto& o : item.options) {
        out.prompt.segments.push_back(encode(quoted_option(o)));
    }
    out.prompt.suffix = encode("\nAnswer:");
    out.answers = answer_token_lists(item);
    return out;
}

// Longest formatted question+option size in tokens: the standard prompt
// plus the largest candidate continuation.
inline std::size_t formatted_token_count(const McqItem& item) {
    const StandardPrompt sp = format_standard(item, identity_permutation(item.options.size()));
    std::size_t longest = 0;
    for (const auto& a : sp.answers) {
        longest = std::max(longest, a.size());
    }
    return sp.tokens.size() + longest;
}

inline std::vector<McqItem> filter_items(const std::vector<McqItem>& items,
                                         std::size_t max_tokens = 256) {
    std::vector<McqItem> kept;
    for (const auto& item : items) {
        if (item.options.size() >= 4 && formatted_token_count(item) <= max_tokens) {
            kept.push_back(item);
        }
    }
    return kept;
}

// ----------------------------------------------------------------------
// Synthetic task
//
// Each question names a tag letter from 'a'..'h' inside a salted carrier
// sentence; the correct option is that letter repeated five times. The
// mapping is pure content (the named letter), so accuracy is measurable
// under any display order. The companion corpus uses the same carrier
// sentences as plain text for language-model pretraining and perplexity.
// ----------------------------------------------------------------------

inline constexpr int kSyntheticTagLetters = 8; // 'a'..'h'
inline constexpr int kSyntheticRunLength = 5;

inline std::string synthetic_salt(Rng& rng) {
    std::string salt;
    for (int i = 0; i < 6; ++i) {
        salt += static_cast<char>('i' + static_cast<int>(rng.index(12))); // 'i'..'t'
    }
    return salt;
}

inline std::string synthetic_question(const std::string& salt, char letter) {
    return "Stream " + salt + " emits tag " + std::string(1, letter) + ". Which tag?";
}

inline std::string synthetic_run(char letter) {
    return std::string(kSyntheticRunLength, letter);
}

inline std::vector<McqItem> gen_synthetic(std::size_t n, std::uint64_t seed,
                                          std::size_t n_options = 4) {
    if (n_options < 2 || n_options > kSyntheticTagLetters) {
        throw ConfigError("gen_synthetic: n_options must be in [2, " +
                          std::to_string(kSyntheticTagLetters) + "]");
    }
    Rng rng(seed);
    std::vector<McqItem> items;
    items.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<char> letters;
        for (int c = 0; c < kSyntheticTagLetters; ++c) {
            letters.push_back(static_cast<char>('a' + c));
        }
        rng.shuffle(letters);
        const char correct = letters[0];

        McqItem item;
        item.question = synthetic_question(synthetic_salt(rng), correct);
        item.correct_index = rng.index(n_options);
        for (std::size_t k = 0; k < n_options; ++k) {
            // letters[0] is the correct one; distractors come after it.
            item.options.push_back(synthetic_run(letters[k]));
        }
        std::swap(item.options[0], item.options[item.correct_index]);
        items.push_back(std::move(item));
    }
    return items;
}

// Plain-text lines answering the same kind of question, used as the
// pretraining / perplexity corpus. Deliberately quote-free and cue-free so
// it does not spell out the MCQ answer format.
inline std::string gen_synthetic_corpus(std::size_t n_lines, std::uint64_t seed) {
    Rng rng(seed);
    std::string out;
    for (std::size_t i = 0; i < n_lines; ++i) {
        const char letter = static_cast<char>('a' + static_cast<int>(rng.index(8)));
        out += synthetic_question(synthetic_salt(rng), letter);
        out += " ";
        out += synthetic_run(letter);
        out += "\n";
    }
    return out;
}

} // namespace setformer
