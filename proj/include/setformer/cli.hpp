#pragma once

// Command implementations behind the `setformer` binary. Each command is a
// plain function over an argument struct so tests can drive it directly;
// the binary only parses flags and maps exceptions to exit codes. Every
// file-producing command drops a JSON manifest next to its main artifact so
// a run can be reproduced bit-for-bit.

#include "setformer/common.hpp"
#include "setformer/data.hpp"
#include "setformer/evalsuite.hpp"
#include "setformer/finetune.hpp"
#include "setformer/losses.hpp"
#include "setformer/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace setformer {

// ----------------------------------------------------------------------
// Manifest
// ----------------------------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open file: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write file: " + path);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw ConfigError("write failed: " + path);
    }
}

struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::uint64_t>> input_digests;
    std::vector<std::string> outputs;

    void add_input(const std::string& path) {
        input_digests.emplace_back(path, fnv1a64(read_file(path)));
    }

    nlohmann::json to_json() const {
        nlohmann::json inputs = nlohmann::json::array();
        for (const auto& [path, digest] : input_digests) {
            std::ostringstream hex;
            hex << std::hex << digest;
            inputs.push_back({{"path", path}, {"fnv1a64", hex.str()}});
        }
        return nlohmann::json{{"version", kVersion}, {"command", command},
                              {"config", config},   {"seed", seed},
                              {"inputs", inputs},   {"outputs", outputs}};
    }

    void write(const std::string& artifact_path) const {
        write_file(artifact_path + ".manifest.json", to_json().dump(2) + "\n");
    }
};

// ----------------------------------------------------------------------
// train
// ----------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::string data_path;
    std::string out_checkpoint;
};

// Config document: {"train": {...}, "model": {...}, "init_seed": N,
// "init_std": x} or {"train": {...}, "base_checkpoint": "path"}.
inline int cmd_train(const TrainArgs& args, std::ostream& log = std::cerr) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(args.config_path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    detail::reject_unknown(doc, {"train", "model", "base_checkpoint", "init_seed", "init_std"},
                           "config");
    const TrainConfig cfg =
        train_config_from_json(doc.contains("train") ? doc.at("train") : nlohmann::json::object());

    ModelState state;
    if (doc.contains("base_checkpoint")) {
        state = load_checkpoint(doc.at("base_checkpoint").get<std::string>());
    } else {
        const ModelConfig mcfg = model_config_from_json(
            doc.contains("model") ? doc.at("model") : nlohmann::json::object());
        std::uint64_t init_seed = 0;
        double init_std = 0.02;
        detail::read_field(doc, "init_seed", init_seed);
        detail::read_field(doc, "init_std", init_std);
        state = init_model(mcfg, init_seed, init_std);
    }

    const std::vector<McqItem> items = load_mcq_jsonl(args.data_path);
    const std::vector<TrainStep> history = train(state, items, cfg);
    if (state.lora.has_value()) {
        merge_lora(state);
    }
    save_checkpoint(state, args.out_checkpoint);

    std::ostringstream csv;
    write_history_csv(history, csv);
    const std::string csv_path = args.out_checkpoint + ".loss.csv";
    write_file(csv_path, csv.str());

    RunManifest manifest;
    manifest.command = "train";
    manifest.config = doc;
    manifest.seed = cfg.seed;
    manifest.add_input(args.config_path);
    manifest.add_input(args.data_path);
    if (doc.contains("base_checkpoint")) {
        manifest.add_input(doc.at("base_checkpoint").get<std::string>());
    }
    manifest.outputs = {args.out_checkpoint, csv_path};
    manifest.write(args.out_checkpoint);

    log << "trained " << history.size() << " steps on " << items.size() << " items -> "
        << args.out_checkpoint << "\n";
    return 0;
}

// ----------------------------------------------------------------------
// sweep
// ----------------------------------------------------------------------

struct SweepArgs {
    std::string checkpoint;
    std::string data_path;
    std::string mode = "sbp";
    std::size_t n_perms = 24;
    std::size_t sample_size = 1000;
    std::uint64_t seed = 0;
    std::string out_json;
};

inline nlohmann::json report_to_json(const PermutationReport& report) {
    return nlohmann::json{{"mode", to_string(report.mode)},
                          {"seed", report.seed},
                          {"n_questions", report.n_questions},
                          {"permutations", report.permutations},
                          {"accuracies", report.accuracies},
                          {"max_accuracy", report.max_accuracy()},
                          {"min_accuracy", report.min_accuracy()},
                          {"spread", report.spread()}};
}

inline std::string correctness_csv(const PermutationReport& report) {
    std::ostringstream csv;
    csv << "permutation_index,question_index,correct\n";
    for (std::size_t p = 0; p < report.correctness.size(); ++p) {
        for (std::size_t q = 0; q < report.correctness[p].size(); ++q) {
            csv << p << "," << q << "," << static_cast<int>(report.correctness[p][q]) << "\n";
        }
    }
    return csv.str();
}

inline int cmd_sweep(const SweepArgs& args, std::ostream& log = std::cerr) {
    const PromptMode mode = prompt_mode_from_string(args.mode);
    const ModelState state = load_checkpoint(args.checkpoint);
    const std::vector<McqItem> items = load_mcq_jsonl(args.data_path);

    const PermutationReport report =
        permutation_sweep(state, items, mode, args.n_perms, args.sample_size, args.seed);
    if (report.sample_clipped) {
        log << "warning: sample_size " << args.sample_size << " clipped to " << items.size()
            << " available questions\n";
    }

    write_file(args.out_json, report_to_json(report).dump(2) + "\n");
    const std::string csv_path = args.out_json + ".correctness.csv";
    write_file(csv_path, correctness_csv(report));

    RunManifest manifest;
    manifest.command = "sweep";
    manifest.config = {{"mode", args.mode},
                       {"n_perms", args.n_perms},
                       {"sample_size", args.sample_size}};
    manifest.seed = args.seed;
    manifest.add_input(args.checkpoint);
    manifest.add_input(args.data_path);
    manifest.outputs = {args.out_json, csv_path};
    manifest.write(args.out_json);

    log << "sweep: " << report.permutations.size() << " permutations x " << report.n_questions
        << " questions, accuracy " << report.min_accuracy() << ".." << report.max_accuracy()
        << " (spread " << report.spread() << ")\n";
    return 0;
}

// ----------------------------------------------------------------------
// metrics
// ----------------------------------------------------------------------

struct MetricsArgs {
    std::string checkpoint;       // used unless correctness_csv is given
    std::string data_path;
    std::string mode = "standard";
    std::string correctness_csv;  // optional: raw (normal,reversed) fixture
    std::string out_json;
};

inline std::vector<std::pair<bool, bool>> load_correctness_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open correctness file: " + path);
    }
    std::vector<std::pair<bool, bool>> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") {
            continue;
        }
        if (lineno == 1 && line.find("normal") != std::string::npos) {
            continue; // header
        }
        std::istringstream row(line);
        std::string a, b;
        if (!std::getline(row, a, ',') || !std::getline(row, b, ',')) {
            throw ParseError(path + " line " + std::to_string(lineno) +
                             ": expected normal,reversed");
        }
        auto to_bool = [&](const std::string& s) {
            if (s == "0" || s == "1") {
                return s == "1";
            }
            throw ParseError(path + " line " + std::to_string(lineno) +
                             ": correctness must be 0 or 1, got \"" + s + "\"");
        };
        pairs.emplace_back(to_bool(a), to_bool(b));
    }
    return pairs;
}

inline int cmd_metrics(const MetricsArgs& args, std::ostream& log = std::cerr) {
    RobustnessMetrics metrics;
    std::vector<std::pair<bool, bool>> pairs;
    RunManifest manifest;
    manifest.command = "metrics";
    if (!args.correctness_csv.empty()) {
        pairs = load_correctness_csv(args.correctness_csv);
        metrics = metrics_from_pairs(pairs);
        manifest.add_input(args.correctness_csv);
        manifest.config = {{"source", "correctness_csv"}};
    } else {
        const PromptMode mode = prompt_mode_from_string(args.mode);
        const ModelState state = load_checkpoint(args.checkpoint);
        const std::vector<McqItem> items = load_mcq_jsonl(args.data_path);
        pairs = correctness_pairs(state, items, mode);
        metrics = metrics_from_pairs(pairs);
        manifest.add_input(args.checkpoint);
        manifest.add_input(args.data_path);
        manifest.config = {{"mode", args.mode}};
    }

    nlohmann::json out = {{"mode", args.correctness_csv.empty() ? args.mode : "fixture"},
                          {"n_questions", pairs.size()},
                          {"metrics",
                           {{"best_of_2", metrics.best_of_2},
                            {"best_of_1", metrics.best_of_1},
                            {"worst_of_1", metrics.worst_of_1},
                            {"all_orderings_correct", metrics.all_orderings_correct}}}};
    write_file(args.out_json, out.dump(2) + "\n");

    std::ostringstream csv;
    csv << "question_index,normal,reversed\n";
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        csv << i << "," << (pairs[i].first ? 1 : 0) << "," << (pairs[i].second ? 1 : 0) << "\n";
    }
    const std::string csv_path = args.out_json + ".correctness.csv";
    write_file(csv_path, csv.str());

    manifest.outputs = {args.out_json, csv_path};
    manifest.write(args.out_json);

    log << "metrics: best_of_2=" << metrics.best_of_2 << " best_of_1=" << metrics.best_of_1
        << " worst_of_1=" << metrics.worst_of_1 << "\n";
    return 0;
}

// ----------------------------------------------------------------------
// perplexity
// ----------------------------------------------------------------------

struct PerplexityArgs {
    std::string checkpoint;
    std::string corpus_path;
    std::size_t max_seq_len = 256;
    std::string out_json;
};

inline int cmd_perplexity(const PerplexityArgs& args, std::ostream& log = std::cerr) {
    const ModelState state = load_checkpoint(args.checkpoint);
    const std::vector<TokenId> corpus = encode(read_file(args.corpus_path));
    const double ppl = perplexity(state, corpus, args.max_seq_len);

    nlohmann::json out = {{"perplexity", ppl},
                          {"n_tokens", corpus.size()},
                          {"max_seq_len", args.max_seq_len}};
    write_file(args.out_json, out.dump(2) + "\n");

    RunManifest manifest;
    manifest.command = "perplexity";
    manifest.config = {{"max_seq_len", args.max_seq_len}};
    manifest.add_input(args.checkpoint);
    manifest.add_input(args.corpus_path);
    manifest.outputs = {args.out_json};
    manifest.write(args.out_json);

    log << "perplexity: " << ppl << " over " << corpus.size() << " tokens\n";
    return 0;
}

// ----------------------------------------------------------------------
// inspect-layout
// ----------------------------------------------------------------------

// Renders the layout of a tagged prompt: the position vector and the
// attention-permission matrix as a t/f grid (rows = queries).
inline std::string layout_debug_string(const SbpLayout& layout) {
    std::ostringstream out;
    out << "tokens: " << layout.size() << "\n";
    out << "positions:";
    for (int p : layout.positions) {
        out << " " << p;
    }
    out << "\nmask:\n";
    for (std::size_t q = 0; q < layout.size(); ++q) {
        for (std::size_t k = 0; k < layout.size(); ++k) {
            out << (k ? " " : "") << (layout.attends(q, k) ? 't' : 'f');
        }
        out << "\n";
    }
    return out.str();
}

struct InspectArgs {
    std::string tagged_prompt;
};

inline int cmd_inspect_layout(const InspectArgs& args, std::ostream& out = std::cout) {
    const SegmentedPrompt prompt = parse_sbp_tags(encode(args.tagged_prompt, true));
    out << layout_debug_string(build_sbp_layout(prompt));
    return 0;
}

// ----------------------------------------------------------------------
// gen-synthetic
// ----------------------------------------------------------------------

struct GenSyntheticArgs {
    std::size_t n = 2000;
    std::size_t n_options = 4;
    std::uint64_t seed = 0;
    std::string out_jsonl;
    std::string corpus_out; // optional plain-text corpus
    std::size_t corpus_lines = 2000;
};

inline int cmd_gen_synthetic(const GenSyntheticArgs& args, std::ostream& log = std::cerr) {
    const std::vector<McqItem> items = gen_synthetic(args.n, args.seed, args.n_options);
    std::ostringstream jsonl;
    save_mcq_jsonl(items, jsonl);
    write_file(args.out_jsonl, jsonl.str());

    RunManifest manifest;
    manifest.command = "gen-synthetic";
    manifest.config = {{"n", args.n}, {"n_options", args.n_options}};
    manifest.seed = args.seed;
    manifest.outputs = {args.out_jsonl};

    if (!args.corpus_out.empty()) {
        write_file(args.corpus_out, gen_synthetic_corpus(args.corpus_lines, args.seed + 1));
        manifest.config["corpus_lines"] = args.corpus_lines;
        manifest.outputs.push_back(args.corpus_out);
    }
    manifest.write(args.out_jsonl);

    log << "wrote " << items.size() << " items -> " << args.out_jsonl << "\n";
    return 0;
}

} // namespace setformer
