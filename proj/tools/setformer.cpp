// Command-line front end: flag parsing and exit-code mapping only; the
// actual work lives in setformer/cli.hpp.
//
// Exit codes: 0 success, 2 usage/config/parse problems, 3 numeric failures.

#include "setformer/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

namespace {

std::uint64_t default_seed() {
    if (const char* env = std::getenv("SETFORMER_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw setformer::ConfigError(std::string("SETFORMER_SEED is not a number: ") + env);
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"setformer: order-invariant set-based prompting toolkit"};
    app.require_subcommand(1);

    int threads = 1;
    app.add_option("--threads", threads, "worker threads (results are identical for any value)")
        ->check(CLI::PositiveNumber);

    setformer::TrainArgs train_args;
    auto* train = app.add_subcommand("train", "fine-tune a model on MCQ data");
    train->add_option("--config", train_args.config_path, "training config JSON")->required();
    train->add_option("--data", train_args.data_path, "MCQ dataset (JSONL)")->required();
    train->add_option("--out", train_args.out_checkpoint, "output checkpoint path")->required();

    setformer::SweepArgs sweep_args;
    auto* sweep = app.add_subcommand("sweep", "accuracy under many option orderings");
    sweep->add_option("--checkpoint", sweep_args.checkpoint, "model checkpoint")->required();
    sweep->add_option("--data", sweep_args.data_path, "MCQ dataset (JSONL)")->required();
    sweep->add_option("--mode", sweep_args.mode, "standard | sbp")->required();
    sweep->add_option("--n-perms", sweep_args.n_perms, "number of orderings");
    sweep->add_option("--sample-size", sweep_args.sample_size, "questions to sample");
    auto* sweep_seed = sweep->add_option("--seed", sweep_args.seed, "RNG seed");
    sweep->add_option("--out", sweep_args.out_json, "output report JSON")->required();

    setformer::MetricsArgs metrics_args;
    auto* metrics = app.add_subcommand("metrics", "Best-of/Worst-of robustness metrics");
    metrics->add_option("--checkpoint", metrics_args.checkpoint, "model checkpoint");
    metrics->add_option("--data", metrics_args.data_path, "MCQ dataset (JSONL)");
    metrics->add_option("--mode", metrics_args.mode, "standard | sbp");
    metrics->add_option("--correctness-csv", metrics_args.correctness_csv,
                        "compute from a normal,reversed correctness table instead of a model");
    metrics->add_option("--out", metrics_args.out_json, "output JSON")->required();

    setformer::PerplexityArgs ppl_args;
    auto* ppl = app.add_subcommand("perplexity", "corpus perplexity of a checkpoint");
    ppl->add_option("--checkpoint", ppl_args.checkpoint, "model checkpoint")->required();
    ppl->add_option("--corpus", ppl_args.corpus_path, "plain-text corpus")->required();
    ppl->add_option("--max-seq-len", ppl_args.max_seq_len, "chunk length");
    ppl->add_option("--out", ppl_args.out_json, "output JSON")->required();

    setformer::InspectArgs inspect_args;
    auto* inspect = app.add_subcommand("inspect-layout", "print positions and mask of a tagged prompt");
    inspect->add_option("prompt", inspect_args.tagged_prompt,
                        "prompt text with <|start_2d|>/<|split_2d|>/<|end_2d|> tags")
        ->required();

    setformer::GenSyntheticArgs gen_args;
    auto* gen = app.add_subcommand("gen-synthetic", "emit the synthetic MCQ dataset");
    gen->add_option("--n", gen_args.n, "number of items");
    gen->add_option("--options", gen_args.n_options, "options per item");
    auto* gen_seed = gen->add_option("--seed", gen_args.seed, "RNG seed");
    gen->add_option("--out", gen_args.out_jsonl, "output JSONL path")->required();
    gen->add_option("--corpus-out", gen_args.corpus_out, "also write a plain-text corpus here");
    gen->add_option("--corpus-lines", gen_args.corpus_lines, "corpus line count");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        setformer::set_threads(threads);
        if (!sweep_seed->count()) {
            sweep_args.seed = default_seed();
        }
        if (!gen_seed->count()) {
            gen_args.seed = default_seed();
        }
        if (train->parsed()) {
            return setformer::cmd_train(train_args);
        }
        if (sweep->parsed()) {
            return setformer::cmd_sweep(sweep_args);
        }
        if (metrics->parsed()) {
            if (metrics_args.correctness_csv.empty() &&
                (metrics_args.checkpoint.empty() || metrics_args.data_path.empty())) {
                throw setformer::ConfigError(
                    "metrics: need --checkpoint and --data, or --correctness-csv");
            }
            return setformer::cmd_metrics(metrics_args);
        }
        if (ppl->parsed()) {
            return setformer::cmd_perplexity(ppl_args);
        }
        if (inspect->parsed()) {
            return setformer::cmd_inspect_layout(inspect_args);
        }
        if (gen->parsed()) {
            return setformer::cmd_gen_synthetic(gen_args);
        }
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const setformer::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const setformer::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const setformer::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
