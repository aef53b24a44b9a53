#pragma once

// Fine-tuning loop: AdamW over the adapter parameters only, linear
// warmup/decay schedule, treatment (set-based) vs control (standard)
// data formatting, seeded 90/10 train/validation split. Also a generic
// full-weight LM trainer used to construct pretrained toy bases.

#include "setformer/common.hpp"
#include "setformer/data.hpp"
#include "setformer/losses.hpp"
#include "setformer/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace setformer {

// Piecewise-linear schedule: ramp to the base rate over the first w_steps,
// then decay linearly to zero at T.
inline double lr_at(std::size_t t, std::size_t total, double alpha, std::size_t w_steps) {
    if (total == 0) {
        throw ConfigError("lr_at: total steps must be positive");
    }
    if (t > total || w_steps == 0 || w_steps >= total) {
        throw ConfigError("lr_at: need 0 <= t <= T and 0 < w_steps < T");
    }
    const double td = static_cast<double>(t);
    if (t <= w_steps) {
        return alpha * td / static_cast<double>(w_steps);
    }
    return alpha * (static_cast<double>(total) - td) /
           (static_cast<double>(total) - static_cast<double>(w_steps));
}

// ----------------------------------------------------------------------
// AdamW with decoupled weight decay
// ----------------------------------------------------------------------

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg)
        : cfg_(cfg) {
        for (auto& [name, t] : params) {
            if (!t.requires_grad()) {
                throw ConfigError("AdamW: parameter " + name + " does not require grad");
            }
            slots_.push_back(Slot{name, t, std::vector<double>(t.numel(), 0.0),
                                  std::vector<double>(t.numel(), 0.0)});
        }
    }

    void zero_grad() {
        for (auto& s : slots_) {
            s.param.zero_grad();
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& s : slots_) {
            auto& value = s.param.value();
            const auto& grad = s.param.grad();
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = grad[i];
                if (!std::isfinite(g)) {
                    throw NumericError("AdamW: non-finite gradient in " + s.name +
                                       " at step " + std::to_string(t_));
                }
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double m_hat = s.m[i] / bc1;
                const double v_hat = s.v[i] / bc2;
                double p = value[i];
                p -= lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * p);
                value[i] = static_cast<float>(p);
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::size_t t_ = 0;
};

// ----------------------------------------------------------------------
// Configuration
// ----------------------------------------------------------------------

enum class DataMode {
    kTreatment, // set-based prompts
    kControl,   // standard ordered prompts
};

inline DataMode data_mode_from_string(const std::string& s) {
    if (s == "treatment") {
        return DataMode::kTreatment;
    }
    if (s == "control") {
        return DataMode::kControl;
    }
    throw ConfigError("unknown data mode \"" + s + "\" (expected treatment or control)");
}

inline std::string to_string(DataMode m) {
    return m == DataMode::kTreatment ? "treatment" : "control";
}

struct TrainConfig {
    LossKind loss_kind = LossKind::kMargin;
    double margin = kDefaultMargin;
    DataMode data_mode = DataMode::kTreatment;
    double lr = 2e-5;
    double warmup_fraction = 0.10;
    std::size_t batch_size = 4;
    std::size_t epochs = 3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    LoraConfig lora; // rank 8, alpha 16, dropout 0.05
    double lora_a_init_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0) {
            throw ConfigError("TrainConfig: warmup_fraction must be in (0, 1)");
        }
        if (batch_size < 1) {
            throw ConfigError("TrainConfig: batch_size must be >= 1");
        }
        lora.validate();
    }
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) {
        return;
    }
    try {
        out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config field \"") + key + "\" has the wrong type");
    }
}

inline void reject_unknown(const nlohmann::json& j,
                           const std::vector<std::string>& known, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw ConfigError("unknown config field \"" + it.key() + "\" in " + where);
        }
    }
}

} // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "rope_base",
                            "max_position"},
                           "model");
    ModelConfig cfg;
    detail::read_field(j, "vocab_size", cfg.vocab_size);
    detail::read_field(j, "d_model", cfg.d_model);
    detail::read_field(j, "n_layers", cfg.n_layers);
    detail::read_field(j, "n_heads", cfg.n_heads);
    detail::read_field(j, "d_ff", cfg.d_ff);
    detail::read_field(j, "rope_base", cfg.rope_base);
    detail::read_field(j, "max_position", cfg.max_position);
    cfg.validate();
    return cfg;
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},
                          {"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
                          {"d_ff", cfg.d_ff},             {"rope_base", cfg.rope_base},
                          {"max_position", cfg.max_position}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"loss", "margin", "data_mode", "lr", "warmup_fraction", "batch_size",
                            "epochs", "beta1", "beta2", "eps", "weight_decay", "lora",
                            "lora_a_init_std", "seed"},
                           "train");
    TrainConfig cfg;
    std::string loss = to_string(cfg.loss_kind);
    std::string mode = to_string(cfg.data_mode);
    detail::read_field(j, "loss", loss);
    detail::read_field(j, "data_mode", mode);
    cfg.loss_kind = loss_kind_from_string(loss);
    cfg.data_mode = data_mode_from_string(mode);
    detail::read_field(j, "margin", cfg.margin);
    detail::read_field(j, "lr", cfg.lr);
    detail::read_field(j, "warmup_fraction", cfg.warmup_fraction);
    detail::read_field(j, "batch_size", cfg.batch_size);
    detail::read_field(j, "epochs", cfg.epochs);
    detail::read_field(j, "beta1", cfg.beta1);
    detail::read_field(j, "beta2", cfg.beta2);
    detail::read_field(j, "eps", cfg.eps);
    detail::read_field(j, "weight_decay", cfg.weight_decay);
    detail::read_field(j, "lora_a_init_std", cfg.lora_a_init_std);
    detail::read_field(j, "seed", cfg.seed);
    if (j.contains("lora")) {
        const auto& lj = j.at("lora");
        detail::reject_unknown(lj, {"rank", "alpha", "dropout"}, "train.lora");
        detail::read_field(lj, "rank", cfg.lora.rank);
        detail::read_field(lj, "alpha", cfg.lora.alpha);
        detail::read_field(lj, "dropout", cfg.lora.dropout);
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    return nlohmann::json{
        {"loss", to_string(cfg.loss_kind)},
        {"margin", cfg.margin},
        {"data_mode", to_string(cfg.data_mode)},
        {"lr", cfg.lr},
        {"warmup_fraction", cfg.warmup_fraction},
        {"batch_size", cfg.batch_size},
        {"epochs", cfg.epochs},
        {"beta1", cfg.beta1},
        {"beta2", cfg.beta2},
        {"eps", cfg.eps},
        {"weight_decay", cfg.weight_decay},
        {"lora",
         {{"rank", cfg.lora.rank}, {"alpha", cfg.lora.alpha}, {"dropout", cfg.lora.dropout}}},
        {"lora_a_init_std", cfg.lora_a_init_std},
        {"seed", cfg.seed},
    };
}

// ----------------------------------------------------------------------
// Data preparation
// ----------------------------------------------------------------------

// Builds one loss item per MCQ item under the configured prompting mode;
// candidates keep dataset order, distractors are the non-correct options.
inline LossBatchItem make_loss_item(const McqItem& item, DataMode mode) {
    LossBatchItem out;
    std::vector<std::vector<TokenId>> answers;
    if (mode == DataMode::kTreatment) {
        SbpPrompt sp = format_sbp(item);
        out.prompt = build_sbp_layout(sp.prompt);
        answers = std::move(sp.answers);
    } else {
        StandardPrompt st = format_standard(item, identity_permutation(item.options.size()));
        out.prompt = build_causal_layout(st.tokens);
        answers = std::move(st.answers);
    }
    for (std::size_t i = 0; i < answers.size(); ++i) {
        if (i == item.correct_index) {
            out.correct = answers[i];
        } else {
            out.incorrect.push_back(answers[i]);
        }
    }
    return out;
}

inline std::vector<LossBatchItem> make_loss_items(const std::vector<McqItem>& items,
                                                  DataMode mode) {
    std::vector<LossBatchItem> out;
    out.reserve(items.size());
    for (const auto& item : items) {
        out.push_back(make_loss_item(item, mode));
    }
    return out;
}

// ----------------------------------------------------------------------
// Training loop
// ----------------------------------------------------------------------

struct TrainStep {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
};

inline void write_history_csv(const std::vector<TrainStep>& history, std::ostream& out) {
    out << "step,epoch,train_loss,val_loss\n";
    for (const auto& row : history) {
        out << row.step << "," << row.epoch << "," << row.train_loss << ",";
        if (row.val_loss.has_value()) {
            out << *row.val_loss;
        }
        out << "\n";
    }
}

// Runs the fine-tuning recipe in place: attaches fresh adapters (base
// weights stay frozen), then exactly cfg.epochs epochs of AdamW on seeded
// shuffled batches. Returns one history row per optimizer step; epoch-final
// rows carry the validation loss of the held-out 10%.
inline std::vector<TrainStep> train(ModelState& state, const std::vector<McqItem>& items,
                                    const TrainConfig& cfg) {
    cfg.validate();
    if (items.empty()) {
        throw ConfigError("train: no items");
    }
    if (cfg.epochs == 0) {
        return {};
    }

    Rng master(cfg.seed);
    Rng split_rng = master.fork(1);
    Rng shuffle_rng = master.fork(2);
    Rng dropout_rng = master.fork(3);
    const std::uint64_t lora_seed = master.fork(4).next_u64();

    attach_lora(state, cfg.lora, lora_seed, cfg.lora_a_init_std);

    std::vector<LossBatchItem> all = make_loss_items(items, cfg.data_mode);
    std::vector<std::size_t> idx(all.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    split_rng.shuffle(idx);
    const std::size_t n_val = all.size() / 10;
    std::vector<LossBatchItem> val_items, train_items;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        (i < n_val ? val_items : train_items).push_back(all[idx[i]]);
    }
    if (train_items.empty()) {
        throw ConfigError("train: no training items after split");
    }

    std::vector<std::pair<std::string, Tensor>> lora_params;
    visit_params(state, [&](const std::string& name, Tensor& t) {
        lora_params.emplace_back(name, t);
    }, /*include_base=*/false, /*include_lora=*/true);
    AdamW opt(std::move(lora_params), AdamWConfig{cfg.beta1, cfg.beta2, cfg.eps,
                                                  cfg.weight_decay});

    const std::size_t steps_per_epoch =
        (train_items.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    std::size_t warmup = static_cast<std::size_t>(
        std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
    warmup = std::max<std::size_t>(1, std::min(warmup, total_steps > 1 ? total_steps - 1 : 1));

    std::vector<TrainStep> history;
    history.reserve(total_steps);
    std::vector<std::size_t> order(train_items.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t b = 0; b < train_items.size(); b += cfg.batch_size) {
            std::vector<LossBatchItem> batch;
            for (std::size_t i = b; i < std::min(b + cfg.batch_size, train_items.size()); ++i) {
                batch.push_back(train_items[order[i]]);
            }
            ++step;
            opt.zero_grad();
            Tape tape;
            ForwardOptions opts;
            opts.train = true;
            opts.dropout_rng = &dropout_rng;
            Tensor loss = batch_loss(&tape, state, batch, cfg.loss_kind, cfg.margin, opts);
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("train: non-finite loss at step " + std::to_string(step));
            }
            tape.backward(loss);
            const double lr = total_steps > 1 ? lr_at(step, total_steps, cfg.lr, warmup) : cfg.lr;
            opt.step(lr);
            history.push_back(TrainStep{step, epoch, loss_value, std::nullopt});
        }
        if (!val_items.empty()) {
            Tensor v = batch_loss(nullptr, state, val_items, cfg.loss_kind, cfg.margin, {});
            history.back().val_loss = static_cast<double>(v.item());
        }
    }
    return history;
}

// ----------------------------------------------------------------------
// Full-weight language-model trainer (for building pretrained toy bases)
// ----------------------------------------------------------------------

struct LmTrainConfig {
    std::size_t epochs = 3;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double warmup_fraction = 0.10;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

// Trains every parameter of the model on next-token prediction over the
// given sequences (each gets its own BOS). Returns per-epoch mean loss.
inline std::vector<double> train_lm(ModelState& state,
                                    const std::vector<std::vector<TokenId>>& sequences,
                                    const LmTrainConfig& cfg) {
    if (sequences.empty()) {
        throw ConfigError("train_lm: no sequences");
    }
    for (const auto& s : sequences) {
        if (s.empty()) {
            throw ConfigError("train_lm: empty sequence");
        }
    }
    Rng master(cfg.seed);
    Rng shuffle_rng = master.fork(1);

    std::vector<std::pair<std::string, Tensor>> params;
    visit_params(state, [&](const std::string& name, Tensor& t) {
        params.emplace_back(name, t);
    });
    AdamW opt(std::move(params), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});

    const std::size_t steps_per_epoch = (sequences.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    std::size_t warmup = static_cast<std::size_t>(
        std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
    warmup = std::max<std::size_t>(1, std::min(warmup, total_steps > 1 ? total_steps - 1 : 1));

    std::vector<std::size_t> order(sequences.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::vector<double> epoch_losses;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_sum = 0.0;
        std::size_t epoch_batches = 0;
        for (std::size_t b = 0; b < sequences.size(); b += cfg.batch_size) {
            ++step;
            opt.zero_grad();
            Tape tape;
            Tensor total;
            std::size_t count = 0;
            for (std::size_t i = b; i < std::min(b + cfg.batch_size, sequences.size()); ++i) {
                Tensor one = lm_loss(&tape, state, sequences[order[i]]);
                total = count == 0 ? one : add(&tape, total, one);
                ++count;
            }
            Tensor loss = scale(&tape, total, 1.0 / static_cast<double>(count));
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("train_lm: non-finite loss at step " + std::to_string(step));
            }
            tape.backward(loss);
            const double lr = total_steps > 1 ? lr_at(step, total_steps, cfg.lr, warmup) : cfg.lr;
            opt.step(lr);
            epoch_sum += loss_value;
            ++epoch_batches;
        }
        epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_batches));
    }
    return epoch_losses;
}

} // namespace setformer
