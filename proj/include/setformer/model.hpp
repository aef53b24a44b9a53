#pragma once

// Decoder-only transformer that consumes an explicit SbpLayout instead of
// assuming left-to-right order: positions feed the rotary rotation and the
// layout mask decides which attention scores survive. Pre-norm RMS blocks
// with a SiLU-gated feed-forward, untied output head, optional low-rank
// adapters on the q/k/v/o projections.

#include "setformer/common.hpp"
#include "setformer/layout.hpp"
#include "setformer/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace setformer {

struct ModelConfig {
    std::size_t vocab_size = tokens::kVocabSize;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    double rope_base = 10000.0;
    std::size_t max_position = 512;

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
            max_position < 1) {
            throw ConfigError("ModelConfig: all extents must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("ModelConfig: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (head_dim() % 2 != 0) {
            throw ConfigError("ModelConfig: head dimension must be even for rotary encoding");
        }
    }
};

struct LoraConfig {
    std::size_t rank = 8;
    double alpha = 16.0;
    double dropout = 0.05;

    double scale() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (rank == 0) {
            throw ConfigError("LoraConfig: rank must be >= 1");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ConfigError("LoraConfig: dropout must be in [0, 1)");
        }
    }
};

// Low-rank pair for one projection W [d_in, d_out]: the effective update is
// scale * a * b with a [d_in, rank], b [rank, d_out]. b starts at zero so a
// fresh adapter is an exact no-op.
struct LoraPair {
    Tensor a;
    Tensor b;
};

struct LoraLayerAdapters {
    LoraPair q, k, v, o;
};

struct LoraState {
    LoraConfig config;
    std::vector<LoraLayerAdapters> layers;
};

struct AttentionWeights {
    Tensor wq, wk, wv, wo; // each [d_model, d_model]
};

struct MlpWeights {
    Tensor w_gate, w_up, w_down; // [d, d_ff], [d, d_ff], [d_ff, d]
};

struct LayerWeights {
    Tensor attn_norm; // [d]
    AttentionWeights attn;
    Tensor mlp_norm; // [d]
    MlpWeights mlp;
};

struct ModelState {
    ModelConfig config;
    Tensor embedding; // [vocab, d]
    std::vector<LayerWeights> layers;
    Tensor final_norm; // [d]
    Tensor output;     // [d, vocab] (untied head)
    std::optional<LoraState> lora;
};

inline constexpr double kNormEps = 1e-5;

inline ModelState init_model(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t d = cfg.d_model;
    ModelState st;
    st.config = cfg;
    st.embedding = Tensor::randn({cfg.vocab_size, d}, rng, init_std, true);
    st.layers.resize(cfg.n_layers);
    for (auto& layer : st.layers) {
        layer.attn_norm = Tensor::full({d}, 1.0f, true);
        layer.attn.wq = Tensor::randn({d, d}, rng, init_std, true);
        layer.attn.wk = Tensor::randn({d, d}, rng, init_std, true);
        layer.attn.wv = Tensor::randn({d, d}, rng, init_std, true);
        layer.attn.wo = Tensor::randn({d, d}, rng, init_std, true);
        layer.mlp_norm = Tensor::full({d}, 1.0f, true);
        layer.mlp.w_gate = Tensor::randn({d, cfg.d_ff}, rng, init_std, true);
        layer.mlp.w_up = Tensor::randn({d, cfg.d_ff}, rng, init_std, true);
        layer.mlp.w_down = Tensor::randn({cfg.d_ff, d}, rng, init_std, true);
    }
    st.final_norm = Tensor::full({d}, 1.0f, true);
    st.output = Tensor::randn({d, cfg.vocab_size}, rng, init_std, true);
    return st;
}

// Attaches fresh adapters: a ~ N(0, a_init_std^2), b = 0, so the forward
// pass is unchanged until training moves b.
inline void attach_lora(ModelState& st, const LoraConfig& cfg, std::uint64_t seed,
                        double a_init_std = 0.02) {
    cfg.validate();
    if (st.lora.has_value()) {
        throw ConfigError("attach_lora: adapters already present");
    }
    Rng rng(seed);
    LoraState ls;
    ls.config = cfg;
    const std::size_t d = st.config.d_model;
    ls.layers.resize(st.config.n_layers);
    for (auto& layer : ls.layers) {
        for (LoraPair* pair : {&layer.q, &layer.k, &layer.v, &layer.o}) {
            pair->a = Tensor::randn({d, cfg.rank}, rng, a_init_std, true);
            pair->b = Tensor::zeros({cfg.rank, d}, true);
        }
    }
    st.lora = std::move(ls);
}

// Visits every tensor in a fixed order with stable names (used for the
// optimizer, checkpointing, and diagnostics).
inline void visit_params(ModelState& st,
                         const std::function<void(const std::string&, Tensor&)>& fn,
                         bool include_base = true, bool include_lora = true) {
    auto layer_name = [](std::size_t i, const char* rest) {
        return "layers." + std::to_string(i) + "." + rest;
    };
    if (include_base) {
        fn("embedding", st.embedding);
        for (std::size_t i = 0; i < st.layers.size(); ++i) {
            auto& L = st.layers[i];
            fn(layer_name(i, "attn_norm"), L.attn_norm);
            fn(layer_name(i, "attn.wq"), L.attn.wq);
            fn(layer_name(i, "attn.wk"), L.attn.wk);
            fn(layer_name(i, "attn.wv"), L.attn.wv);
            fn(layer_name(i, "attn.wo"), L.attn.wo);
            fn(layer_name(i, "mlp_norm"), L.mlp_norm);
            fn(layer_name(i, "mlp.w_gate"), L.mlp.w_gate);
            fn(layer_name(i, "mlp.w_up"), L.mlp.w_up);
            fn(layer_name(i, "mlp.w_down"), L.mlp.w_down);
        }
        fn("final_norm", st.final_norm);
        fn("output", st.output);
    }
    if (include_lora && st.lora.has_value()) {
        for (std::size_t i = 0; i < st.lora->layers.size(); ++i) {
            auto& L = st.lora->layers[i];
            fn(layer_name(i, "lora.q.a"), L.q.a);
            fn(layer_name(i, "lora.q.b"), L.q.b);
            fn(layer_name(i, "lora.k.a"), L.k.a);
            fn(layer_name(i, "lora.k.b"), L.k.b);
            fn(layer_name(i, "lora.v.a"), L.v.a);
            fn(layer_name(i, "lora.v.b"), L.v.b);
            fn(layer_name(i, "lora.o.a"), L.o.a);
            fn(layer_name(i, "lora.o.b"), L.o.b);
        }
    }
}

struct ForwardOptions {
    bool train = false;       // enables adapter dropout
    Rng* dropout_rng = nullptr;
};

namespace detail {

inline Tensor lora_proj(Tape* tape, const Tensor& x, const Tensor& w, const LoraPair* pair,
                        const LoraConfig* cfg, const ForwardOptions& opts) {
    Tensor y = matmul(tape, x, w);
    if (pair == nullptr) {
        return y;
    }
    Tensor in = x;
    if (opts.train && cfg->dropout > 0.0) {
        if (opts.dropout_rng == nullptr) {
            throw ConfigError("forward: training mode with dropout needs an RNG");
        }
        in = dropout(tape, x, cfg->dropout, *opts.dropout_rng);
    }
    Tensor delta = matmul(tape, matmul(tape, in, pair->a), pair->b);
    return add(tape, y, scale(tape, delta, cfg->scale()));
}

} // namespace detail

// Runs the full stack on one layout, returning per-token logits
// [tokens, vocab]. Pass tape=nullptr for evaluation-only forward passes.
inline Tensor forward(Tape* tape, const ModelState& st, const SbpLayout& layout,
                      const ForwardOptions& opts = {}) {
    const ModelConfig& cfg = st.config;
    const std::size_t T = layout.size();
    if (T == 0) {
        throw ConfigError("forward: empty layout");
    }
    for (int pos : layout.positions) {
        if (pos < 0 || static_cast<std::size_t>(pos) >= cfg.max_position) {
            throw ConfigError("forward: position " + std::to_string(pos) +
                              " outside max_position " + std::to_string(cfg.max_position));
        }
    }
    const std::size_t dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // The state is logically immutable here; Tensor handles share storage,
    // so gradient accumulation still reaches the parameters.
    ModelState& state = const_cast<ModelState&>(st);
    const LoraConfig* lcfg = state.lora ? &state.lora->config : nullptr;

    Tensor x = embedding(tape, state.embedding, layout.tokens);
    for (std::size_t li = 0; li < state.layers.size(); ++li) {
        LayerWeights& L = state.layers[li];
        LoraLayerAdapters* A = state.lora ? &state.lora->layers[li] : nullptr;

        Tensor h = rmsnorm(tape, x, L.attn_norm, kNormEps);
        Tensor q = detail::lora_proj(tape, h, L.attn.wq, A ? &A->q : nullptr, lcfg, opts);
        Tensor k = detail::lora_proj(tape, h, L.attn.wk, A ? &A->k : nullptr, lcfg, opts);
        Tensor v = detail::lora_proj(tape, h, L.attn.wv, A ? &A->v : nullptr, lcfg, opts);
        q = rope_rotate(tape, q, layout.positions, dh, cfg.rope_base);
        k = rope_rotate(tape, k, layout.positions, dh, cfg.rope_base);

        std::vector<Tensor> head_ctx;
        head_ctx.reserve(cfg.n_heads);
        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            Tensor qh = slice_cols(tape, q, hd * dh, dh);
            Tensor kh = slice_cols(tape, k, hd * dh, dh);
            Tensor vh = slice_cols(tape, v, hd * dh, dh);
            Tensor scores = scale(tape, matmul_nt(tape, qh, kh), inv_sqrt_dh);
            Tensor blocked = masked_neg_inf(tape, scores, layout.mask);
            Tensor weights = softmax_lastdim(tape, blocked);
            head_ctx.push_back(matmul(tape, weights, vh));
        }
        Tensor ctx = concat_cols(tape, head_ctx);
        Tensor attn_out = detail::lora_proj(tape, ctx, L.attn.wo, A ? &A->o : nullptr, lcfg, opts);
        x = add(tape, x, attn_out);

        Tensor h2 = rmsnorm(tape, x, L.mlp_norm, kNormEps);
        Tensor gate = silu(tape, matmul(tape, h2, L.mlp.w_gate));
        Tensor up = matmul(tape, h2, L.mlp.w_up);
        Tensor down = matmul(tape, mul(tape, gate, up), L.mlp.w_down);
        x = add(tape, x, down);
    }
    Tensor normed = rmsnorm(tape, x, state.final_norm, kNormEps);
    return matmul(tape, normed, state.output);
}

// Mean per-token log-probability of the answer conditioned on the prompt:
// the answer is appended as continuation rows, and token t is read from the
// logits row just before it.
inline Tensor answer_logprob(Tape* tape, const ModelState& st, const SbpLayout& prompt,
                             const std::vector<TokenId>& answer_tokens,
                             const ForwardOptions& opts = {}) {
    if (answer_tokens.empty()) {
        throw ConfigError("answer_logprob: answer_tokens must be non-empty");
    }
    const SbpLayout full = append_continuation(prompt, answer_tokens);
    Tensor logits = forward(tape, st, full, opts);
    Tensor logp = log_softmax_lastdim(tape, logits);
    std::vector<std::size_t> rows(answer_tokens.size()), cols(answer_tokens.size());
    for (std::size_t t = 0; t < answer_tokens.size(); ++t) {
        rows[t] = prompt.size() + t - 1;
        cols[t] = static_cast<std::size_t>(answer_tokens[t]);
    }
    return mean(tape, pick(tape, logp, rows, cols));
}

// Mean next-token negative log-likelihood of a chunk under a causal layout
// with BOS prepended; chunk tokens are exactly the predicted tokens.
inline Tensor lm_loss(Tape* tape, const ModelState& st, const std::vector<TokenId>& chunk,
                      const ForwardOptions& opts = {}) {
    if (chunk.empty()) {
        throw ConfigError("lm_loss: empty chunk");
    }
    std::vector<TokenId> seq;
    seq.reserve(chunk.size() + 1);
    seq.push_back(tokens::kBos);
    seq.insert(seq.end(), chunk.begin(), chunk.end());
    const SbpLayout layout = build_causal_layout(seq);
    Tensor logits = forward(tape, st, layout, opts);
    Tensor logp = log_softmax_lastdim(tape, logits);
    std::vector<std::size_t> rows(chunk.size()), cols(chunk.size());
    for (std::size_t t = 0; t < chunk.size(); ++t) {
        rows[t] = t;
        cols[t] = static_cast<std::size_t>(chunk[t]);
    }
    return scale(tape, mean(tape, pick(tape, logp, rows, cols)), -1.0);
}

// Folds adapters into the base weights: W += (alpha/r) * a * b, then drops
// the adapter state. Eval-mode outputs stay within float round-off of the
// runtime-adapter path.
inline void merge_lora(ModelState& st) {
    if (!st.lora.has_value()) {
        throw ConfigError("merge_lora: no adapters to merge");
    }
    const double s = st.lora->config.scale();
    const std::size_t d = st.config.d_model;
    const std::size_t r = st.lora->config.rank;
    for (std::size_t li = 0; li < st.layers.size(); ++li) {
        LoraLayerAdapters& A = st.lora->layers[li];
        AttentionWeights& W = st.layers[li].attn;
        const std::vector<std::pair<LoraPair*, Tensor*>> targets = {
            {&A.q, &W.wq}, {&A.k, &W.wk}, {&A.v, &W.wv}, {&A.o, &W.wo}};
        for (auto& [pair, w] : targets) {
            std::vector<float> delta(d * d, 0.0f);
            detail::kernel_mm_nn(delta.data(), pair->a.value().data(), pair->b.value().data(), d,
                                 r, d, false);
            for (std::size_t i = 0; i < d * d; ++i) {
                w->value()[i] = static_cast<float>(static_cast<double>(w->value()[i]) +
                                                   s * static_cast<double>(delta[i]));
            }
        }
    }
    st.lora.reset();
}

// ----------------------------------------------------------------------
// Checkpoint container: magic "SBPF1", u32 tensor count, then per tensor
// {u32 name length, name bytes, u8 rank, u64 extents..., f32 row-major
// data}, everything little-endian. The model configuration rides along as
// a rank-1 f32 tensor named "config".
// ----------------------------------------------------------------------

namespace detail {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    // x86 and every target we build for is little-endian; memcpy keeps the
    // byte order explicit in one place should that ever change.
    put_bytes(out, buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!in) {
        throw ParseError("checkpoint: unexpected end of file");
    }
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void write_tensor_record(std::ostream& out, const std::string& name, const Shape& shape,
                                const std::vector<float>& data) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name.data(), name.size());
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (std::size_t e : shape) {
        put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    }
    for (float f : data) {
        put_le<float>(out, f);
    }
}

struct RawTensor {
    Shape shape;
    std::vector<float> data;
};

inline std::vector<float> config_vector(const ModelState& st) {
    const ModelConfig& c = st.config;
    std::vector<float> v = {
        static_cast<float>(c.vocab_size), static_cast<float>(c.d_model),
        static_cast<float>(c.n_layers),   static_cast<float>(c.n_heads),
        static_cast<float>(c.d_ff),       static_cast<float>(c.rope_base),
        static_cast<float>(c.max_position),
        0.0f, 0.0f, 0.0f};
    if (st.lora.has_value()) {
        v[7] = static_cast<float>(st.lora->config.rank);
        v[8] = static_cast<float>(st.lora->config.alpha);
        v[9] = static_cast<float>(st.lora->config.dropout);
    }
    return v;
}

} // namespace detail

inline void save_checkpoint(const ModelState& st, std::ostream& out) {
    ModelState& state = const_cast<ModelState&>(st);
    std::vector<std::pair<std::string, Tensor*>> entries;
    visit_params(state, [&](const std::string& name, Tensor& t) {
        entries.emplace_back(name, &t);
    });
    detail::put_bytes(out, "SBPF1", 5);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size() + 1));
    detail::write_tensor_record(out, "config", {10}, detail::config_vector(st));
    for (auto& [name, t] : entries) {
        detail::write_tensor_record(out, name, t->shape(), t->value());
    }
    if (!out) {
        throw ConfigError("save_checkpoint: write failed");
    }
}

inline void save_checkpoint(const ModelState& st, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("save_checkpoint: cannot open " + path);
    }
    save_checkpoint(st, out);
}

inline ModelState load_checkpoint(std::istream& in) {
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, "SBPF1", 5) != 0) {
        throw ParseError("checkpoint: bad magic (expected SBPF1)");
    }
    const auto count = detail::get_le<std::uint32_t>(in);
    std::map<std::string, detail::RawTensor> raw;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::get_le<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        if (!in) {
            throw ParseError("checkpoint: unexpected end of file in name");
        }
        const auto rank = detail::get_le<std::uint8_t>(in);
        detail::RawTensor t;
        std::size_t numel = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            const auto e = detail::get_le<std::uint64_t>(in);
            t.shape.push_back(static_cast<std::size_t>(e));
            numel *= static_cast<std::size_t>(e);
        }
        t.data.resize(numel);
        for (std::size_t j = 0; j < numel; ++j) {
            t.data[j] = detail::get_le<float>(in);
        }
        if (!raw.emplace(name, std::move(t)).second) {
            throw ParseError("checkpoint: duplicate tensor name " + name);
        }
    }

    auto cfg_it = raw.find("config");
    if (cfg_it == raw.end() || cfg_it->second.data.size() != 10) {
        throw ParseError("checkpoint: missing or malformed config tensor");
    }
    const std::vector<float>& cv = cfg_it->second.data;
    ModelConfig cfg;
    cfg.vocab_size = static_cast<std::size_t>(cv[0]);
    cfg.d_model = static_cast<std::size_t>(cv[1]);
    cfg.n_layers = static_cast<std::size_t>(cv[2]);
    cfg.n_heads = static_cast<std::size_t>(cv[3]);
    cfg.d_ff = static_cast<std::size_t>(cv[4]);
    cfg.rope_base = static_cast<double>(cv[5]);
    cfg.max_position = static_cast<std::size_t>(cv[6]);
    cfg.validate();

    ModelState st = init_model(cfg, 0, 0.0);
    if (cv[7] > 0.0f) {
        LoraConfig lc;
        lc.rank = static_cast<std::size_t>(cv[7]);
        lc.alpha = static_cast<double>(cv[8]);
        lc.dropout = static_cast<double>(cv[9]);
        attach_lora(st, lc, 0, 0.0);
    }
    raw.erase(cfg_it);

    visit_params(st, [&](const std::string& name, Tensor& t) {
        auto it = raw.find(name);
        if (it == raw.end()) {
            throw ParseError("checkpoint: missing tensor " + name);
        }
        if (it->second.shape != t.shape()) {
            throw ParseError("checkpoint: tensor " + name + " has shape " +
                             shape_str(it->second.shape) + ", expected " + shape_str(t.shape()));
        }
        t.value() = std::move(it->second.data);
        raw.erase(it);
    });
    if (!raw.empty()) {
        throw ParseError("checkpoint: unexpected tensor " + raw.begin()->first);
    }
    return st;
}

inline ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("load_checkpoint: cannot open " + path);
    }
    return load_checkpoint(in);
}

} // namespace setformer
