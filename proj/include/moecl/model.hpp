#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moecl/data.hpp"
#include "moecl/errors.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

enum class Method { moe_cl, moe_cl_no_gan, sequential_ft, per_task_ft };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::moe_cl: return "moe-cl";
        case Method::moe_cl_no_gan: return "moe-cl-no-gan";
        case Method::sequential_ft: return "sequential-ft";
        case Method::per_task_ft: return "per-task-ft";
    }
    throw ContractError("unknown method");
}

inline Method method_from_name(const std::string& s) {
    if (s == "moe-cl") return Method::moe_cl;
    if (s == "moe-cl-no-gan") return Method::moe_cl_no_gan;
    if (s == "sequential-ft") return Method::sequential_ft;
    if (s == "per-task-ft") return Method::per_task_ft;
    throw ConfigError("unknown method \"" + s + "\" (expected moe-cl, moe-cl-no-gan, sequential-ft, per-task-ft)");
}

struct ModelConfig {
    int64_t hidden = 64;
    int64_t n_blocks = 2;
    int64_t n_heads = 2;
    int64_t ffn_inner = 0;  // 0 means 4 * hidden
    int64_t vocab_size = 0;
    int64_t max_seq_len = 64;
    int64_t n_tasks = 0;
    std::vector<int64_t> classes_per_task;
    int64_t lora_rank = 8;
    double lora_alpha = 8.0;
    double gan_weight = 0.1;
    uint64_t seed = 42;

    int64_t inner() const { return ffn_inner > 0 ? ffn_inner : 4 * hidden; }
    double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }
    int64_t n_sites() const { return 2 * n_blocks; }

    // Site s sits in block s/2; even s adapts the FFN up projection
    // (hidden -> inner), odd s the down projection (inner -> hidden).
    int64_t site_in(int64_t s) const { return s % 2 == 0 ? hidden : inner(); }
    int64_t site_out(int64_t s) const { return s % 2 == 0 ? inner() : hidden; }
    // Only sites whose output width matches the discriminator input feed it.
    bool site_feeds_disc(int64_t s) const { return site_out(s) == hidden; }

    void validate() const {
        if (hidden < 1) throw ConfigError("hidden must be positive, got " + std::to_string(hidden));
        if (n_blocks < 1) throw ConfigError("n_blocks must be positive, got " + std::to_string(n_blocks));
        if (n_heads < 1 || hidden % n_heads != 0)
            throw ConfigError("hidden " + std::to_string(hidden) + " must be divisible by n_heads " + std::to_string(n_heads));
        if (max_seq_len < 1) throw ConfigError("max_seq_len must be positive, got " + std::to_string(max_seq_len));
        if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2 (pad + unk), got " + std::to_string(vocab_size));
        if (n_tasks < 1) throw ConfigError("n_tasks must be positive, got " + std::to_string(n_tasks));
        if (static_cast<int64_t>(classes_per_task.size()) != n_tasks)
            throw ConfigError("classes_per_task has " + std::to_string(classes_per_task.size()) + " entries for " +
                              std::to_string(n_tasks) + " tasks");
        for (int64_t k : classes_per_task)
            if (k < 2) throw ConfigError("every task needs at least 2 classes, got " + std::to_string(k));
        if (lora_rank < 1 || lora_rank > hidden || lora_rank > inner())
            throw ConfigError("lora_rank " + std::to_string(lora_rank) + " outside [1, min(hidden, ffn_inner)]");
        if (lora_alpha <= 0.0) throw ConfigError("lora_alpha must be positive");
        if (gan_weight < 0.0 || gan_weight > 1.0)
            throw ConfigError("gan_weight must be in [0, 1], got " + std::to_string(gan_weight));
    }
};

template <typename S>
struct BlockParams {
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;    // 1 x H
    Tensor<S> wq, wk, wv, wo;                // H x H, row-major (out x in)
    Tensor<S> w_up, b_up, w_down, b_down;    // inner x H, 1 x inner, H x inner, 1 x H
};

template <typename S>
struct Backbone {
    Tensor<S> tok_emb;  // V x H
    Tensor<S> pos_emb;  // max_seq_len x H
    std::vector<BlockParams<S>> blocks;
    Tensor<S> lnf_g, lnf_b;  // 1 x H
};

template <typename S>
struct LoraExpert {
    Tensor<S> a;  // rank x in
    Tensor<S> b;  // out x rank, zero at init so a fresh expert is a no-op
};

template <typename S>
struct GateParams {
    Tensor<S> w;  // 2 x in
    Tensor<S> b;  // 1 x 2
};

template <typename S>
struct SiteAdapters {
    LoraExpert<S> shared;                 // present unless the layout drops it
    std::vector<LoraExpert<S>> specific;  // one per task
    std::vector<GateParams<S>> gates;     // one per task
};

template <typename S>
struct HeadParams {
    Tensor<S> w1, b1;  // H x H, 1 x H
    Tensor<S> w2, b2;  // K x H, 1 x K; zero at init so untrained logits are exactly zero
};

// Which parameter families a method instantiates.
struct StackLayout {
    bool shared = false;
    bool specific = false;
    bool gates = false;
    bool disc = false;

    static StackLayout for_method(Method m) {
        switch (m) {
            case Method::moe_cl: return {true, true, true, true};
            case Method::moe_cl_no_gan: return {true, true, true, true};
            case Method::sequential_ft: return {true, false, false, false};
            case Method::per_task_ft: return {false, true, false, false};
        }
        throw ContractError("unknown method");
    }
};

template <typename S>
struct AdapterStack {
    StackLayout layout;
    std::vector<SiteAdapters<S>> sites;  // one per adapter site
    Tensor<S> disc_w, disc_b;            // N x H, 1 x N
    std::vector<HeadParams<S>> heads;    // one per task
};

template <typename S>
struct ModelState {
    ModelConfig config;
    Method method = Method::moe_cl;
    Vocab vocab;
    Backbone<S> backbone;
    AdapterStack<S> stack;
};

// Gaussian(0, 0.02) for weights and embeddings; ln gains 1; every bias, every
// LoRA b, every gate, every head output layer, and the discriminator bias start
// at zero. Zero head output layers make untrained logits exactly zero, and zero
// LoRA b makes every fresh expert an exact no-op.
template <typename S>
ModelState<S> init_model(const ModelConfig& cfg, Method method) {
    cfg.validate();
    constexpr double kStd = 0.02;
    ModelState<S> st;
    st.config = cfg;
    st.method = method;
    Rng master(cfg.seed);

    Rng brng = master.fork(1);
    st.backbone.tok_emb = Tensor<S>(cfg.vocab_size, cfg.hidden);
    brng.fill_gaussian(st.backbone.tok_emb, kStd);
    st.backbone.pos_emb = Tensor<S>(cfg.max_seq_len, cfg.hidden);
    brng.fill_gaussian(st.backbone.pos_emb, kStd);
    for (int64_t b = 0; b < cfg.n_blocks; ++b) {
        BlockParams<S> blk;
        blk.ln1_g = Tensor<S>::full(1, cfg.hidden, S(1));
        blk.ln1_b = Tensor<S>(1, cfg.hidden);
        blk.ln2_g = Tensor<S>::full(1, cfg.hidden, S(1));
        blk.ln2_b = Tensor<S>(1, cfg.hidden);
        for (Tensor<S>* w : {&blk.wq, &blk.wk, &blk.wv, &blk.wo}) {
            *w = Tensor<S>(cfg.hidden, cfg.hidden);
            brng.fill_gaussian(*w, kStd);
        }
        blk.w_up = Tensor<S>(cfg.inner(), cfg.hidden);
        brng.fill_gaussian(blk.w_up, kStd);
        blk.b_up = Tensor<S>(1, cfg.inner());
        blk.w_down = Tensor<S>(cfg.hidden, cfg.inner());
        brng.fill_gaussian(blk.w_down, kStd);
        blk.b_down = Tensor<S>(1, cfg.hidden);
        st.backbone.blocks.push_back(std::move(blk));
    }
    st.backbone.lnf_g = Tensor<S>::full(1, cfg.hidden, S(1));
    st.backbone.lnf_b = Tensor<S>(1, cfg.hidden);

    st.stack.layout = StackLayout::for_method(method);
    Rng arng = master.fork(2);
    for (int64_t s = 0; s < cfg.n_sites(); ++s) {
        SiteAdapters<S> site;
        const int64_t in = cfg.site_in(s), out = cfg.site_out(s);
        auto make_expert = [&] {
            LoraExpert<S> e;
            e.a = Tensor<S>(cfg.lora_rank, in);
            arng.fill_gaussian(e.a, kStd);
            e.b = Tensor<S>(out, cfg.lora_rank);
            return e;
        };
        if (st.stack.layout.shared) site.shared = make_expert();
        if (st.stack.layout.specific)
            for (int64_t t = 0; t < cfg.n_tasks; ++t) site.specific.push_back(make_expert());
        if (st.stack.layout.gates)
            for (int64_t t = 0; t < cfg.n_tasks; ++t)
                site.gates.push_back(GateParams<S>{Tensor<S>(2, in), Tensor<S>(1, 2)});
        st.stack.sites.push_back(std::move(site));
    }

    if (st.stack.layout.disc) {
        Rng drng = master.fork(3);
        st.stack.disc_w = Tensor<S>(cfg.n_tasks, cfg.hidden);
        drng.fill_gaussian(st.stack.disc_w, kStd);
        st.stack.disc_b = Tensor<S>(1, cfg.n_tasks);
    }

    Rng hrng = master.fork(4);
    for (int64_t t = 0; t < cfg.n_tasks; ++t) {
        HeadParams<S> h;
        h.w1 = Tensor<S>(cfg.hidden, cfg.hidden);
        hrng.fill_gaussian(h.w1, kStd);
        h.b1 = Tensor<S>(1, cfg.hidden);
        h.w2 = Tensor<S>(cfg.classes_per_task[static_cast<size_t>(t)], cfg.hidden);
        h.b2 = Tensor<S>(1, cfg.classes_per_task[static_cast<size_t>(t)]);
        st.stack.heads.push_back(std::move(h));
    }
    return st;
}

enum class Component { backbone, shared, specific, gate, head, disc };

struct ParamTag {
    Component comp = Component::backbone;
    int task = -1;  // owning task for specific/gate/head, else -1
    int site = -1;  // owning adapter site for shared/specific/gate, else -1
};

// Visits every parameter tensor in a fixed, construction-independent order.
// Everything that needs a stable parameter enumeration (optimizer steps, freeze
// hashing, checkpoint manifests) goes through here.
template <typename S, typename F>
void enumerate_params(ModelState<S>& st, F&& f) {
    f("backbone.tok_emb", ParamTag{Component::backbone, -1, -1}, st.backbone.tok_emb);
    f("backbone.pos_emb", ParamTag{Component::backbone, -1, -1}, st.backbone.pos_emb);
    for (size_t b = 0; b < st.backbone.blocks.size(); ++b) {
        BlockParams<S>& blk = st.backbone.blocks[b];
        const std::string p = "backbone.b" + std::to_string(b) + ".";
        const ParamTag tag{Component::backbone, -1, -1};
        f(p + "ln1.g", tag, blk.ln1_g);
        f(p + "ln1.b", tag, blk.ln1_b);
        f(p + "attn.wq", tag, blk.wq);
        f(p + "attn.wk", tag, blk.wk);
        f(p + "attn.wv", tag, blk.wv);
        f(p + "attn.wo", tag, blk.wo);
        f(p + "ln2.g", tag, blk.ln2_g);
        f(p + "ln2.b", tag, blk.ln2_b);
        f(p + "ffn.up.w", tag, blk.w_up);
        f(p + "ffn.up.b", tag, blk.b_up);
        f(p + "ffn.down.w", tag, blk.w_down);
        f(p + "ffn.down.b", tag, blk.b_down);
    }
    f("backbone.final_ln.g", ParamTag{Component::backbone, -1, -1}, st.backbone.lnf_g);
    f("backbone.final_ln.b", ParamTag{Component::backbone, -1, -1}, st.backbone.lnf_b);

    for (size_t s = 0; s < st.stack.sites.size(); ++s) {
        SiteAdapters<S>& site = st.stack.sites[s];
        const std::string p = "site" + std::to_string(s) + ".";
        if (st.stack.layout.shared) {
            f(p + "shared.a", ParamTag{Component::shared, -1, static_cast<int>(s)}, site.shared.a);
            f(p + "shared.b", ParamTag{Component::shared, -1, static_cast<int>(s)}, site.shared.b);
        }
        for (size_t t = 0; t < site.specific.size(); ++t) {
            f(p + "task" + std::to_string(t) + ".a", ParamTag{Component::specific, static_cast<int>(t), static_cast<int>(s)},
              site.specific[t].a);
            f(p + "task" + std::to_string(t) + ".b", ParamTag{Component::specific, static_cast<int>(t), static_cast<int>(s)},
              site.specific[t].b);
        }
        for (size_t t = 0; t < site.gates.size(); ++t) {
            f(p + "gate" + std::to_string(t) + ".w", ParamTag{Component::gate, static_cast<int>(t), static_cast<int>(s)},
              site.gates[t].w);
            f(p + "gate" + std::to_string(t) + ".b", ParamTag{Component::gate, static_cast<int>(t), static_cast<int>(s)},
              site.gates[t].b);
        }
    }

    if (st.stack.layout.disc) {
        f("disc.w", ParamTag{Component::disc, -1, -1}, st.stack.disc_w);
        f("disc.b", ParamTag{Component::disc, -1, -1}, st.stack.disc_b);
    }

    for (size_t t = 0; t < st.stack.heads.size(); ++t) {
        HeadParams<S>& h = st.stack.heads[t];
        const std::string p = "head" + std::to_string(t) + ".";
        const ParamTag tag{Component::head, static_cast<int>(t), -1};
        f(p + "l1.w", tag, h.w1);
        f(p + "l1.b", tag, h.b1);
        f(p + "l2.w", tag, h.w2);
        f(p + "l2.b", tag, h.b2);
    }
}

template <typename S>
int64_t count_params(ModelState<S>& st) {
    int64_t n = 0;
    enumerate_params(st, [&](const std::string&, const ParamTag&, Tensor<S>& t) { n += t.numel(); });
    return n;
}

// name -> content hash for every parameter; the freeze and purity contracts
// compare these maps before and after an operation.
template <typename S>
std::vector<std::pair<std::string, uint64_t>> state_hashes(ModelState<S>& st) {
    std::vector<std::pair<std::string, uint64_t>> out;
    enumerate_params(st, [&](const std::string& name, const ParamTag&, Tensor<S>& t) {
        out.emplace_back(name, tensor_hash(t));
    });
    return out;
}

}  // namespace moecl
