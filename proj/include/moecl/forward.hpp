#pragma once

#include <functional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "moecl/model.hpp"
#include "moecl/tape.hpp"

namespace moecl {

using TrainableFn = std::function<bool(const std::string&, const ParamTag&)>;

template <typename Ctx>
struct BExpert {
    typename Ctx::Var a, b;
};
template <typename Ctx>
struct BGate {
    typename Ctx::Var w, b;
};
template <typename Ctx>
struct BBlock {
    typename Ctx::Var ln1_g, ln1_b, ln2_g, ln2_b, wq, wk, wv, wo, w_up, b_up, w_down, b_down;
};
template <typename Ctx>
struct BSite {
    BExpert<Ctx> shared;
    std::vector<BExpert<Ctx>> specific;
    std::vector<BGate<Ctx>> gates;
};
template <typename Ctx>
struct BHead {
    typename Ctx::Var w1, b1, w2, b2;
};

// All model parameters registered with one execution context. On a tape the
// trainable predicate decides which leaves track gradients; a frozen leaf never
// receives one. `flat` pairs every parameter tensor with its bound variable for
// optimizer updates and gradient extraction.
template <typename S, typename Ctx>
struct BoundModel {
    using V = typename Ctx::Var;
    StackLayout layout;
    V tok_emb, pos_emb, lnf_g, lnf_b;
    std::vector<BBlock<Ctx>> blocks;
    std::vector<BSite<Ctx>> sites;
    V disc_w, disc_b;
    std::vector<BHead<Ctx>> heads;
    std::vector<std::tuple<std::string, ParamTag, Tensor<S>*, V>> flat;
};

template <typename S, typename Ctx>
BoundModel<S, Ctx> bind_model(Ctx& ctx, ModelState<S>& st, const TrainableFn& trainable = {}) {
    BoundModel<S, Ctx> m;
    m.layout = st.stack.layout;
    auto bind = [&](const std::string& name, const ParamTag& tag, Tensor<S>& t) {
        const bool rg = trainable ? trainable(name, tag) : false;
        typename Ctx::Var v = ctx.leaf(t, rg);
        m.flat.emplace_back(name, tag, &t, v);
        return v;
    };

    const ParamTag btag{Component::backbone, -1, -1};
    m.tok_emb = bind("backbone.tok_emb", btag, st.backbone.tok_emb);
    m.pos_emb = bind("backbone.pos_emb", btag, st.backbone.pos_emb);
    for (size_t b = 0; b < st.backbone.blocks.size(); ++b) {
        BlockParams<S>& blk = st.backbone.blocks[b];
        const std::string p = "backbone.b" + std::to_string(b) + ".";
        BBlock<Ctx> bb;
        bb.ln1_g = bind(p + "ln1.g", btag, blk.ln1_g);
        bb.ln1_b = bind(p + "ln1.b", btag, blk.ln1_b);
        bb.wq = bind(p + "attn.wq", btag, blk.wq);
        bb.wk = bind(p + "attn.wk", btag, blk.wk);
        bb.wv = bind(p + "attn.wv", btag, blk.wv);
        bb.wo = bind(p + "attn.wo", btag, blk.wo);
        bb.ln2_g = bind(p + "ln2.g", btag, blk.ln2_g);
        bb.ln2_b = bind(p + "ln2.b", btag, blk.ln2_b);
        bb.w_up = bind(p + "ffn.up.w", btag, blk.w_up);
        bb.b_up = bind(p + "ffn.up.b", btag, blk.b_up);
        bb.w_down = bind(p + "ffn.down.w", btag, blk.w_down);
        bb.b_down = bind(p + "ffn.down.b", btag, blk.b_down);
        m.blocks.push_back(std::move(bb));
    }
    m.lnf_g = bind("backbone.final_ln.g", btag, st.backbone.lnf_g);
    m.lnf_b = bind("backbone.final_ln.b", btag, st.backbone.lnf_b);

    for (size_t s = 0; s < st.stack.sites.size(); ++s) {
        SiteAdapters<S>& site = st.stack.sites[s];
        const std::string p = "site" + std::to_string(s) + ".";
        BSite<Ctx> bs;
        if (st.stack.layout.shared) {
            bs.shared.a = bind(p + "shared.a", ParamTag{Component::shared, -1, static_cast<int>(s)}, site.shared.a);
            bs.shared.b = bind(p + "shared.b", ParamTag{Component::shared, -1, static_cast<int>(s)}, site.shared.b);
        }
        for (size_t t = 0; t < site.specific.size(); ++t) {
            BExpert<Ctx> e;
            e.a = bind(p + "task" + std::to_string(t) + ".a",
                       ParamTag{Component::specific, static_cast<int>(t), static_cast<int>(s)}, site.specific[t].a);
            e.b = bind(p + "task" + std::to_string(t) + ".b",
                       ParamTag{Component::specific, static_cast<int>(t), static_cast<int>(s)}, site.specific[t].b);
            bs.specific.push_back(std::move(e));
        }
        for (size_t t = 0; t < site.gates.size(); ++t) {
            BGate<Ctx> g;
            g.w = bind(p + "gate" + std::to_string(t) + ".w",
                       ParamTag{Component::gate, static_cast<int>(t), static_cast<int>(s)}, site.gates[t].w);
            g.b = bind(p + "gate" + std::to_string(t) + ".b",
                       ParamTag{Component::gate, static_cast<int>(t), static_cast<int>(s)}, site.gates[t].b);
            bs.gates.push_back(std::move(g));
        }
        m.sites.push_back(std::move(bs));
    }

    if (st.stack.layout.disc) {
        m.disc_w = bind("disc.w", ParamTag{Component::disc, -1, -1}, st.stack.disc_w);
        m.disc_b = bind("disc.b", ParamTag{Component::disc, -1, -1}, st.stack.disc_b);
    }

    for (size_t t = 0; t < st.stack.heads.size(); ++t) {
        HeadParams<S>& h = st.stack.heads[t];
        const std::string p = "head" + std::to_string(t) + ".";
        const ParamTag tag{Component::head, static_cast<int>(t), -1};
        BHead<Ctx> bh;
        bh.w1 = bind(p + "l1.w", tag, h.w1);
        bh.b1 = bind(p + "l1.b", tag, h.b1);
        bh.w2 = bind(p + "l2.w", tag, h.w2);
        bh.b2 = bind(p + "l2.b", tag, h.b2);
        m.heads.push_back(std::move(bh));
    }
    return m;
}

// Strips trailing padding and validates the sequence: non-empty, padding only
// at the tail, every id inside the vocab, length within max_seq_len.
inline std::span<const int> valid_prefix(std::span<const int> tokens, const ModelConfig& cfg) {
    size_t n = 0;
    while (n < tokens.size() && tokens[n] != Vocab::pad_id) ++n;
    for (size_t i = n; i < tokens.size(); ++i)
        if (tokens[i] != Vocab::pad_id)
            throw ContractError("token sequence has interior padding at position " + std::to_string(n));
    if (n == 0) throw ContractError("empty token sequence");
    if (static_cast<int64_t>(n) > cfg.max_seq_len)
        throw ContractError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    for (size_t i = 0; i < n; ++i)
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size)
            throw IndexError("token id " + std::to_string(tokens[i]) + " outside vocab of " +
                             std::to_string(cfg.vocab_size));
    return tokens.first(n);
}

// delta = scale * (x a^T) b^T, rank-factored update applied to a row batch.
template <typename Ctx>
typename Ctx::Var lora_apply(Ctx& ctx, typename Ctx::Var x, const BExpert<Ctx>& e, double scale) {
    return ctx.scale(ctx.matmul_nt(ctx.matmul_nt(x, e.a), e.b), scale);
}

template <typename Ctx>
struct ForwardOutput {
    using V = typename Ctx::Var;
    V states;                  // L x H final hidden states
    V pooled;                  // 1 x H mean over positions
    V logits;                  // 1 x K_task
    std::vector<V> zs_pooled;  // mean-pooled shared expert output per discriminator site
    std::vector<int> zs_sites; // adapter site index per zs_pooled entry
    std::vector<V> betas;      // gate weights per gated site, L x 2 rows (beta_shared, beta_task)
};

namespace detail {

template <typename Ctx>
typename Ctx::Var attention(Ctx& ctx, const ModelConfig& cfg, const BBlock<Ctx>& blk, typename Ctx::Var x_ln) {
    using V = typename Ctx::Var;
    const int64_t dh = cfg.hidden / cfg.n_heads;
    V q = ctx.matmul_nt(x_ln, blk.wq);
    V k = ctx.matmul_nt(x_ln, blk.wk);
    V v = ctx.matmul_nt(x_ln, blk.wv);
    std::vector<V> heads;
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        V qh = ctx.slice_cols(q, h * dh, (h + 1) * dh);
        V kh = ctx.slice_cols(k, h * dh, (h + 1) * dh);
        V vh = ctx.slice_cols(v, h * dh, (h + 1) * dh);
        V scores = ctx.scale(ctx.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        heads.push_back(ctx.matmul(ctx.softmax_rows(scores), vh));
    }
    V merged = cfg.n_heads == 1 ? heads[0] : ctx.concat_cols(heads);
    return ctx.matmul_nt(merged, blk.wo);
}

// One adapter site: base projection already computed by the caller; mixes the
// shared and task expert outputs with the task's gate and exposes the shared
// representation through a gradient-reversal node for the discriminator path.
template <typename S, typename Ctx>
typename Ctx::Var apply_site(Ctx& ctx, const ModelConfig& cfg, const BoundModel<S, Ctx>& m, int64_t s, int task,
                             typename Ctx::Var x_in, typename Ctx::Var base, double grl_lambda,
                             ForwardOutput<Ctx>* out) {
    using V = typename Ctx::Var;
    const BSite<Ctx>& site = m.sites[static_cast<size_t>(s)];
    const double ls = cfg.lora_scale();

    V d_s, z_s, z_t;
    if (m.layout.shared) {
        d_s = lora_apply(ctx, x_in, site.shared, ls);
        z_s = ctx.add(base, d_s);
    }
    if (m.layout.specific) z_t = ctx.add(base, lora_apply(ctx, x_in, site.specific[static_cast<size_t>(task)], ls));

    V z_next;
    if (m.layout.gates) {
        const BGate<Ctx>& gate = site.gates[static_cast<size_t>(task)];
        V beta = ctx.softmax_rows(ctx.add_rows(ctx.matmul_nt(x_in, gate.w), gate.b));
        if (out) out->betas.push_back(beta);
        V beta_s = ctx.slice_cols(beta, 0, 1);
        V beta_t = ctx.slice_cols(beta, 1, 2);
        z_next = ctx.add(ctx.rows_scale(z_s, beta_s), ctx.rows_scale(z_t, beta_t));
    } else if (m.layout.shared) {
        z_next = z_s;
    } else {
        z_next = z_t;
    }

    // The adversary reads the shared expert's own output, not the full site
    // output: the frozen base projection is not something the expert could ever
    // unlearn, so exposing it would hand the critic an uncloseable signal.
    if (out && m.layout.shared && cfg.site_feeds_disc(s)) {
        V zg = ctx.grad_reverse(d_s, grl_lambda);
        out->zs_pooled.push_back(ctx.mean_rows(zg));
        out->zs_sites.push_back(static_cast<int>(s));
    }
    return z_next;
}

// Shared trunk for the plain and adapted paths. With use_adapters false the FFN
// projections go through untouched, which is exactly the base model.
template <typename S, typename Ctx>
typename Ctx::Var run_blocks(Ctx& ctx, const ModelConfig& cfg, const BoundModel<S, Ctx>& m,
                             std::span<const int> tokens, bool use_adapters, int task, double grl_lambda,
                             ForwardOutput<Ctx>* out) {
    using V = typename Ctx::Var;
    std::span<const int> ids = valid_prefix(tokens, cfg);
    std::vector<int> positions(ids.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    V x = ctx.add(ctx.embedding_rows(m.tok_emb, std::vector<int>(ids.begin(), ids.end())),
                  ctx.embedding_rows(m.pos_emb, positions));
    for (int64_t b = 0; b < cfg.n_blocks; ++b) {
        const BBlock<Ctx>& blk = m.blocks[static_cast<size_t>(b)];
        x = ctx.add(x, attention(ctx, cfg, blk, ctx.layer_norm_rows(x, blk.ln1_g, blk.ln1_b, 1e-5)));
        V x_ln = ctx.layer_norm_rows(x, blk.ln2_g, blk.ln2_b, 1e-5);
        V base_up = ctx.add_rows(ctx.matmul_nt(x_ln, blk.w_up), blk.b_up);
        V z_up = use_adapters ? apply_site(ctx, cfg, m, 2 * b, task, x_ln, base_up, grl_lambda, out) : base_up;
        V h = ctx.relu(z_up);
        V base_down = ctx.add_rows(ctx.matmul_nt(h, blk.w_down), blk.b_down);
        V z_down = use_adapters ? apply_site(ctx, cfg, m, 2 * b + 1, task, h, base_down, grl_lambda, out) : base_down;
        x = ctx.add(x, z_down);
    }
    return ctx.layer_norm_rows(x, m.lnf_g, m.lnf_b, 1e-5);
}

template <typename Ctx>
typename Ctx::Var head_logits(Ctx& ctx, const BHead<Ctx>& head, typename Ctx::Var pooled) {
    using V = typename Ctx::Var;
    V h1 = ctx.relu(ctx.add_rows(ctx.matmul_nt(pooled, head.w1), head.b1));
    return ctx.add_rows(ctx.matmul_nt(h1, head.w2), head.b2);
}

}  // namespace detail

// Base-model states: token + learned positional embeddings, pre-norm attention
// and FFN blocks, final layer norm. Trailing padding is stripped before the
// embedding lookup, so padded positions never enter attention; the returned
// matrix has one row per real token.
template <typename S, typename Ctx>
typename Ctx::Var encode(Ctx& ctx, const ModelConfig& cfg, const BoundModel<S, Ctx>& m, std::span<const int> tokens) {
    return detail::run_blocks(ctx, cfg, m, tokens, false, 0, 0.0, static_cast<ForwardOutput<Ctx>*>(nullptr));
}

template <typename S, typename Ctx>
ForwardOutput<Ctx> forward_plain(Ctx& ctx, const ModelConfig& cfg, const BoundModel<S, Ctx>& m,
                                 std::span<const int> tokens, int task) {
    if (task < 0 || task >= static_cast<int>(m.heads.size()))
        throw IndexError("task " + std::to_string(task) + " outside [0, " + std::to_string(m.heads.size()) + ")");
    ForwardOutput<Ctx> out;
    out.states = detail::run_blocks(ctx, cfg, m, tokens, false, task, 0.0, static_cast<ForwardOutput<Ctx>*>(nullptr));
    out.pooled = ctx.mean_rows(out.states);
    out.logits = detail::head_logits(ctx, m.heads[static_cast<size_t>(task)], out.pooled);
    return out;
}

// Adapted forward pass for one example under one task's experts, gate, and
// head. grl_lambda is the gradient-reversal strength on the shared path (the
// adversarial weight); it has no effect on forward values.
template <typename S, typename Ctx>
ForwardOutput<Ctx> forward_with_adapters(Ctx& ctx, const ModelConfig& cfg, const BoundModel<S, Ctx>& m,
                                         std::span<const int> tokens, int task, double grl_lambda) {
    if (task < 0 || task >= static_cast<int>(m.heads.size()))
        throw IndexError("task " + std::to_string(task) + " outside [0, " + std::to_string(m.heads.size()) + ")");
    ForwardOutput<Ctx> out;
    out.states = detail::run_blocks(ctx, cfg, m, tokens, true, task, grl_lambda, &out);
    out.pooled = ctx.mean_rows(out.states);
    out.logits = detail::head_logits(ctx, m.heads[static_cast<size_t>(task)], out.pooled);
    return out;
}

// Task-membership distribution from one pooled shared representation.
template <typename S, typename Ctx>
typename Ctx::Var discriminate(Ctx& ctx, const BoundModel<S, Ctx>& m, typename Ctx::Var pooled_zs) {
    return ctx.softmax_rows(ctx.add_rows(ctx.matmul_nt(pooled_zs, m.disc_w), m.disc_b));
}

// -log p[true task] summed over the discriminator sites of one example.
template <typename S, typename Ctx>
typename Ctx::Var gan_example_loss(Ctx& ctx, const BoundModel<S, Ctx>& m, const ForwardOutput<Ctx>& fwd, int task) {
    using V = typename Ctx::Var;
    if (fwd.zs_pooled.empty()) throw ContractError("gan_example_loss: no shared representations in this forward pass");
    V total;
    bool first = true;
    for (const V& zs : fwd.zs_pooled) {
        V probs = discriminate<S>(ctx, m, zs);
        V nll = ctx.scale(ctx.log_ew(ctx.pick(probs, 0, task)), -1.0);
        total = first ? nll : ctx.add(total, nll);
        first = false;
    }
    return total;
}

// Reported combined objective: task loss minus alpha times the adversarial loss.
inline double total_loss(double sft, double gan, double alpha) { return sft - alpha * gan; }

}  // namespace moecl
