#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "moecl/data.hpp"
#include "moecl/forward.hpp"
#include "moecl/model.hpp"
#include "moecl/tape.hpp"

namespace moecl {

struct TrainConfig {
    double lr = 2e-4;
    std::string optimizer = "adam";  // adam | sgd
    int64_t epochs = 3;
    int64_t batch_size = 16;
    std::vector<int> order;  // task visiting order; empty means 0..N-1
    uint64_t seed = 1;       // drives batch shuffling, forked per task
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    void validate() const {
        if (lr < 0.0) throw ConfigError("lr must be non-negative, got " + std::to_string(lr));
        if (optimizer != "adam" && optimizer != "sgd")
            throw ConfigError("optimizer must be adam or sgd, got \"" + optimizer + "\"");
        if (epochs < 0) throw ConfigError("epochs must be non-negative, got " + std::to_string(epochs));
        if (batch_size < 1) throw ConfigError("batch_size must be positive, got " + std::to_string(batch_size));
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("adam betas must lie in [0, 1)");
        if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
    }
};

// Which parameters a method updates while training task `task`.
inline TrainableFn trainable_for(Method method, int task) {
    return [method, task](const std::string&, const ParamTag& tag) {
        const bool own = tag.task == task;
        switch (method) {
            case Method::moe_cl:
                return tag.comp == Component::shared || tag.comp == Component::disc ||
                       ((tag.comp == Component::specific || tag.comp == Component::gate ||
                         tag.comp == Component::head) &&
                        own);
            case Method::moe_cl_no_gan:
                return tag.comp == Component::shared ||
                       ((tag.comp == Component::specific || tag.comp == Component::gate ||
                         tag.comp == Component::head) &&
                        own);
            case Method::sequential_ft:
                return tag.comp == Component::shared || (tag.comp == Component::head && own);
            case Method::per_task_ft:
                return (tag.comp == Component::specific || tag.comp == Component::head) && own;
        }
        return false;
    };
}

template <typename S>
struct AdamSlot {
    Tensor<S> m, v;
    int64_t steps = 0;
};

template <typename S>
void adam_update(Tensor<S>& theta, const Tensor<S>& g, AdamSlot<S>& slot, const TrainConfig& tc) {
    if (!g.same_shape(theta))
        throw ShapeError("gradient shape " + g.shape_string() + " does not match parameter " + theta.shape_string());
    if (slot.m.empty()) {
        slot.m = Tensor<S>(theta.rows(), theta.cols());
        slot.v = Tensor<S>(theta.rows(), theta.cols());
    }
    if (!slot.m.same_shape(theta))
        throw ContractError("optimizer slot shape " + slot.m.shape_string() + " does not match parameter " +
                            theta.shape_string());
    slot.steps += 1;
    const double c1 = 1.0 - std::pow(tc.beta1, static_cast<double>(slot.steps));
    const double c2 = 1.0 - std::pow(tc.beta2, static_cast<double>(slot.steps));
    S* t = theta.data();
    const S* gd = g.data();
    S* mm = slot.m.data();
    S* vv = slot.v.data();
    for (int64_t i = 0; i < theta.numel(); ++i) {
        const double gi = static_cast<double>(gd[i]);
        const double mi = tc.beta1 * static_cast<double>(mm[i]) + (1.0 - tc.beta1) * gi;
        const double vi = tc.beta2 * static_cast<double>(vv[i]) + (1.0 - tc.beta2) * gi * gi;
        mm[i] = static_cast<S>(mi);
        vv[i] = static_cast<S>(vi);
        t[i] -= static_cast<S>(tc.lr * (mi / c1) / (std::sqrt(vi / c2) + tc.adam_eps));
    }
}

template <typename S>
void sgd_update(Tensor<S>& theta, const Tensor<S>& g, double lr) {
    if (!g.same_shape(theta))
        throw ShapeError("gradient shape " + g.shape_string() + " does not match parameter " + theta.shape_string());
    S* t = theta.data();
    const S* gd = g.data();
    for (int64_t i = 0; i < theta.numel(); ++i) t[i] -= static_cast<S>(lr * static_cast<double>(gd[i]));
}

// Running extrema of the gate outputs plus the worst deviation of a gate row
// sum from one; fed by both training steps and evaluation sweeps.
struct GateStats {
    double min_beta = std::numeric_limits<double>::infinity();
    double max_beta = -std::numeric_limits<double>::infinity();
    double max_row_dev = 0.0;
    int64_t rows = 0;

    template <typename S>
    void absorb(const Tensor<S>& beta) {
        for (int64_t r = 0; r < beta.rows(); ++r) {
            const double bs = static_cast<double>(beta.at(r, 0));
            const double bt = static_cast<double>(beta.at(r, 1));
            min_beta = std::min({min_beta, bs, bt});
            max_beta = std::max({max_beta, bs, bt});
            max_row_dev = std::max(max_row_dev, std::abs(bs + bt - 1.0));
            rows += 1;
        }
    }
    void merge(const GateStats& o) {
        min_beta = std::min(min_beta, o.min_beta);
        max_beta = std::max(max_beta, o.max_beta);
        max_row_dev = std::max(max_row_dev, o.max_row_dev);
        rows += o.rows;
    }
};

struct StepLog {
    int task = 0;
    int64_t epoch = 0, step = 0;
    double l_sft = 0.0;
    double l_gan = 0.0;      // meaningful when has_gan
    double l_total = 0.0;    // l_sft - alpha * l_gan with the method's alpha
    double disc_acc = 0.0;   // meaningful when has_gan
    double gate_min = 0.0, gate_max = 0.0, gate_row_dev = 0.0;  // meaningful when has_gates
    bool has_gan = false, has_gates = false;
};

template <typename S>
struct Trainer {
    ModelState<S> model;
    TrainConfig tcfg;
    std::map<std::string, AdamSlot<S>> slots;  // keyed by canonical parameter name
    int64_t phases_done = 0;
};

// Builds the vocabulary from the union of the training splits, sizes the model
// config from the task list, and initializes a fresh model.
template <typename S>
Trainer<S> make_trainer(ModelConfig cfg, Method method, const TrainConfig& tcfg,
                        const std::vector<TaskData>& tasks, int64_t vocab_cap = 0) {
    tcfg.validate();
    if (tasks.empty()) throw ConfigError("no tasks to train on");
    std::vector<const std::vector<CorpusRecord>*> corpora;
    for (const auto& t : tasks) corpora.push_back(&t.train);
    Vocab vocab = Vocab::build(
        corpora, vocab_cap > 0 ? static_cast<size_t>(vocab_cap) : std::numeric_limits<size_t>::max());
    cfg.vocab_size = vocab.size();
    cfg.n_tasks = static_cast<int64_t>(tasks.size());
    cfg.classes_per_task.clear();
    for (const auto& t : tasks) cfg.classes_per_task.push_back(t.spec.n_classes);
    Trainer<S> tr;
    tr.model = init_model<S>(cfg, method);
    tr.model.vocab = std::move(vocab);
    tr.tcfg = tcfg;
    return tr;
}

namespace detail {

// Rounds the scalar value out of a 1x1 variable.
template <typename Ctx>
double scalar(Ctx& ctx, const typename Ctx::Var& v) {
    return static_cast<double>(ctx.value(v).at(0, 0));
}

// Pre-softmax argmax with ties resolved to the lowest index.
template <typename S>
int argmax_row(const Tensor<S>& t, int64_t r) {
    int best = 0;
    for (int64_t j = 1; j < t.cols(); ++j)
        if (t.at(r, j) > t.at(r, best)) best = static_cast<int>(j);
    return best;
}

}  // namespace detail

// Effective adversarial weight for a method: the full model's configured weight
// for the adversarial variant, zero everywhere else.
inline double effective_gan_weight(Method method, const ModelConfig& cfg) {
    return method == Method::moe_cl ? cfg.gan_weight : 0.0;
}

// One pass over one task's training split: shuffled batches, one recorded graph
// per batch, one optimizer step per batch. The shuffle stream depends only on
// (seed, task), never on the phase position, so a task sees the same batches in
// any visiting order. Throws DivergedError naming the step if the loss leaves
// the finite range.
template <typename S>
std::vector<StepLog> train_task(Trainer<S>& tr, const TaskData& data, int task, GateStats* gates = nullptr) {
    ModelState<S>& model = tr.model;
    const ModelConfig& cfg = model.config;
    const TrainConfig& tc = tr.tcfg;
    const Method method = model.method;
    if (task < 0 || task >= static_cast<int>(cfg.n_tasks))
        throw IndexError("task " + std::to_string(task) + " outside [0, " + std::to_string(cfg.n_tasks) + ")");
    if (data.train.empty()) throw DataError("task " + std::to_string(task) + " has no training records");

    const double alpha = effective_gan_weight(method, cfg);
    const bool adversarial = method == Method::moe_cl;
    const bool log_gan = model.stack.layout.disc;
    const TrainableFn trainable = trainable_for(method, task);

    std::vector<std::vector<int>> tokens;
    tokens.reserve(data.train.size());
    for (const auto& rec : data.train) tokens.push_back(tokenize(model.vocab, rec.text, cfg.max_seq_len));

    Rng stream = Rng(tc.seed).fork(101 + static_cast<uint64_t>(task));
    std::vector<StepLog> logs;
    std::vector<size_t> idx(data.train.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
        stream.shuffle(idx);
        int64_t step = 0;
        for (size_t b0 = 0; b0 < idx.size(); b0 += static_cast<size_t>(tc.batch_size), ++step) {
            const size_t b1 = std::min(idx.size(), b0 + static_cast<size_t>(tc.batch_size));
            const double inv = 1.0 / static_cast<double>(b1 - b0);

            Tape<S> tape;
            auto m = bind_model(tape, model, trainable);
            typename Tape<S>::Var sft, gan;
            GateStats batch_gates;
            double disc_hits = 0.0;
            double gan_side = 0.0;
            try {
                for (size_t i = b0; i < b1; ++i) {
                    const auto& rec = data.train[idx[i]];
                    auto fwd = forward_with_adapters(tape, cfg, m, tokens[idx[i]], task, alpha);
                    auto ce = tape.cross_entropy(fwd.logits, {rec.label});
                    sft = sft.valid() ? tape.add(sft, ce) : ce;
                    for (const auto& bv : fwd.betas) batch_gates.absorb(tape.value(bv));
                    if (log_gan) {
                        Tensor<S> acc_probs(1, cfg.n_tasks);
                        if (adversarial) {
                            auto gl = gan_example_loss(tape, m, fwd, task);
                            gan = gan.valid() ? tape.add(gan, gl) : gl;
                            for (const auto& zs : fwd.zs_pooled) {
                                auto probs = discriminate(tape, m, zs);
                                acc_probs = kernels::add(acc_probs, tape.value(probs));
                            }
                        } else {
                            // Logging only: computed with plain kernels from forward values,
                            // outside the recorded graph, so no parameter, discriminator
                            // included, receives a gradient from this term.
                            for (const auto& zs : fwd.zs_pooled) {
                                Tensor<S> probs = kernels::softmax_rows(kernels::add_rows(
                                    kernels::matmul_nt(tape.value(zs), model.stack.disc_w), model.stack.disc_b));
                                gan_side -= std::log(static_cast<double>(probs.at(0, task)));
                                acc_probs = kernels::add(acc_probs, probs);
                            }
                        }
                        if (detail::argmax_row(acc_probs, 0) == task) disc_hits += 1.0;
                    }
                }
            } catch (const DivergedError&) {
                throw;
            } catch (const NumericError& e) {
                throw DivergedError("task " + std::to_string(task) + " epoch " + std::to_string(epoch) + " step " +
                                    std::to_string(step) + ": " + e.what());
            }

            auto sft_mean = tape.scale(sft, inv);
            const double l_sft = detail::scalar(tape, sft_mean);
            if (!std::isfinite(l_sft))
                throw DivergedError("task " + std::to_string(task) + " epoch " + std::to_string(epoch) + " step " +
                                    std::to_string(step) + ": loss is not finite");
            auto loss = sft_mean;
            typename Tape<S>::Var gan_mean;
            if (adversarial && gan.valid()) {
                gan_mean = tape.scale(gan, inv);
                loss = tape.add(sft_mean, gan_mean);
            }
            tape.backward(loss);

            for (const auto& [name, tag, tensor, var] : m.flat) {
                if (!trainable(name, tag)) continue;
                const Tensor<S>* g = tape.grad_ptr(var);
                if (!g) continue;
                if (tc.optimizer == "adam")
                    adam_update(*tensor, *g, tr.slots[name], tc);
                else
                    sgd_update(*tensor, *g, tc.lr);
            }

            StepLog lg;
            lg.task = task;
            lg.epoch = epoch;
            lg.step = step;
            lg.l_sft = l_sft;
            lg.has_gan = log_gan;
            if (log_gan) {
                lg.l_gan = gan_mean.valid() ? detail::scalar(tape, gan_mean) : gan_side * inv;
                lg.disc_acc = disc_hits * inv;
            }
            lg.l_total = total_loss(lg.l_sft, lg.l_gan, alpha);
            lg.has_gates = model.stack.layout.gates;
            if (lg.has_gates && batch_gates.rows > 0) {
                lg.gate_min = batch_gates.min_beta;
                lg.gate_max = batch_gates.max_beta;
                lg.gate_row_dev = batch_gates.max_row_dev;
            }
            if (gates) gates->merge(batch_gates);
            logs.push_back(lg);
        }
    }
    return logs;
}

// Accuracy of the model on one task's records, inference mode: no recording, no
// parameter mutation. Argmax ties resolve to the lowest class index.
template <typename S>
double evaluate(ModelState<S>& model, const std::vector<CorpusRecord>& recs, int task, GateStats* gates = nullptr) {
    const ModelConfig& cfg = model.config;
    if (recs.empty()) throw DataError("task " + std::to_string(task) + ": nothing to evaluate");
    EvalCtx<S> ctx;
    auto m = bind_model(ctx, model);
    int64_t hits = 0;
    for (const auto& rec : recs) {
        auto toks = tokenize(model.vocab, rec.text, cfg.max_seq_len);
        auto fwd = forward_with_adapters(ctx, cfg, m, toks, task, 0.0);
        if (gates)
            for (const auto& bv : fwd.betas) gates->absorb(ctx.value(bv));
        if (detail::argmax_row(ctx.value(fwd.logits), 0) == rec.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(recs.size());
}

template <typename S>
struct SequenceResult {
    std::vector<int> order;     // task visited at each phase
    Tensor<double> acc;         // acc.at(i, j) = test accuracy on task j after phase i
    std::vector<StepLog> logs;
    GateStats gates;            // accumulated across all training steps and eval sweeps
};

// Full continual run: visit tasks in order, train each phase, then sweep the
// test split of every task. on_phase fires after each phase's sweep.
template <typename S>
SequenceResult<S> train_sequence(Trainer<S>& tr, const std::vector<TaskData>& tasks,
                                 const std::function<void(int, Trainer<S>&)>& on_phase = {}) {
    const int n = static_cast<int>(tasks.size());
    if (n == 0) throw ConfigError("no tasks to train on");
    SequenceResult<S> res;
    res.order = tr.tcfg.order;
    if (res.order.empty())
        for (int t = 0; t < n; ++t) res.order.push_back(t);
    if (static_cast<int>(res.order.size()) != n) throw ConfigError("order must list every task exactly once");
    std::vector<bool> seen(static_cast<size_t>(n), false);
    for (int t : res.order) {
        if (t < 0 || t >= n || seen[static_cast<size_t>(t)])
            throw ConfigError("order must be a permutation of 0.." + std::to_string(n - 1));
        seen[static_cast<size_t>(t)] = true;
    }

    res.acc = Tensor<double>(n, n);
    for (int phase = 0; phase < n; ++phase) {
        const int task = res.order[static_cast<size_t>(phase)];
        auto logs = train_task(tr, tasks[static_cast<size_t>(task)], task, &res.gates);
        for (auto& lg : logs) res.logs.push_back(lg);
        for (int j = 0; j < n; ++j)
            res.acc.at(phase, j) = evaluate(tr.model, tasks[static_cast<size_t>(j)].test, j, &res.gates);
        tr.phases_done += 1;
        if (on_phase) on_phase(phase, tr);
    }
    return res;
}

// Convenience wrapper: fresh model, full sequence.
template <typename S>
SequenceResult<S> run_baseline(const ModelConfig& cfg, Method method, const TrainConfig& tcfg,
                               const std::vector<TaskData>& tasks) {
    Trainer<S> tr = make_trainer<S>(cfg, method, tcfg, tasks);
    return train_sequence(tr, tasks);
}

// Mean over discriminator sites of the pooled shared representation, one row
// per record, plus the task id labels. Inference mode.
template <typename S>
std::pair<Tensor<S>, std::vector<int>> collect_shared_features(ModelState<S>& model,
                                                               const std::vector<TaskData>& tasks,
                                                               const std::string& split) {
    const ModelConfig& cfg = model.config;
    if (!model.stack.layout.shared)
        throw ContractError("this method has no shared representation to probe");
    if (tasks.size() < 2) throw ContractError("probing task identity needs at least 2 tasks");
    EvalCtx<S> ctx;
    auto m = bind_model(ctx, model);
    std::vector<const std::vector<CorpusRecord>*> splits;
    for (const auto& t : tasks) {
        if (split == "val")
            splits.push_back(&t.val);
        else if (split == "test")
            splits.push_back(&t.test);
        else
            throw ConfigError("unknown split \"" + split + "\" (expected val or test)");
    }
    int64_t total = 0;
    for (const auto* s : splits) total += static_cast<int64_t>(s->size());
    Tensor<S> x(total, cfg.hidden);
    std::vector<int> y;
    y.reserve(static_cast<size_t>(total));
    int64_t row = 0;
    for (size_t t = 0; t < tasks.size(); ++t) {
        for (const auto& rec : *splits[t]) {
            auto toks = tokenize(model.vocab, rec.text, cfg.max_seq_len);
            auto fwd = forward_with_adapters(ctx, cfg, m, toks, static_cast<int>(t), 0.0);
            if (fwd.zs_pooled.empty()) throw ContractError("no discriminator-width sites in this configuration");
            const double inv = 1.0 / static_cast<double>(fwd.zs_pooled.size());
            for (const auto& zs : fwd.zs_pooled) {
                const Tensor<S>& zv = ctx.value(zs);
                for (int64_t j = 0; j < cfg.hidden; ++j)
                    x.at(row, j) += static_cast<S>(static_cast<double>(zv.at(0, j)) * inv);
            }
            y.push_back(static_cast<int>(t));
            ++row;
        }
    }
    return {std::move(x), std::move(y)};
}

// Trains a linear classifier on (x_train, y_train) and reports its accuracy on
// (x_test, y_test). Zero-initialized, full-batch Adam, fixed recipe; fully
// deterministic, so repeated calls agree bit for bit.
template <typename S>
double fit_linear_probe(const Tensor<S>& x_train, const std::vector<int>& y_train, const Tensor<S>& x_test,
                        const std::vector<int>& y_test, int n_classes, int64_t steps = 300, double lr = 0.05) {
    if (x_train.rows() != static_cast<int64_t>(y_train.size()))
        throw ShapeError("probe features and labels disagree: " + std::to_string(x_train.rows()) + " rows vs " +
                         std::to_string(y_train.size()) + " labels");
    Tensor<S> w(n_classes, x_train.cols()), b(1, n_classes);
    TrainConfig tc;
    tc.lr = lr;
    AdamSlot<S> sw, sb;
    for (int64_t it = 0; it < steps; ++it) {
        Tape<S> tape;
        auto xv = tape.leaf(x_train);
        auto wv = tape.leaf(w, true);
        auto bv = tape.leaf(b, true);
        auto loss = tape.cross_entropy(tape.add_rows(tape.matmul_nt(xv, wv), bv), y_train);
        tape.backward(loss);
        adam_update(w, tape.grad(wv), sw, tc);
        adam_update(b, tape.grad(bv), sb, tc);
    }
    Tensor<S> logits = kernels::add_rows(kernels::matmul_nt(x_test, w), b);
    int64_t hits = 0;
    for (int64_t r = 0; r < logits.rows(); ++r)
        if (detail::argmax_row(logits, r) == y_test[static_cast<size_t>(r)]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(std::max<int64_t>(1, logits.rows()));
}

// Standardizes both feature matrices with the fit split's per-column mean and
// deviation, so the probe reads directions rather than magnitudes.
template <typename S>
void standardize_features(Tensor<S>& fit, Tensor<S>& other) {
    if (fit.cols() != other.cols()) throw ShapeError("feature matrices disagree on width");
    const int64_t n = fit.rows();
    for (int64_t j = 0; j < fit.cols(); ++j) {
        double mean = 0.0;
        for (int64_t r = 0; r < n; ++r) mean += static_cast<double>(fit.at(r, j));
        mean /= static_cast<double>(std::max<int64_t>(1, n));
        double var = 0.0;
        for (int64_t r = 0; r < n; ++r) {
            const double d = static_cast<double>(fit.at(r, j)) - mean;
            var += d * d;
        }
        const double sd = std::sqrt(var / static_cast<double>(std::max<int64_t>(1, n))) + 1e-8;
        for (int64_t r = 0; r < n; ++r) fit.at(r, j) = static_cast<S>((static_cast<double>(fit.at(r, j)) - mean) / sd);
        for (int64_t r = 0; r < other.rows(); ++r)
            other.at(r, j) = static_cast<S>((static_cast<double>(other.at(r, j)) - mean) / sd);
    }
}

// How well task identity can be read off the shared representation: probe
// trained on the standardized validation splits, scored on the test splits.
template <typename S>
double probe_task_identity(ModelState<S>& model, const std::vector<TaskData>& tasks) {
    auto [xv, yv] = collect_shared_features(model, tasks, "val");
    auto [xt, yt] = collect_shared_features(model, tasks, "test");
    standardize_features(xv, xt);
    return fit_linear_probe(xv, yv, xt, yt, static_cast<int>(tasks.size()));
}

}  // namespace moecl
