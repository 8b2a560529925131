#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>

#include "moecl/data.hpp"
#include "moecl/metrics.hpp"
#include "moecl/trainer.hpp"

using namespace moecl;

using Td = Tensor<double>;
using MS = ModelState<double>;

namespace {

SynthConfig tiny_synth() {
    SynthConfig s;
    s.n_tasks = 2;
    s.classes_per_task = 2;
    s.task_band = 12;
    s.shared_band = 8;
    s.sig_per_class = 2;
    s.sentence_len = 8;
    s.noise_ratio = 0.25;
    s.latent_fidelity = 0.9;
    s.train_per_task = 32;
    s.val_per_task = 16;
    s.test_per_task = 32;
    s.seed = 21;
    return s;
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.hidden = 16;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.ffn_inner = 32;
    c.max_seq_len = 8;
    c.lora_rank = 4;
    c.lora_alpha = 4.0;
    c.gan_weight = 0.1;
    c.seed = 3;
    return c;
}

TrainConfig fast_train() {
    TrainConfig t;
    t.lr = 5e-3;
    t.epochs = 2;
    t.batch_size = 8;
    t.seed = 13;
    return t;
}

std::map<std::string, uint64_t> hash_map(MS& st) {
    std::map<std::string, uint64_t> out;
    for (auto& [name, h] : state_hashes(st)) out[name] = h;
    return out;
}

std::map<std::string, ParamTag> tag_map(MS& st) {
    std::map<std::string, ParamTag> out;
    enumerate_params(st, [&](const std::string& name, const ParamTag& tag, Td&) { out[name] = tag; });
    return out;
}

double class0_freq(const std::vector<CorpusRecord>& recs) {
    int64_t n0 = 0;
    for (const auto& r : recs)
        if (r.label == 0) ++n0;
    return static_cast<double>(n0) / static_cast<double>(recs.size());
}

}  // namespace

TEST_CASE("train config validation") {
    CHECK_NOTHROW(fast_train().validate());
    TrainConfig bad = fast_train();
    bad.lr = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = fast_train();
    bad.optimizer = "lion";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = fast_train();
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = fast_train();
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("optimizer steps match hand-computed updates") {
    TrainConfig tc;
    tc.lr = 0.1;

    Td theta{{1.0, -2.0}};
    Td g{{1.0, -2.0}};
    sgd_update(theta, g, 0.1);
    CHECK(theta.at(0, 0) == 1.0 - 0.1 * 1.0);
    CHECK(theta.at(0, 1) == -2.0 - 0.1 * -2.0);

    Td th{{1.0, -2.0}};
    AdamSlot<double> slot;
    adam_update(th, g, slot, tc);
    // First step: mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps).
    for (int64_t j = 0; j < 2; ++j) {
        const double gi = g.at(0, j);
        const double expect = (j == 0 ? 1.0 : -2.0) - 0.1 * gi / (std::abs(gi) + tc.adam_eps);
        CHECK(th.at(0, j) == Catch::Approx(expect).epsilon(0).margin(1e-15));
    }
    CHECK(slot.steps == 1);
    // Second step with the same gradient, recomputed explicitly.
    Td th2 = th;
    adam_update(th2, g, slot, tc);
    for (int64_t j = 0; j < 2; ++j) {
        const double gi = g.at(0, j);
        const double m2 = 0.9 * (0.1 * gi) + 0.1 * gi;
        const double v2 = 0.999 * (0.001 * gi * gi) + 0.001 * gi * gi;
        const double mhat = m2 / (1.0 - 0.9 * 0.9);
        const double vhat = v2 / (1.0 - 0.999 * 0.999);
        const double expect = th.at(0, j) - 0.1 * mhat / (std::sqrt(vhat) + tc.adam_eps);
        CHECK(th2.at(0, j) == Catch::Approx(expect).epsilon(0).margin(1e-15));
    }
    CHECK_THROWS_AS(adam_update(th2, Td(2, 2), slot, tc), ShapeError);
}

TEST_CASE("trainer assembles vocab and task shapes from the corpus") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    auto tr = make_trainer<double>(tiny_model(), Method::moe_cl, fast_train(), tasks);
    CHECK(tr.model.config.n_tasks == 2);
    CHECK(tr.model.config.classes_per_task == std::vector<int64_t>{2, 2});
    CHECK(tr.model.config.vocab_size == tr.model.vocab.size());
    CHECK(tr.model.vocab.size() > 2);
    // Every training token resolves without hitting unk.
    for (const auto& t : tasks)
        for (const auto& rec : t.train)
            for (int id : tokenize(tr.model.vocab, rec.text, 8)) CHECK(id != Vocab::unk_id);
}

TEST_CASE("a zero learning rate leaves every parameter bit-identical") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.lr = 0.0;
    tc.epochs = 1;
    for (const std::string& opt : {std::string("adam"), std::string("sgd")}) {
        tc.optimizer = opt;
        auto tr = make_trainer<double>(tiny_model(), Method::moe_cl, tc, tasks);
        auto before = state_hashes(tr.model);
        auto logs = train_task(tr, tasks[0], 0);
        CHECK(logs.size() == 4);  // 32 records / batch 8
        CHECK(state_hashes(tr.model) == before);
    }
}

TEST_CASE("training a phase only moves that phase's parameter families") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    auto tr = make_trainer<double>(tiny_model(), Method::moe_cl, fast_train(), tasks);
    auto before = hash_map(tr.model);
    auto tags = tag_map(tr.model);
    train_task(tr, tasks[0], 0);
    auto after = hash_map(tr.model);
    auto trainable = trainable_for(Method::moe_cl, 0);
    for (const auto& [name, h] : before) {
        if (trainable(name, tags.at(name))) {
            CHECK(after.at(name) != h);  // with several steps every live family moves
        } else {
            CHECK(after.at(name) == h);
        }
    }
}

TEST_CASE("each method's update footprint matches its design") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    struct Case {
        Method method;
        bool shared_moves, disc_moves;
    };
    for (const Case c : {Case{Method::moe_cl, true, true}, Case{Method::moe_cl_no_gan, true, false},
                         Case{Method::sequential_ft, true, false}}) {
        auto tr = make_trainer<double>(tiny_model(), c.method, fast_train(), tasks);
        auto before = hash_map(tr.model);
        auto tags = tag_map(tr.model);
        train_task(tr, tasks[1], 1);
        auto after = hash_map(tr.model);
        for (const auto& [name, h] : before) {
            const ParamTag& tag = tags.at(name);
            const bool moved = after.at(name) != h;
            if (tag.comp == Component::backbone) CHECK_FALSE(moved);
            if (tag.comp == Component::shared) CHECK(moved == c.shared_moves);
            if (tag.comp == Component::disc) CHECK(moved == c.disc_moves);
            if (tag.task == 0) CHECK_FALSE(moved);  // the other task's gear never moves
        }
    }
    // per-task-ft touches exactly its own expert and head
    auto tr = make_trainer<double>(tiny_model(), Method::per_task_ft, fast_train(), tasks);
    auto before = hash_map(tr.model);
    auto tags = tag_map(tr.model);
    train_task(tr, tasks[0], 0);
    auto after = hash_map(tr.model);
    for (const auto& [name, h] : before) {
        const ParamTag& tag = tags.at(name);
        const bool moved = after.at(name) != h;
        const bool expected = (tag.comp == Component::specific || tag.comp == Component::head) && tag.task == 0;
        CHECK(moved == expected);
    }
}

TEST_CASE("without the adversarial term the discriminator receives no gradient at all") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    auto tr = make_trainer<double>(tiny_model(), Method::moe_cl_no_gan, fast_train(), tasks);
    MS& model = tr.model;
    const ModelConfig& cfg = model.config;

    // Mark the discriminator trainable on purpose; the task-only loss graph
    // still must not reach it, because the adversarial term is off-graph.
    Tape<double> tape;
    auto trainable = [&](const std::string& name, const ParamTag& tag) {
        return trainable_for(Method::moe_cl_no_gan, 0)(name, tag) || tag.comp == Component::disc;
    };
    auto m = bind_model(tape, model, trainable);
    auto toks = tokenize(model.vocab, tasks[0].train[0].text, cfg.max_seq_len);
    auto fwd = forward_with_adapters(tape, cfg, m, toks, 0, 0.0);
    tape.backward(tape.cross_entropy(fwd.logits, {tasks[0].train[0].label}));
    for (const auto& [name, tag, tensor, var] : m.flat) {
        (void)name;
        (void)tensor;
        if (tag.comp == Component::disc) CHECK(tape.grad_ptr(var) == nullptr);
        if (tag.comp == Component::shared) CHECK(tape.grad_ptr(var) != nullptr);
    }

    // And through the full phase the discriminator hashes stay put even though
    // the step logs still report the adversarial diagnostics.
    auto before = hash_map(model);
    auto logs = train_task(tr, tasks[0], 0);
    REQUIRE_FALSE(logs.empty());
    CHECK(logs[0].has_gan);
    CHECK(logs[0].l_gan > 0.0);
    CHECK(logs[0].l_total == logs[0].l_sft);  // alpha forced to zero for this method
    auto after = hash_map(model);
    CHECK(after.at("disc.w") == before.at("disc.w"));
    CHECK(after.at("disc.b") == before.at("disc.b"));
}

TEST_CASE("one whole-set SGD step equals learning rate times the combined-objective gradient") {
    SynthConfig sc = tiny_synth();
    sc.train_per_task = 8;
    auto tasks = gen_synthetic_tasks(sc);
    ModelConfig mc = tiny_model();
    TrainConfig tc;
    tc.optimizer = "sgd";
    tc.lr = 1e-3;
    tc.epochs = 1;
    tc.batch_size = 8;  // one batch covers the whole split, so order cannot matter
    tc.seed = 13;

    auto tr = make_trainer<double>(mc, Method::moe_cl, tc, tasks);
    MS before = tr.model;  // deep copy
    const double alpha = tr.model.config.gan_weight;

    // J over the whole split, evaluated without recording.
    auto eval_J = [&](MS& st, bool disc_view) {
        EvalCtx<double> ctx;
        auto m = bind_model(ctx, st);
        double sft = 0.0, gan = 0.0;
        for (const auto& rec : tasks[0].train) {
            auto toks = tokenize(st.vocab, rec.text, st.config.max_seq_len);
            auto fwd = forward_with_adapters(ctx, st.config, m, toks, 0, alpha);
            sft += ctx.value(ctx.cross_entropy(fwd.logits, {rec.label})).at(0, 0);
            gan += ctx.value(gan_example_loss(ctx, m, fwd, 0)).at(0, 0);
        }
        sft /= 8.0;
        gan /= 8.0;
        return disc_view ? gan : sft - alpha * gan;
    };

    train_task(tr, tasks[0], 0);

    std::map<std::string, Td*> b_params, a_params;
    enumerate_params(before, [&](const std::string& n, const ParamTag&, Td& t) { b_params[n] = &t; });
    enumerate_params(tr.model, [&](const std::string& n, const ParamTag&, Td& t) { a_params[n] = &t; });

    const double h = 1e-6;
    auto tags = tag_map(before);
    double worst = 0.0;
    for (const char* cname : {"site0.shared.a", "site0.shared.b", "site1.task0.b", "site0.gate0.b", "head0.l2.w",
                              "disc.w", "disc.b"}) {
        const std::string name = cname;
        Td* bt = b_params.at(name);
        Td* at = a_params.at(name);
        const bool disc_view = tags.at(name).comp == Component::disc;
        for (int64_t k : {int64_t(0), bt->numel() - 1}) {
            const double applied = (bt->vec()[static_cast<size_t>(k)] - at->vec()[static_cast<size_t>(k)]) / tc.lr;
            double* slot = bt->data() + k;
            const double keep = *slot;
            *slot = keep + h;
            const double ju = eval_J(before, disc_view);
            *slot = keep - h;
            const double jd = eval_J(before, disc_view);
            *slot = keep;
            const double numeric = (ju - jd) / (2.0 * h);
            worst = std::max(worst, std::abs(applied - numeric) /
                                        std::max({std::abs(applied), std::abs(numeric), 1e-3}));
        }
    }
    INFO("worst relative disagreement " << worst);
    CHECK(worst < 1e-4);
}

TEST_CASE("zero epochs means no learning: matrix rows equal the class-0 frequency") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.epochs = 0;
    auto res = run_baseline<double>(tiny_model(), Method::moe_cl, tc, tasks);
    REQUIRE(res.acc.rows() == 2);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j)
            CHECK(res.acc.at(i, j) == class0_freq(tasks[static_cast<size_t>(j)].test));
    // Balanced splits make that exactly one half.
    CHECK(res.acc.at(0, 0) == 0.5);
    CHECK(backward_transfer(res.acc, res.order) == 0.0);
    CHECK(res.logs.empty());
}

TEST_CASE("an untrained model scores at chance on a balanced split") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    auto tr = make_trainer<double>(tiny_model(), Method::sequential_ft, fast_train(), tasks);
    auto before = state_hashes(tr.model);
    CHECK(evaluate(tr.model, tasks[0].test, 0) == 0.5);
    CHECK(evaluate(tr.model, tasks[1].test, 1) == 0.5);
    CHECK(state_hashes(tr.model) == before);  // evaluation never mutates parameters
}

TEST_CASE("full sequences are reproducible bit for bit") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.epochs = 1;
    auto r1 = run_baseline<double>(tiny_model(), Method::moe_cl, tc, tasks);
    auto r2 = run_baseline<double>(tiny_model(), Method::moe_cl, tc, tasks);
    CHECK(r1.acc.bit_equal(r2.acc));
    REQUIRE(r1.logs.size() == r2.logs.size());
    for (size_t i = 0; i < r1.logs.size(); ++i) {
        CHECK(r1.logs[i].l_sft == r2.logs[i].l_sft);
        CHECK(r1.logs[i].l_gan == r2.logs[i].l_gan);
        CHECK(r1.logs[i].l_total == r2.logs[i].l_total);
    }
}

TEST_CASE("training logs carry the adversarial diagnostics and gate extrema") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.epochs = 1;
    auto tr = make_trainer<double>(tiny_model(), Method::moe_cl, tc, tasks);
    GateStats gates;
    auto logs = train_task(tr, tasks[0], 0, &gates);
    REQUIRE(logs.size() == 4);
    for (const auto& lg : logs) {
        CHECK(lg.has_gan);
        CHECK(lg.has_gates);
        CHECK(lg.l_gan > 0.0);
        CHECK(std::abs(lg.l_total - (lg.l_sft - 0.1 * lg.l_gan)) < 1e-12);
        CHECK(lg.gate_min >= 0.0);
        CHECK(lg.gate_max <= 1.0);
        CHECK(lg.gate_row_dev <= 1e-6);
        CHECK(lg.disc_acc >= 0.0);
        CHECK(lg.disc_acc <= 1.0);
    }
    CHECK(gates.rows > 0);
    CHECK(gates.max_row_dev <= 1e-6);
}

TEST_CASE("the gate contract holds across a whole sequence, training and inference") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.epochs = 1;
    auto res = run_baseline<double>(tiny_model(), Method::moe_cl, tc, tasks);
    CHECK(res.gates.rows > 0);
    CHECK(res.gates.min_beta >= 0.0);
    CHECK(res.gates.max_beta <= 1.0);
    CHECK(res.gates.max_row_dev <= 1e-6);
}

TEST_CASE("task-expert-only training is visiting-order invariant") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.epochs = 1;
    tc.order = {0, 1};
    auto fwdres = run_baseline<double>(tiny_model(), Method::per_task_ft, tc, tasks);
    tc.order = {1, 0};
    auto revres = run_baseline<double>(tiny_model(), Method::per_task_ft, tc, tasks);
    // Per-task accuracy after that task's own phase, and the whole final row,
    // cannot depend on the visiting order.
    CHECK(fwdres.acc.at(0, 0) == revres.acc.at(1, 0));
    CHECK(fwdres.acc.at(1, 1) == revres.acc.at(0, 1));
    for (int64_t j = 0; j < 2; ++j) CHECK(fwdres.acc.at(1, j) == revres.acc.at(1, j));
    CHECK(backward_transfer(fwdres.acc, fwdres.order) == 0.0);
    CHECK(backward_transfer(revres.acc, revres.order) == 0.0);
}

TEST_CASE("sequence rejects orders that are not permutations") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.order = {0, 0};
    auto tr = make_trainer<double>(tiny_model(), Method::moe_cl, tc, tasks);
    CHECK_THROWS_AS(train_sequence(tr, tasks), ConfigError);
    tc.order = {0, 1, 2};
    auto tr2 = make_trainer<double>(tiny_model(), Method::moe_cl, tc, tasks);
    CHECK_THROWS_AS(train_sequence(tr2, tasks), ConfigError);
}

TEST_CASE("a poisoned parameter surfaces as a divergence error naming the step") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    auto tr = make_trainer<double>(tiny_model(), Method::moe_cl, fast_train(), tasks);
    tr.model.backbone.tok_emb.at(2, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        train_task(tr, tasks[0], 0);
        FAIL("expected DivergedError");
    } catch (const DivergedError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("task 0") != std::string::npos);
        CHECK(msg.find("step 0") != std::string::npos);
    }
}

TEST_CASE("linear probe separates separable clusters and collapses on shuffled labels") {
    const int classes = 3, per = 30, dim = 8;
    Rng rng(31);
    auto make_split = [&](int n_per) {
        Td x(classes * n_per, dim);
        std::vector<int> y;
        for (int c = 0; c < classes; ++c)
            for (int i = 0; i < n_per; ++i) {
                const int64_t r = static_cast<int64_t>(c * n_per + i);
                for (int64_t j = 0; j < dim; ++j) x.at(r, j) = 0.05 * rng.gauss();
                x.at(r, c) += 1.0;
                y.push_back(c);
            }
        return std::pair<Td, std::vector<int>>(std::move(x), std::move(y));
    };
    auto [xtr, ytr] = make_split(per);
    auto [xte, yte] = make_split(12);
    const double separable = fit_linear_probe(xtr, ytr, xte, yte, classes);
    CHECK(separable >= 0.99);

    std::vector<int> shuffled = ytr;
    rng.shuffle(shuffled);
    const double collapsed = fit_linear_probe(xtr, shuffled, xte, yte, classes);
    CHECK(collapsed <= 0.6);

    CHECK_THROWS_AS(fit_linear_probe(xtr, {0, 1}, xte, yte, classes), ShapeError);
}

TEST_CASE("shared-representation features have one row per record and task labels") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    auto tr = make_trainer<double>(tiny_model(), Method::moe_cl, fast_train(), tasks);
    auto [x, y] = collect_shared_features(tr.model, tasks, "val");
    CHECK(x.rows() == 32);  // 16 val records per task
    CHECK(x.cols() == 16);
    CHECK(std::count(y.begin(), y.end(), 0) == 16);
    CHECK(std::count(y.begin(), y.end(), 1) == 16);
    CHECK_THROWS_AS(collect_shared_features(tr.model, tasks, "train"), ConfigError);
    std::vector<TaskData> one{tasks[0]};
    CHECK_THROWS_AS(collect_shared_features(tr.model, one, "val"), ContractError);
    auto per = make_trainer<double>(tiny_model(), Method::per_task_ft, fast_train(), tasks);
    CHECK_THROWS_AS(collect_shared_features(per.model, tasks, "val"), ContractError);
    // Deterministic probe: the same features give the same accuracy, twice.
    const double p1 = probe_task_identity(tr.model, tasks);
    const double p2 = probe_task_identity(tr.model, tasks);
    CHECK(p1 == p2);
}
