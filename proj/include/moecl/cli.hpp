#pragma once

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moecl/checkpoint.hpp"
#include "moecl/config.hpp"
#include "moecl/data.hpp"
#include "moecl/errors.hpp"
#include "moecl/gradsuite.hpp"
#include "moecl/metrics.hpp"
#include "moecl/model.hpp"
#include "moecl/trainer.hpp"

// Command-line front end. Everything routes through cli_main so tests can call
// it in-process. Exit codes: 0 on success, 1 when a command fails at runtime,
// 2 for usage errors.

namespace moecl {

namespace cli_detail {

struct SynthArgs {
    std::string out;
    SynthConfig cfg;
};

struct TrainArgs {
    std::string data, out, config_file, method = "moe-cl";
    std::vector<int> order;
    // Sentinels meaning "not set on the command line".
    double lr = -1.0, gan_weight = -1.0;
    int64_t epochs = -1, batch = -1, seed = -1, model_seed = -1;
};

struct EvalArgs {
    std::string ckpt, data, split = "test";
};

struct ReportArgs {
    std::vector<std::string> matrices;
    bool as_json = false;
};

struct GradcheckArgs {
    uint64_t seed = 12345;
    double tol = 1e-5;
};

struct AblateArgs {
    std::string data, config_file;
    uint64_t seed = 1;
    double gan_weight = -1.0;
};

inline std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

inline void print_matrix(std::ostream& os, const RunRecord& rec) {
    os << "accuracy matrix (row = after phase, column = task):\n";
    for (int64_t i = 0; i < rec.acc.rows(); ++i) {
        os << "  phase " << i << " (task " << rec.order[static_cast<size_t>(i)] << "):";
        for (int64_t j = 0; j < rec.acc.cols(); ++j) os << " " << fmt4(rec.acc.at(i, j));
        os << "\n";
    }
    const RunMetrics m = compute_metrics(rec);
    os << "acc " << fmt4(m.acc) << "  bwt " << fmt4(m.bwt) << "  fwt " << fmt4(m.fwt) << "\n";
}

inline int run_synth(const SynthArgs& a) {
    auto tasks = gen_synthetic_tasks(a.cfg);
    save_dataset_dir(a.out, tasks);
    int64_t total = 0;
    for (const auto& t : tasks) total += static_cast<int64_t>(t.train.size() + t.val.size() + t.test.size());
    std::cout << "wrote " << tasks.size() << " tasks (" << total << " records) to " << a.out << "\n";
    return 0;
}

inline int run_train(const TrainArgs& a) {
    auto tasks = load_dataset_dir(a.data);
    const Method method = method_from_name(a.method);

    ModelConfig mc;
    TrainConfig tc;
    if (!a.config_file.empty()) load_config_file(a.config_file, mc, tc);
    if (a.lr >= 0.0) tc.lr = a.lr;
    if (a.gan_weight >= 0.0) mc.gan_weight = a.gan_weight;
    if (a.epochs >= 0) tc.epochs = a.epochs;
    if (a.batch >= 0) tc.batch_size = a.batch;
    if (a.seed >= 0) tc.seed = static_cast<uint64_t>(a.seed);
    if (a.model_seed >= 0) mc.seed = static_cast<uint64_t>(a.model_seed);
    if (!a.order.empty()) tc.order = a.order;

    Trainer<double> tr = make_trainer<double>(mc, method, tc, tasks);
    std::cout << "training " << a.method << " on " << tasks.size() << " tasks ("
              << count_params(tr.model) << " parameters, vocab " << tr.model.vocab.size() << ")\n";
    SequenceResult<double> res = train_sequence<double>(tr, tasks, [&](int phase, Trainer<double>&) {
        std::cout << "  phase " << phase << " done\n";
    });

    RunRecord rec;
    rec.method = a.method;
    rec.order = res.order;
    for (const auto& t : tasks) rec.classes.push_back(static_cast<int>(t.spec.n_classes));
    rec.seed = tr.tcfg.seed;
    rec.acc = res.acc;

    nlohmann::json resolved{{"method", a.method},
                            {"data", a.data},
                            {"model", model_config_json(tr.model.config)},
                            {"train", train_config_json(tr.tcfg)}};
    write_run_outputs(a.out, rec, res.logs, resolved);
    save_checkpoint(a.out + "/final.ckpt", tr);

    print_matrix(std::cout, rec);
    std::cout << "run artifacts in " << a.out << "\n";
    return 0;
}

inline int run_eval(const EvalArgs& a) {
    Trainer<double> tr = load_checkpoint<double>(a.ckpt);
    auto tasks = load_dataset_dir(a.data);
    if (static_cast<int64_t>(tasks.size()) != tr.model.config.n_tasks)
        throw ConfigError("checkpoint was trained on " + std::to_string(tr.model.config.n_tasks) +
                          " tasks but the dataset has " + std::to_string(tasks.size()));
    double sum = 0.0;
    for (size_t t = 0; t < tasks.size(); ++t) {
        const auto& td = tasks[t];
        const auto& recs = a.split == "train" ? td.train : a.split == "val" ? td.val : td.test;
        const double acc = evaluate(tr.model, recs, static_cast<int>(t));
        sum += acc;
        std::cout << "task " << t << " (" << td.spec.name << ") " << a.split << " accuracy " << fmt4(acc) << "\n";
    }
    std::cout << "mean accuracy " << fmt4(sum / static_cast<double>(tasks.size())) << "\n";
    return 0;
}

inline int run_report(const ReportArgs& a) {
    std::vector<RunMetrics> runs;
    for (const std::string& path : a.matrices) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        runs.push_back(compute_metrics(parse_matrix(ss.str())));
    }
    if (a.as_json)
        std::cout << report_json(runs).dump(2) << "\n";
    else
        std::cout << render_report_text(runs);
    return 0;
}

inline int run_gradcheck(const GradcheckArgs& a) {
    auto checks = run_gradient_suite(a.seed);
    int bad = 0;
    for (const auto& c : checks) {
        const bool ok = c.ok(a.tol);
        if (!ok) ++bad;
        std::cout << (ok ? "ok   " : "FAIL ") << c.name << "  max rel err " << c.report.max_rel_err << "\n";
    }
    std::cout << (bad == 0 ? "all " : "") << checks.size() - static_cast<size_t>(bad) << " of " << checks.size()
              << " gradient rules within " << a.tol << "\n";
    return bad == 0 ? 0 : 1;
}

// Trains the adversarial and the ablated model on the same data with the same
// seeds, then probes how much task identity leaks from the shared
// representation of each. The adversarial loss should push its probe toward
// chance.
inline int run_ablate(const AblateArgs& a) {
    auto tasks = load_dataset_dir(a.data);
    ModelConfig mc;
    TrainConfig tc;
    if (!a.config_file.empty()) load_config_file(a.config_file, mc, tc);
    tc.seed = a.seed;
    if (a.gan_weight >= 0.0) mc.gan_weight = a.gan_weight;

    double probes[2];
    for (int with_gan = 0; with_gan < 2; ++with_gan) {
        const Method m = with_gan ? Method::moe_cl : Method::moe_cl_no_gan;
        Trainer<double> tr = make_trainer<double>(mc, m, tc, tasks);
        train_sequence(tr, tasks);
        probes[with_gan] = probe_task_identity(tr.model, tasks);
        std::cout << method_name(m) << ": task-identity probe accuracy " << fmt4(probes[with_gan]) << "\n";
    }
    const double chance = 1.0 / static_cast<double>(tasks.size());
    std::cout << "chance " << fmt4(chance) << ", gap (ablated - adversarial) " << fmt4(probes[0] - probes[1]) << "\n";
    return 0;
}

}  // namespace cli_detail

inline int cli_main(int argc, char** argv) {
    using namespace cli_detail;

    CLI::App app{"continual instruction tuning lab: a mixture of LoRA experts with an adversarial "
                 "task-identity critic, plus baselines, metrics, and a synthetic benchmark"};
    app.require_subcommand(1);

    SynthArgs sa;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic task-sequence dataset");
    synth->add_option("--out", sa.out, "output dataset directory")->required();
    synth->add_option("--tasks", sa.cfg.n_tasks, "number of tasks");
    synth->add_option("--classes", sa.cfg.classes_per_task, "classes per task");
    synth->add_option("--task-band", sa.cfg.task_band, "private vocab band per task");
    synth->add_option("--shared-band", sa.cfg.shared_band, "vocab band shared across tasks");
    synth->add_option("--sig-per-class", sa.cfg.sig_per_class, "signature tokens per class");
    synth->add_option("--sentence-len", sa.cfg.sentence_len, "tokens per example");
    synth->add_option("--noise", sa.cfg.noise_ratio, "noise token probability");
    synth->add_option("--fidelity", sa.cfg.latent_fidelity, "shared-band label fidelity");
    synth->add_option("--train", sa.cfg.train_per_task, "training examples per task");
    synth->add_option("--val", sa.cfg.val_per_task, "validation examples per task");
    synth->add_option("--test", sa.cfg.test_per_task, "test examples per task");
    synth->add_option("--seed", sa.cfg.seed, "generator seed");

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "train one method over a task sequence");
    train->add_option("--data", ta.data, "dataset directory (from synth)")->required();
    train->add_option("--out", ta.out, "run output directory")->required();
    train->add_option("--method", ta.method, "moe-cl | moe-cl-no-gan | sequential-ft | per-task-ft")
        ->check(CLI::IsMember({"moe-cl", "moe-cl-no-gan", "sequential-ft", "per-task-ft"}));
    train->add_option("--config", ta.config_file, "JSON config file with model/train blocks");
    train->add_option("--order", ta.order, "task visiting order, e.g. --order 2,0,1")->delimiter(',');
    train->add_option("--lr", ta.lr, "learning rate");
    train->add_option("--gan-weight", ta.gan_weight, "adversarial loss weight");
    train->add_option("--epochs", ta.epochs, "epochs per task");
    train->add_option("--batch", ta.batch, "batch size");
    train->add_option("--seed", ta.seed, "shuffling seed");
    train->add_option("--model-seed", ta.model_seed, "weight init seed");

    EvalArgs ea;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
    eval->add_option("--data", ea.data, "dataset directory")->required();
    eval->add_option("--split", ea.split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));

    ReportArgs ra;
    CLI::App* report = app.add_subcommand("report", "aggregate accuracy matrices into transfer metrics");
    report->add_option("matrices", ra.matrices, "matrix.txt files from train runs")->required();
    report->add_flag("--json", ra.as_json, "emit JSON instead of text");

    GradcheckArgs ga;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
    gradcheck->add_option("--seed", ga.seed, "randomization seed");
    gradcheck->add_option("--tol", ga.tol, "relative error tolerance");

    AblateArgs aa;
    CLI::App* ablate = app.add_subcommand("ablate", "compare task-identity leakage with and without the critic");
    ablate->add_option("--data", aa.data, "dataset directory")->required();
    ablate->add_option("--config", aa.config_file, "JSON config file with model/train blocks");
    ablate->add_option("--seed", aa.seed, "shuffling seed");
    ablate->add_option("--gan-weight", aa.gan_weight, "adversarial loss weight for the moe-cl side");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exits 0
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the parse error
        return 2;
    }

    try {
        if (synth->parsed()) return run_synth(sa);
        if (train->parsed()) return run_train(ta);
        if (eval->parsed()) return run_eval(ea);
        if (report->parsed()) return run_report(ra);
        if (gradcheck->parsed()) return run_gradcheck(ga);
        if (ablate->parsed()) return run_ablate(aa);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 2;  // unreachable with require_subcommand(1)
}

}  // namespace moecl
