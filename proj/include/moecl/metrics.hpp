#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moecl/errors.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

// Accuracy matrices are square: acc.at(i, j) is the test accuracy on task j
// after finishing training phase i, and order[i] names the task trained at
// phase i.

namespace detail {

inline void check_matrix(const Tensor<double>& acc, const std::vector<int>& order) {
    const int64_t n = acc.rows();
    if (n < 1 || acc.cols() != n)
        throw ShapeError("accuracy matrix must be square with one row per phase, got " + acc.shape_string());
    if (static_cast<int64_t>(order.size()) != n)
        throw ShapeError("order has " + std::to_string(order.size()) + " entries for " + std::to_string(n) +
                         " phases");
    std::vector<bool> seen(static_cast<size_t>(n), false);
    for (int t : order) {
        if (t < 0 || t >= n || seen[static_cast<size_t>(t)])
            throw ContractError("order must be a permutation of 0.." + std::to_string(n - 1));
        seen[static_cast<size_t>(t)] = true;
    }
}

inline double mean(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

inline double population_std(const std::vector<double>& xs) {
    const double mu = mean(xs);
    double s = 0.0;
    for (double x : xs) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(xs.size()));
}

inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string join_ints(const std::vector<int>& xs) {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(xs[i]);
    }
    return out;
}

}  // namespace detail

// Mean accuracy over all tasks after the final phase.
inline double avg_accuracy(const Tensor<double>& acc, const std::vector<int>& order) {
    detail::check_matrix(acc, order);
    const int64_t n = acc.rows();
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += acc.at(n - 1, j);
    return s / static_cast<double>(n);
}

// How much training later tasks moved the accuracy of earlier ones: for each
// task (except the last trained) the final accuracy minus the accuracy right
// after it was trained, averaged. Negative values mean forgetting.
inline double backward_transfer(const Tensor<double>& acc, const std::vector<int>& order) {
    detail::check_matrix(acc, order);
    const int64_t n = acc.rows();
    if (n < 2) throw ContractError("backward transfer needs at least 2 tasks");
    double s = 0.0;
    for (int64_t j = 0; j + 1 < n; ++j) {
        const int t = order[static_cast<size_t>(j)];
        s += acc.at(n - 1, t) - acc.at(j, t);
    }
    return s / static_cast<double>(n - 1);
}

// How much learned material helps tasks not yet trained: accuracy on each task
// just before its own phase, minus chance level for that task, averaged.
inline double forward_transfer(const Tensor<double>& acc, const std::vector<int>& order,
                               const std::vector<double>& chance) {
    detail::check_matrix(acc, order);
    const int64_t n = acc.rows();
    if (n < 2) throw ContractError("forward transfer needs at least 2 tasks");
    if (static_cast<int64_t>(chance.size()) != n)
        throw ShapeError("chance has " + std::to_string(chance.size()) + " entries for " + std::to_string(n) +
                         " tasks");
    double s = 0.0;
    for (int64_t j = 1; j < n; ++j) {
        const int t = order[static_cast<size_t>(j)];
        s += acc.at(j - 1, t) - chance[static_cast<size_t>(t)];
    }
    return s / static_cast<double>(n - 1);
}

// One finished continual run, as stored in a matrix file.
struct RunRecord {
    std::string method;
    std::vector<int> order;
    std::vector<int> classes;  // class count per task id, source of chance levels
    uint64_t seed = 0;
    Tensor<double> acc;

    std::vector<double> chance() const {
        std::vector<double> out;
        for (int k : classes) out.push_back(1.0 / static_cast<double>(k));
        return out;
    }
};

// Plain-text serialization of one run's accuracy matrix. Values are printed
// with enough digits to round-trip doubles exactly.
inline std::string render_matrix(const RunRecord& run) {
    detail::check_matrix(run.acc, run.order);
    if (run.classes.size() != run.order.size())
        throw ShapeError("classes has " + std::to_string(run.classes.size()) + " entries for " +
                         std::to_string(run.order.size()) + " tasks");
    std::string out = "# moecl accuracy matrix\n";
    out += "# method " + run.method + "\n";
    out += "# order " + detail::join_ints(run.order) + "\n";
    out += "# classes " + detail::join_ints(run.classes) + "\n";
    out += "# seed " + std::to_string(run.seed) + "\n";
    for (int64_t i = 0; i < run.acc.rows(); ++i) {
        for (int64_t j = 0; j < run.acc.cols(); ++j) {
            if (j) out += " ";
            out += detail::fmt_g17(run.acc.at(i, j));
        }
        out += "\n";
    }
    return out;
}

inline RunRecord parse_matrix(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "# moecl accuracy matrix")
        throw FormatError("not an accuracy matrix file (missing the \"# moecl accuracy matrix\" banner)");
    RunRecord run;
    auto parse_int_list = [](const std::string& s) {
        std::vector<int> out;
        std::istringstream is(s);
        std::string piece;
        while (std::getline(is, piece, ',')) {
            try {
                out.push_back(std::stoi(piece));
            } catch (const std::exception&) {
                throw FormatError("bad integer \"" + piece + "\" in matrix header");
            }
        }
        return out;
    };
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("# method ", 0) == 0) {
            run.method = line.substr(9);
        } else if (line.rfind("# order ", 0) == 0) {
            run.order = parse_int_list(line.substr(8));
        } else if (line.rfind("# classes ", 0) == 0) {
            run.classes = parse_int_list(line.substr(10));
        } else if (line.rfind("# seed ", 0) == 0) {
            try {
                run.seed = std::stoull(line.substr(7));
            } catch (const std::exception&) {
                throw FormatError("bad seed \"" + line.substr(7) + "\" in matrix header");
            }
        } else if (line[0] == '#') {
            throw FormatError("unknown matrix header line: " + line);
        } else {
            std::istringstream ls(line);
            std::vector<double> row;
            double v;
            while (ls >> v) row.push_back(v);
            if (!ls.eof()) throw FormatError("bad matrix value in line: " + line);
            rows.push_back(std::move(row));
        }
    }
    if (run.method.empty()) throw FormatError("matrix file is missing the method header");
    if (rows.empty()) throw FormatError("matrix file has no accuracy rows");
    const size_t n = rows.size();
    for (const auto& r : rows)
        if (r.size() != n) throw FormatError("accuracy matrix is not square");
    run.acc = Tensor<double>(static_cast<int64_t>(n), static_cast<int64_t>(n));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) run.acc.at(static_cast<int64_t>(i), static_cast<int64_t>(j)) = rows[i][j];
    detail::check_matrix(run.acc, run.order);
    if (run.classes.size() != n) throw FormatError("matrix file is missing a classes entry per task");
    return run;
}

struct RunMetrics {
    std::string method;
    std::vector<int> order;
    uint64_t seed = 0;
    double acc = 0.0, bwt = 0.0, fwt = 0.0;
};

inline RunMetrics compute_metrics(const RunRecord& run) {
    RunMetrics m;
    m.method = run.method;
    m.order = run.order;
    m.seed = run.seed;
    m.acc = avg_accuracy(run.acc, run.order);
    m.bwt = backward_transfer(run.acc, run.order);
    m.fwt = forward_transfer(run.acc, run.order, run.chance());
    return m;
}

struct MethodSummary {
    std::string method;
    int runs = 0;
    double acc_mean = 0.0, acc_std = 0.0;
    double bwt_mean = 0.0, bwt_std = 0.0;
    double fwt_mean = 0.0, fwt_std = 0.0;
};

// Groups runs by method (first-appearance order) and reduces each group to
// mean and population standard deviation per metric.
inline std::vector<MethodSummary> summarize(const std::vector<RunMetrics>& runs) {
    std::vector<MethodSummary> out;
    std::vector<std::string> methods;
    for (const auto& r : runs)
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    for (const auto& method : methods) {
        std::vector<double> accs, bwts, fwts;
        for (const auto& r : runs)
            if (r.method == method) {
                accs.push_back(r.acc);
                bwts.push_back(r.bwt);
                fwts.push_back(r.fwt);
            }
        MethodSummary s;
        s.method = method;
        s.runs = static_cast<int>(accs.size());
        s.acc_mean = detail::mean(accs);
        s.acc_std = detail::population_std(accs);
        s.bwt_mean = detail::mean(bwts);
        s.bwt_std = detail::population_std(bwts);
        s.fwt_mean = detail::mean(fwts);
        s.fwt_std = detail::population_std(fwts);
        out.push_back(std::move(s));
    }
    return out;
}

inline std::string render_report_text(const std::vector<RunMetrics>& runs) {
    if (runs.empty()) throw ContractError("nothing to report");
    auto summaries = summarize(runs);
    std::string out = "continual learning report\n";
    char buf[256];
    for (const auto& s : summaries) {
        out += "\nmethod " + s.method + "\n";
        for (const auto& r : runs) {
            if (r.method != s.method) continue;
            std::snprintf(buf, sizeof buf, "  order %-12s seed %-6llu acc %9.6f  bwt %9.6f  fwt %9.6f\n",
                          detail::join_ints(r.order).c_str(), static_cast<unsigned long long>(r.seed), r.acc, r.bwt,
                          r.fwt);
            out += buf;
        }
        std::snprintf(buf, sizeof buf,
                      "  avg over %d runs: acc %.6f +- %.6f  bwt %.6f +- %.6f  fwt %.6f +- %.6f\n", s.runs,
                      s.acc_mean, s.acc_std, s.bwt_mean, s.bwt_std, s.fwt_mean, s.fwt_std);
        out += buf;
    }
    return out;
}

inline nlohmann::json report_json(const std::vector<RunMetrics>& runs) {
    if (runs.empty()) throw ContractError("nothing to report");
    nlohmann::json j;
    j["runs"] = nlohmann::json::array();
    for (const auto& r : runs)
        j["runs"].push_back({{"method", r.method},
                             {"order", r.order},
                             {"seed", r.seed},
                             {"acc", r.acc},
                             {"bwt", r.bwt},
                             {"fwt", r.fwt}});
    j["summary"] = nlohmann::json::array();
    for (const auto& s : summarize(runs))
        j["summary"].push_back({{"method", s.method},
                                {"runs", s.runs},
                                {"acc", {{"mean", s.acc_mean}, {"std", s.acc_std}}},
                                {"bwt", {{"mean", s.bwt_mean}, {"std", s.bwt_std}}},
                                {"fwt", {{"mean", s.fwt_mean}, {"std", s.fwt_std}}}});
    return j;
}

}  // namespace moecl
