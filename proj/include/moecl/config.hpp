#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moecl/errors.hpp"
#include "moecl/metrics.hpp"
#include "moecl/model.hpp"
#include "moecl/trainer.hpp"

// JSON faces of the config structs, config-file loading with typo rejection,
// and the on-disk layout of a training run.

namespace moecl {

inline nlohmann::json model_config_json(const ModelConfig& c) {
    return {{"hidden", c.hidden},
            {"n_blocks", c.n_blocks},
            {"n_heads", c.n_heads},
            {"ffn_inner", c.ffn_inner},
            {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len},
            {"n_tasks", c.n_tasks},
            {"classes_per_task", c.classes_per_task},
            {"lora_rank", c.lora_rank},
            {"lora_alpha", c.lora_alpha},
            {"gan_weight", c.gan_weight},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden = j.at("hidden").get<int64_t>();
    c.n_blocks = j.at("n_blocks").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.ffn_inner = j.at("ffn_inner").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    c.n_tasks = j.at("n_tasks").get<int64_t>();
    c.classes_per_task = j.at("classes_per_task").get<std::vector<int64_t>>();
    c.lora_rank = j.at("lora_rank").get<int64_t>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.gan_weight = j.at("gan_weight").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

inline nlohmann::json train_config_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"optimizer", c.optimizer},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"order", c.order},
            {"seed", c.seed},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.optimizer = j.at("optimizer").get<std::string>();
    c.epochs = j.at("epochs").get<int64_t>();
    c.batch_size = j.at("batch_size").get<int64_t>();
    c.order = j.at("order").get<std::vector<int>>();
    c.seed = j.at("seed").get<uint64_t>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    return c;
}

namespace detail {

// Applies a partial override block onto a model config. Shape fields that the
// dataset dictates are rejected so a stale config file cannot desync them.
inline void apply_model_overrides(ModelConfig& c, const nlohmann::json& j) {
    for (const auto& [key, val] : j.items()) {
        if (key == "hidden")
            c.hidden = val.get<int64_t>();
        else if (key == "n_blocks")
            c.n_blocks = val.get<int64_t>();
        else if (key == "n_heads")
            c.n_heads = val.get<int64_t>();
        else if (key == "ffn_inner")
            c.ffn_inner = val.get<int64_t>();
        else if (key == "max_seq_len")
            c.max_seq_len = val.get<int64_t>();
        else if (key == "lora_rank")
            c.lora_rank = val.get<int64_t>();
        else if (key == "lora_alpha")
            c.lora_alpha = val.get<double>();
        else if (key == "gan_weight")
            c.gan_weight = val.get<double>();
        else if (key == "seed")
            c.seed = val.get<uint64_t>();
        else if (key == "vocab_size" || key == "n_tasks" || key == "classes_per_task")
            throw ConfigError("config: \"" + key + "\" is derived from the dataset and cannot be set");
        else
            throw ConfigError("config: unknown model key \"" + key + "\"");
    }
}

inline void apply_train_overrides(TrainConfig& c, const nlohmann::json& j) {
    for (const auto& [key, val] : j.items()) {
        if (key == "lr")
            c.lr = val.get<double>();
        else if (key == "optimizer")
            c.optimizer = val.get<std::string>();
        else if (key == "epochs")
            c.epochs = val.get<int64_t>();
        else if (key == "batch_size")
            c.batch_size = val.get<int64_t>();
        else if (key == "order")
            c.order = val.get<std::vector<int>>();
        else if (key == "seed")
            c.seed = val.get<uint64_t>();
        else if (key == "beta1")
            c.beta1 = val.get<double>();
        else if (key == "beta2")
            c.beta2 = val.get<double>();
        else if (key == "adam_eps")
            c.adam_eps = val.get<double>();
        else
            throw ConfigError("config: unknown train key \"" + key + "\"");
    }
}

}  // namespace detail

// Reads a config file of the form {"model": {...}, "train": {...}} where both
// blocks are optional and partial; anything not mentioned keeps its default.
// Unknown keys anywhere are errors.
inline void load_config_file(const std::string& path, ModelConfig& model, TrainConfig& train) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(path + ": config root must be an object");
    for (const auto& [key, val] : j.items()) {
        if (key == "model")
            detail::apply_model_overrides(model, val);
        else if (key == "train")
            detail::apply_train_overrides(train, val);
        else
            throw ConfigError("config: unknown top-level key \"" + key + "\" (expected \"model\" or \"train\")");
    }
}

inline nlohmann::json step_log_json(const StepLog& s) {
    nlohmann::json j{{"task", s.task},     {"epoch", s.epoch},       {"step", s.step},
                     {"l_sft", s.l_sft},   {"l_total", s.l_total},   {"has_gan", s.has_gan}};
    if (s.has_gan) {
        j["l_gan"] = s.l_gan;
        j["disc_acc"] = s.disc_acc;
    }
    if (s.has_gates) {
        j["gate_min"] = s.gate_min;
        j["gate_max"] = s.gate_max;
        j["gate_row_dev"] = s.gate_row_dev;
    }
    return j;
}

// Writes one run's artifacts under dir: the resolved configs, the accuracy
// matrix, and the per-step training log.
inline void write_run_outputs(const std::string& dir, const RunRecord& record, const std::vector<StepLog>& logs,
                              const nlohmann::json& resolved_config) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream out(dir + "/config.json", std::ios::trunc);
        if (!out) throw DataError("cannot write " + dir + "/config.json");
        out << resolved_config.dump(2) << "\n";
    }
    {
        std::ofstream out(dir + "/matrix.txt", std::ios::trunc);
        if (!out) throw DataError("cannot write " + dir + "/matrix.txt");
        out << render_matrix(record);
    }
    {
        std::ofstream out(dir + "/steps.jsonl", std::ios::trunc);
        if (!out) throw DataError("cannot write " + dir + "/steps.jsonl");
        for (const StepLog& s : logs) out << step_log_json(s).dump() << "\n";
    }
}

}  // namespace moecl
