#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "moecl/errors.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

struct CorpusRecord {
    std::string text;
    int label = 0;

    bool operator==(const CorpusRecord&) const = default;
};

struct TaskSpec {
    int id = 0;
    std::string name;
    int64_t n_classes = 0;
};

struct TaskData {
    TaskSpec spec;
    std::vector<CorpusRecord> train, val, test;
};

// Lowercased whitespace tokenization; the normalization applied everywhere text
// meets the model.
inline std::vector<std::string> normalize_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// Token ids. 0 is reserved for padding, 1 for unknown tokens; real tokens start
// at 2. Construction is deterministic: tokens ranked by (count desc, spelling asc).
class Vocab {
  public:
    static constexpr int pad_id = 0;
    static constexpr int unk_id = 1;

    Vocab() : id_to_token_{"<pad>", "<unk>"} { reindex(); }

    static Vocab build(const std::vector<const std::vector<CorpusRecord>*>& corpora, size_t cap) {
        if (cap < 2) throw ConfigError("vocab cap must be at least 2, got " + std::to_string(cap));
        std::unordered_map<std::string, int64_t> counts;
        for (const auto* recs : corpora)
            for (const CorpusRecord& r : *recs)
                for (const std::string& tok : normalize_tokens(r.text)) ++counts[tok];
        std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocab v;
        for (const auto& [tok, cnt] : ranked) {
            if (v.id_to_token_.size() >= cap) break;
            v.id_to_token_.push_back(tok);
        }
        v.reindex();
        return v;
    }

    // Rebuilds from a serialized token list (element 0 must be the pad token,
    // element 1 the unk token).
    static Vocab from_tokens(std::vector<std::string> tokens) {
        if (tokens.size() < 2) throw FormatError("vocab token list must have at least pad and unk entries");
        Vocab v;
        v.id_to_token_ = std::move(tokens);
        v.reindex();
        return v;
    }

    int64_t size() const { return static_cast<int64_t>(id_to_token_.size()); }

    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? unk_id : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw IndexError("vocab: id " + std::to_string(id) + " outside [0, " + std::to_string(size()) + ")");
        return id_to_token_[static_cast<size_t>(id)];
    }

    const std::vector<std::string>& tokens() const { return id_to_token_; }

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;

    void reindex() {
        token_to_id_.clear();
        for (size_t i = 2; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = static_cast<int>(i);
    }
};

// Fixed-length id sequence: normalized tokens mapped through the vocab (unknown
// spellings to unk), truncated to max_len, padded at the end with pad.
inline std::vector<int> tokenize(const Vocab& vocab, const std::string& text, int64_t max_len) {
    if (max_len < 1) throw ContractError("tokenize: max_len must be positive");
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(max_len));
    for (const std::string& tok : normalize_tokens(text)) {
        if (static_cast<int64_t>(ids.size()) >= max_len) break;
        ids.push_back(vocab.id(tok));
    }
    while (static_cast<int64_t>(ids.size()) < max_len) ids.push_back(Vocab::pad_id);
    return ids;
}

// One JSON object per line with fields "text" (non-empty after normalization)
// and "label" (integer; bounded by n_classes when n_classes > 0). Errors carry
// the 1-based line number.
inline std::vector<CorpusRecord> load_jsonl(const std::string& path, int64_t n_classes = -1) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<CorpusRecord> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("text") || !j.contains("label"))
            throw DataError(path + " line " + std::to_string(lineno) + ": record needs \"text\" and \"label\"");
        if (!j["text"].is_string())
            throw DataError(path + " line " + std::to_string(lineno) + ": \"text\" must be a string");
        if (!j["label"].is_number_integer())
            throw DataError(path + " line " + std::to_string(lineno) + ": \"label\" must be an integer");
        CorpusRecord rec{j["text"].get<std::string>(), j["label"].get<int>()};
        if (normalize_tokens(rec.text).empty())
            throw DataError(path + " line " + std::to_string(lineno) + ": empty text after normalization");
        if (rec.label < 0 || (n_classes > 0 && rec.label >= n_classes))
            throw DataError(path + " line " + std::to_string(lineno) + ": label " + std::to_string(rec.label) +
                            " outside [0, " + std::to_string(n_classes) + ")");
        out.push_back(std::move(rec));
    }
    return out;
}

inline void save_jsonl(const std::string& path, const std::vector<CorpusRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    for (const CorpusRecord& r : records) {
        nlohmann::json j{{"label", r.label}, {"text", r.text}};
        out << j.dump() << "\n";
    }
}

// Synthetic continual-learning benchmark. Every task owns a private vocab band
// (class-signature tokens plus task-flavored noise); all tasks share one band
// whose halves correlate with the label parity, so structure carries across
// task boundaries. Splits are label-balanced and fully determined by the seed.
struct SynthConfig {
    int n_tasks = 3;
    int classes_per_task = 2;
    int task_band = 40;        // tokens in each task's private band
    int shared_band = 24;      // tokens in the cross-task band (split into two halves)
    int sig_per_class = 2;     // signature tokens per class, taken from the task band
    int sentence_len = 16;
    double noise_ratio = 0.3;  // per-slot probability of a noise token from the task band
    double latent_fidelity = 0.9;  // probability a shared token's half matches the label parity
    int train_per_task = 256;
    int val_per_task = 64;
    int test_per_task = 96;
    uint64_t seed = 7;

    void validate() const {
        if (n_tasks < 1) throw ConfigError("synth: n_tasks must be >= 1, got " + std::to_string(n_tasks));
        if (classes_per_task < 2) throw ConfigError("synth: classes_per_task must be >= 2, got " + std::to_string(classes_per_task));
        if (sig_per_class < 1) throw ConfigError("synth: sig_per_class must be >= 1");
        if (sig_per_class * classes_per_task > task_band)
            throw ConfigError("synth: task_band " + std::to_string(task_band) + " too small for " +
                              std::to_string(sig_per_class * classes_per_task) + " signature tokens");
        if (noise_ratio < 0.0 || noise_ratio >= 1.0)
            throw ConfigError("synth: noise_ratio must be in [0, 1), got " + std::to_string(noise_ratio));
        if (noise_ratio > 0.0 && sig_per_class * classes_per_task == task_band)
            throw ConfigError("synth: no noise tokens left in the task band with noise_ratio > 0");
        if (shared_band < 2) throw ConfigError("synth: shared_band must be >= 2");
        if (latent_fidelity < 0.0 || latent_fidelity > 1.0) throw ConfigError("synth: latent_fidelity must be in [0, 1]");
        if (sentence_len < 1) throw ConfigError("synth: sentence_len must be >= 1");
        if (train_per_task < 1 || val_per_task < 1 || test_per_task < 1)
            throw ConfigError("synth: split sizes must be positive");
    }
};

namespace detail {

inline std::vector<CorpusRecord> synth_split(const SynthConfig& cfg, int task, Rng rng, int count) {
    const int k = cfg.classes_per_task;
    const int sig_total = cfg.sig_per_class * k;
    const int noise_pool = cfg.task_band - sig_total;
    const int half = cfg.shared_band / 2;
    auto task_token = [&](int j) { return "t" + std::to_string(task) + "w" + std::to_string(j); };
    auto shared_token = [&](int j) { return "sh" + std::to_string(j); };

    std::vector<CorpusRecord> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int label = i % k;
        std::string text;
        for (int slot = 0; slot < cfg.sentence_len; ++slot) {
            std::string tok;
            if (noise_pool > 0 && rng.uniform() < cfg.noise_ratio) {
                tok = task_token(sig_total + static_cast<int>(rng.below(static_cast<uint64_t>(noise_pool))));
            } else if (slot % 2 == 0) {
                tok = task_token(label * cfg.sig_per_class + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.sig_per_class))));
            } else {
                const int parity = label & 1;
                const int h = rng.uniform() < cfg.latent_fidelity ? parity : 1 - parity;
                tok = shared_token(h * half + static_cast<int>(rng.below(static_cast<uint64_t>(half))));
            }
            if (!text.empty()) text.push_back(' ');
            text += tok;
        }
        out.push_back(CorpusRecord{std::move(text), label});
    }
    rng.shuffle(out);
    return out;
}

}  // namespace detail

inline std::vector<TaskData> gen_synthetic_tasks(const SynthConfig& cfg) {
    cfg.validate();
    Rng master(cfg.seed);
    std::vector<TaskData> tasks;
    for (int t = 0; t < cfg.n_tasks; ++t) {
        TaskData td;
        td.spec = TaskSpec{t, "synth" + std::to_string(t), cfg.classes_per_task};
        Rng task_rng = master.fork(static_cast<uint64_t>(t) + 1);
        td.train = detail::synth_split(cfg, t, task_rng.fork(1), cfg.train_per_task);
        td.val = detail::synth_split(cfg, t, task_rng.fork(2), cfg.val_per_task);
        td.test = detail::synth_split(cfg, t, task_rng.fork(3), cfg.test_per_task);
        tasks.push_back(std::move(td));
    }
    return tasks;
}

// On-disk layout: <dir>/task<t>/{train,val,test}.jsonl plus <dir>/synth_meta.json
// naming each task and its class count.
inline void save_dataset_dir(const std::string& dir, const std::vector<TaskData>& tasks) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["tasks"] = nlohmann::json::array();
    for (const TaskData& td : tasks) {
        const std::string tdir = dir + "/task" + std::to_string(td.spec.id);
        fs::create_directories(tdir);
        save_jsonl(tdir + "/train.jsonl", td.train);
        save_jsonl(tdir + "/val.jsonl", td.val);
        save_jsonl(tdir + "/test.jsonl", td.test);
        meta["tasks"].push_back({{"id", td.spec.id}, {"name", td.spec.name}, {"classes", td.spec.n_classes}});
    }
    std::ofstream out(dir + "/synth_meta.json", std::ios::trunc);
    if (!out) throw DataError("cannot write " + dir + "/synth_meta.json");
    out << meta.dump(2) << "\n";
}

inline std::vector<TaskData> load_dataset_dir(const std::string& dir) {
    std::ifstream in(dir + "/synth_meta.json");
    if (!in) throw DataError("cannot open " + dir + "/synth_meta.json");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(dir + "/synth_meta.json: " + e.what());
    }
    if (!meta.contains("tasks") || !meta["tasks"].is_array() || meta["tasks"].empty())
        throw DataError(dir + "/synth_meta.json: no tasks listed");
    std::vector<TaskData> tasks;
    for (const auto& jt : meta["tasks"]) {
        TaskData td;
        td.spec.id = jt.at("id").get<int>();
        td.spec.name = jt.at("name").get<std::string>();
        td.spec.n_classes = jt.at("classes").get<int64_t>();
        if (td.spec.n_classes < 2) throw DataError(dir + ": task " + td.spec.name + " has fewer than 2 classes");
        const std::string tdir = dir + "/task" + std::to_string(td.spec.id);
        td.train = load_jsonl(tdir + "/train.jsonl", td.spec.n_classes);
        td.val = load_jsonl(tdir + "/val.jsonl", td.spec.n_classes);
        td.test = load_jsonl(tdir + "/test.jsonl", td.spec.n_classes);
        tasks.push_back(std::move(td));
    }
    return tasks;
}

}  // namespace moecl
