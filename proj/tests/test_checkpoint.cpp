#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "moecl/checkpoint.hpp"
#include "moecl/data.hpp"
#include "moecl/model.hpp"
#include "moecl/trainer.hpp"

using namespace moecl;

namespace fs = std::filesystem;

namespace {

std::string scratch_path(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "moecl_ckpt_test";
    fs::create_directories(dir);
    return (dir / name).string();
}

SynthConfig tiny_synth() {
    SynthConfig s;
    s.n_tasks = 2;
    s.task_band = 12;
    s.shared_band = 8;
    s.sentence_len = 8;
    s.train_per_task = 24;
    s.val_per_task = 8;
    s.test_per_task = 16;
    s.seed = 33;
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
    c.seed = 9;
    return c;
}

TrainConfig fast_train() {
    TrainConfig t;
    t.lr = 5e-3;
    t.epochs = 1;
    t.batch_size = 8;
    t.seed = 4;
    return t;
}

template <typename S>
std::map<std::string, uint64_t> hash_map(ModelState<S>& st) {
    std::map<std::string, uint64_t> out;
    for (const auto& [name, h] : state_hashes(st)) out[name] = h;
    return out;
}

// Flips one byte of a file at the given offset.
void corrupt_byte(const std::string& path, std::streamoff offset, char value) {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    REQUIRE(f.good());
    f.seekp(offset);
    f.put(value);
}

void truncate_file(const std::string& path, std::uintmax_t keep) {
    fs::resize_file(path, keep);
}

}  // namespace

TEMPLATE_TEST_CASE("a trained snapshot reloads bit-for-bit", "", float, double) {
    using S = TestType;
    auto tasks = gen_synthetic_tasks(tiny_synth());
    Trainer<S> tr = make_trainer<S>(tiny_model(), Method::moe_cl, fast_train(), tasks);
    train_task(tr, tasks[0], 0);
    tr.phases_done = 1;

    const std::string path = scratch_path(std::string("trained_") + (sizeof(S) == 4 ? "f32" : "f64") + ".ckpt");
    save_checkpoint(path, tr);
    Trainer<S> back = load_checkpoint<S>(path);

    CHECK(back.model.method == tr.model.method);
    CHECK(back.phases_done == 1);
    CHECK(back.model.config.hidden == tr.model.config.hidden);
    CHECK(back.model.config.classes_per_task == tr.model.config.classes_per_task);
    CHECK(back.model.vocab.tokens() == tr.model.vocab.tokens());
    CHECK(back.tcfg.lr == tr.tcfg.lr);
    CHECK(back.tcfg.optimizer == tr.tcfg.optimizer);
    CHECK(hash_map(back.model) == hash_map(tr.model));

    REQUIRE(back.slots.size() == tr.slots.size());
    for (const auto& [name, slot] : tr.slots) {
        auto it = back.slots.find(name);
        REQUIRE(it != back.slots.end());
        CHECK(it->second.steps == slot.steps);
        CHECK(it->second.m.bit_equal(slot.m));
        CHECK(it->second.v.bit_equal(slot.v));
    }

    // Inference through the reloaded model matches exactly.
    for (int t = 0; t < 2; ++t)
        CHECK(evaluate(back.model, tasks[static_cast<size_t>(t)].test, t) ==
              evaluate(tr.model, tasks[static_cast<size_t>(t)].test, t));
}

TEST_CASE("training resumed from a snapshot matches uninterrupted training") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    Trainer<double> a = make_trainer<double>(tiny_model(), Method::moe_cl, fast_train(), tasks);
    train_task(a, tasks[0], 0);
    a.phases_done = 1;

    const std::string path = scratch_path("resume.ckpt");
    save_checkpoint(path, a);
    Trainer<double> b = load_checkpoint<double>(path);

    train_task(a, tasks[1], 1);
    train_task(b, tasks[1], 1);
    CHECK(hash_map(a.model) == hash_map(b.model));
}

TEST_CASE("checkpoint loader rejects damaged files") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    Trainer<double> tr = make_trainer<double>(tiny_model(), Method::moe_cl, fast_train(), tasks);
    const std::string base = scratch_path("damage.ckpt");
    save_checkpoint(base, tr);
    CHECK_NOTHROW(load_checkpoint<double>(base));

    SECTION("missing file") {
        CHECK_THROWS_AS(load_checkpoint<double>(scratch_path("nothing.ckpt")), DataError);
    }
    SECTION("bad magic") {
        corrupt_byte(base, 0, 'X');
        CHECK_THROWS_AS(load_checkpoint<double>(base), FormatError);
    }
    SECTION("unsupported version") {
        corrupt_byte(base, 5, 2);
        CHECK_THROWS_AS(load_checkpoint<double>(base), FormatError);
    }
    SECTION("truncated header") {
        truncate_file(base, 12);
        CHECK_THROWS_AS(load_checkpoint<double>(base), FormatError);
    }
    SECTION("truncated payload") {
        truncate_file(base, fs::file_size(base) - 16);
        CHECK_THROWS_AS(load_checkpoint<double>(base), FormatError);
    }
    SECTION("scalar width mismatch") {
        CHECK_THROWS_AS(load_checkpoint<float>(base), FormatError);
    }
}

TEST_CASE("checkpoint stores the task order inside the train config") {
    auto tasks = gen_synthetic_tasks(tiny_synth());
    TrainConfig tc = fast_train();
    tc.order = {1, 0};
    tc.optimizer = "sgd";
    Trainer<double> tr = make_trainer<double>(tiny_model(), Method::sequential_ft, tc, tasks);
    const std::string path = scratch_path("order.ckpt");
    save_checkpoint(path, tr);
    Trainer<double> back = load_checkpoint<double>(path);
    CHECK(back.tcfg.order == std::vector<int>{1, 0});
    CHECK(back.tcfg.optimizer == "sgd");
    CHECK(back.model.method == Method::sequential_ft);
}
