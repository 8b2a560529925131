#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moecl/config.hpp"
#include "moecl/errors.hpp"
#include "moecl/model.hpp"
#include "moecl/trainer.hpp"

// Trainer snapshots. Layout: 5-byte magic "MOECL", one version byte, a 4-byte
// little-endian header length, a JSON header, then the tensor payload. The
// header carries the configs, the method, the vocab, the phase counter, and a
// manifest naming every tensor with its shape and byte range; the payload is
// the tensors' scalars in manifest order, each encoded little-endian. Optimizer
// moments ride along as "opt.m.<name>" / "opt.v.<name>" entries so a reloaded
// trainer resumes bit-for-bit.

namespace moecl {

namespace detail {

constexpr char kCkptMagic[5] = {'M', 'O', 'E', 'C', 'L'};
constexpr uint8_t kCkptVersion = 1;

template <typename S>
const char* dtype_name() {
    if constexpr (sizeof(S) == 4)
        return "f32";
    else
        return "f64";
}

template <typename S>
void append_scalars(std::string& out, const Tensor<S>& t) {
    using U = std::conditional_t<sizeof(S) == 4, uint32_t, uint64_t>;
    for (int64_t i = 0; i < t.numel(); ++i) {
        const U bits = std::bit_cast<U>(t.data()[i]);
        for (size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
}

template <typename S>
void read_scalars(const std::string& payload, size_t offset, Tensor<S>& t) {
    using U = std::conditional_t<sizeof(S) == 4, uint32_t, uint64_t>;
    const size_t need = static_cast<size_t>(t.numel()) * sizeof(U);
    if (offset + need > payload.size())
        throw FormatError("checkpoint payload truncated (need " + std::to_string(offset + need) + " bytes, have " +
                          std::to_string(payload.size()) + ")");
    for (int64_t i = 0; i < t.numel(); ++i) {
        U bits = 0;
        for (size_t b = 0; b < sizeof(U); ++b)
            bits |= static_cast<U>(static_cast<unsigned char>(payload[offset + static_cast<size_t>(i) * sizeof(U) + b]))
                    << (8 * b);
        t.data()[i] = std::bit_cast<S>(bits);
    }
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, Trainer<S>& tr) {
    nlohmann::json header;
    header["dtype"] = detail::dtype_name<S>();
    header["method"] = method_name(tr.model.method);
    header["phases_done"] = tr.phases_done;
    header["model_config"] = model_config_json(tr.model.config);
    header["train_config"] = train_config_json(tr.tcfg);
    header["vocab"] = tr.model.vocab.tokens();

    std::string payload;
    nlohmann::json manifest = nlohmann::json::array();
    auto add_entry = [&](const std::string& name, const Tensor<S>& t) {
        const size_t offset = payload.size();
        detail::append_scalars(payload, t);
        manifest.push_back({{"name", name},
                            {"rows", t.rows()},
                            {"cols", t.cols()},
                            {"offset", offset},
                            {"bytes", payload.size() - offset}});
    };
    enumerate_params(tr.model, [&](const std::string& name, const ParamTag&, Tensor<S>& t) { add_entry(name, t); });
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& [name, slot] : tr.slots) {
        add_entry("opt.m." + name, slot.m);
        add_entry("opt.v." + name, slot.v);
        slots.push_back({{"name", name}, {"steps", slot.steps}});
    }
    header["tensors"] = std::move(manifest);
    header["slots"] = std::move(slots);

    const std::string head = header.dump();
    if (head.size() > 0xffffffffull) throw FormatError("checkpoint header too large");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(detail::kCkptMagic, 5);
    out.put(static_cast<char>(detail::kCkptVersion));
    const uint32_t hlen = static_cast<uint32_t>(head.size());
    char lenbuf[4];
    for (int b = 0; b < 4; ++b) lenbuf[b] = static_cast<char>((hlen >> (8 * b)) & 0xff);
    out.write(lenbuf, 4);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("write failed for " + path);
}

template <typename S>
Trainer<S> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() < 10) throw FormatError(path + ": too short to be a checkpoint");
    if (std::memcmp(blob.data(), detail::kCkptMagic, 5) != 0) throw FormatError(path + ": bad magic, not a checkpoint");
    const uint8_t version = static_cast<uint8_t>(blob[5]);
    if (version != detail::kCkptVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    uint32_t hlen = 0;
    for (int b = 0; b < 4; ++b) hlen |= static_cast<uint32_t>(static_cast<unsigned char>(blob[6 + b])) << (8 * b);
    if (blob.size() < 10 + static_cast<size_t>(hlen)) throw FormatError(path + ": header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(10, hlen));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path + ": header is not valid JSON: " + e.what());
    }
    const std::string payload = blob.substr(10 + static_cast<size_t>(hlen));

    const std::string dtype = header.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<S>())
        throw FormatError(path + ": checkpoint holds " + dtype + " tensors, expected " + detail::dtype_name<S>());

    Trainer<S> tr;
    const ModelConfig cfg = model_config_from_json(header.at("model_config"));
    const Method method = method_from_name(header.at("method").get<std::string>());
    tr.model = init_model<S>(cfg, method);
    tr.model.vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    if (tr.model.vocab.size() != cfg.vocab_size)
        throw FormatError(path + ": vocab has " + std::to_string(tr.model.vocab.size()) + " tokens, config says " +
                          std::to_string(cfg.vocab_size));
    tr.tcfg = train_config_from_json(header.at("train_config"));
    tr.phases_done = header.at("phases_done").get<int64_t>();

    std::map<std::string, Tensor<S>*> by_name;
    enumerate_params(tr.model, [&](const std::string& name, const ParamTag&, Tensor<S>& t) { by_name[name] = &t; });
    for (const auto& js : header.at("slots")) {
        AdamSlot<S>& slot = tr.slots[js.at("name").get<std::string>()];
        slot.steps = js.at("steps").get<int64_t>();
    }

    for (const auto& jt : header.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        const int64_t rows = jt.at("rows").get<int64_t>();
        const int64_t cols = jt.at("cols").get<int64_t>();
        const size_t offset = jt.at("offset").get<size_t>();
        Tensor<S>* dst = nullptr;
        if (name.rfind("opt.m.", 0) == 0 || name.rfind("opt.v.", 0) == 0) {
            const std::string base = name.substr(6);
            auto it = tr.slots.find(base);
            if (it == tr.slots.end()) throw FormatError(path + ": optimizer tensor " + name + " has no slot entry");
            Tensor<S>& moment = name[4] == 'm' ? it->second.m : it->second.v;
            moment = Tensor<S>(rows, cols);
            dst = &moment;
        } else {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw FormatError(path + ": unknown tensor " + name);
            if (it->second->rows() != rows || it->second->cols() != cols)
                throw FormatError(path + ": tensor " + name + " is " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + " on disk but " + it->second->shape_string() + " in the model");
            dst = it->second;
        }
        const size_t bytes = jt.at("bytes").get<size_t>();
        if (bytes != static_cast<size_t>(dst->numel()) * sizeof(S))
            throw FormatError(path + ": tensor " + name + " has inconsistent byte length");
        detail::read_scalars(payload, offset, *dst);
    }
    return tr;
}

}  // namespace moecl
