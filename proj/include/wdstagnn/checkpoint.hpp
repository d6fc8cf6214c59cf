#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "wdstagnn/config.hpp"
#include "wdstagnn/error.hpp"
#include "wdstagnn/graph.hpp"
#include "wdstagnn/model.hpp"
#include "wdstagnn/training.hpp"

namespace wdstagnn::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[8] = {'W', 'D', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

/// A trained network plus what forecasting needs: normalization statistics
/// and the stored sensor graph.
struct Checkpoint {
    config::RunConfig config;
    ParameterStore params;
    training::NormalizationStats stats;
    Tensor strg_mask;
    Tensor stag;

    model::Network network() const {
        model::Network net{config.model, graph::graph_from_parts(strg_mask, stag, config.model.cheb_order), params};
        net.config.nodes = stag.dim(0);
        return net;
    }
};

namespace detail {

template <typename T>
void put(std::ofstream &out, T v) {
    out.write(reinterpret_cast<const char *>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream &in, const std::string &path) {
    T v{};
    if (!in.read(reinterpret_cast<char *>(&v), sizeof v)) {
        throw DataError(path + ": truncated checkpoint");
    }
    return v;
}

inline void put_tensor(std::ofstream &out, const std::string &name, const Tensor &t) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        put<std::uint64_t>(out, d);
    }
    out.write(reinterpret_cast<const char *>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

} // namespace detail

inline void save(const std::string &path, const Checkpoint &c) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write checkpoint '" + path + "'");
    }
    out.write(kMagic, sizeof kMagic);
    detail::put<std::uint32_t>(out, kVersion);
    const std::string text = config::to_text(c.config);
    detail::put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const std::size_t n = c.stats.nodes();
    detail::put<std::uint64_t>(out, c.params.size() + 4);
    for (const auto &[name, t] : c.params) {
        detail::put_tensor(out, name, t);
    }
    detail::put_tensor(out, "norm.mean", Tensor({n}, c.stats.mean));
    detail::put_tensor(out, "norm.std", Tensor({n}, c.stats.std));
    detail::put_tensor(out, "graph.strg", c.strg_mask);
    detail::put_tensor(out, "graph.stag", c.stag);
    if (!out) {
        throw DataError("failed writing checkpoint '" + path + "'");
    }
}

inline Checkpoint load(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint '" + path + "'");
    }
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw DataError(path + ": not a checkpoint file");
    }
    if (const auto v = detail::get<std::uint32_t>(in, path); v != kVersion) {
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(v));
    }
    Checkpoint c;
    const auto text_len = detail::get<std::uint64_t>(in, path);
    std::string text(text_len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(text_len))) {
        throw DataError(path + ": truncated checkpoint");
    }
    config::apply_text(c.config, text, path);
    const auto count = detail::get<std::uint64_t>(in, path);
    std::map<std::string, Tensor> extra;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::get<std::uint32_t>(in, path);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) {
            throw DataError(path + ": truncated checkpoint");
        }
        const auto rank = detail::get<std::uint32_t>(in, path);
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) {
            shape.push_back(detail::get<std::uint64_t>(in, path));
        }
        Tensor t(shape);
        if (!in.read(reinterpret_cast<char *>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
            throw DataError(path + ": truncated checkpoint");
        }
        if (name.rfind("norm.", 0) == 0 || name.rfind("graph.", 0) == 0) {
            extra.emplace(name, std::move(t));
        } else {
            c.params.emplace(name, std::move(t));
        }
    }
    for (const char *key : {"norm.mean", "norm.std", "graph.strg", "graph.stag"}) {
        if (!extra.count(key)) {
            throw DataError(path + ": checkpoint lacks '" + key + "'");
        }
    }
    const auto mean = extra.at("norm.mean").values();
    const auto sd = extra.at("norm.std").values();
    c.stats.mean.assign(mean.begin(), mean.end());
    c.stats.std.assign(sd.begin(), sd.end());
    c.strg_mask = extra.at("graph.strg");
    c.stag = extra.at("graph.stag");
    c.config.model.nodes = c.stag.dim(0);
    model::check_parameters(c.config.model, c.params);
    return c;
}

} // namespace wdstagnn::checkpoint
