#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/model.hpp"
#include "wdstagnn/training.hpp"

namespace wdstagnn::config {

/// Everything a run needs besides the data: model, optimiser, split,
/// window and graph settings.
struct RunConfig {
    model::ModelConfig model;
    training::TrainConfig train;
    training::SplitSpec split;
    training::WindowSpec window;
    double p_sp = 0.01;
    std::size_t stad_window = 0; // 0: the whole training split
};

namespace detail {

inline std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string &key, const std::string &v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
        throw ParameterError("config key '" + key + "': '" + v + "' is not a number");
    }
    return out;
}

inline std::uint64_t to_uint(const std::string &key, const std::string &v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
        throw ParameterError("config key '" + key + "': '" + v + "' is not a non-negative integer");
    }
    return out;
}

inline std::vector<std::string> split_list(const std::string &v, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, sep)) {
        out.push_back(trim(item));
    }
    return out;
}

inline std::string exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace detail

/// Sets one field from its textual value.
inline void set_value(RunConfig &c, const std::string &key, const std::string &value) {
    using detail::to_double;
    using detail::to_uint;
    auto &m = c.model;
    auto &t = c.train;
    if (key == "blocks") {
        m.blocks = to_uint(key, value);
    } else if (key == "d_model") {
        m.d_model = to_uint(key, value);
    } else if (key == "heads") {
        m.heads = to_uint(key, value);
    } else if (key == "level") {
        m.level = static_cast<int>(to_uint(key, value));
    } else if (key == "filter") {
        m.filter = value;
    } else if (key == "cheb_order") {
        m.cheb_order = to_uint(key, value);
    } else if (key == "kernels") {
        m.kernels.clear();
        for (const auto &k : detail::split_list(value, ',')) {
            m.kernels.push_back(to_uint(key, k));
        }
    } else if (key == "pool") {
        m.pool = to_uint(key, value);
    } else if (key == "channels") {
        m.channels = to_uint(key, value);
    } else if (key == "input_len") {
        m.input_len = to_uint(key, value);
        c.window.input = m.input_len;
    } else if (key == "horizon") {
        m.horizon = to_uint(key, value);
        c.window.horizon = m.horizon;
    } else if (key == "ln_eps") {
        m.ln_eps = to_double(key, value);
    } else if (key == "epochs") {
        t.epochs = to_uint(key, value);
    } else if (key == "learning_rate") {
        t.learning_rate = to_double(key, value);
    } else if (key == "batch_size") {
        t.batch_size = to_uint(key, value);
    } else if (key == "huber_delta") {
        t.huber_delta = to_double(key, value);
    } else if (key == "seed") {
        t.seed = to_uint(key, value);
    } else if (key == "patience") {
        t.patience = to_uint(key, value);
    } else if (key == "micro_batch") {
        t.micro_batch = to_uint(key, value);
    } else if (key == "split") {
        const auto parts = detail::split_list(value, ':');
        if (parts.size() != 3) {
            throw ParameterError("config key 'split' expects a:b:c, got '" + value + "'");
        }
        c.split = training::SplitSpec::ratio(to_double(key, parts[0]), to_double(key, parts[1]),
                                             to_double(key, parts[2]));
    } else if (key == "p_sp") {
        c.p_sp = to_double(key, value);
    } else if (key == "stad_window") {
        c.stad_window = to_uint(key, value);
    } else if (key == "stride") {
        c.window.stride = to_uint(key, value);
    } else {
        throw ParameterError("unknown config key '" + key + "'");
    }
}

/// key=value lines; '#' starts a comment.
inline void apply_text(RunConfig &c, const std::string &text, const std::string &origin = "config") {
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.resize(hash);
        }
        line = detail::trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParameterError(origin + ": line " + std::to_string(lineno) + ": expected key=value");
        }
        try {
            set_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ParameterError &e) {
            throw ParameterError(origin + ": line " + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_file(const std::string &path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open config '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    apply_text(base, ss.str(), path);
    return base;
}

/// Canonical key=value text; apply_text(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig &c) {
    std::ostringstream o;
    const auto &m = c.model;
    const auto &t = c.train;
    o << "blocks=" << m.blocks << '\n'
      << "d_model=" << m.d_model << '\n'
      << "heads=" << m.heads << '\n'
      << "level=" << m.level << '\n'
      << "filter=" << m.filter << '\n'
      << "cheb_order=" << m.cheb_order << '\n'
      << "kernels=";
    for (std::size_t i = 0; i < m.kernels.size(); ++i) {
        o << (i ? "," : "") << m.kernels[i];
    }
    o << '\n'
      << "pool=" << m.pool << '\n'
      << "channels=" << m.channels << '\n'
      << "input_len=" << m.input_len << '\n'
      << "horizon=" << m.horizon << '\n'
      << "ln_eps=" << detail::exact(m.ln_eps) << '\n'
      << "epochs=" << t.epochs << '\n'
      << "learning_rate=" << detail::exact(t.learning_rate) << '\n'
      << "batch_size=" << t.batch_size << '\n'
      << "huber_delta=" << detail::exact(t.huber_delta) << '\n'
      << "seed=" << t.seed << '\n'
      << "patience=" << t.patience << '\n'
      << "micro_batch=" << t.micro_batch << '\n'
      << "split=" << detail::exact(c.split.train) << ':' << detail::exact(c.split.val) << ':'
      << detail::exact(c.split.test) << '\n'
      << "p_sp=" << detail::exact(c.p_sp) << '\n'
      << "stad_window=" << c.stad_window << '\n'
      << "stride=" << c.window.stride << '\n';
    return o.str();
}

} // namespace wdstagnn::config
