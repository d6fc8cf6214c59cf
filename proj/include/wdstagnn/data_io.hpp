#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/numerics/tensor.hpp"

namespace wdstagnn::data_io {

/// Shape and provenance of a traffic dataset.
struct DatasetDescriptor {
    std::string name;
    std::size_t nodes = 0;
    std::size_t observations = 0;
    std::size_t granularity_minutes = 5;
    std::string time_range; // free text, empty when unknown

    std::size_t span_minutes() const { return observations * granularity_minutes; }
};

inline const std::vector<DatasetDescriptor> &known_datasets() {
    static const std::vector<DatasetDescriptor> table{
        {"PeMS-BAY", 325, 52116, 5, "2017-01-01 to 2017-05-31"},
        {"PeMS03", 358, 26209, 5, "2018-09-01 to 2018-11-30"},
        {"PeMS04", 307, 16992, 5, "2018-01-01 to 2018-02-28"},
    };
    return table;
}

inline std::optional<DatasetDescriptor> find_dataset(std::string_view name) {
    for (const auto &d : known_datasets()) {
        if (d.name == name) {
            return d;
        }
    }
    return std::nullopt;
}

/// 12 significant digits.
inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) {
        ++b;
    }
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_cells(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) {
            break;
        }
        start = comma + 1;
    }
    return out;
}

} // namespace detail

/// Header plus rectangular rows of raw cells, with 1-based file line numbers.
struct CsvTable {
    std::string path;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> lines;

    /// Parses a cell as a number, reporting its location on failure.
    double number(std::size_t row, std::size_t col) const {
        const std::string &cell = rows.at(row).at(col);
        double v = 0.0;
        const char *first = cell.data();
        const char *last = cell.data() + cell.size();
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (cell.empty() || ec != std::errc() || ptr != last) {
            throw DataError(path + ": line " + std::to_string(lines[row]) + ", column " + std::to_string(col + 1) +
                            ": '" + cell + "' is not a number");
        }
        return v;
    }

    double finite_number(std::size_t row, std::size_t col) const {
        const double v = number(row, col);
        if (!std::isfinite(v)) {
            throw DataError(path + ": line " + std::to_string(lines[row]) + ", column " + std::to_string(col + 1) +
                            ": value is not finite");
        }
        return v;
    }
};

inline CsvTable read_csv(const std::string &path, bool has_header = true) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open '" + path + "'");
    }
    CsvTable t;
    t.path = path;
    std::string line;
    std::size_t lineno = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) {
            continue;
        }
        auto cells = detail::split_cells(line);
        if (has_header && t.header.empty() && t.rows.empty()) {
            t.header = std::move(cells);
            width = t.header.size();
            continue;
        }
        if (width == 0) {
            width = cells.size();
        }
        if (cells.size() != width) {
            throw DataError(path + ": line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                            " cells, expected " + std::to_string(width));
        }
        t.rows.push_back(std::move(cells));
        t.lines.push_back(lineno);
    }
    if (has_header && t.header.empty()) {
        throw DataError(path + ": missing header row");
    }
    return t;
}

struct LoadedSeries {
    Tensor series; // (N, 1, M)
    DatasetDescriptor descriptor;
    std::vector<std::string> sensor_ids;
};

/// Sensor-per-column CSV: header of sensor ids, one row per time step.
inline LoadedSeries load_csv(const std::string &path, std::size_t granularity_minutes = 5) {
    const CsvTable t = read_csv(path);
    const std::size_t n = t.header.size(), m = t.rows.size();
    if (m == 0) {
        throw DataError(path + ": no observations");
    }
    Tensor x({n, 1, m});
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            x[c * m + r] = t.finite_number(r, c);
        }
    }
    DatasetDescriptor d;
    d.name = std::filesystem::path(path).stem().string();
    d.nodes = n;
    d.observations = m;
    d.granularity_minutes = granularity_minutes;
    return {std::move(x), std::move(d), t.header};
}

inline std::ofstream open_output(const std::string &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write '" + path + "'");
    }
    return out;
}

/// Writes an (N, 1, M) or (N, M) series in the load_csv layout.
inline void save_csv(const std::string &path, const Tensor &series, std::vector<std::string> ids = {}) {
    if (!(series.rank() == 3 && series.dim(1) == 1) && series.rank() != 2) {
        throw DimensionError("save_csv expects (N, 1, M) or (N, M), got " + shape_str(series.shape()));
    }
    const std::size_t n = series.dim(0), m = series.shape().back();
    if (ids.empty()) {
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back("s" + std::to_string(i));
        }
    }
    if (ids.size() != n) {
        throw DimensionError("save_csv: " + std::to_string(ids.size()) + " ids for " + std::to_string(n) + " nodes");
    }
    std::ofstream out = open_output(path);
    for (std::size_t i = 0; i < n; ++i) {
        out << (i ? "," : "") << ids[i];
    }
    out << '\n';
    for (std::size_t t = 0; t < m; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            out << (i ? "," : "") << format_number(series[i * m + t]);
        }
        out << '\n';
    }
}

/// Rows × columns matrix without a header.
inline void save_matrix(const std::string &path, const Tensor &matrix) {
    if (matrix.rank() != 2) {
        throw DimensionError("save_matrix expects a matrix, got " + shape_str(matrix.shape()));
    }
    std::ofstream out = open_output(path);
    for (std::size_t r = 0; r < matrix.dim(0); ++r) {
        for (std::size_t c = 0; c < matrix.dim(1); ++c) {
            out << (c ? "," : "") << format_number(matrix(r, c));
        }
        out << '\n';
    }
}

inline Tensor load_matrix(const std::string &path) {
    const CsvTable t = read_csv(path, false);
    if (t.rows.empty()) {
        throw DataError(path + ": empty matrix");
    }
    Tensor out({t.rows.size(), t.rows.front().size()});
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        for (std::size_t c = 0; c < t.rows[r].size(); ++c) {
            out(r, c) = t.finite_number(r, c);
        }
    }
    return out;
}

/// Forecasts over W windows: y and pred are (W, N, H); t holds the absolute
/// time index of each window's first target step.
struct ForecastSet {
    std::vector<std::size_t> t;
    Tensor y, pred;
    std::optional<Tensor> lo, hi;

    std::size_t windows() const { return t.size(); }
};

/// CSV columns t, node, step, y, pred[, lo, hi]; step is 1-based.
inline void save_forecasts(const std::string &path, const ForecastSet &f) {
    const bool intervals = f.lo.has_value() || f.hi.has_value();
    if (intervals && !(f.lo && f.hi)) {
        throw DimensionError("save_forecasts: lo and hi must be supplied together");
    }
    if (!f.t.empty()) {
        f.y.require_same_shape(f.pred, "save_forecasts");
        if (f.y.rank() != 3 || f.y.dim(0) != f.t.size()) {
            throw DimensionError("save_forecasts: expected (W, N, H) tensors aligned with the time index");
        }
        if (intervals) {
            f.y.require_same_shape(*f.lo, "save_forecasts lo");
            f.y.require_same_shape(*f.hi, "save_forecasts hi");
        }
    }
    std::ofstream out = open_output(path);
    out << "t,node,step,y,pred" << (intervals ? ",lo,hi" : "") << '\n';
    if (f.t.empty()) {
        return;
    }
    const std::size_t n = f.y.dim(1), h = f.y.dim(2);
    for (std::size_t w = 0; w < f.t.size(); ++w) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < h; ++k) {
                const std::size_t idx = (w * n + i) * h + k;
                out << f.t[w] << ',' << i << ',' << (k + 1) << ',' << format_number(f.y[idx]) << ','
                    << format_number(f.pred[idx]);
                if (intervals) {
                    out << ',' << format_number((*f.lo)[idx]) << ',' << format_number((*f.hi)[idx]);
                }
                out << '\n';
            }
        }
    }
}

/// Reads a save_forecasts file back; the (window, node, step) grid must be complete.
inline ForecastSet load_forecasts(const std::string &path) {
    const CsvTable t = read_csv(path);
    const std::vector<std::string> base{"t", "node", "step", "y", "pred"};
    const bool intervals = t.header.size() == 7;
    if (t.header.size() < 5 || !std::equal(base.begin(), base.end(), t.header.begin()) ||
        (intervals && (t.header[5] != "lo" || t.header[6] != "hi")) || (t.header.size() != 5 && !intervals)) {
        throw DataError(path + ": expected columns t,node,step,y,pred[,lo,hi]");
    }
    ForecastSet f;
    if (t.rows.empty()) {
        return f;
    }
    auto index = [&](std::size_t r, std::size_t c) {
        const double v = t.finite_number(r, c);
        if (v < 0 || v != std::floor(v)) {
            throw DataError(path + ": line " + std::to_string(t.lines[r]) + ", column " + std::to_string(c + 1) +
                            ": expected a non-negative integer");
        }
        return static_cast<std::size_t>(v);
    };
    std::size_t n = 0, h = 0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        n = std::max(n, index(r, 1) + 1);
        h = std::max(h, index(r, 2));
    }
    if (h == 0 || t.rows.size() % (n * h) != 0) {
        throw DataError(path + ": rows do not form a complete window × node × step grid");
    }
    const std::size_t w = t.rows.size() / (n * h);
    f.y = Tensor({w, n, h});
    f.pred = Tensor({w, n, h});
    if (intervals) {
        f.lo = Tensor({w, n, h});
        f.hi = Tensor({w, n, h});
    }
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::size_t win = r / (n * h), node = index(r, 1), step = index(r, 2);
        if (node != (r / h) % n || step != r % h + 1) {
            throw DataError(path + ": line " + std::to_string(t.lines[r]) + ": rows out of window/node/step order");
        }
        if (node == 0 && step == 1) {
            f.t.push_back(index(r, 0));
        } else if (index(r, 0) != f.t[win]) {
            throw DataError(path + ": line " + std::to_string(t.lines[r]) + ": inconsistent time index");
        }
        const std::size_t k = (win * n + node) * h + step - 1;
        f.y[k] = t.finite_number(r, 3);
        f.pred[k] = t.finite_number(r, 4);
        if (intervals) {
            (*f.lo)[k] = t.number(r, 5);
            (*f.hi)[k] = t.number(r, 6);
        }
    }
    return f;
}

/// Seeded synthetic traffic with daily seasonality and graph coupling.
struct SyntheticData {
    Tensor series;   // (N, 1, steps), strictly positive
    Tensor coupling; // (N, N) symmetric 0/1 adjacency of the coupling graph
};

inline constexpr std::size_t kStepsPerDay = 288;

inline SyntheticData synthetic(std::size_t nodes, std::size_t steps, std::uint64_t seed) {
    if (nodes < 2) {
        throw ParameterError("synthetic data needs at least 2 nodes");
    }
    if (steps < 2 * kStepsPerDay) {
        throw ParameterError("synthetic data needs at least " + std::to_string(2 * kStepsPerDay) + " steps");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double two_pi = 2.0 * std::acos(-1.0);

    Tensor adj({nodes, nodes});
    for (std::size_t i = 0; i < nodes; ++i) {
        std::size_t j = static_cast<std::size_t>(unit(rng) * static_cast<double>(nodes - 1));
        j = std::min(j, nodes - 2);
        j += j >= i ? 1 : 0;
        adj(i, j) = adj(j, i) = 1.0;
    }
    // row-normalised diffusion operator
    Tensor p({nodes, nodes});
    for (std::size_t i = 0; i < nodes; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < nodes; ++j) {
            deg += adj(i, j);
        }
        for (std::size_t j = 0; j < nodes; ++j) {
            p(i, j) = adj(i, j) / deg;
        }
    }
    std::vector<double> phase(nodes), amp(nodes), level(nodes), scale(nodes);
    for (std::size_t i = 0; i < nodes; ++i) {
        phase[i] = two_pi * unit(rng);
        amp[i] = 1.0 + unit(rng);
        level[i] = 2.5 + 1.5 * unit(rng);
        scale[i] = 8.0 + 4.0 * unit(rng);
    }
    constexpr double kappa = 0.8, rho = 0.85, diffusion = 0.1, shock = 0.25, noise = 0.1;
    SyntheticData out{Tensor({nodes, 1, steps}), adj};
    std::vector<double> season(nodes), z(nodes, 0.0), next(nodes);
    for (std::size_t t = 0; t < steps; ++t) {
        const double w = two_pi * static_cast<double>(t) / static_cast<double>(kStepsPerDay);
        for (std::size_t i = 0; i < nodes; ++i) {
            season[i] = amp[i] * (std::sin(w + phase[i]) + 0.35 * std::sin(2.0 * w + 2.0 * phase[i]));
        }
        for (std::size_t i = 0; i < nodes; ++i) {
            double spread = 0.0;
            for (std::size_t j = 0; j < nodes; ++j) {
                spread += p(i, j) * z[j];
            }
            next[i] = rho * z[i] + diffusion * spread + shock * gauss(rng);
        }
        z.swap(next);
        for (std::size_t i = 0; i < nodes; ++i) {
            double mixed = season[i];
            for (std::size_t j = 0; j < nodes; ++j) {
                mixed += kappa * p(i, j) * season[j];
            }
            const double raw = level[i] + mixed + z[i] + noise * gauss(rng);
            // softplus keeps volumes strictly positive
            const double soft = raw > 30.0 ? raw : std::log1p(std::exp(raw));
            out.series[i * steps + t] = scale[i] * std::max(soft, 1e-6);
        }
    }
    return out;
}

} // namespace wdstagnn::data_io
