#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/numerics/tensor.hpp"

namespace wdstagnn::evalbench {

namespace detail {

inline void check_aligned(std::span<const double> y, std::span<const double> p, const char *who) {
    if (y.size() != p.size()) {
        throw DimensionError(std::string(who) + ": length mismatch (" + std::to_string(y.size()) + " vs " +
                             std::to_string(p.size()) + ")");
    }
    if (y.empty()) {
        throw DimensionError(std::string(who) + ": empty input");
    }
}

} // namespace detail

inline double mae(std::span<const double> y, std::span<const double> p) {
    detail::check_aligned(y, p, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s += std::abs(y[i] - p[i]);
    }
    return s / static_cast<double>(y.size());
}

inline double rmse(std::span<const double> y, std::span<const double> p) {
    detail::check_aligned(y, p, "rmse");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s += (y[i] - p[i]) * (y[i] - p[i]);
    }
    return std::sqrt(s / static_cast<double>(y.size()));
}

struct MapeResult {
    double percent = 0.0;
    std::size_t excluded = 0; // entries with |y| < 1e-8
};

inline MapeResult mape(std::span<const double> y, std::span<const double> p) {
    detail::check_aligned(y, p, "mape");
    MapeResult r;
    double s = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (std::abs(y[i]) < 1e-8) {
            ++r.excluded;
            continue;
        }
        s += std::abs((y[i] - p[i]) / y[i]);
        ++used;
    }
    if (used == 0) {
        throw DataError("mape: every target is zero");
    }
    r.percent = 100.0 * s / static_cast<double>(used);
    return r;
}

struct Metrics {
    double mae = 0.0;
    double rmse = 0.0;
    double mape = 0.0;
    std::size_t mape_excluded = 0;
};

inline Metrics metrics(std::span<const double> y, std::span<const double> p) {
    const MapeResult m = mape(y, p);
    return {mae(y, p), rmse(y, p), m.percent, m.excluded};
}

/// Metrics per horizon step: slices of the last axis.
inline std::vector<Metrics> stepwise_errors(const Tensor &y, const Tensor &p) {
    y.require_same_shape(p, "stepwise_errors");
    if (y.rank() < 1) {
        throw DimensionError("stepwise_errors needs a horizon axis");
    }
    const std::size_t h = y.shape().back();
    const std::size_t rows = y.size() / h;
    std::vector<Metrics> out;
    std::vector<double> ys(rows), ps(rows);
    for (std::size_t k = 0; k < h; ++k) {
        for (std::size_t r = 0; r < rows; ++r) {
            ys[r] = y[r * h + k];
            ps[r] = p[r * h + k];
        }
        out.push_back(metrics(ys, ps));
    }
    return out;
}

/// (base − new) / base × 100.
inline double improvement(double base, double value) {
    if (!(base > 0.0)) {
        throw ParameterError("improvement needs a positive base metric");
    }
    return (base - value) / base * 100.0;
}

inline double round_to(double v, int digits) {
    const double f = std::pow(10.0, digits);
    return std::round(v * f) / f;
}

/// Upper-γ quantiles of the studentized range with infinite degrees of
/// freedom, k = 2..20 groups.
inline double studentized_range_quantile(std::size_t k, double gamma) {
    static constexpr std::array<double, 19> q01{3.6428, 4.1203, 4.4028, 4.6028, 4.7570, 4.8822, 4.9872,
                                                5.0775, 5.1566, 5.2270, 5.2902, 5.3476, 5.4001, 5.4485,
                                                5.4933, 5.5350, 5.5740, 5.6107, 5.6452};
    static constexpr std::array<double, 19> q05{2.7718, 3.3145, 3.6332, 3.8577, 4.0301, 4.1696, 4.2863,
                                                4.3865, 4.4741, 4.5519, 4.6217, 4.6849, 4.7427, 4.7959,
                                                4.8452, 4.8910, 4.9337, 4.9739, 5.0117};
    static constexpr std::array<double, 19> q10{2.3262, 2.9024, 3.2404, 3.4783, 3.6607, 3.8081, 3.9313,
                                                4.0370, 4.1293, 4.2112, 4.2846, 4.3512, 4.4119, 4.4678,
                                                4.5195, 4.5675, 4.6124, 4.6545, 4.6941};
    if (k < 2 || k > 20) {
        throw ParameterError("no built-in studentized range value for " + std::to_string(k) +
                             " models (table covers 2..20); supply the critical value explicitly");
    }
    const std::size_t i = k - 2;
    if (std::abs(gamma - 0.01) < 1e-12) {
        return q01[i];
    }
    if (std::abs(gamma - 0.05) < 1e-12) {
        return q05[i];
    }
    if (std::abs(gamma - 0.10) < 1e-12) {
        return q10[i];
    }
    throw ParameterError("no built-in studentized range value for gamma " + std::to_string(gamma) +
                         " (table covers 0.01, 0.05, 0.10); supply the critical value explicitly");
}

/// Ξ_γ = q_γ(M, ∞) / √2.
inline double mcb_critical_value(std::size_t models, double gamma) {
    return studentized_range_quantile(models, gamma) / std::sqrt(2.0);
}

/// CD = Ξ √(M(M+1) / (6D)).
inline double critical_distance(double xi, std::size_t models, std::size_t datasets) {
    if (models < 2 || datasets < 1) {
        throw ParameterError("critical distance needs at least 2 models and 1 dataset");
    }
    const double m = static_cast<double>(models);
    return xi * std::sqrt(m * (m + 1.0) / (6.0 * static_cast<double>(datasets)));
}

/// Error metric of each model (rows) on each dataset (columns).
struct ErrorTable {
    std::vector<std::string> models;
    std::vector<std::string> datasets;
    std::vector<std::vector<double>> values;

    std::size_t model_count() const { return models.size(); }
    std::size_t dataset_count() const { return datasets.size(); }
};

enum class TieRule { max_rank, midrank };

/// Ranks (1 = lowest error) of one column under the tie rule.
inline std::vector<double> rank_column(const std::vector<double> &col, TieRule rule) {
    const std::size_t m = col.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return col[a] < col[b]; });
    std::vector<double> ranks(m);
    std::size_t i = 0;
    while (i < m) {
        std::size_t j = i;
        while (j + 1 < m && col[order[j + 1]] == col[order[i]]) {
            ++j;
        }
        const double r = rule == TieRule::max_rank ? static_cast<double>(j + 1) : 0.5 * static_cast<double>(i + j + 2);
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    return ranks;
}

struct McbResult {
    std::vector<std::vector<double>> ranks; // models × datasets
    std::vector<double> mean_rank;
    std::vector<double> lo, hi; // mean rank ∓ CD/2
    std::vector<bool> significant; // interval entirely above the best model's
    std::size_t best = 0;
    double critical_value = 0.0; // Ξ_γ
    double gamma = 0.05;
    double cd = 0.0;
};

/// Multiple comparisons with the best. `critical_value` overrides the
/// table lookup when positive.
inline McbResult mcb(const ErrorTable &table, double gamma = 0.05, TieRule rule = TieRule::max_rank,
                     double critical_value = 0.0) {
    const std::size_t m = table.model_count(), d = table.dataset_count();
    if (m < 2 || d < 1) {
        throw ParameterError("mcb needs at least 2 models and 1 dataset");
    }
    if (table.values.size() != m) {
        throw DimensionError("mcb: value rows do not match the model list");
    }
    for (const auto &row : table.values) {
        if (row.size() != d) {
            throw DimensionError("mcb: value columns do not match the dataset list");
        }
        for (double v : row) {
            if (!std::isfinite(v)) {
                throw DataError("mcb: non-finite error entry");
            }
        }
    }
    McbResult r;
    r.gamma = gamma;
    r.critical_value = critical_value > 0.0 ? critical_value : mcb_critical_value(m, gamma);
    r.cd = critical_distance(r.critical_value, m, d);
    r.ranks.assign(m, std::vector<double>(d));
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> col(m);
        for (std::size_t i = 0; i < m; ++i) {
            col[i] = table.values[i][j];
        }
        const auto rk = rank_column(col, rule);
        for (std::size_t i = 0; i < m; ++i) {
            r.ranks[i][j] = rk[i];
        }
    }
    r.mean_rank.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        r.mean_rank[i] = std::accumulate(r.ranks[i].begin(), r.ranks[i].end(), 0.0) / static_cast<double>(d);
        r.lo.push_back(r.mean_rank[i] - r.cd / 2.0);
        r.hi.push_back(r.mean_rank[i] + r.cd / 2.0);
    }
    r.best = static_cast<std::size_t>(std::min_element(r.mean_rank.begin(), r.mean_rank.end()) - r.mean_rank.begin());
    for (std::size_t i = 0; i < m; ++i) {
        r.significant.push_back(r.lo[i] > r.hi[r.best]);
    }
    return r;
}

} // namespace wdstagnn::evalbench
