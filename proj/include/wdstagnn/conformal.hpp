#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/numerics/tensor.hpp"

namespace wdstagnn::conformal {

inline constexpr double kXiFloor = 1e-8;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// W = |y − pred| / ξ.
inline double conformal_score(double y, double pred, double xi) {
    if (!(xi > 0.0)) {
        throw ParameterError("conformal score needs a positive uncertainty scale, got " + std::to_string(xi));
    }
    return std::abs(y - pred) / xi;
}

/// The ⌈(1−β)(n+1)⌉-th smallest score, or +∞ when that rank exceeds n.
inline double weighted_quantile(std::span<const double> scores, double beta) {
    if (scores.empty()) {
        throw ParameterError("conformal quantile of an empty score window");
    }
    if (!(beta > 0.0 && beta < 1.0)) {
        throw ParameterError("miscoverage beta must lie in (0, 1)");
    }
    const std::size_t n = scores.size();
    // guard so that e.g. 0.9 * 20 = 18.000000000000004 keeps rank 18
    const double raw = (1.0 - beta) * static_cast<double>(n + 1);
    const double rounded = std::round(raw);
    const auto rank = static_cast<std::size_t>(std::abs(raw - rounded) < 1e-9 ? rounded : std::ceil(raw));
    if (rank > n) {
        return kInf;
    }
    std::vector<double> buf(scores.begin(), scores.end());
    const std::size_t k = rank == 0 ? 0 : rank - 1;
    std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(k), buf.end());
    return buf[k];
}

/// Compatibility mode: the windowed weighted mean (1/(n+1)) Σ W.
inline double literal_quantile(std::span<const double> scores) {
    if (scores.empty()) {
        throw ParameterError("conformal quantile of an empty score window");
    }
    double s = 0.0;
    for (double w : scores) {
        s += w;
    }
    return s / static_cast<double>(scores.size() + 1);
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

inline Interval interval(double pred, double xi, double cq) {
    if (!(cq >= 0.0)) {
        throw ParameterError("conformal quantile must be non-negative");
    }
    if (std::isinf(cq)) {
        return {-kInf, kInf};
    }
    return {pred - cq * xi, pred + cq * xi};
}

inline double empirical_coverage(std::span<const double> lo, std::span<const double> hi, std::span<const double> y) {
    if (lo.size() != y.size() || hi.size() != y.size()) {
        throw DimensionError("coverage: interval and observation counts differ");
    }
    if (y.empty()) {
        throw DimensionError("coverage of an empty set");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        hit += (y[i] >= lo[i] && y[i] <= hi[i]) ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(y.size());
}

struct ConformalConfig {
    std::size_t alpha = 288; // window size
    double beta = 0.1;       // miscoverage
    bool literal = false;    // use literal_quantile instead of the order statistic

    void validate() const {
        if (alpha == 0) {
            throw ParameterError("conformal window alpha must be >= 1");
        }
        if (!(beta > 0.0 && beta < 1.0)) {
            throw ParameterError("miscoverage beta must lie in (0, 1)");
        }
    }
};

/// One causal score stream. Observations arrive in time order; each
/// query sees only what was pushed before it.
class StreamCalibrator {
public:
    explicit StreamCalibrator(ConformalConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    /// Current ξ, or 0 when no residual has been observed yet.
    double xi() const {
        if (residuals_.empty()) {
            return 0.0;
        }
        double s = 0.0;
        for (double r : residuals_) {
            s += r;
        }
        return std::max(kXiFloor, s / static_cast<double>(residuals_.size()));
    }

    /// Quantile over the last min(α, available) scores; +∞ with no scores.
    double quantile() const {
        if (scores_.empty()) {
            return kInf;
        }
        std::vector<double> w(scores_.begin(), scores_.end());
        return cfg_.literal ? literal_quantile(w) : weighted_quantile(w, cfg_.beta);
    }

    /// Records an observed outcome; `xi_at_issue` is the ξ used when the
    /// forecast was issued (0 when none was available: no score recorded).
    void observe(double y, double pred, double xi_at_issue) {
        if (xi_at_issue > 0.0) {
            push(scores_, conformal_score(y, pred, xi_at_issue));
        }
        push(residuals_, std::abs(y - pred));
    }

    std::size_t score_count() const { return scores_.size(); }

private:
    void push(std::deque<double> &q, double v) {
        q.push_back(v);
        if (q.size() > cfg_.alpha) {
            q.pop_front();
        }
    }

    ConformalConfig cfg_;
    std::deque<double> residuals_;
    std::deque<double> scores_;
};

struct ConformalResult {
    Tensor lo, hi, xi, cq;            // (W, N, H) over the evaluated windows
    std::vector<double> step_coverage; // per horizon step
    double coverage = 0.0;
    std::size_t points = 0;
};

/// Calibrates one stream per (node, horizon step). The calibration windows
/// (validation split) precede the evaluated windows in time and are replayed
/// first; then evaluated windows are processed in order. A forecast for step
/// h issued at window t only sees outcomes of windows t′ ≤ t − h.
inline ConformalResult calibrate(const Tensor &calib_y, const Tensor &calib_pred, const Tensor &y, const Tensor &pred,
                                 const ConformalConfig &cfg) {
    cfg.validate();
    calib_y.require_same_shape(calib_pred, "conformal calibration");
    y.require_same_shape(pred, "conformal evaluation");
    if (y.rank() != 3 || calib_y.rank() != 3 || calib_y.dim(1) != y.dim(1) || calib_y.dim(2) != y.dim(2)) {
        throw DimensionError("conformal: expected (windows, N, H) tensors with matching N and H");
    }
    const std::size_t wc = calib_y.dim(0), we = y.dim(0), n = y.dim(1), hz = y.dim(2);
    const std::size_t total = wc + we;
    auto at = [&](const Tensor &a, const Tensor &b, std::size_t w, std::size_t i, std::size_t h) {
        return w < wc ? a[(w * n + i) * hz + h] : b[((w - wc) * n + i) * hz + h];
    };
    ConformalResult r{Tensor({we, n, hz}), Tensor({we, n, hz}), Tensor({we, n, hz}), Tensor({we, n, hz}),
                      std::vector<double>(hz, 0.0), 0.0, we * n * hz};
    std::size_t covered_total = 0;
    std::vector<std::size_t> covered_step(hz, 0);
    std::vector<double> xi_issue(total);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < hz; ++h) {
            StreamCalibrator stream(cfg);
            const std::size_t delay = h + 1;
            for (std::size_t t = 0; t < total; ++t) {
                // outcomes of windows t' ≤ t − delay are now observed
                if (t >= delay) {
                    const std::size_t tp = t - delay;
                    stream.observe(at(calib_y, y, tp, i, h), at(calib_pred, pred, tp, i, h), xi_issue[tp]);
                }
                xi_issue[t] = stream.xi();
                if (t < wc) {
                    continue;
                }
                const double p = at(calib_pred, pred, t, i, h);
                const double obs = at(calib_y, y, t, i, h);
                const double cq = xi_issue[t] > 0.0 ? stream.quantile() : kInf;
                const Interval iv = interval(p, xi_issue[t], cq);
                const std::size_t k = ((t - wc) * n + i) * hz + h;
                r.lo[k] = iv.lo;
                r.hi[k] = iv.hi;
                r.xi[k] = xi_issue[t];
                r.cq[k] = cq;
                if (obs >= iv.lo && obs <= iv.hi) {
                    ++covered_total;
                    ++covered_step[h];
                }
            }
        }
    }
    if (r.points > 0) {
        r.coverage = static_cast<double>(covered_total) / static_cast<double>(r.points);
        for (std::size_t h = 0; h < hz; ++h) {
            r.step_coverage[h] = static_cast<double>(covered_step[h]) / static_cast<double>(we * n);
        }
    }
    return r;
}

} // namespace wdstagnn::conformal
