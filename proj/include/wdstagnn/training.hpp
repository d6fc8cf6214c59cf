#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/graph.hpp"
#include "wdstagnn/log.hpp"
#include "wdstagnn/model.hpp"
#include "wdstagnn/numerics/autodiff.hpp"
#include "wdstagnn/numerics/optim.hpp"

namespace wdstagnn::training {

namespace detail {

// Accepts (N, 1, M) or (N, M); returns N and M.
inline std::pair<std::size_t, std::size_t> series_dims(const Tensor &x, const char *who) {
    if (x.rank() == 3 && x.dim(1) == 1) {
        return {x.dim(0), x.dim(2)};
    }
    if (x.rank() == 2) {
        return {x.dim(0), x.dim(1)};
    }
    throw DimensionError(std::string(who) + ": expected (N, 1, M) or (N, M), got " + shape_str(x.shape()));
}

} // namespace detail

/// Per-node mean and population standard deviation of the training split.
struct NormalizationStats {
    std::vector<double> mean;
    std::vector<double> std;

    std::size_t nodes() const { return mean.size(); }
};

inline NormalizationStats fit_normalization(const Tensor &train) {
    const auto [n, m] = detail::series_dims(train, "fit_normalization");
    NormalizationStats s{std::vector<double>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const double *row = train.data() + i * m;
        const double mu = std::accumulate(row, row + m, 0.0) / static_cast<double>(m);
        double var = 0.0;
        for (std::size_t t = 0; t < m; ++t) {
            var += (row[t] - mu) * (row[t] - mu);
        }
        double sd = std::sqrt(var / static_cast<double>(m));
        if (sd < 1e-8) {
            warn("node " + std::to_string(i) + " has (near) zero variance; using std = 1");
            sd = 1.0;
        }
        s.mean[i] = mu;
        s.std[i] = sd;
    }
    return s;
}

/// Applies (x − mean)/std, or its inverse, along `node_axis`.
inline Tensor apply_normalization(const Tensor &x, const NormalizationStats &s, std::size_t node_axis, bool inverse) {
    if (node_axis >= x.rank() || x.dim(node_axis) != s.nodes()) {
        throw DimensionError("normalization stats cover " + std::to_string(s.nodes()) + " nodes, tensor is " +
                             shape_str(x.shape()));
    }
    std::size_t inner = 1;
    for (std::size_t a = node_axis + 1; a < x.rank(); ++a) {
        inner *= x.dim(a);
    }
    Tensor out = x;
    const std::size_t n = s.nodes();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t node = (i / inner) % n;
        out[i] = inverse ? out[i] * s.std[node] + s.mean[node] : (out[i] - s.mean[node]) / s.std[node];
    }
    return out;
}

inline Tensor normalize(const Tensor &x, const NormalizationStats &s, std::size_t node_axis = 0) {
    return apply_normalization(x, s, node_axis, false);
}

inline Tensor denormalize(const Tensor &x, const NormalizationStats &s, std::size_t node_axis = 0) {
    return apply_normalization(x, s, node_axis, true);
}

struct WindowSpec {
    std::size_t input = 12;
    std::size_t horizon = 12;
    std::size_t stride = 1;

    std::size_t span() const { return input + horizon; }

    void validate() const {
        if (input == 0 || horizon == 0 || stride == 0) {
            throw ParameterError("window input, horizon and stride must be positive");
        }
    }
};

inline std::size_t window_count(std::size_t length, const WindowSpec &spec) {
    spec.validate();
    if (length < spec.span()) {
        throw DataError("segment of length " + std::to_string(length) + " is shorter than one window (" +
                        std::to_string(spec.span()) + " steps)");
    }
    return (length - spec.span()) / spec.stride + 1;
}

struct SplitSpec {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;

    static SplitSpec ratio(double a, double b, double c) {
        const double s = a + b + c;
        return {a / s, b / s, c / s};
    }

    void validate() const {
        if (!(train > 0.0 && val > 0.0 && test > 0.0)) {
            throw ParameterError("split fractions must be positive");
        }
        if (std::abs(train + val + test - 1.0) > 1e-12) {
            throw ParameterError("split fractions must sum to 1");
        }
    }
};

struct SplitSizes {
    std::size_t train = 0, val = 0, test = 0;
};

/// Floor allocations for train and validation; the remainder goes to test.
inline SplitSizes split_sizes(std::size_t length, const SplitSpec &spec) {
    spec.validate();
    // the epsilon keeps exact products such as 10·0.6 from flooring to 5
    auto part = [&](double f) { return static_cast<std::size_t>(std::floor(static_cast<double>(length) * f + 1e-9)); };
    SplitSizes s;
    s.train = part(spec.train);
    s.val = part(spec.val);
    s.test = length - s.train - s.val;
    return s;
}

struct Splits {
    Tensor train, val, test; // (N, 1, len) each
    SplitSizes sizes;
};

inline Tensor time_range(const Tensor &x, std::size_t begin, std::size_t end) {
    const auto [n, m] = detail::series_dims(x, "time_range");
    if (begin >= end || end > m) {
        throw DimensionError("time range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") outside series of length " + std::to_string(m));
    }
    Tensor out({n, 1, end - begin});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(x.data() + i * m + begin, x.data() + i * m + end, out.data() + i * (end - begin));
    }
    return out;
}

/// Chronological split; each part must hold at least one window.
inline Splits split(const Tensor &x, const SplitSpec &spec, const WindowSpec &window = {}) {
    const auto [n, m] = detail::series_dims(x, "split");
    (void)n;
    const SplitSizes s = split_sizes(m, spec);
    for (std::size_t len : {s.train, s.val, s.test}) {
        if (len < window.span()) {
            throw DataError("series of length " + std::to_string(m) + " is too short: split " +
                            std::to_string(s.train) + "/" + std::to_string(s.val) + "/" + std::to_string(s.test) +
                            " leaves a part shorter than one window (" + std::to_string(window.span()) + ")");
        }
    }
    return {time_range(x, 0, s.train), time_range(x, s.train, s.train + s.val), time_range(x, s.train + s.val, m), s};
}

/// Sliding (input, target) pairs over one segment. `offset` is the absolute
/// time index of the segment's first observation.
struct WindowSet {
    Tensor series; // (N, 1, len)
    WindowSpec spec;
    std::size_t count = 0;
    std::size_t offset = 0;

    std::size_t nodes() const { return series.dim(0); }
    std::size_t length() const { return series.dim(2); }
    std::size_t start(std::size_t w) const { return w * spec.stride; }
    /// Absolute time index of the first target step of window w.
    std::size_t target_time(std::size_t w) const { return offset + start(w) + spec.input; }

    /// Inputs (B, N, 1, input) for the listed windows.
    Tensor inputs(const std::vector<std::size_t> &idx) const {
        const std::size_t n = nodes(), len = length(), mi = spec.input;
        Tensor out({idx.size(), n, 1, mi});
        for (std::size_t b = 0; b < idx.size(); ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                const double *src = series.data() + i * len + start(idx[b]);
                std::copy(src, src + mi, out.data() + (b * n + i) * mi);
            }
        }
        return out;
    }

    /// Targets (B, N, horizon) for the listed windows.
    Tensor targets(const std::vector<std::size_t> &idx) const {
        const std::size_t n = nodes(), len = length(), h = spec.horizon;
        Tensor out({idx.size(), n, h});
        for (std::size_t b = 0; b < idx.size(); ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                const double *src = series.data() + i * len + start(idx[b]) + spec.input;
                std::copy(src, src + h, out.data() + (b * n + i) * h);
            }
        }
        return out;
    }

    std::pair<Tensor, Tensor> window(std::size_t w) const {
        if (w >= count) {
            throw DimensionError("window index " + std::to_string(w) + " out of range");
        }
        Tensor x = inputs({w});
        Tensor y = targets({w});
        return {x.reshaped({nodes(), 1, spec.input}), y.reshaped({nodes(), spec.horizon})};
    }
};

inline WindowSet make_windows(const Tensor &segment, const WindowSpec &spec = {}, std::size_t offset = 0) {
    const auto [n, m] = detail::series_dims(segment, "make_windows");
    WindowSet w{segment.reshaped({n, 1, m}), spec, window_count(m, spec), offset};
    return w;
}

struct TrainConfig {
    std::size_t epochs = 100;
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    double huber_delta = 1.0;
    std::uint64_t seed = 0;
    std::size_t patience = 0;    // 0 disables early stopping
    std::size_t micro_batch = 0; // 0: whole batch on one tape

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw ParameterError("learning rate must be finite and non-negative");
        }
        if (batch_size == 0) {
            throw ParameterError("batch size must be positive");
        }
        if (!(huber_delta > 0.0)) {
            throw ParameterError("Huber delta must be positive");
        }
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_mae = 0.0; // original units
    double wall_seconds = 0.0;
};

struct FitResult {
    ParameterStore best;
    std::size_t best_epoch = 0; // 0: initial parameters
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord &)>;

/// Normalized-scale predictions (W, N, horizon) for every window of a set.
inline Tensor predict_windows(const model::ModelConfig &cfg, const graph::GraphBundle &graph,
                              const ParameterStore &params, const WindowSet &set, std::size_t batch = 32) {
    const std::size_t n = set.nodes(), h = cfg.horizon;
    Tensor out({set.count, n, h});
    std::vector<std::size_t> idx;
    for (std::size_t b0 = 0; b0 < set.count; b0 += batch) {
        idx.clear();
        for (std::size_t w = b0; w < std::min(set.count, b0 + batch); ++w) {
            idx.push_back(w);
        }
        Graph g(&params);
        Var p = model::forward(cfg, graph, g.constant(set.inputs(idx)));
        std::copy(p.value().data(), p.value().data() + p.size(), out.data() + b0 * n * h);
    }
    return out;
}

struct Evaluation {
    double loss = 0.0;
    double mae = 0.0; // original units
};

inline Evaluation evaluate_windows(const model::ModelConfig &cfg, const graph::GraphBundle &graph,
                                   const ParameterStore &params, const WindowSet &set, const NormalizationStats &stats,
                                   double huber_delta, std::size_t batch = 32) {
    std::vector<std::size_t> all(set.count);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const Tensor pred = predict_windows(cfg, graph, params, set, batch);
    const Tensor target = set.targets(all);
    Evaluation e;
    double huber = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = std::abs(pred[i] - target[i]);
        huber += d <= huber_delta ? 0.5 * d * d : huber_delta * (d - 0.5 * huber_delta);
    }
    e.loss = huber / static_cast<double>(pred.size());
    const Tensor p = denormalize(pred, stats, 1);
    const Tensor y = denormalize(target, stats, 1);
    double abs_err = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        abs_err += std::abs(p[i] - y[i]);
    }
    e.mae = abs_err / static_cast<double>(p.size());
    return e;
}

/// Mini-batch Adam on the Huber loss of normalized targets. Returns the
/// parameters with the lowest validation loss and the per-epoch log.
inline FitResult fit(const model::ModelConfig &cfg, const graph::GraphBundle &graph, ParameterStore params,
                     const WindowSet &train, const WindowSet &val, const NormalizationStats &stats,
                     const TrainConfig &tc, const EpochCallback &on_epoch = {}) {
    tc.validate();
    model::check_parameters(cfg, params);
    FitResult result;
    result.best = params;
    AdamState adam;
    adam.learning_rate = tc.learning_rate;
    std::mt19937_64 rng(tc.seed ^ 0x9E3779B97F4A7C15ULL);
    std::vector<std::size_t> order(train.count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t micro = tc.micro_batch == 0 ? tc.batch_size : tc.micro_batch;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t stale = 0;
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch_size, ++batch_index) {
            const std::size_t b1 = std::min(order.size(), b0 + tc.batch_size);
            const double bsize = static_cast<double>(b1 - b0);
            GradientStore grads;
            double batch_loss = 0.0;
            for (std::size_t c0 = b0; c0 < b1; c0 += micro) {
                const std::size_t c1 = std::min(b1, c0 + micro);
                std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(c0),
                                             order.begin() + static_cast<std::ptrdiff_t>(c1));
                const double weight = static_cast<double>(c1 - c0) / bsize;
                Graph g(&params);
                Var pred = model::forward(cfg, graph, g.constant(train.inputs(idx)));
                Var loss = huber_loss(pred, g.constant(train.targets(idx)), tc.huber_delta);
                const double lv = loss.value().item();
                if (!std::isfinite(lv)) {
                    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(batch_index));
                }
                g.backward(loss);
                g.accumulate_gradients(grads, weight);
                batch_loss += weight * lv;
            }
            adam_step(params, grads, adam);
            loss_sum += batch_loss * bsize;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        const Evaluation ev = evaluate_windows(cfg, graph, params, val, stats, tc.huber_delta, tc.batch_size);
        rec.val_loss = ev.loss;
        rec.val_mae = ev.mae;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
        if (ev.loss < result.best_val_loss) {
            result.best_val_loss = ev.loss;
            result.best_epoch = epoch;
            result.best = params;
            stale = 0;
        } else if (tc.patience > 0 && ++stale >= tc.patience) {
            break;
        }
    }
    return result;
}

} // namespace wdstagnn::training
