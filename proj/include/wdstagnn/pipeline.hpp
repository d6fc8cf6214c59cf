#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "wdstagnn/checkpoint.hpp"
#include "wdstagnn/config.hpp"
#include "wdstagnn/data_io.hpp"
#include "wdstagnn/graph.hpp"
#include "wdstagnn/model.hpp"
#include "wdstagnn/training.hpp"

namespace wdstagnn::pipeline {

/// Split, normalized windows and the training-split graph of one series.
struct PreparedData {
    training::Splits raw;
    training::NormalizationStats stats;
    training::WindowSet train, val, test;
    graph::GraphBundle graph;
};

/// Volumes used for the sensor graph: the last `stad_window` observations
/// of the training split (all of it when 0).
inline Tensor graph_segment(const Tensor &train, std::size_t stad_window) {
    const std::size_t m = train.dim(2);
    if (stad_window == 0 || stad_window >= m) {
        return train;
    }
    return training::time_range(train, m - stad_window, m);
}

inline PreparedData prepare(const Tensor &series, const config::RunConfig &rc, std::size_t threads = 1) {
    PreparedData p;
    p.raw = training::split(series, rc.split, rc.window);
    p.stats = training::fit_normalization(p.raw.train);
    const auto &s = p.raw.sizes;
    p.train = training::make_windows(training::normalize(p.raw.train, p.stats), rc.window, 0);
    p.val = training::make_windows(training::normalize(p.raw.val, p.stats), rc.window, s.train);
    p.test = training::make_windows(training::normalize(p.raw.test, p.stats), rc.window, s.train + s.val);
    p.graph = graph::build_graph_bundle(graph_segment(p.raw.train, rc.stad_window), rc.p_sp, rc.model.cheb_order,
                                        threads);
    return p;
}

struct TrainedModel {
    checkpoint::Checkpoint checkpoint;
    training::FitResult fit;
};

/// Initialises (seeded) and fits a model on prepared data.
inline TrainedModel train(const PreparedData &data, config::RunConfig rc, const training::EpochCallback &cb = {}) {
    rc.model.nodes = data.graph.nodes();
    rc.model.validate();
    ParameterStore init = model::init_parameters(rc.model, rc.train.seed);
    TrainedModel out;
    out.fit = training::fit(rc.model, data.graph, std::move(init), data.train, data.val, data.stats, rc.train, cb);
    out.checkpoint.config = rc;
    out.checkpoint.params = out.fit.best;
    out.checkpoint.stats = data.stats;
    out.checkpoint.strg_mask = data.graph.strg.mask;
    out.checkpoint.stag = data.graph.stag;
    return out;
}

/// Forecasts in original units for every window of a set.
inline data_io::ForecastSet forecast(const model::Network &net, const training::NormalizationStats &stats,
                                     const training::WindowSet &set, std::size_t batch = 32) {
    data_io::ForecastSet f;
    std::vector<std::size_t> all(set.count);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t w = 0; w < set.count; ++w) {
        f.t.push_back(set.target_time(w));
    }
    f.pred = training::denormalize(training::predict_windows(net.config, net.graph, net.params, set, batch), stats, 1);
    f.y = training::denormalize(set.targets(all), stats, 1);
    return f;
}

/// Windows of a raw segment normalized with stored statistics.
inline training::WindowSet windows_for(const Tensor &raw_segment, const training::NormalizationStats &stats,
                                       const training::WindowSpec &spec, std::size_t offset) {
    return training::make_windows(training::normalize(raw_segment, stats), spec, offset);
}

} // namespace wdstagnn::pipeline
