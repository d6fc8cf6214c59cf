#include "catch_amalgamated.hpp"

#include <cmath>

#include "model_fixture.hpp"
#include "test_support.hpp"
#include "wdstagnn/error.hpp"
#include "wdstagnn/log.hpp"
#include "wdstagnn/pipeline.hpp"
#include "wdstagnn/training.hpp"

using namespace wdstagnn;
using namespace wdstagnn::training;
using Catch::Approx;

TEST_CASE("normalization statistics and round trip", "[training][normalize]") {
    const Tensor x({1, 1, 3}, std::vector<double>{1.0, 2.0, 3.0});
    const auto s = fit_normalization(x);
    REQUIRE(s.mean[0] == 2.0);
    REQUIRE(s.std[0] == Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-15));
    const Tensor z = normalize(x, s);
    REQUIRE(z[0] == Approx(-std::sqrt(1.5)).epsilon(1e-14));
    REQUIRE(z[1] == 0.0);
    REQUIRE(z[2] == Approx(std::sqrt(1.5)).epsilon(1e-14));

    std::mt19937_64 rng(3);
    const Tensor r = test_support::random_tensor({4, 1, 50}, rng, 10.0, 90.0);
    const auto rs = fit_normalization(r);
    REQUIRE(max_abs_diff(denormalize(normalize(r, rs), rs), r) <= 1e-12);

    const Tensor w = test_support::random_tensor({7, 4, 12}, rng);
    REQUIRE(max_abs_diff(normalize(denormalize(w, rs, 1), rs, 1), w) <= 1e-12);
    REQUIRE_THROWS_AS(normalize(w, rs, 0), DimensionError);

    WarningCapture cap;
    const auto flat = fit_normalization(Tensor({2, 1, 5}, 4.0));
    REQUIRE(flat.std[0] == 1.0);
    REQUIRE(cap.messages().size() == 2);
}

TEST_CASE("chronological split sizes", "[training][split]") {
    const auto s = split_sizes(52116, SplitSpec{});
    REQUIRE(s.train == 36481);
    REQUIRE(s.val == 5211);
    REQUIRE(s.test == 10424);
    const auto r = split_sizes(10, SplitSpec::ratio(6, 2, 2));
    REQUIRE(r.train == 6);
    REQUIRE(r.val == 2);
    REQUIRE(r.test == 2);
    REQUIRE_THROWS_AS(split_sizes(10, SplitSpec{0.5, 0.5, 0.5}), ParameterError);
    REQUIRE_THROWS_AS(split_sizes(10, SplitSpec{0.0, 0.5, 0.5}), ParameterError);

    Tensor x({2, 1, 300});
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = static_cast<double>(i);
    }
    const Splits sp = split(x, SplitSpec{});
    REQUIRE(sp.train.shape() == Shape{2, 1, 210});
    REQUIRE(sp.val.shape() == Shape{2, 1, 30});
    REQUIRE(sp.test.shape() == Shape{2, 1, 60});
    REQUIRE(sp.val[0] == 210.0);
    REQUIRE(sp.test[60] == 300.0 + 240.0);
    REQUIRE_THROWS_AS(split(Tensor({2, 1, 100}), SplitSpec{}), DataError);
}

TEST_CASE("sliding windows", "[training][windows]") {
    REQUIRE(window_count(24, WindowSpec{}) == 1);
    REQUIRE(window_count(100, WindowSpec{}) == 77);
    REQUIRE(window_count(100, WindowSpec{12, 12, 5}) == 16);
    REQUIRE_THROWS_AS(window_count(23, WindowSpec{}), DataError);
    REQUIRE_THROWS_AS(window_count(30, WindowSpec{0, 12, 1}), ParameterError);

    Tensor x({2, 1, 30});
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t t = 0; t < 30; ++t) {
            x[i * 30 + t] = 100.0 * static_cast<double>(i) + static_cast<double>(t);
        }
    }
    const WindowSet w = make_windows(x, WindowSpec{}, 1000);
    REQUIRE(w.count == 7);
    REQUIRE(w.target_time(0) == 1012);
    REQUIRE(w.target_time(6) == 1018);
    const auto [in, out] = w.window(3);
    REQUIRE(in.shape() == Shape{2, 1, 12});
    REQUIRE(out.shape() == Shape{2, 12});
    REQUIRE(in[0] == 3.0);
    REQUIRE(in[12] == 103.0);
    REQUIRE(out(0, 0) == 15.0);
    REQUIRE(out(1, 11) == 126.0);
    REQUIRE_THROWS_AS(w.window(7), DimensionError);
    const Tensor b = w.inputs({6, 0});
    REQUIRE(b.shape() == Shape{2, 2, 1, 12});
    REQUIRE(b[0] == 6.0);
    REQUIRE(b[24] == 0.0);
}

TEST_CASE("train config validation", "[training][config]") {
    TrainConfig t;
    REQUIRE_NOTHROW(t.validate());
    t.batch_size = 0;
    REQUIRE_THROWS_AS(t.validate(), ParameterError);
    t = {};
    t.learning_rate = -1.0;
    REQUIRE_THROWS_AS(t.validate(), ParameterError);
    t = {};
    t.huber_delta = 0.0;
    REQUIRE_THROWS_AS(t.validate(), ParameterError);
}

namespace {

struct Toy {
    model::ModelConfig cfg;
    graph::GraphBundle graph;
    NormalizationStats stats;
    WindowSet train, val;
};

Toy toy() {
    const auto data = data_io::synthetic(3, 700, 5);
    Toy t;
    t.cfg = model_fixture::small_config(3, 1);
    const Splits sp = split(data.series, SplitSpec{});
    t.stats = fit_normalization(sp.train);
    t.train = make_windows(normalize(sp.train, t.stats), WindowSpec{12, 12, 8});
    t.val = make_windows(normalize(sp.val, t.stats), WindowSpec{12, 12, 4}, sp.sizes.train);
    t.graph = graph::build_graph_bundle(sp.train, 0.5, t.cfg.cheb_order);
    return t;
}

} // namespace

TEST_CASE("fit lowers the loss and is reproducible", "[training][fit]") {
    const Toy t = toy();
    TrainConfig tc;
    tc.epochs = 6;
    tc.learning_rate = 3e-3;
    tc.batch_size = 8;
    tc.seed = 4;
    std::vector<std::size_t> seen;
    const auto a = fit(t.cfg, t.graph, model::init_parameters(t.cfg, 1), t.train, t.val, t.stats, tc,
                       [&](const EpochRecord &r) { seen.push_back(r.epoch); });
    REQUIRE(seen == std::vector<std::size_t>{1, 2, 3, 4, 5, 6});
    REQUIRE(a.log.size() == 6);
    REQUIRE(a.log.back().train_loss < a.log.front().train_loss);
    REQUIRE(a.best_epoch >= 1);
    double best = a.log.front().val_loss;
    for (const auto &r : a.log) {
        REQUIRE(std::isfinite(r.val_mae));
        REQUIRE(r.val_mae > 0.0);
        best = std::min(best, r.val_loss);
    }
    REQUIRE(a.best_val_loss == best);
    REQUIRE(a.log[a.best_epoch - 1].val_loss == best);
    const auto ev = evaluate_windows(t.cfg, t.graph, a.best, t.val, t.stats, tc.huber_delta);
    REQUIRE(ev.loss == Approx(best).epsilon(1e-12));

    const auto b = fit(t.cfg, t.graph, model::init_parameters(t.cfg, 1), t.train, t.val, t.stats, tc);
    for (std::size_t e = 0; e < a.log.size(); ++e) {
        REQUIRE(a.log[e].train_loss == b.log[e].train_loss);
        REQUIRE(a.log[e].val_mae == b.log[e].val_mae);
    }
    for (const auto &[name, p] : a.best) {
        REQUIRE(max_abs_diff(p, b.best.at(name)) == 0.0);
    }
}

TEST_CASE("fit edge cases", "[training][fit]") {
    const Toy t = toy();
    const ParameterStore init = model::init_parameters(t.cfg, 2);
    TrainConfig tc;
    tc.batch_size = 16;

    SECTION("zero epochs returns the initial parameters") {
        tc.epochs = 0;
        const auto r = fit(t.cfg, t.graph, init, t.train, t.val, t.stats, tc);
        REQUIRE(r.log.empty());
        REQUIRE(r.best_epoch == 0);
        for (const auto &[name, p] : init) {
            REQUIRE(max_abs_diff(p, r.best.at(name)) == 0.0);
        }
    }
    SECTION("zero learning rate leaves parameters unchanged") {
        tc.epochs = 1;
        tc.learning_rate = 0.0;
        const auto r = fit(t.cfg, t.graph, init, t.train, t.val, t.stats, tc);
        for (const auto &[name, p] : init) {
            REQUIRE(max_abs_diff(p, r.best.at(name)) == 0.0);
        }
    }
    SECTION("micro-batches accumulate the same update") {
        tc.epochs = 2;
        tc.learning_rate = 1e-3;
        const auto whole = fit(t.cfg, t.graph, init, t.train, t.val, t.stats, tc);
        tc.micro_batch = 5;
        const auto split_run = fit(t.cfg, t.graph, init, t.train, t.val, t.stats, tc);
        for (std::size_t e = 0; e < 2; ++e) {
            REQUIRE(split_run.log[e].train_loss == Approx(whole.log[e].train_loss).epsilon(1e-9));
        }
        for (const auto &[name, p] : whole.best) {
            REQUIRE(max_abs_diff(p, split_run.best.at(name)) <= 1e-9);
        }
    }
    SECTION("patience stops early") {
        tc.epochs = 50;
        tc.learning_rate = 0.0;
        tc.patience = 2;
        const auto r = fit(t.cfg, t.graph, init, t.train, t.val, t.stats, tc);
        REQUIRE(r.log.size() == 3);
        REQUIRE(r.best_epoch == 1);
    }
    SECTION("wrong parameters are rejected up front") {
        ParameterStore bad = init;
        bad.erase("pred.fc.b");
        REQUIRE_THROWS_AS(fit(t.cfg, t.graph, bad, t.train, t.val, t.stats, tc), DimensionError);
    }
    SECTION("diverging parameters raise TrainingError") {
        ParameterStore bad = init;
        bad.at("pred.fc.b").fill(std::numeric_limits<double>::quiet_NaN());
        tc.epochs = 1;
        REQUIRE_THROWS_AS(fit(t.cfg, t.graph, bad, t.train, t.val, t.stats, tc), TrainingError);
    }
}

TEST_CASE("pipeline prepare uses the training split only", "[training][pipeline]") {
    const auto data = data_io::synthetic(4, 1200, 9);
    config::RunConfig rc;
    rc.model = model_fixture::small_config(4, 1);
    rc.p_sp = 0.5;
    rc.stad_window = 288;
    const auto p = pipeline::prepare(data.series, rc);
    REQUIRE(p.raw.sizes.train == 840);
    REQUIRE(p.train.offset == 0);
    REQUIRE(p.val.offset == 840);
    REQUIRE(p.test.offset == 960);
    REQUIRE(p.graph.nodes() == 4);

    // statistics come from the training split alone
    Tensor tampered = data.series;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t t = 840; t < 1200; ++t) {
            tampered[i * 1200 + t] *= 3.0;
        }
    }
    const auto q = pipeline::prepare(tampered, rc);
    REQUIRE(q.stats.mean == p.stats.mean);
    REQUIRE(max_abs_diff(q.graph.stag, p.graph.stag) == 0.0);

    REQUIRE(pipeline::graph_segment(p.raw.train, 288).dim(2) == 288);
    REQUIRE(pipeline::graph_segment(p.raw.train, 0).dim(2) == 840);
    REQUIRE(pipeline::graph_segment(p.raw.train, 5000).dim(2) == 840);
}

TEST_CASE("pipeline forecasts in original units", "[training][pipeline]") {
    const auto data = data_io::synthetic(3, 700, 2);
    config::RunConfig rc;
    rc.model = model_fixture::small_config(3, 1);
    rc.train.epochs = 1;
    rc.train.batch_size = 64;
    rc.p_sp = 0.5;
    const auto p = pipeline::prepare(data.series, rc);
    const auto trained = pipeline::train(p, rc);
    const auto f = pipeline::forecast(trained.checkpoint.network(), p.stats, p.test);
    REQUIRE(f.windows() == p.test.count);
    REQUIRE(f.t.front() == p.test.offset + 12);
    REQUIRE(f.y.shape() == Shape{p.test.count, 3, 12});
    // targets reproduce the raw series exactly
    const std::size_t m = 700;
    for (std::size_t w : {std::size_t{0}, p.test.count - 1}) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t h = 0; h < 12; ++h) {
                REQUIRE(f.y[(w * 3 + i) * 12 + h] == Approx(data.series[i * m + f.t[w] + h]).epsilon(1e-12));
            }
        }
    }
}
