// Command-line front end: one subcommand per pipeline stage.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wdstagnn/checkpoint.hpp"
#include "wdstagnn/conformal.hpp"
#include "wdstagnn/config.hpp"
#include "wdstagnn/data_io.hpp"
#include "wdstagnn/evalbench.hpp"
#include "wdstagnn/parallel.hpp"
#include "wdstagnn/pipeline.hpp"
#include "wdstagnn/wavelet.hpp"

namespace fs = std::filesystem;
using namespace wdstagnn;

namespace {

void require_file(const std::string &path) {
    if (!fs::is_regular_file(path)) {
        throw DataError("input file not found: " + path);
    }
}

void ensure_dir(const std::string &dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw DataError("cannot create directory '" + dir + "'");
    }
}

std::string fmt(double v) { return data_io::format_number(v); }

training::SplitSpec parse_split(const std::string &text) {
    config::RunConfig rc;
    config::set_value(rc, "split", text);
    return rc.split;
}

std::vector<int> parse_levels(const std::string &text) {
    std::vector<int> out;
    if (const auto dots = text.find(".."); dots != std::string::npos) {
        const int a = std::stoi(text.substr(0, dots));
        const int b = std::stoi(text.substr(dots + 2));
        for (int j = a; j <= b; ++j) {
            out.push_back(j);
        }
    } else {
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            out.push_back(std::stoi(item));
        }
    }
    if (out.empty()) {
        throw ParameterError("no MODWT levels in '" + text + "'");
    }
    for (int j : out) {
        if (j < 0) {
            throw ParameterError("MODWT levels must be >= 0");
        }
    }
    return out;
}

void write_log(const std::string &path, const std::vector<training::EpochRecord> &log) {
    std::ofstream out = data_io::open_output(path);
    out << "epoch,train_loss,val_loss,val_mae,wall_seconds\n";
    for (const auto &r : log) {
        out << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_loss) << ',' << fmt(r.val_mae) << ','
            << fmt(r.wall_seconds) << '\n';
    }
}

config::RunConfig load_run_config(const std::string &path) {
    if (path.empty()) {
        return {};
    }
    require_file(path);
    return config::load_file(path);
}

struct Options {
    std::size_t threads = default_thread_count();
    // decompose
    std::string input, out_dir, filter = "haar";
    int level = 2;
    // data and config
    std::string data, config_path, out, checkpoint, segment = "test", split = "7:1:2";
    std::uint64_t seed = 0;
    bool seed_set = false;
    long long epochs = -1;
    double p_sp = 0.01;
    std::size_t stad_window = 0, cheb_order = 3;
    std::string levels = "1..3";
    // conformal
    std::string calibration, forecast_path;
    std::size_t alpha = 288;
    double beta = 0.1;
    bool literal = false;
    // mcb
    std::string table, tie = "max";
    double gamma = 0.05, critical_value = 0.0;
    // synthetic
    std::size_t nodes = 8, steps = 4032;
};

// Component files are long-form (t, node, value) with round-trip exact
// numbers so that summing them reproduces the input to 1e-10.
int run_decompose(const Options &o) {
    require_file(o.input);
    const auto loaded = data_io::load_csv(o.input);
    const auto filter = wavelet::WaveletFilter::by_name(o.filter);
    const auto parts = wavelet::mra_batch(loaded.series, filter, o.level, o.threads);
    ensure_dir(o.out_dir);
    const std::size_t n = loaded.series.dim(0), m = loaded.series.dim(2);
    for (std::size_t j = 0; j < parts.size(); ++j) {
        const bool smooth = j + 1 == parts.size();
        const std::string name = smooth ? "smooth_" + std::to_string(o.level) : "detail_" + std::to_string(j + 1);
        std::ofstream out = data_io::open_output((fs::path(o.out_dir) / (name + ".csv")).string());
        out << "t,node,value\n";
        char buf[40];
        for (std::size_t t = 0; t < m; ++t) {
            for (std::size_t i = 0; i < n; ++i) {
                std::snprintf(buf, sizeof buf, "%.17g", parts[j][i * m + t]);
                out << t << ',' << loaded.sensor_ids[i] << ',' << buf << '\n';
            }
        }
    }
    return 0;
}

int run_build_graph(const Options &o) {
    require_file(o.data);
    const auto loaded = data_io::load_csv(o.data);
    config::RunConfig rc;
    rc.split = parse_split(o.split);
    rc.p_sp = o.p_sp;
    rc.stad_window = o.stad_window;
    rc.model.cheb_order = o.cheb_order;
    const auto splits = training::split(loaded.series, rc.split, rc.window);
    const auto g = graph::build_graph_bundle(pipeline::graph_segment(splits.train, rc.stad_window), rc.p_sp,
                                             rc.model.cheb_order, o.threads);
    ensure_dir(o.out_dir);
    data_io::save_matrix((fs::path(o.out_dir) / "A_STAD.csv").string(), g.stad.adjacency);
    data_io::save_matrix((fs::path(o.out_dir) / "A_STRG.csv").string(), g.strg.mask);
    data_io::save_matrix((fs::path(o.out_dir) / "A_STAG.csv").string(), g.stag);
    return 0;
}

config::RunConfig train_config(const Options &o) {
    config::RunConfig rc = load_run_config(o.config_path);
    if (o.seed_set) {
        rc.train.seed = o.seed;
    }
    if (o.epochs >= 0) {
        rc.train.epochs = static_cast<std::size_t>(o.epochs);
    }
    return rc;
}

int run_train(const Options &o) {
    require_file(o.data);
    const auto loaded = data_io::load_csv(o.data);
    const config::RunConfig rc = train_config(o);
    const auto prepared = pipeline::prepare(loaded.series, rc, o.threads);
    ensure_dir(o.out);
    {
        std::ofstream echo = data_io::open_output((fs::path(o.out) / "run_config.txt").string());
        echo << config::to_text(rc);
    }
    std::cerr << config::to_text(rc);
    const auto trained = pipeline::train(prepared, rc, [](const training::EpochRecord &r) {
        std::cerr << "epoch " << r.epoch << " train_loss " << fmt(r.train_loss) << " val_loss " << fmt(r.val_loss)
                  << " val_mae " << fmt(r.val_mae) << '\n';
    });
    checkpoint::save((fs::path(o.out) / "checkpoint.bin").string(), trained.checkpoint);
    write_log((fs::path(o.out) / "train_log.csv").string(), trained.fit.log);
    return 0;
}

training::WindowSet segment_windows(const checkpoint::Checkpoint &ck, const Tensor &series,
                                    const std::string &segment) {
    const auto &rc = ck.config;
    if (segment == "all") {
        return pipeline::windows_for(series, ck.stats, rc.window, 0);
    }
    const auto s = training::split(series, rc.split, rc.window);
    if (segment == "train") {
        return pipeline::windows_for(s.train, ck.stats, rc.window, 0);
    }
    if (segment == "val") {
        return pipeline::windows_for(s.val, ck.stats, rc.window, s.sizes.train);
    }
    if (segment == "test") {
        return pipeline::windows_for(s.test, ck.stats, rc.window, s.sizes.train + s.sizes.val);
    }
    throw ParameterError("unknown segment '" + segment + "' (train, val, test or all)");
}

int run_forecast(const Options &o) {
    require_file(o.checkpoint);
    require_file(o.data);
    const auto ck = checkpoint::load(o.checkpoint);
    const auto loaded = data_io::load_csv(o.data);
    if (loaded.series.dim(0) != ck.stag.dim(0)) {
        throw DataError(o.data + ": " + std::to_string(loaded.series.dim(0)) + " sensors, checkpoint expects " +
                        std::to_string(ck.stag.dim(0)));
    }
    const auto windows = segment_windows(ck, loaded.series, o.segment);
    const auto f = pipeline::forecast(ck.network(), ck.stats, windows);
    data_io::save_forecasts(o.out, f);
    return 0;
}

int run_sweep(const Options &o) {
    require_file(o.data);
    const auto loaded = data_io::load_csv(o.data);
    config::RunConfig base = train_config(o);
    ensure_dir(o.out_dir);
    std::ofstream summary = data_io::open_output((fs::path(o.out_dir) / "sweep.csv").string());
    summary << "level,mae,rmse,mape,best_epoch\n";
    for (int level : parse_levels(o.levels)) {
        config::RunConfig rc = base;
        rc.model.level = level;
        const auto prepared = pipeline::prepare(loaded.series, rc, o.threads);
        const auto trained = pipeline::train(prepared, rc);
        const auto f = pipeline::forecast(trained.checkpoint.network(), prepared.stats, prepared.test);
        data_io::save_forecasts((fs::path(o.out_dir) / ("level_" + std::to_string(level) + "_forecast.csv")).string(),
                                f);
        const auto m = evalbench::metrics(f.y.values(), f.pred.values());
        summary << level << ',' << fmt(m.mae) << ',' << fmt(m.rmse) << ',' << fmt(m.mape) << ','
                << trained.fit.best_epoch << '\n';
        std::cerr << "level " << level << " test MAPE " << fmt(m.mape) << "%\n";
    }
    return 0;
}

int run_conformal(const Options &o) {
    require_file(o.calibration);
    require_file(o.forecast_path);
    const auto cal = data_io::load_forecasts(o.calibration);
    const auto ev = data_io::load_forecasts(o.forecast_path);
    if (cal.windows() == 0 || ev.windows() == 0) {
        throw DataError("conformal: calibration and forecast files must hold at least one window");
    }
    conformal::ConformalConfig cfg{o.alpha, o.beta, o.literal};
    const auto r = conformal::calibrate(cal.y, cal.pred, ev.y, ev.pred, cfg);
    std::ofstream out = data_io::open_output(o.out);
    out << "t,node,step,y,pred,lo,hi,covered\n";
    const std::size_t n = ev.y.dim(1), h = ev.y.dim(2);
    for (std::size_t w = 0; w < ev.windows(); ++w) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < h; ++k) {
                const std::size_t idx = (w * n + i) * h + k;
                const bool covered = ev.y[idx] >= r.lo[idx] && ev.y[idx] <= r.hi[idx];
                out << ev.t[w] << ',' << i << ',' << (k + 1) << ',' << fmt(ev.y[idx]) << ',' << fmt(ev.pred[idx])
                    << ',' << fmt(r.lo[idx]) << ',' << fmt(r.hi[idx]) << ',' << (covered ? 1 : 0) << '\n';
            }
        }
    }
    std::cout << "coverage overall=" << fmt(r.coverage) << " points=" << r.points;
    for (std::size_t k = 0; k < r.step_coverage.size(); ++k) {
        std::cout << " step" << (k + 1) << '=' << fmt(r.step_coverage[k]);
    }
    std::cout << '\n';
    return 0;
}

int run_evaluate(const Options &o) {
    require_file(o.forecast_path);
    const auto f = data_io::load_forecasts(o.forecast_path);
    if (f.windows() == 0) {
        throw DataError(o.forecast_path + ": no forecasts to evaluate");
    }
    std::ofstream out = data_io::open_output(o.out);
    out << "scope,mae,rmse,mape,mape_excluded\n";
    auto row = [&](const std::string &scope, const evalbench::Metrics &m) {
        out << scope << ',' << fmt(m.mae) << ',' << fmt(m.rmse) << ',' << fmt(m.mape) << ',' << m.mape_excluded
            << '\n';
    };
    row("all", evalbench::metrics(f.y.values(), f.pred.values()));
    const auto steps = evalbench::stepwise_errors(f.y, f.pred);
    for (std::size_t k = 0; k < steps.size(); ++k) {
        row("step" + std::to_string(k + 1), steps[k]);
    }
    return 0;
}

int run_mcb(const Options &o) {
    require_file(o.table);
    const auto t = data_io::read_csv(o.table);
    if (t.header.size() < 2) {
        throw DataError(o.table + ": expected a model column followed by dataset columns");
    }
    evalbench::ErrorTable table;
    table.datasets.assign(t.header.begin() + 1, t.header.end());
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        table.models.push_back(t.rows[r][0]);
        std::vector<double> row;
        for (std::size_t c = 1; c < t.header.size(); ++c) {
            row.push_back(t.finite_number(r, c));
        }
        table.values.push_back(std::move(row));
    }
    evalbench::TieRule rule;
    if (o.tie == "max") {
        rule = evalbench::TieRule::max_rank;
    } else if (o.tie == "mid") {
        rule = evalbench::TieRule::midrank;
    } else {
        throw ParameterError("unknown tie rule '" + o.tie + "' (max or mid)");
    }
    const auto r = evalbench::mcb(table, o.gamma, rule, o.critical_value);
    std::ofstream out = data_io::open_output(o.out);
    out << "model,mean_rank,lo,hi,significant,best\n";
    for (std::size_t i = 0; i < table.models.size(); ++i) {
        out << table.models[i] << ',' << fmt(r.mean_rank[i]) << ',' << fmt(r.lo[i]) << ',' << fmt(r.hi[i]) << ','
            << (r.significant[i] ? 1 : 0) << ',' << (i == r.best ? 1 : 0) << '\n';
    }
    std::cout << "critical_value=" << fmt(r.critical_value) << " cd=" << fmt(r.cd) << " gamma=" << fmt(r.gamma)
              << '\n';
    return 0;
}

int run_synthetic(const Options &o) {
    const auto syn = data_io::synthetic(o.nodes, o.steps, o.seed);
    data_io::save_csv(o.out, syn.series);
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Wavelet-enhanced spatiotemporal graph forecaster"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--threads", o.threads, "Worker threads (default: WDSTAGNN_THREADS or 1)")
        ->check(CLI::PositiveNumber);

    auto *dec = app.add_subcommand("decompose", "MODWT multiresolution analysis of every sensor column");
    dec->add_option("--input", o.input, "Sensor CSV")->required();
    dec->add_option("--filter", o.filter, "haar or d4")->check(CLI::IsMember({"haar", "d4"}));
    dec->add_option("--level", o.level, "Decomposition level J")->check(CLI::PositiveNumber);
    dec->add_option("--out-dir", o.out_dir, "Output directory")->required();

    auto *bg = app.add_subcommand("build-graph", "STAD, STRG and STAG matrices from the training split");
    bg->add_option("--data", o.data, "Sensor CSV")->required();
    bg->add_option("--p-sp", o.p_sp, "Neighbour fraction P_sp");
    bg->add_option("--stad-window", o.stad_window, "Training observations used (0: all)");
    bg->add_option("--split", o.split, "train:val:test ratio");
    bg->add_option("--cheb-order", o.cheb_order, "Chebyshev order K");
    bg->add_option("--out-dir", o.out_dir, "Output directory")->required();

    auto *tr = app.add_subcommand("train", "Fit a model and write checkpoint.bin and train_log.csv");
    tr->add_option("--data", o.data, "Sensor CSV")->required();
    tr->add_option("--config", o.config_path, "key=value config file");
    tr->add_option("--seed", o.seed, "Random seed")->each([&](const std::string &) { o.seed_set = true; });
    tr->add_option("--epochs", o.epochs, "Override the epoch count")->check(CLI::NonNegativeNumber);
    tr->add_option("--out", o.out, "Output directory")->required();

    auto *fc = app.add_subcommand("forecast", "Forecast every window of a data segment");
    fc->add_option("--checkpoint", o.checkpoint, "checkpoint.bin")->required();
    fc->add_option("--data", o.data, "Sensor CSV")->required();
    fc->add_option("--segment", o.segment, "train, val, test or all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
    fc->add_option("--out", o.out, "Forecast CSV")->required();

    auto *sw = app.add_subcommand("sweep-level", "Train one model per MODWT level and summarise test errors");
    sw->add_option("--data", o.data, "Sensor CSV")->required();
    sw->add_option("--config", o.config_path, "key=value config file");
    sw->add_option("--seed", o.seed, "Random seed")->each([&](const std::string &) { o.seed_set = true; });
    sw->add_option("--epochs", o.epochs, "Override the epoch count")->check(CLI::NonNegativeNumber);
    sw->add_option("--levels", o.levels, "Levels as a..b or a,b,c");
    sw->add_option("--out-dir", o.out_dir, "Output directory")->required();

    auto *cf = app.add_subcommand("conformal", "Conformal intervals for forecasts");
    cf->add_option("--calibration", o.calibration, "Calibration forecast CSV (validation segment)")->required();
    cf->add_option("--forecast", o.forecast_path, "Forecast CSV to wrap with intervals")->required();
    cf->add_option("--alpha", o.alpha, "Score window size")->check(CLI::PositiveNumber);
    cf->add_option("--beta", o.beta, "Miscoverage level");
    cf->add_flag("--literal", o.literal, "Use the windowed mean score instead of the order statistic");
    cf->add_option("--out", o.out, "Interval CSV")->required();

    auto *ev = app.add_subcommand("evaluate", "MAE, RMSE and MAPE overall and per horizon step");
    ev->add_option("--forecast", o.forecast_path, "Forecast CSV")->required();
    ev->add_option("--out", o.out, "Metrics CSV")->required();

    auto *mc = app.add_subcommand("mcb", "Multiple comparisons with the best over an error table");
    mc->add_option("--table", o.table, "CSV: model column then one column per dataset")->required();
    mc->add_option("--gamma", o.gamma, "Significance level (0.01, 0.05 or 0.10)");
    mc->add_option("--tie", o.tie, "Tie rule: max or mid")->check(CLI::IsMember({"max", "mid"}));
    mc->add_option("--critical-value", o.critical_value, "Explicit critical value instead of the table");
    mc->add_option("--out", o.out, "Rank/interval CSV")->required();

    auto *sy = app.add_subcommand("synthetic", "Write a seeded synthetic traffic CSV");
    sy->add_option("--nodes", o.nodes, "Sensor count");
    sy->add_option("--steps", o.steps, "Observation count");
    sy->add_option("--seed", o.seed, "Random seed");
    sy->add_option("--out", o.out, "Output CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        std::cerr << "error: " << e.what() << "\n\n";
        const CLI::App *failing = &app;
        for (const auto *sub : app.get_subcommands()) {
            failing = sub;
        }
        std::cerr << failing->help();
        return 2;
    }

    try {
        if (*dec) {
            return run_decompose(o);
        }
        if (*bg) {
            return run_build_graph(o);
        }
        if (*tr) {
            return run_train(o);
        }
        if (*fc) {
            return run_forecast(o);
        }
        if (*sw) {
            return run_sweep(o);
        }
        if (*cf) {
            return run_conformal(o);
        }
        if (*ev) {
            return run_evaluate(o);
        }
        if (*mc) {
            return run_mcb(o);
        }
        if (*sy) {
            return run_synthetic(o);
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
