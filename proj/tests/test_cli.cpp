#include "catch_amalgamated.hpp"

#include <cmath>
#include <filesystem>

#include "cli_runner.hpp"
#include "test_support.hpp"
#include "wdstagnn/data_io.hpp"

using namespace wdstagnn;
using cli_runner::quote;
using cli_runner::run;
using cli_runner::slurp;
using test_support::TempDir;

namespace {

const char *kSmallConfig = "blocks=1\nd_model=6\nheads=3\nchannels=3\ncheb_order=3\nlevel=2\n"
                           "batch_size=64\np_sp=0.5\nepochs=1\n";

void write_text(const std::string &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

} // namespace

TEST_CASE("help exits zero for every subcommand", "[cli]") {
    const auto top = run("--help");
    REQUIRE(top.status == 0);
    for (const char *sub : {"decompose", "build-graph", "train", "forecast", "sweep-level", "conformal", "evaluate",
                            "mcb", "synthetic"}) {
        INFO(sub);
        REQUIRE(top.output.find(sub) != std::string::npos);
        const auto r = run(std::string(sub) + " --help");
        REQUIRE(r.status == 0);
        REQUIRE(r.output.find("--") != std::string::npos);
    }
}

TEST_CASE("usage errors exit 2, runtime errors exit 1", "[cli]") {
    TempDir dir("cli_err");
    const auto none = run("");
    REQUIRE(none.status == 2);
    const auto unknown = run("decompose --input x.csv --out-dir d --bogus 1");
    REQUIRE(unknown.status == 2);
    REQUIRE(unknown.output.find("error:") != std::string::npos);
    REQUIRE(unknown.output.find("--filter") != std::string::npos); // subcommand help follows
    REQUIRE(run("decompose --out-dir d").status == 2);
    REQUIRE(run("decompose --input x.csv --out-dir d --filter coif").status == 2);
    REQUIRE(run("mcb --table t.csv --out o.csv --tie low").status == 2);

    const std::string missing = dir.file("nope.csv");
    const auto r = run("decompose --input " + quote(missing) + " --out-dir " + quote(dir.file("o")));
    REQUIRE(r.status == 1);
    REQUIRE(r.output.find("error:") != std::string::npos);
    REQUIRE(r.output.find(missing) != std::string::npos);

    write_text(dir.file("bad.csv"), "a,b\n1,2\n3,x\n");
    const auto bad = run("decompose --input " + quote(dir.file("bad.csv")) + " --out-dir " + quote(dir.file("o")));
    REQUIRE(bad.status == 1);
    REQUIRE(bad.output.find("line 3") != std::string::npos);

    REQUIRE(run("synthetic --nodes 4 --steps 2000 --out " + quote(dir.file("s.csv"))).status == 0);
    write_text(dir.file("bad.cfg"), "blocks=2\nwidth=3\n");
    const auto cfg = run("train --data " + quote(dir.file("s.csv")) + " --config " + quote(dir.file("bad.cfg")) +
                         " --out " + quote(dir.file("run")));
    REQUIRE(cfg.status == 1);
    REQUIRE(cfg.output.find("width") != std::string::npos);
}

TEST_CASE("decompose writes components that sum to the input", "[cli][decompose]") {
    TempDir dir("cli_dec");
    REQUIRE(run("synthetic --nodes 3 --steps 600 --seed 4 --out " + quote(dir.file("s.csv"))).status == 0);
    for (const char *filter : {"haar", "d4"}) {
        INFO(filter);
        const std::string out = dir.file(std::string("mra_") + filter);
        const auto r = run("decompose --input " + quote(dir.file("s.csv")) + " --filter " + filter +
                           " --level 2 --out-dir " + quote(out));
        REQUIRE(r.status == 0);
        std::size_t files = 0;
        for (const auto &e : std::filesystem::directory_iterator(out)) {
            (void)e;
            ++files;
        }
        REQUIRE(files == 3);
        const auto src = data_io::load_csv(dir.file("s.csv"));
        const std::size_t n = 3, m = 600;
        std::vector<double> total(n * m, 0.0);
        for (const char *part : {"detail_1.csv", "detail_2.csv", "smooth_2.csv"}) {
            const auto t = data_io::read_csv(out + "/" + part);
            REQUIRE(t.header == std::vector<std::string>{"t", "node", "value"});
            REQUIRE(t.rows.size() == n * m);
            for (std::size_t r = 0; r < t.rows.size(); ++r) {
                const auto time = static_cast<std::size_t>(t.number(r, 0));
                const std::size_t node = std::stoul(t.rows[r][1].substr(1)); // ids are s0, s1, ...
                total[node * m + time] += t.number(r, 2);
            }
        }
        double worst = 0.0;
        for (std::size_t k = 0; k < total.size(); ++k) {
            worst = std::max(worst, std::abs(total[k] - src.series[k]));
        }
        REQUIRE(worst < 1e-10);
    }
}

TEST_CASE("train, forecast, evaluate and conformal end to end", "[cli][pipeline]") {
    TempDir dir("cli_run");
    const std::string data = quote(dir.file("s.csv"));
    REQUIRE(run("synthetic --nodes 3 --steps 900 --seed 2 --out " + data).status == 0);
    write_text(dir.file("run.cfg"), kSmallConfig);
    const std::string cfg = quote(dir.file("run.cfg"));

    const auto g = run("build-graph --data " + data + " --p-sp 0.5 --out-dir " + quote(dir.file("graph")));
    REQUIRE(g.status == 0);
    const Tensor stag = data_io::load_matrix(dir.file("graph/A_STAG.csv"));
    REQUIRE(stag.shape() == Shape{3, 3});
    REQUIRE(data_io::load_matrix(dir.file("graph/A_STRG.csv")).shape() == Shape{3, 3});

    SECTION("zero epochs gives a reproducible checkpoint") {
        for (const char *name : {"a", "b"}) {
            REQUIRE(run("train --data " + data + " --config " + cfg + " --epochs 0 --seed 5 --out " +
                        quote(dir.file(name)))
                        .status == 0);
        }
        REQUIRE(std::filesystem::exists(dir.file("a/checkpoint.bin")));
        REQUIRE(slurp(dir.file("a/checkpoint.bin")) == slurp(dir.file("b/checkpoint.bin")));
        REQUIRE(slurp(dir.file("a/train_log.csv")) == "epoch,train_loss,val_loss,val_mae,wall_seconds\n");
        REQUIRE(run("train --data " + data + " --config " + cfg + " --epochs 0 --seed 6 --out " +
                    quote(dir.file("c")))
                    .status == 0);
        REQUIRE(slurp(dir.file("a/checkpoint.bin")) != slurp(dir.file("c/checkpoint.bin")));
    }
    SECTION("one epoch through every downstream command") {
        const auto t = run("train --data " + data + " --config " + cfg + " --seed 1 --out " + quote(dir.file("m")));
        REQUIRE(t.status == 0);
        REQUIRE(t.output.find("epoch 1 ") != std::string::npos);
        const auto log = data_io::read_csv(dir.file("m/train_log.csv"));
        REQUIRE(log.rows.size() == 1);
        REQUIRE(std::filesystem::exists(dir.file("m/run_config.txt")));

        const std::string ckpt = quote(dir.file("m/checkpoint.bin"));
        REQUIRE(run("forecast --checkpoint " + ckpt + " --data " + data + " --segment val --out " +
                    quote(dir.file("val.csv")))
                    .status == 0);
        REQUIRE(run("forecast --checkpoint " + ckpt + " --data " + data + " --out " + quote(dir.file("test.csv")))
                    .status == 0);
        const auto test = data_io::load_forecasts(dir.file("test.csv"));
        // 900 steps at 7:1:2 -> test segment starts at 720 and holds 180 - 23 windows
        REQUIRE(test.windows() == 157);
        REQUIRE(test.t.front() == 732);
        REQUIRE(test.y.shape() == Shape{157, 3, 12});

        const auto ev = run("evaluate --forecast " + quote(dir.file("test.csv")) + " --out " +
                            quote(dir.file("metrics.csv")));
        REQUIRE(ev.status == 0);
        const auto metrics = data_io::read_csv(dir.file("metrics.csv"));
        REQUIRE(metrics.header == std::vector<std::string>{"scope", "mae", "rmse", "mape", "mape_excluded"});
        REQUIRE(metrics.rows.size() == 13);
        REQUIRE(metrics.rows[0][0] == "all");
        REQUIRE(metrics.rows[12][0] == "step12");
        REQUIRE(metrics.number(0, 2) >= metrics.number(0, 1));

        const auto cf = run("conformal --calibration " + quote(dir.file("val.csv")) + " --forecast " +
                            quote(dir.file("test.csv")) + " --alpha 50 --beta 0.1 --out " +
                            quote(dir.file("intervals.csv")));
        REQUIRE(cf.status == 0);
        REQUIRE(cf.output.find("coverage overall=") != std::string::npos);
        const auto iv = data_io::read_csv(dir.file("intervals.csv"));
        REQUIRE(iv.header ==
                std::vector<std::string>{"t", "node", "step", "y", "pred", "lo", "hi", "covered"});
        REQUIRE(iv.rows.size() == 157 * 3 * 12);
        for (std::size_t r = 0; r < iv.rows.size(); ++r) {
            REQUIRE(iv.number(r, 5) <= iv.number(r, 4));
            REQUIRE(iv.number(r, 6) >= iv.number(r, 4));
        }

        const auto mismatch = run("conformal --calibration " + quote(dir.file("metrics.csv")) + " --forecast " +
                                  quote(dir.file("test.csv")) + " --out " + quote(dir.file("x.csv")));
        REQUIRE(mismatch.status == 1);
    }
}

TEST_CASE("mcb over an error table", "[cli][mcb]") {
    TempDir dir("cli_mcb");
    write_text(dir.file("t.csv"), "model,PeMS-BAY,PeMS03,PeMS04\n"
                                  "GMAN,1.86,16.87,19.14\n"
                                  "DSTAGNN,1.72,15.57,19.30\n"
                                  "W-DSTAGNN,1.70,15.31,19.30\n");
    const auto r = run("mcb --table " + quote(dir.file("t.csv")) + " --out " + quote(dir.file("o.csv")));
    REQUIRE(r.status == 0);
    REQUIRE(r.output.find("critical_value=") != std::string::npos);
    const auto o = data_io::read_csv(dir.file("o.csv"));
    REQUIRE(o.header == std::vector<std::string>{"model", "mean_rank", "lo", "hi", "significant", "best"});
    REQUIRE(o.rows[2][0] == "W-DSTAGNN");
    // ranks 1, 1, 3 under the max-rank tie rule
    REQUIRE(o.number(2, 1) == Catch::Approx(5.0 / 3.0));
    const auto mid = run("mcb --table " + quote(dir.file("t.csv")) + " --tie mid --out " + quote(dir.file("m.csv")));
    REQUIRE(mid.status == 0);
    REQUIRE(data_io::read_csv(dir.file("m.csv")).number(2, 1) == Catch::Approx(1.5));
}
