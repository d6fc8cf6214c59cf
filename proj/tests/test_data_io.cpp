#include "catch_amalgamated.hpp"

#include <cmath>
#include <fstream>

#include "test_support.hpp"
#include "wdstagnn/data_io.hpp"
#include "wdstagnn/error.hpp"

using namespace wdstagnn;
using namespace wdstagnn::data_io;
using test_support::TempDir;

namespace {

void write_text(const std::string &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string read_text(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double correlation(const double *a, const double *b, std::size_t m) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t t = 0; t < m; ++t) {
        ma += a[t];
        mb += b[t];
    }
    ma /= static_cast<double>(m);
    mb /= static_cast<double>(m);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t t = 0; t < m; ++t) {
        sab += (a[t] - ma) * (b[t] - mb);
        saa += (a[t] - ma) * (a[t] - ma);
        sbb += (b[t] - mb) * (b[t] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace

TEST_CASE("dataset descriptors", "[data_io]") {
    const auto bay = find_dataset("PeMS-BAY");
    REQUIRE(bay.has_value());
    REQUIRE(bay->nodes == 325);
    REQUIRE(bay->observations == 52116);
    REQUIRE(bay->granularity_minutes == 5);
    REQUIRE(find_dataset("PeMS04")->nodes == 307);
    REQUIRE(find_dataset("PeMS03")->observations == 26209);
    REQUIRE_FALSE(find_dataset("METR-LA").has_value());
    REQUIRE(bay->span_minutes() == 52116 * 5);
}

TEST_CASE("load_csv layout and descriptor", "[data_io][csv]") {
    TempDir dir("load");
    const std::string path = dir.file("road.csv");
    write_text(path, "a,b\n1,2\n3,4.5\n5,6\n");
    const auto s = load_csv(path);
    REQUIRE(s.series.shape() == Shape{2, 1, 3});
    REQUIRE(s.series[0] == 1.0);
    REQUIRE(s.series[2] == 5.0);
    REQUIRE(s.series[4] == 4.5);
    REQUIRE(s.sensor_ids == std::vector<std::string>{"a", "b"});
    REQUIRE(s.descriptor.name == "road");
    REQUIRE(s.descriptor.nodes == 2);
    REQUIRE(s.descriptor.observations == 3);
}

TEST_CASE("load_csv rejects bad cells with their location", "[data_io][csv]") {
    TempDir dir("bad");
    auto message = [&](const std::string &text) {
        const std::string path = dir.file("x.csv");
        write_text(path, text);
        try {
            load_csv(path);
        } catch (const DataError &e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    REQUIRE(message("a,b\n1,2\n3\n").find("line 3") != std::string::npos);
    const std::string nonnum = message("a,b\n1,2\n3,abc\n");
    REQUIRE(nonnum.find("line 3") != std::string::npos);
    REQUIRE(nonnum.find("column 2") != std::string::npos);
    REQUIRE(nonnum.find("abc") != std::string::npos);
    REQUIRE(message("a,b\n1,\n").find("column 2") != std::string::npos);
    REQUIRE(message("a,b\n1,nan\n").find("not finite") != std::string::npos);
    REQUIRE(message("a,b\n").find("no observations") != std::string::npos);
    REQUIRE(message("").find("header") != std::string::npos);
    REQUIRE_THROWS_AS(load_csv(dir.file("missing.csv")), DataError);
}

TEST_CASE("save_csv and matrices round trip", "[data_io][csv]") {
    TempDir dir("roundtrip");
    std::mt19937_64 rng(2);
    Tensor x = test_support::random_tensor({3, 1, 20}, rng, -1e3, 1e3);
    for (double &v : x.values()) {
        v = std::stod(format_number(v)); // 12 significant digits
    }
    save_csv(dir.file("s.csv"), x, {"p", "q", "r"});
    const auto back = load_csv(dir.file("s.csv"));
    REQUIRE(max_abs_diff(back.series, x) == 0.0);
    REQUIRE(back.sensor_ids == std::vector<std::string>{"p", "q", "r"});
    REQUIRE_THROWS_AS(save_csv(dir.file("t.csv"), x, {"p"}), DimensionError);

    Tensor m = test_support::random_tensor({4, 5}, rng);
    for (double &v : m.values()) {
        v = std::stod(format_number(v));
    }
    save_matrix(dir.file("m.csv"), m);
    REQUIRE(max_abs_diff(load_matrix(dir.file("m.csv")), m) == 0.0);
    REQUIRE_THROWS_AS(save_matrix(dir.file("m.csv"), Tensor({2, 2, 2})), DimensionError);
    REQUIRE(format_number(1.0 / 3.0) == "0.333333333333");
}

TEST_CASE("forecast files", "[data_io][forecast]") {
    TempDir dir("forecast");
    SECTION("empty set writes a header only") {
        save_forecasts(dir.file("e.csv"), ForecastSet{});
        REQUIRE(read_text(dir.file("e.csv")) == "t,node,step,y,pred\n");
        REQUIRE(load_forecasts(dir.file("e.csv")).windows() == 0);
    }
    SECTION("round trip with and without intervals") {
        std::mt19937_64 rng(3);
        ForecastSet f;
        f.t = {100, 101, 102};
        f.y = test_support::random_tensor({3, 2, 4}, rng, 0.0, 100.0);
        f.pred = test_support::random_tensor({3, 2, 4}, rng, 0.0, 100.0);
        save_forecasts(dir.file("f.csv"), f);
        const std::string text = read_text(dir.file("f.csv"));
        REQUIRE(text.rfind("t,node,step,y,pred\n100,0,1,", 0) == 0);
        const auto g = load_forecasts(dir.file("f.csv"));
        REQUIRE(g.t == f.t);
        REQUIRE_FALSE(g.lo.has_value());
        for (std::size_t i = 0; i < f.y.size(); ++i) {
            REQUIRE(g.y[i] == Catch::Approx(f.y[i]).epsilon(1e-11));
            REQUIRE(g.pred[i] == Catch::Approx(f.pred[i]).epsilon(1e-11));
        }

        f.lo = f.pred;
        f.hi = f.pred;
        (*f.hi)[0] = std::numeric_limits<double>::infinity();
        save_forecasts(dir.file("i.csv"), f);
        REQUIRE(read_text(dir.file("i.csv")).rfind("t,node,step,y,pred,lo,hi\n", 0) == 0);
        const auto h = load_forecasts(dir.file("i.csv"));
        REQUIRE(h.lo.has_value());
        REQUIRE(std::isinf((*h.hi)[0]));

        ForecastSet half = f;
        half.hi.reset();
        REQUIRE_THROWS_AS(save_forecasts(dir.file("h.csv"), half), DimensionError);
        ForecastSet misaligned = f;
        misaligned.t.pop_back();
        REQUIRE_THROWS_AS(save_forecasts(dir.file("h.csv"), misaligned), DimensionError);
    }
    SECTION("malformed files") {
        write_text(dir.file("a.csv"), "t,node,step,y\n");
        REQUIRE_THROWS_AS(load_forecasts(dir.file("a.csv")), DataError);
        write_text(dir.file("b.csv"), "t,node,step,y,pred\n5,0,1,1,1\n5,0,2,1,1\n5,1,1,1,1\n");
        REQUIRE_THROWS_AS(load_forecasts(dir.file("b.csv")), DataError);
        write_text(dir.file("c.csv"), "t,node,step,y,pred\n5,0,2,1,1\n5,0,1,1,1\n");
        REQUIRE_THROWS_AS(load_forecasts(dir.file("c.csv")), DataError);
        write_text(dir.file("d.csv"), "t,node,step,y,pred\n5,0,1,1,1\n6,0,2,1,1\n");
        REQUIRE_THROWS_AS(load_forecasts(dir.file("d.csv")), DataError);
    }
}

TEST_CASE("synthetic data is seeded, positive and seasonal", "[data_io][synthetic]") {
    const std::size_t n = 8, m = 4032;
    const auto a = synthetic(n, m, 42);
    const auto b = synthetic(n, m, 42);
    REQUIRE(a.series.shape() == Shape{n, 1, m});
    REQUIRE(std::equal(a.series.values().begin(), a.series.values().end(), b.series.values().begin()));
    REQUIRE(max_abs_diff(a.series, synthetic(n, m, 43).series) > 0.0);
    for (double v : a.series.values()) {
        REQUIRE(v > 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
        REQUIRE(a.coupling(i, i) == 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            REQUIRE(a.coupling(i, j) == a.coupling(j, i));
        }
    }
    // lag-288 autocorrelation
    for (std::size_t i = 0; i < n; ++i) {
        const double *row = a.series.data() + i * m;
        REQUIRE(correlation(row, row + kStepsPerDay, m - kStepsPerDay) > 0.5);
    }
    REQUIRE_THROWS_AS(synthetic(1, 1000, 1), ParameterError);
    REQUIRE_THROWS_AS(synthetic(4, 575, 1), ParameterError);
}

TEST_CASE("coupled synthetic nodes are more correlated", "[data_io][synthetic]") {
    // correlation after removing each node's mean daily profile
    for (std::uint64_t seed : {1u, 7u, 42u}) {
        for (std::size_t n : {4u, 8u, 16u}) {
            const std::size_t m = 4032;
            const auto d = synthetic(n, m, seed);
            std::vector<double> r(n * m);
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> profile(kStepsPerDay, 0.0);
                for (std::size_t t = 0; t < m; ++t) {
                    profile[t % kStepsPerDay] += d.series[i * m + t] / static_cast<double>(m / kStepsPerDay);
                }
                for (std::size_t t = 0; t < m; ++t) {
                    r[i * m + t] = d.series[i * m + t] - profile[t % kStepsPerDay];
                }
            }
            double coupled = 0.0, uncoupled = 0.0;
            std::size_t nc = 0, nu = 0;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = i + 1; j < n; ++j) {
                    const double c = correlation(&r[i * m], &r[j * m], m);
                    if (d.coupling(i, j) > 0.0) {
                        coupled += c;
                        ++nc;
                    } else {
                        uncoupled += c;
                        ++nu;
                    }
                }
            }
            INFO("seed " << seed << " nodes " << n);
            REQUIRE(nc > 0);
            REQUIRE(nu > 0);
            REQUIRE(coupled / static_cast<double>(nc) > uncoupled / static_cast<double>(nu));
        }
    }
}
