#include "catch_amalgamated.hpp"

#include <cmath>

#include "op_catalogue.hpp"
#include "wdstagnn/error.hpp"
#include "wdstagnn/numerics/autodiff.hpp"
#include "wdstagnn/numerics/gradcheck.hpp"
#include "wdstagnn/numerics/optim.hpp"

using namespace wdstagnn;
using Catch::Approx;

TEST_CASE("matmul values", "[autodiff][matmul]") {
    Graph g;
    std::mt19937_64 rng(3);
    const Tensor b = test_support::random_tensor({3, 2}, rng);
    Var y = matmul(g.constant(Tensor::identity(3)), g.constant(b));
    REQUIRE(max_abs_diff(y.value(), b) == 0.0);

    Var z = matmul(g.constant(Tensor::matrix({{1, 2}, {3, 4}})), g.constant(Tensor::matrix({{1}, {1}})));
    REQUIRE(z.value()(0, 0) == 3.0);
    REQUIRE(z.value()(1, 0) == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes", "[autodiff][matmul]") {
    Graph g;
    Var a = g.constant(Tensor({2, 3}));
    Var b = g.constant(Tensor({4, 2}));
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError &e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("(2, 3)") != std::string::npos);
        REQUIRE(msg.find("(4, 2)") != std::string::npos);
    }
}

TEST_CASE("matmul gradient against an explicit triple loop", "[autodiff][matmul]") {
    // d sum(W .* (A B)) / dA = W B^T
    std::mt19937_64 rng(5);
    const Tensor a = test_support::random_tensor({3, 4}, rng);
    const Tensor b = test_support::random_tensor({4, 2}, rng);
    const Tensor w = test_support::random_tensor({3, 2}, rng);
    Graph g;
    Var va = g.variable(a);
    Var loss = sum(mul(matmul(va, g.constant(b)), g.constant(w)));
    g.backward(loss);
    const Tensor ga = g.grad(va);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t k = 0; k < 4; ++k) {
            double expect = 0.0;
            for (std::size_t j = 0; j < 2; ++j) {
                expect += w(i, j) * b(k, j);
            }
            REQUIRE(ga(i, k) == Approx(expect).margin(1e-14));
        }
    }
}

TEST_CASE("softmax_last rows, symmetry and shift invariance", "[autodiff][softmax]") {
    Graph g;
    Var u = softmax_last(g.constant(Tensor({3}, 0.0)));
    for (double v : u.value().values()) {
        REQUIRE(v == Approx(1.0 / 3.0).margin(1e-15));
    }
    Var l = softmax_last(g.constant(Tensor({3}, std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0)})));
    REQUIRE(l.value()[0] == Approx(1.0 / 6.0).margin(1e-15));
    REQUIRE(l.value()[1] == Approx(2.0 / 6.0).margin(1e-15));
    REQUIRE(l.value()[2] == Approx(3.0 / 6.0).margin(1e-15));

    const Tensor base = softmax_last(g.constant(Tensor({2}, std::vector<double>{0.0, 100.0}))).value();
    for (double c : {-1e3, -5.0, 7.5, 1e3}) {
        const Tensor shifted = softmax_last(g.constant(Tensor({2}, std::vector<double>{c, c + 100.0}))).value();
        REQUIRE(max_abs_diff(base, shifted) <= 1e-12);
    }

    std::mt19937_64 rng(9);
    const Tensor x = test_support::random_tensor({50, 13}, rng, -30.0, 30.0);
    const Tensor y = softmax_last(g.constant(x)).value();
    for (std::size_t r = 0; r < 50; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 13; ++j) {
            const double v = y[r * 13 + j];
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
            s += v;
        }
        REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("layer_norm cases", "[autodiff][layer_norm]") {
    Graph g;
    Var one = g.constant(Tensor({2}, 1.0));
    Var zero = g.constant(Tensor({2}, 0.0));
    Var c = layer_norm(g.constant(Tensor({2}, 4.0)), one, zero, 1e-5);
    REQUIRE(c.value()[0] == 0.0);
    REQUIRE(c.value()[1] == 0.0);

    Var t = layer_norm(g.constant(Tensor({2}, std::vector<double>{1.0, 3.0})), one, zero, 1e-12);
    REQUIRE(t.value()[0] == Approx(-1.0).margin(1e-9));
    REQUIRE(t.value()[1] == Approx(1.0).margin(1e-9));

    std::mt19937_64 rng(2);
    const std::size_t n = 64;
    Var x = g.constant(test_support::random_tensor({10, n}, rng, -5.0, 5.0));
    Var y = layer_norm(x, g.constant(Tensor({n}, 1.0)), g.constant(Tensor({n}, 0.0)), 1e-12);
    for (std::size_t r = 0; r < 10; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += y.value()[r * n + j];
        }
        mean /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
            const double d = y.value()[r * n + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        REQUIRE(std::abs(mean) <= 1e-12);
        REQUIRE(std::abs(var - 1.0) <= 1e-6);
    }
    REQUIRE_THROWS_AS(layer_norm(x, g.constant(Tensor({n}, 1.0)), g.constant(Tensor({n})), 0.0), ParameterError);
}

TEST_CASE("conv1d lengths, bias and impulse response", "[autodiff][conv1d]") {
    Graph g;
    Var k = g.constant(Tensor({1, 1, 3}, std::vector<double>{0.5, -1.0, 2.0}));
    Var b = g.constant(Tensor({1}, 0.25));
    Var z = conv1d(g.constant(Tensor({1, 1, 12})), k, b, 1);
    REQUIRE(z.shape() == Shape{1, 1, 10});
    for (double v : z.value().values()) {
        REQUIRE(v == 0.25);
    }

    Tensor impulse({1, 1, 12});
    impulse[6] = 1.0;
    Var y = conv1d(g.constant(impulse), k, Var{}, 1);
    // outputs at t = 4, 5, 6 see the impulse at tap 2, 1, 0
    REQUIRE(y.value()[4] == 2.0);
    REQUIRE(y.value()[5] == -1.0);
    REQUIRE(y.value()[6] == 0.5);

    for (std::size_t m = 1; m <= 15; ++m) {
        for (std::size_t s = 1; s <= m; ++s) {
            for (std::size_t stride = 1; stride <= 4; ++stride) {
                REQUIRE(conv1d_output_length(m, s, stride) == (m - s) / stride + 1);
            }
        }
    }
    REQUIRE_THROWS_AS(conv1d(g.constant(Tensor({1, 1, 2})), k, Var{}, 1), DimensionError);
}

TEST_CASE("backward contract and trivial gradients", "[autodiff][backward]") {
    Graph g;
    Var p = g.variable(Tensor({2, 3}, 0.7));
    Var loss = sum(p);
    g.backward(loss);
    const Tensor gp = g.grad(p);
    for (double v : gp.values()) {
        REQUIRE(v == 1.0);
    }
    REQUIRE_THROWS_AS(g.backward(p), ContractError);

    Graph h;
    Var pred = h.variable(Tensor({4}, 1.5));
    Var hl = huber_loss(pred, h.constant(Tensor({4}, 1.5)), 1.0);
    REQUIRE(hl.value().item() == 0.0);
    h.backward(hl);
    const Tensor gpred = h.grad(pred);
    for (double v : gpred.values()) {
        REQUIRE(v == 0.0);
    }
}

TEST_CASE("huber loss branches", "[autodiff][huber]") {
    Graph g;
    auto single = [&](double e) {
        return huber_loss(g.constant(Tensor({1}, e)), g.constant(Tensor({1}, 0.0)), 1.0).value().item();
    };
    REQUIRE(single(1.0) == 0.5);
    REQUIRE(single(3.0) == 2.5);
    REQUIRE(single(-3.0) == 2.5);
    REQUIRE_THROWS_AS(huber_loss(g.constant(Tensor({1})), g.constant(Tensor({1})), 0.0), ParameterError);
    REQUIRE_THROWS_AS(huber_loss(g.constant(Tensor({1})), g.constant(Tensor({2})), 1.0), DimensionError);
}

TEST_CASE("every differentiable operation passes a finite-difference check", "[autodiff][gradcheck]") {
    for (const auto &c : op_catalogue::cases()) {
        INFO(c.name);
        const auto r = gradcheck::check_inputs(c.inputs, c.loss);
        INFO(r.worst);
        REQUIRE(r.checked > 0);
        REQUIRE(r.ok());
    }
}

TEST_CASE("parameters bound twice share one leaf", "[autodiff][parameters]") {
    ParameterStore ps{{"w", Tensor({2}, 2.0)}};
    Graph g(&ps);
    Var loss = sum(mul(g.parameter("w"), g.parameter("w")));
    g.backward(loss);
    const auto grads = g.gradients();
    REQUIRE(grads.at("w")[0] == 4.0);
    REQUIRE_THROWS(g.parameter("missing"));
}

TEST_CASE("operations are deterministic", "[autodiff]") {
    std::mt19937_64 rng(1);
    const Tensor a = test_support::random_tensor({4, 6, 5}, rng);
    const Tensor k = test_support::random_tensor({3, 6, 3}, rng);
    auto run = [&] {
        Graph g;
        return softmax_last(conv1d(g.constant(a), g.constant(k), Var{}, 1)).value();
    };
    const Tensor x = run(), y = run();
    REQUIRE(std::equal(x.values().begin(), x.values().end(), y.values().begin()));
}

TEST_CASE("adam: zero gradient, first step and convex descent", "[optim]") {
    ParameterStore p{{"w", Tensor({3}, std::vector<double>{1.0, -2.0, 0.5})}};
    AdamState s;
    adam_step(p, {{"w", Tensor({3})}}, s);
    REQUIRE(p.at("w")[0] == 1.0);
    REQUIRE(p.at("w")[1] == -2.0);
    REQUIRE(s.step == 1);

    ParameterStore q{{"w", Tensor({2}, 0.0)}};
    AdamState t;
    adam_step(q, {{"w", Tensor({2}, std::vector<double>{3.0, -0.01})}}, t);
    // m_hat / sqrt(v_hat) = g / |g| up to epsilon
    REQUIRE(q.at("w")[0] == Approx(-1e-4).epsilon(1e-6));
    REQUIRE(q.at("w")[1] == Approx(1e-4).epsilon(1e-5));

    // f(x) = (x - 3)^2 from x = 0 with lr 0.05: monotone decrease after step 2
    ParameterStore r{{"x", Tensor({1}, 0.0)}};
    AdamState u;
    u.learning_rate = 0.05;
    auto f = [&] { return std::pow(r.at("x")[0] - 3.0, 2); };
    std::vector<double> values;
    for (int i = 0; i < 100; ++i) {
        adam_step(r, {{"x", Tensor({1}, 2.0 * (r.at("x")[0] - 3.0))}}, u);
        values.push_back(f());
    }
    for (std::size_t i = 2; i < values.size(); ++i) {
        REQUIRE(values[i] < values[i - 1]);
    }

    ParameterStore bad{{"w", Tensor({1}, 1.0)}};
    AdamState v;
    try {
        adam_step(bad, {{"w", Tensor({1}, std::numeric_limits<double>::infinity())}}, v);
        FAIL("expected TrainingError");
    } catch (const TrainingError &e) {
        REQUIRE(std::string(e.what()).find("'w'") != std::string::npos);
    }
    REQUIRE(bad.at("w")[0] == 1.0);
    REQUIRE(v.step == 0);
}
