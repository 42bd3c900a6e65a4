#include <doctest.h>

#include <cmath>
#include <vector>

#include <niff/rng.hpp>
#include <niff/sgd.hpp>
#include <niff/tensor.hpp>

#include "gradient_scenarios.hpp"

using namespace niff;

TEST_CASE("matmul against hand results") {
    auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto c = matmul(a, eye);
    CHECK(c.at({0, 0}) == 1.0);
    CHECK(c.at({0, 1}) == 2.0);
    CHECK(c.at({1, 0}) == 3.0);
    CHECK(c.at({1, 1}) == 4.0);

    auto row = Tensor::from_data({1, 2}, {1, 2});
    auto col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col).value() == 11.0);

    CHECK_THROWS_AS(matmul(row, row), DimensionError);
}

TEST_CASE("linear equals matmul with transposed weights plus bias") {
    auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto w = Tensor::from_data({2, 3}, {1, 0, 0, 0, 1, 0});
    auto b = Tensor::from_data({2}, {10, 20});
    auto y = linear(x, w, b);
    CHECK(y.at({0, 0}) == 11.0);
    CHECK(y.at({0, 1}) == 22.0);
    CHECK(y.at({1, 0}) == 14.0);
    CHECK(y.at({1, 1}) == 25.0);
}

TEST_CASE("conv2d with a unit 1x1 kernel scales the input") {
    auto x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Tensor::from_data({1, 1, 1, 1}, {2.0});
    auto b = Tensor::from_data({1}, {0.0});
    auto y = conv2d(x, w, b, 0);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) CHECK(y.at({0, 0, i, j}) == 2.0 * x.at({0, 0, i, j}));
}

TEST_CASE("conv2d padding produces overlap counts on all-ones input") {
    auto x = Tensor::full({1, 1, 3, 3}, 1.0);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0);
    auto b = Tensor::from_data({1}, {0.0});
    auto y = conv2d(x, w, b, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.at({0, 0, 1, 1}) == 9.0);
    CHECK(y.at({0, 0, 0, 1}) == 6.0);
    CHECK(y.at({0, 0, 1, 0}) == 6.0);
    CHECK(y.at({0, 0, 0, 0}) == 4.0);
    CHECK(y.at({0, 0, 2, 2}) == 4.0);
}

TEST_CASE("conv2d is cross-correlation, not flipped convolution") {
    // Kernel with a single off-center tap: output at (0,0) picks input at
    // (0,0)+(tap offset - pad), which distinguishes the two conventions.
    auto x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    std::vector<double> kd(9, 0.0);
    kd[2 * 3 + 2] = 1.0;  // bottom-right tap
    auto w = Tensor::from_data({1, 1, 3, 3}, kd);
    auto b = Tensor::from_data({1}, {0.0});
    auto y = conv2d(x, w, b, 1);
    CHECK(y.at({0, 0, 0, 0}) == 5.0);
    CHECK(y.at({0, 0, 1, 1}) == 9.0);
    CHECK(y.at({0, 0, 2, 2}) == 0.0);
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
    auto x = Tensor::full({2, 4}, 0.37);
    auto y = softmax(x);
    for (int j = 0; j < 4; ++j) CHECK(y.at({0, j}) == doctest::Approx(0.25).epsilon(1e-12));

    Rng rng(7);
    std::vector<double> data(12);
    for (double& v : data) v = rng.uniform(-3, 3);
    auto z = softmax(Tensor::from_data({3, 4}, data));
    for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int j = 0; j < 4; ++j) s += z.at({i, j});
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax is invariant to per-row shifts") {
    Rng rng(11);
    std::vector<double> data(8);
    for (double& v : data) v = rng.uniform(-2, 2);
    auto x = Tensor::from_data({2, 4}, data);
    for (double& v : data) v += 5.25;
    auto shifted = Tensor::from_data({2, 4}, data);
    auto a = softmax(x);
    auto b = softmax(shifted);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) CHECK(a.at({i, j}) == doctest::Approx(b.at({i, j})).epsilon(1e-12));
}

TEST_CASE("relu clamps negatives and passes positives") {
    auto x = Tensor::from_data({1, 4}, {-2, -0.5, 0.5, 2});
    auto y = relu(x);
    CHECK(y.at({0, 0}) == 0.0);
    CHECK(y.at({0, 1}) == 0.0);
    CHECK(y.at({0, 2}) == 0.5);
    CHECK(y.at({0, 3}) == 2.0);
}

TEST_CASE("avg_pool2d of a constant map returns the constant") {
    auto x = Tensor::full({2, 3, 4, 5}, 1.75);
    auto y = avg_pool2d(x);
    CHECK(y.shape() == Shape{2, 3});
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) CHECK(y.at({n, c}) == doctest::Approx(1.75).epsilon(1e-14));
}

TEST_CASE("cross_entropy of uniform logits is log of class count") {
    auto logits = Tensor::full({4, 7}, 0.0);
    std::vector<int> labels{0, 3, 5, 6};
    CHECK(cross_entropy(logits, labels).value() == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("select_class_block gathers the labelled column blocks") {
    std::vector<double> data(2 * 6);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(i);
    auto x = Tensor::from_data({2, 6}, data);
    std::vector<int> labels{2, 0};
    auto y = select_class_block(x, labels, 2);
    CHECK(y.at({0, 0}) == 4.0);
    CHECK(y.at({0, 1}) == 5.0);
    CHECK(y.at({1, 0}) == 6.0);
    CHECK(y.at({1, 1}) == 7.0);
    std::vector<int> bad{3, 0};
    CHECK_THROWS_AS(select_class_block(x, bad, 2), ContractError);
}

TEST_CASE("backward accumulates leaf gradients across calls") {
    auto x = Tensor::from_data({1, 3}, {1, 2, 3}, true);
    auto loss = mean(mul(x, x));
    backward(loss);
    std::vector<double> once(x.grad().begin(), x.grad().end());
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));
    }
    x.zero_grad();
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward accumulates over separate graphs sharing a leaf") {
    auto x = Tensor::from_data({1, 2}, {1.0, -2.0}, true);
    backward(sum(mul(x, x)));
    backward(sum(x));
    CHECK(x.grad()[0] == doctest::Approx(2.0 * 1.0 + 1.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(2.0 * -2.0 + 1.0).epsilon(1e-12));
}

TEST_CASE("frozen conv kernels receive no gradient and input still does") {
    auto x = Tensor::from_data({1, 1, 3, 3}, std::vector<double>(9, 0.5), true);
    auto w = Tensor::full({1, 1, 3, 3}, 0.25);
    auto b = Tensor::from_data({1}, {0.0});
    auto loss = mean(conv2d(x, w, b, 1));
    backward(loss);
    CHECK_FALSE(w.has_grad());
    double total = 0.0;
    for (double g : x.grad()) total += std::abs(g);
    CHECK(total > 0.0);
}

TEST_CASE("detached copies data and drops the graph") {
    auto x = Tensor::from_data({2}, {3, 4}, true);
    auto y = mul_scalar(x, 2.0);
    auto d = y.detached();
    CHECK_FALSE(d.requires_grad());
    CHECK(d.at({0}) == 6.0);
    d.data_mut()[0] = 99.0;
    CHECK(y.at({0}) == 6.0);
}

TEST_CASE("finite differences confirm every operator gradient") {
    Rng rng(20240817);
    for (auto& scenario : gradcheck::all_scenarios()) {
        for (int trial = 0; trial < 3; ++trial) {
            auto fork = rng.fork(Rng::mix(std::hash<std::string>{}(scenario.name), trial));
            const double err = scenario.max_rel_err(fork);
            INFO(scenario.name << " trial " << trial);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("sgd follows the momentum recurrence exactly") {
    SUBCASE("without weight decay") {
        auto p = Tensor::from_data({1}, {1.0}, true);
        SgdOptimizer opt({.learning_rate = 0.1, .momentum = 0.9, .weight_decay = 0.0});
        opt.add_parameters({p});
        p.grad_mut()[0] = 0.5;
        opt.step();
        CHECK(p.value() == doctest::Approx(0.95).epsilon(1e-12));
        p.zero_grad();
        p.grad_mut()[0] = 0.5;
        opt.step();
        // v = 0.9*0.5 + 0.5 = 0.95 ; p = 0.95 - 0.095
        CHECK(p.value() == doctest::Approx(0.855).epsilon(1e-12));
    }
    SUBCASE("with weight decay") {
        auto p = Tensor::from_data({1}, {1.0}, true);
        SgdOptimizer opt({.learning_rate = 0.1, .momentum = 0.9, .weight_decay = 0.1});
        opt.add_parameters({p});
        p.grad_mut()[0] = 0.5;
        opt.step();
        // v = 0.5 + 0.1*1 = 0.6 ; p = 1 - 0.06
        CHECK(p.value() == doctest::Approx(0.94).epsilon(1e-12));
        p.zero_grad();
        p.grad_mut()[0] = 0.5;
        opt.step();
        // v = 0.9*0.6 + 0.5 + 0.1*0.94 = 1.134 ; p = 0.94 - 0.1134
        CHECK(p.value() == doctest::Approx(0.8266).epsilon(1e-12));
    }
}

TEST_CASE("sgd with momentum settles a quadratic bowl") {
    auto p = Tensor::from_data({4}, {5, -3, 2, 0.5}, true);
    auto target = Tensor::from_data({4}, {1, 2, -1, 0});
    SgdOptimizer opt({.learning_rate = 0.05, .momentum = 0.9, .weight_decay = 0.0});
    opt.add_parameters({p});
    for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        auto d = sub(p, target);
        backward(mul_scalar(sum(mul(d, d)), 0.5));
        opt.step();
    }
    for (int i = 0; i < 4; ++i) CHECK(p.at({i}) == doctest::Approx(target.at({i})).epsilon(1e-6));
}

TEST_CASE("sgd config and parameter contracts are enforced") {
    CHECK_THROWS_AS(SgdOptimizer({.learning_rate = 0.0, .momentum = 0.0, .weight_decay = 0.0}), ConfigError);
    CHECK_THROWS_AS(SgdOptimizer({.learning_rate = 0.1, .momentum = 1.0, .weight_decay = 0.0}), ConfigError);
    CHECK_THROWS_AS(SgdOptimizer({.learning_rate = 0.1, .momentum = 0.0, .weight_decay = -0.1}), ConfigError);
    try {
        SgdOptimizer({.learning_rate = -1.0, .momentum = 0.0, .weight_decay = 0.0});
        CHECK(false);
    } catch (const ConfigError& e) {
        CHECK(e.field() == "learning_rate");
    }

    SgdOptimizer opt({.learning_rate = 0.1, .momentum = 0.0, .weight_decay = 0.0});
    auto frozen = Tensor::from_data({2}, {1, 2}, false);
    CHECK_THROWS_AS(opt.add_parameters({frozen}), ContractError);
}

TEST_CASE("shape validation rejects malformed operands") {
    auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(sum_rows(Tensor::from_data({3}, {1, 2, 3})), DimensionError);
    auto x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Tensor::from_data({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    auto bias = Tensor::from_data({1}, {0.0});
    CHECK_THROWS_AS(conv2d(x, w, bias, 0), DimensionError);
    CHECK(conv2d(x, w, bias, 1).shape() == Shape{1, 1, 2, 2});
}

TEST_CASE("rng forks are deterministic and stream-separated") {
    Rng a(42), b(42);
    CHECK(a.next() == b.next());
    CHECK(a.fork(1).next() == b.fork(1).next());
    CHECK(Rng(42).fork(1).next() != Rng(42).fork(2).next());
    Rng n(7);
    double m = 0.0;
    for (int i = 0; i < 10000; ++i) m += n.normal();
    CHECK(std::abs(m / 10000.0) < 0.05);
}
