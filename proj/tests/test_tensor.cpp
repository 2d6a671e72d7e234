#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "cohesion/gradcheck.hpp"
#include "cohesion/ops.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/tensor.hpp"

using namespace cohesion;

namespace {

Tensor<double> leaf(Shape shape, std::vector<double> values) {
    return Tensor<double>::from_values(std::move(shape), std::move(values), true);
}

Tensor<double> random_leaf(Shape shape, Rng& rng) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor<double>::from_values(std::move(shape), std::move(v), true);
}

}  // namespace

TEST_CASE("scalar pipeline: relu then scale then backward") {
    auto x = Tensor<double>::scalar(2.0, true);
    auto y = relu(x) * 3.0;
    CHECK(y.item() == doctest::Approx(6.0).epsilon(1e-12));
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("matmul forward oracle") {
    auto a = leaf({2, 2}, {1, 2, 3, 4});
    auto b = leaf({2, 2}, {5, 6, 7, 8});
    auto c = matmul(a, b);
    const std::vector<double> want{19, 22, 43, 50};
    for (std::size_t i = 0; i < 4; ++i) CHECK(c.values()[i] == doctest::Approx(want[i]));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = leaf({2, 3}, std::vector<double>(6, 0.0));
    auto b = leaf({2, 2}, std::vector<double>(4, 0.0));
    try {
        matmul(a, b);
        FAIL("expected a DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("conv2d identity kernel reproduces the input") {
    // 1x1x3x3 input, 1x1x1x1 kernel of value 1, stride 1.
    auto x = leaf({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto k = leaf({1, 1, 1, 1}, {1});
    auto y = conv2d(x, k, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.values()[i] == doctest::Approx(x.values()[i]));
}

TEST_CASE("conv2d all-ones 2x2 kernel sums each window") {
    auto x = leaf({1, 1, 3, 3}, {1, 1, 1, 1, 1, 1, 1, 1, 1});
    auto k = leaf({1, 1, 2, 2}, {1, 1, 1, 1});
    auto y = conv2d(x, k, 1);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (const double v : y.values()) CHECK(v == doctest::Approx(4.0));

    // Distinct entries: windows sum the right 4 cells.
    auto x2 = leaf({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto y2 = conv2d(x2, k, 1);
    CHECK(y2.values()[0] == doctest::Approx(12.0));
    CHECK(y2.values()[1] == doctest::Approx(16.0));
    CHECK(y2.values()[2] == doctest::Approx(24.0));
    CHECK(y2.values()[3] == doctest::Approx(28.0));
}

TEST_CASE("conv2d output geometry with stride") {
    auto x = leaf({1, 1, 5, 5}, std::vector<double>(25, 1.0));
    auto k = leaf({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    CHECK(conv2d(x, k, 1).shape() == Shape{1, 1, 3, 3});
    auto strided = conv2d(x, k, 2);
    CHECK(strided.shape() == Shape{1, 1, 2, 2});
    for (const double v : strided.values()) CHECK(v == doctest::Approx(9.0));
}

TEST_CASE("conv2d matches a naive quadruple-loop reference") {
    Rng rng(7);
    const std::size_t b = 2, c = 3, h = 8, w = 8, f = 4, kh = 3, kw = 3;
    for (std::size_t stride = 1; stride <= 2; ++stride) {
        auto x = random_leaf({b, c, h, w}, rng);
        auto k = random_leaf({f, c, kh, kw}, rng);
        auto y = conv2d(x, k, stride);
        const std::size_t oh = (h - kh) / stride + 1;
        const std::size_t ow = (w - kw) / stride + 1;
        REQUIRE(y.shape() == Shape{b, f, oh, ow});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t fi = 0; fi < f; ++fi)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        double acc = 0.0;
                        for (std::size_t ci = 0; ci < c; ++ci)
                            for (std::size_t ky = 0; ky < kh; ++ky)
                                for (std::size_t kx = 0; kx < kw; ++kx)
                                    acc += x.values()[((bi * c + ci) * h + oy * stride + ky) * w +
                                                      ox * stride + kx] *
                                           k.values()[((fi * c + ci) * kh + ky) * kw + kx];
                        CHECK(y.values()[((bi * f + fi) * oh + oy) * ow + ox] ==
                              doctest::Approx(acc).epsilon(1e-12));
                    }
    }
}

TEST_CASE("softmax slices sum to one and match the closed form") {
    auto x = leaf({3}, {1, 2, 3});
    auto y = softmax(x, 0);
    CHECK(y.values()[0] == doctest::Approx(0.09003057).epsilon(1e-6));
    CHECK(y.values()[1] == doctest::Approx(0.24472847).epsilon(1e-6));
    CHECK(y.values()[2] == doctest::Approx(0.66524096).epsilon(1e-6));

    Rng rng(11);
    auto z = random_leaf({4, 5, 6}, rng);
    for (int axis = 0; axis < 3; ++axis) {
        auto s = softmax(z, axis);
        auto sums = reduce_sum(s, axis);
        for (const double v : sums.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
        for (const double v : s.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("softmax is stable for large inputs") {
    auto x = leaf({3}, {1000.0, 1000.0, 1000.0});
    auto y = softmax(x, 0);
    for (const double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("activation point values") {
    auto x = leaf({1}, {1.0});
    CHECK(swish(x).values()[0] == doctest::Approx(0.7310586).epsilon(1e-6));
    CHECK(sigmoid(x).values()[0] == doctest::Approx(0.7310586).epsilon(1e-6));
    auto neg = leaf({3}, {-2.0, 0.0, 2.0});
    auto r = relu(neg);
    CHECK(r.values()[0] == 0.0);
    CHECK(r.values()[1] == 0.0);
    CHECK(r.values()[2] == 2.0);
}

TEST_CASE("square and sqrt round-trip on positives") {
    auto x = leaf({3}, {4.0, 9.0, 2.25});
    auto y = sqrt(x);
    CHECK(y.values()[0] == doctest::Approx(2.0));
    CHECK(y.values()[1] == doctest::Approx(3.0));
    CHECK(y.values()[2] == doctest::Approx(1.5));
    auto z = square(y);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(z.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
}

TEST_CASE("sqrt of a negative raises a numeric error") {
    auto x = leaf({1}, {-1.0});
    CHECK_THROWS_AS(sqrt(x), NumericError);
}

TEST_CASE("reshape preserves data and rejects bad sizes") {
    auto x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    auto y = reshape(x, {3, 2});
    CHECK(y.shape() == Shape{3, 2});
    CHECK(y.values() == x.values());
    CHECK_THROWS_AS(reshape(x, Shape{4, 2}), DimensionError);
}

TEST_CASE("concat along each axis") {
    auto a = leaf({2, 2}, {1, 2, 3, 4});
    auto b = leaf({2, 2}, {5, 6, 7, 8});
    auto c0 = concat<double>({a, b}, 0);
    CHECK(c0.shape() == Shape{4, 2});
    CHECK(c0.values() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
    auto c1 = concat<double>({a, b}, 1);
    CHECK(c1.shape() == Shape{2, 4});
    CHECK(c1.values() == std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8});
    auto bad = leaf({3, 2}, std::vector<double>(6, 0.0));
    CHECK_THROWS_AS(concat<double>({a, bad}, 1), DimensionError);
}

TEST_CASE("reductions along an axis and in full") {
    auto x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(reduce_sum(x, 0).values() == std::vector<double>{5, 7, 9});
    CHECK(reduce_sum(x, 1).values() == std::vector<double>{6, 15});
    CHECK(reduce_mean(x, 1).values()[0] == doctest::Approx(2.0));
    CHECK(reduce_max(x, 1).values() == std::vector<double>{3, 6});
    CHECK(reduce_min(x, 0).values() == std::vector<double>{1, 2, 3});
    CHECK(reduce_sum(x).item() == doctest::Approx(21.0));
    CHECK(reduce_mean(x).item() == doctest::Approx(3.5));
    CHECK_THROWS_AS(reduce_sum(x, 2), DimensionError);
}

TEST_CASE("reduce_max routes gradient to the first maximum on ties") {
    auto x = leaf({1, 3}, {2.0, 2.0, 1.0});
    auto y = reduce_sum(reduce_max(x, 1));
    backward(y);
    CHECK(x.grad() == std::vector<double>{1.0, 0.0, 0.0});
}

TEST_CASE("l2_norm drops the axis and handles zero slices") {
    auto x = leaf({2, 2}, {3.0, 4.0, 0.0, 0.0});
    auto n = l2_norm(x, 1);
    CHECK(n.shape() == Shape{2});
    CHECK(n.values()[0] == doctest::Approx(5.0));
    CHECK(n.values()[1] == doctest::Approx(0.0));
    backward(reduce_sum(n));
    CHECK(x.grad()[0] == doctest::Approx(0.6));
    CHECK(x.grad()[1] == doctest::Approx(0.8));
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("suffix broadcast add repeats the row operand") {
    auto m = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    auto row = leaf({3}, {10, 20, 30});
    auto y = add(m, row);
    CHECK(y.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
    backward(reduce_sum(y));
    CHECK(row.grad() == std::vector<double>{2, 2, 2});
    CHECK(m.grad() == std::vector<double>(6, 1.0));
    auto wrong = leaf({2}, {1, 1});
    CHECK_THROWS_AS(add(m, wrong), DimensionError);
}

TEST_CASE("simple chain gradients match hand values") {
    // y = sum(square(x)) -> dy/dx = 2x
    auto x = leaf({3}, {1.0, -2.0, 3.0});
    backward(reduce_sum(square(x)));
    CHECK(x.grad() == std::vector<double>{2.0, -4.0, 6.0});

    // y = mean over 4 elements -> each grad 0.25
    auto z = leaf({2, 2}, {1, 2, 3, 4});
    backward(reduce_mean(z));
    for (const double g : z.grad()) CHECK(g == doctest::Approx(0.25));
}

TEST_CASE("gradients accumulate additively across backward calls") {
    auto x = leaf({2}, {1.0, 2.0});
    auto loss1 = reduce_sum(square(x));
    backward(loss1);
    const std::vector<double> once = x.grad();
    auto loss2 = reduce_sum(square(x));
    backward(loss2);
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(x.grad()[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));

    // A tensor used twice in one graph also accumulates both contributions.
    auto w = leaf({1}, {3.0});
    auto y = reduce_sum(w * w);  // d/dw (w^2) = 2w = 6
    backward(y);
    CHECK(w.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward requires a scalar and zero_grad clears") {
    auto x = leaf({2}, {1.0, 2.0});
    auto y = square(x);
    CHECK_THROWS_AS(backward(y), ContractError);
    backward(reduce_sum(y));
    CHECK(x.has_grad());
    x.zero_grad();
    for (const double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("ops reject non-finite results deterministically") {
    auto big = leaf({1}, {1e308});
    CHECK_THROWS_AS(square(big), NumericError);
    auto a = leaf({1}, {1e308});
    auto b = leaf({1}, {1e308});
    CHECK_THROWS_AS(add(a, b), NumericError);
}

TEST_CASE("frozen inputs do not collect gradients") {
    auto x = Tensor<double>::from_values({2}, {1.0, 2.0}, false);
    auto w = leaf({2}, {3.0, 4.0});
    auto y = reduce_sum(x * w);
    backward(y);
    CHECK_FALSE(x.has_grad());
    CHECK(w.grad() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("batch_norm normalizes features and keeps running stats") {
    // Two samples, one feature: values 1 and 3 -> mean 2, var 1.
    auto x = leaf({2, 1}, {1.0, 3.0});
    auto gamma = leaf({1}, {1.0});
    auto beta = leaf({1}, {0.0});
    auto running = RunningStats<double>::initial(1);
    auto y = batch_norm(x, gamma, beta, running, BatchNormMode::Train);
    CHECK(y.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y.values()[1] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(running.mean.values()[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.0));
    CHECK(running.var.values()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));

    // Eval mode uses the stored statistics, not the batch.
    auto x1 = leaf({1, 1}, {2.0});
    auto ye = batch_norm(x1, gamma, beta, running, BatchNormMode::Eval);
    const double want =
        (2.0 - running.mean.values()[0]) / std::sqrt(running.var.values()[0] + 1e-5);
    CHECK(ye.values()[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("batch_norm train mode rejects batch of one") {
    auto x = leaf({1, 4}, {1, 2, 3, 4});
    auto gamma = leaf({4}, {1, 1, 1, 1});
    auto beta = leaf({4}, {0, 0, 0, 0});
    auto running = RunningStats<double>::initial(4);
    CHECK_THROWS_AS(batch_norm(x, gamma, beta, running, BatchNormMode::Train), ConfigError);
    CHECK_NOTHROW(batch_norm(x, gamma, beta, running, BatchNormMode::Eval));
}

TEST_CASE("gradient check across the whole op catalog") {
    Rng rng(42);
    // Ten random evaluation points; every analytic gradient must agree with
    // central differences to better than 1e-4 relative error.
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Tensor<double>> params;
        params.push_back(random_leaf({2, 3}, rng));           // dense input
        params.push_back(random_leaf({3, 4}, rng));           // dense weight
        params.push_back(random_leaf({4}, rng));              // bias row
        params.push_back(random_leaf({1, 2, 5, 5}, rng));     // conv input
        params.push_back(random_leaf({3, 2, 3, 3}, rng));     // conv kernel
        auto loss_fn = [](std::vector<Tensor<double>>& p) {
            auto z = add(matmul(p[0], p[1]), p[2]);
            auto act = swish(sigmoid(z) + relu(z));
            auto sm = softmax(act, 1);
            auto conv = conv2d(p[3], p[4], 2);
            auto conv_flat = reshape(conv, {1, conv.size()});
            auto conv_part = reduce_mean(square(conv_flat));
            auto norm_part = reduce_sum(l2_norm(act, 0));
            auto sm_part = reduce_sum(mul(sm, sm));
            auto min_part = reduce_sum(reduce_min(z, 1));
            auto max_part = reduce_sum(reduce_max(z, 0));
            auto joined = concat<double>({reduce_sum(sm_part), conv_part, norm_part,
                                          min_part, max_part}, 0);
            return reduce_sum(sqrt(square(joined) + 1.0));
        };
        CHECK(max_gradient_error(params, loss_fn) < 1e-4);
    }
}

TEST_CASE("gradient check for batch_norm in both modes") {
    Rng rng(43);
    for (int trial = 0; trial < 4; ++trial) {
        std::vector<Tensor<double>> params;
        params.push_back(random_leaf({6, 3}, rng));
        // Scales near 1 (as trained networks have); a scale near zero kills
        // the input gradient and drowns the comparison in difference noise.
        std::vector<double> g(3);
        for (auto& v : g) v = rng.uniform(0.5, 1.5);
        params.push_back(Tensor<double>::from_values({3}, std::move(g), true));
        params.push_back(random_leaf({3}, rng));
        // A quadratic loss is constant in the input under train-mode
        // normalization (each column has fixed mean and variance), so a
        // quartic is the simplest loss that exercises the input gradient.
        auto train_fn = [](std::vector<Tensor<double>>& p) {
            auto running = RunningStats<double>::initial(3);
            auto y = batch_norm(p[0], p[1], p[2], running, BatchNormMode::Train);
            return reduce_sum(square(square(y + 0.3)));
        };
        CHECK(max_gradient_error(params, train_fn) < 1e-4);
        auto eval_fn = [](std::vector<Tensor<double>>& p) {
            auto running = RunningStats<double>::initial(3);
            running.mean.values_mut() = {0.1, -0.2, 0.3};
            running.var.values_mut() = {0.5, 1.5, 1.0};
            auto y = batch_norm(p[0], p[1], p[2], running, BatchNormMode::Eval);
            return reduce_sum(square(y));
        };
        CHECK(max_gradient_error(params, eval_fn) < 1e-4);
    }
}

TEST_CASE("matmul and softmax gradient checks at random points") {
    Rng rng(44);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Tensor<double>> params;
        params.push_back(random_leaf({3, 4}, rng));
        params.push_back(random_leaf({4, 2}, rng));
        auto fn = [](std::vector<Tensor<double>>& p) {
            auto y = softmax(matmul(p[0], p[1]), 1);
            return reduce_sum(square(y - 0.5));
        };
        CHECK(max_gradient_error(params, fn) < 1e-4);
    }
}

TEST_CASE("seeded rng reproduces the same stream bit for bit") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c(1234), d(1234);
    for (int i = 0; i < 100; ++i) {
        CHECK(c.uniform() == d.uniform());
        CHECK(c.normal() == d.normal());
    }
    Rng e(5);
    bool any_diff = false;
    Rng f(6);
    for (int i = 0; i < 10; ++i) any_diff |= (e.next_u64() != f.next_u64());
    CHECK(any_diff);
}

TEST_CASE("rng helpers respect their ranges") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double t = rng.truncated_normal(0.5);
        CHECK(std::abs(t) <= 2.0 * 0.5 + 1e-12);
        CHECK(rng.below(7) < 7);
    }
    std::vector<int> order{0, 1, 2, 3, 4, 5, 6, 7};
    Rng s1(3), s2(3);
    auto o1 = order, o2 = order;
    s1.shuffle(o1);
    s2.shuffle(o2);
    CHECK(o1 == o2);
    std::sort(o1.begin(), o1.end());
    CHECK(o1 == order);
}

TEST_CASE("identical graphs produce bitwise-identical values and grads") {
    auto run = []() {
        Rng rng(2024);
        auto x = random_leaf({4, 6}, rng);
        auto w = random_leaf({6, 5}, rng);
        auto y = reduce_sum(square(softmax(matmul(x, w), 1)));
        backward(y);
        std::vector<double> out = y.values();
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    const auto first = run();
    const auto second = run();
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
        CHECK(std::memcmp(&first[i], &second[i], sizeof(double)) == 0);
    }
}
