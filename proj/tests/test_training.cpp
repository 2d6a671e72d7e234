#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>
#include <vector>

#include "cohesion/checkpoint.hpp"
#include "cohesion/ops.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/training.hpp"

using namespace cohesion;

namespace {

// y = X·w_true with no noise, so the loss can reach zero.
struct LinearTask {
    Tensor<double> inputs;   // [n, 4]
    std::vector<double> targets;
    Tensor<double> weights;  // [4, 1], trainable

    LinearTask(std::size_t n, std::uint64_t seed) {
        Rng rng(seed);
        std::vector<double> xv(n * 4), w_true{0.5, -1.0, 2.0, 0.25};
        for (auto& v : xv) v = rng.uniform(-1.0, 1.0);
        targets.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            double y = 0.0;
            for (std::size_t j = 0; j < 4; ++j) y += xv[i * 4 + j] * w_true[j];
            targets[i] = y;
        }
        inputs = Tensor<double>::from_values({n, 4}, std::move(xv), false);
        std::vector<double> wv(4);
        for (auto& v : wv) v = rng.uniform(-0.5, 0.5);
        weights = Tensor<double>::from_values({4, 1}, std::move(wv), true);
    }

    Tensor<double> batch_loss(const std::vector<std::size_t>& batch) const {
        std::vector<double> xb(batch.size() * 4), yb(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (std::size_t j = 0; j < 4; ++j)
                xb[i * 4 + j] = inputs.values()[batch[i] * 4 + j];
            yb[i] = targets[batch[i]];
        }
        auto x = Tensor<double>::from_values({batch.size(), 4}, std::move(xb), false);
        auto y = Tensor<double>::from_values({batch.size(), 1}, std::move(yb), false);
        return reduce_mean(square(sub(matmul(x, weights), y)));
    }

    double full_loss() const {
        std::vector<std::size_t> all(targets.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        return batch_loss(all).item();
    }
};

}  // namespace

TEST_CASE("learning rate schedule drops by its fraction after each interval") {
    OptimizerConfig cfg;
    cfg.learning_rate = 0.001;
    CHECK(effective_learning_rate(cfg, 1) == 0.001);
    CHECK(effective_learning_rate(cfg, 1000) == 0.001);

    cfg.decay = DecaySchedule{0.001, 10};
    for (std::size_t e = 1; e <= 10; ++e) CHECK(effective_learning_rate(cfg, e) == 0.001);
    CHECK(effective_learning_rate(cfg, 11) == doctest::Approx(0.000999).epsilon(1e-12));
    CHECK(effective_learning_rate(cfg, 21) ==
          doctest::Approx(0.001 * 0.999 * 0.999).epsilon(1e-12));

    // Aggressive decay is clamped at 10% of the initial rate.
    cfg.decay = DecaySchedule{0.5, 1};
    CHECK(effective_learning_rate(cfg, 2) == doctest::Approx(0.0005));
    CHECK(effective_learning_rate(cfg, 3) == doctest::Approx(0.00025));
    CHECK(effective_learning_rate(cfg, 50) == doctest::Approx(0.0001));

    CHECK_THROWS_AS(effective_learning_rate(cfg, 0), ConfigError);
}

TEST_CASE("optimizer config rejects out-of-range values") {
    OptimizerConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.learning_rate = 0.001;
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.momentum = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.momentum = 0.9;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("momentum sgd follows the hand iteration") {
    std::vector<double> p{1.0}, v{0.0};
    sgd_step<double>(p, {1.0}, v, 0.1, 0.9);
    CHECK(p[0] == doctest::Approx(0.9));
    CHECK(v[0] == doctest::Approx(1.0));
    sgd_step<double>(p, {1.0}, v, 0.1, 0.9);
    CHECK(v[0] == doctest::Approx(1.9));
    CHECK(p[0] == doctest::Approx(0.71));

    // Zero momentum is plain gradient descent.
    std::vector<double> q{2.0}, qv{0.0};
    sgd_step<double>(q, {0.5}, qv, 0.1, 0.0);
    CHECK(q[0] == doctest::Approx(1.95));

    // Zero gradients from rest: parameters never move.
    std::vector<double> r{3.0}, rv{0.0};
    for (int i = 0; i < 10; ++i) sgd_step<double>(r, {0.0}, rv, 0.1, 0.9);
    CHECK(r[0] == 3.0);
    CHECK(rv[0] == 0.0);

    // Velocity decays geometrically once gradients stop.
    std::vector<double> s{0.0}, sv{1.0};
    sgd_step<double>(s, {0.0}, sv, 0.1, 0.9);
    CHECK(sv[0] == doctest::Approx(0.9));
    sgd_step<double>(s, {0.0}, sv, 0.1, 0.9);
    CHECK(sv[0] == doctest::Approx(0.81));

    std::vector<double> bad{1.0, 2.0};
    CHECK_THROWS_AS(sgd_step<double>(bad, {1.0}, sv, 0.1, 0.9), DimensionError);
}

TEST_CASE("adam's bias-corrected first step is the learning rate") {
    std::vector<double> p{0.0}, m{0.0}, v{0.0};
    adam_step<double>(p, {1.0}, m, v, 1, 0.001, 0.9, 0.999, 1e-8);
    CHECK(p[0] == doctest::Approx(-0.001).epsilon(1e-7));

    std::vector<double> pn{0.0}, mn{0.0}, vn{0.0};
    adam_step<double>(pn, {-3.0}, mn, vn, 1, 0.001, 0.9, 0.999, 1e-8);
    CHECK(pn[0] == doctest::Approx(0.001).epsilon(1e-7));

    // Zero gradients are a fixed point.
    std::vector<double> q{1.5}, qm{0.0}, qv{0.0};
    for (std::size_t s = 1; s <= 5; ++s)
        adam_step<double>(q, {0.0}, qm, qv, s, 0.001, 0.9, 0.999, 1e-8);
    CHECK(q[0] == 1.5);

    CHECK_THROWS_AS(adam_step<double>(q, {0.0}, qm, qv, 0, 0.001, 0.9, 0.999, 1e-8), ConfigError);
}

TEST_CASE("optimizer steps replay bitwise from saved state") {
    for (auto kind : {OptimizerKind::SgdMomentum, OptimizerKind::Adam}) {
        Rng rng(3);
        std::vector<double> wv(6);
        for (auto& v : wv) v = rng.uniform(-1.0, 1.0);
        auto w = Tensor<double>::from_values({6}, std::move(wv), true);
        std::vector<Tensor<double>> params{w};
        OptimizerConfig cfg;
        cfg.kind = kind;
        cfg.learning_rate = 0.01;
        Optimizer<double> opt(cfg, params);

        auto run_steps = [&](int n) {
            for (int s = 0; s < n; ++s) {
                for (auto& p : params) p.zero_grad();
                backward(reduce_sum(square(w)));
                opt.step(params, 1);
            }
        };
        run_steps(3);
        const auto saved_values = w.values();
        const auto saved_state = opt.state();
        run_steps(2);
        const auto after = w.values();

        w.values_mut() = saved_values;
        opt.state() = saved_state;
        run_steps(2);
        CHECK(std::memcmp(w.values().data(), after.data(), after.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("optimizer skips parameters that received no gradient") {
    auto a = Tensor<double>::from_values({2}, {1.0, 2.0}, true);
    auto b = Tensor<double>::from_values({2}, {3.0, 4.0}, true);
    std::vector<Tensor<double>> params{a, b};
    OptimizerConfig cfg;
    cfg.learning_rate = 0.1;
    Optimizer<double> opt(cfg, params);
    for (auto& p : params) p.zero_grad();
    backward(reduce_sum(square(a)));  // b is not part of the graph
    opt.step(params, 1);
    CHECK(a.values()[0] != 1.0);
    CHECK(b.values() == std::vector<double>{3.0, 4.0});
}

TEST_CASE("k-fold splits partition the samples with balanced sizes") {
    auto folds = kfold_split(100, 5, 7);
    for (std::size_t f = 0; f < 5; ++f) CHECK(folds.members(f).size() == 20);

    auto uneven = kfold_split(102, 5, 7);
    std::vector<std::size_t> sizes;
    for (std::size_t f = 0; f < 5; ++f) sizes.push_back(uneven.members(f).size());
    CHECK(sizes == std::vector<std::size_t>{21, 21, 20, 20, 20});

    for (auto [n, k, seed] : {std::tuple{17, 3, 1}, {23, 5, 2}, {8, 8, 3}, {50, 7, 4}}) {
        auto a = kfold_split(static_cast<std::size_t>(n), static_cast<std::size_t>(k),
                             static_cast<std::uint64_t>(seed));
        std::set<std::size_t> seen;
        for (std::size_t f = 0; f < a.k; ++f)
            for (std::size_t idx : a.members(f)) CHECK(seen.insert(idx).second);
        CHECK(seen.size() == static_cast<std::size_t>(n));
        // members and complement partition the index set.
        auto mem = a.members(0);
        auto rest = a.complement(0);
        CHECK(mem.size() + rest.size() == static_cast<std::size_t>(n));
    }

    auto again = kfold_split(102, 5, 7);
    CHECK(again.fold_of == uneven.fold_of);
    auto different = kfold_split(102, 5, 8);
    CHECK(different.fold_of != uneven.fold_of);

    CHECK_THROWS_AS(kfold_split(10, 1, 0), ConfigError);
    CHECK_THROWS_AS(kfold_split(4, 5, 0), ConfigError);
}

TEST_CASE("evaluation metrics match hand computations") {
    CHECK(evaluate_mse({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == 0.0);
    CHECK(evaluate_mse({1.5, 1.5, 1.5, 1.5}, {0.0, 1.0, 2.0, 3.0}) == doctest::Approx(1.25));

    Rng rng(9);
    std::vector<double> preds(40), labels(40);
    for (auto& v : preds) v = rng.uniform(0.0, 3.0);
    for (auto& v : labels) v = rng.uniform(0.0, 3.0);
    double naive = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        naive += (preds[i] - labels[i]) * (preds[i] - labels[i]);
    naive /= static_cast<double>(preds.size());
    CHECK(evaluate_mse(preds, labels) == doctest::Approx(naive).epsilon(1e-9));

    CHECK_THROWS_AS(evaluate_mse({}, {}), ConfigError);
    CHECK_THROWS_AS(evaluate_mse({1.0}, {1.0, 2.0}), DimensionError);

    auto perfect = evaluate_classification({0, 1, 2}, {0, 1, 2}, 3);
    CHECK(*perfect.accuracy == 1.0);
    CHECK(perfect.confusion[0][0] == 1);
    CHECK(perfect.confusion[1][1] == 1);

    auto mixed = evaluate_classification({0, 0, 1, 2}, {0, 1, 1, 1}, 3);
    CHECK(*mixed.accuracy == doctest::Approx(0.5));
    CHECK(mixed.confusion[1][0] == 1);  // true 1 predicted 0
    CHECK(mixed.confusion[1][2] == 1);
    CHECK(mixed.confusion[0][0] == 1);

    CHECK_THROWS_AS(evaluate_classification({3}, {0}, 3), IndexError);
}

TEST_CASE("fit converges on a noise-free linear task and reports epochs from 1") {
    LinearTask task(64, 11);
    std::vector<Tensor<double>> params{task.weights};
    FitConfig cfg;
    cfg.optimizer.learning_rate = 0.2;
    cfg.optimizer.momentum = 0.0;
    cfg.epochs = 25;
    cfg.batch_size = 16;
    cfg.seed = 21;
    auto result = fit(
        params, 64, [&](const std::vector<std::size_t>& batch) { return task.batch_loss(batch); },
        [&] { return task.full_loss(); }, cfg);

    REQUIRE(result.report.epochs.size() == 25);
    for (std::size_t i = 0; i < result.report.epochs.size(); ++i)
        CHECK(result.report.epochs[i].epoch == i + 1);
    CHECK(result.report.epochs.back().val_loss < 1e-4);
    CHECK(result.report.best_val_loss <= result.report.epochs.front().val_loss);
    CHECK(result.report.wall_seconds > 0.0);

    const auto j = result.report.to_json();
    CHECK(j.contains("epochs"));
    CHECK(j["epochs"].size() == 25);
    CHECK(j["seed"] == 21);
    CHECK(j["config"].get<std::string>().find("sgd") != std::string::npos);
}

TEST_CASE("fit is bitwise deterministic per seed") {
    auto run = [](std::uint64_t seed) {
        LinearTask task(32, 13);
        std::vector<Tensor<double>> params{task.weights};
        FitConfig cfg;
        cfg.optimizer.learning_rate = 0.1;
        cfg.epochs = 6;
        cfg.batch_size = 8;
        cfg.seed = seed;
        auto result =
            fit(params, 32,
                [&](const std::vector<std::size_t>& batch) { return task.batch_loss(batch); },
                [&] { return task.full_loss(); }, cfg);
        return std::pair{task.weights.values(), result.report};
    };
    auto [w1, r1] = run(5);
    auto [w2, r2] = run(5);
    CHECK(std::memcmp(w1.data(), w2.data(), w1.size() * sizeof(double)) == 0);
    for (std::size_t i = 0; i < r1.epochs.size(); ++i) {
        CHECK(std::memcmp(&r1.epochs[i].train_loss, &r2.epochs[i].train_loss, sizeof(double)) == 0);
        CHECK(std::memcmp(&r1.epochs[i].val_loss, &r2.epochs[i].val_loss, sizeof(double)) == 0);
    }
    auto [w3, r3] = run(6);
    CHECK(std::memcmp(w1.data(), w3.data(), w1.size() * sizeof(double)) != 0);
}

TEST_CASE("fit restores the best validation snapshot on request") {
    LinearTask task(32, 17);
    std::vector<Tensor<double>> params{task.weights};
    FitConfig cfg;
    cfg.optimizer.learning_rate = 0.9;  // aggressive: validation loss oscillates
    cfg.optimizer.momentum = 0.8;
    cfg.epochs = 12;
    cfg.batch_size = 8;
    cfg.seed = 3;
    auto result = fit(
        params, 32, [&](const std::vector<std::size_t>& batch) { return task.batch_loss(batch); },
        [&] { return task.full_loss(); }, cfg);

    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    for (const auto& e : result.report.epochs)
        if (e.val_loss < best) {
            best = e.val_loss;
            best_epoch = e.epoch;
        }
    CHECK(result.report.best_epoch == best_epoch);
    CHECK(result.report.best_val_loss == best);

    load_values(params, result.best_values);
    CHECK(task.full_loss() == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("fit skips a trailing single-sample batch") {
    LinearTask task(5, 19);
    std::vector<Tensor<double>> params{task.weights};
    FitConfig cfg;
    cfg.optimizer.learning_rate = 0.05;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 1;
    std::size_t calls = 0;
    std::vector<std::size_t> batch_sizes;
    fit(
        params, 5,
        [&](const std::vector<std::size_t>& batch) {
            ++calls;
            batch_sizes.push_back(batch.size());
            return task.batch_loss(batch);
        },
        [&] { return task.full_loss(); }, cfg);
    CHECK(calls == 4);  // two batches of 2 per epoch; the lone fifth sample is skipped
    for (const std::size_t s : batch_sizes) CHECK(s == 2);
}

TEST_CASE("fit aborts with a diagnostic when the loss diverges") {
    LinearTask task(16, 23);
    std::vector<Tensor<double>> params{task.weights};
    FitConfig cfg;
    cfg.optimizer.learning_rate = 1e6;  // guaranteed blow-up
    cfg.optimizer.momentum = 0.9;
    cfg.epochs = 50;
    cfg.batch_size = 8;
    cfg.seed = 2;
    try {
        fit(params, 16,
            [&](const std::vector<std::size_t>& batch) { return task.batch_loss(batch); },
            [&] { return task.full_loss(); }, cfg);
        FAIL("expected divergence");
    } catch (const TrainingDivergedError& e) {
        CHECK(e.epoch >= 1);
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
        CHECK(std::string(e.what()).find("batch") != std::string::npos);
    }
}

TEST_CASE("checkpoints round-trip bit for bit") {
    Rng rng(29);
    NamedParams<double> params;
    auto w1 = Tensor<double>::from_values({3, 4}, std::vector<double>(12), true);
    auto w2 = Tensor<double>::from_values({2, 1, 5}, std::vector<double>(10), true);
    auto w3 = Tensor<double>::from_values({7}, std::vector<double>(7), true);
    for (auto* t : {&w1, &w2, &w3})
        for (auto& v : t->values_mut()) v = rng.uniform(-10.0, 10.0);
    params.emplace_back("conv.kernel", w1);
    params.emplace_back("head.weight", w2);
    params.emplace_back("head.bias", w3);

    auto ckpt = Checkpoint<double>::capture("image-head/v1", 42, params);
    ckpt.metrics["val_mse"] = 0.123456789123456789;
    OptimizerState<double> state;
    state.step_count = 77;
    state.velocity = {{0.1, 0.2}, {}, {0.5}};
    ckpt.optimizer = state;

    const auto encoded = encode_checkpoint(ckpt);
    auto back = decode_checkpoint<double>(encoded, "buffer");
    CHECK(back.architecture == "image-head/v1");
    CHECK(back.seed == 42);
    REQUIRE(back.blobs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.blobs[i].name == ckpt.blobs[i].name);
        CHECK(back.blobs[i].shape == ckpt.blobs[i].shape);
        REQUIRE(back.blobs[i].values.size() == ckpt.blobs[i].values.size());
        CHECK(std::memcmp(back.blobs[i].values.data(), ckpt.blobs[i].values.data(),
                          ckpt.blobs[i].values.size() * sizeof(double)) == 0);
    }
    const double stored = back.metrics.at("val_mse");
    const double original = ckpt.metrics.at("val_mse");
    CHECK(std::memcmp(&stored, &original, sizeof(double)) == 0);
    REQUIRE(back.optimizer.has_value());
    CHECK(back.optimizer->step_count == 77);
    CHECK(back.optimizer->velocity == state.velocity);

    // Re-encoding the decoded checkpoint reproduces the exact byte stream.
    CHECK(encode_checkpoint(back) == encoded);

    // File round trip.
    const std::string path = "/tmp/cohesion_ckpt_test.bin";
    save_checkpoint(path, ckpt);
    auto from_file = load_checkpoint<double>(path);
    CHECK(encode_checkpoint(from_file) == encoded);
    std::remove(path.c_str());

    // Values flow back into a model with matching names and shapes.
    NamedParams<double> fresh;
    auto f1 = Tensor<double>::zeros({3, 4}, true);
    auto f2 = Tensor<double>::zeros({2, 1, 5}, true);
    auto f3 = Tensor<double>::zeros({7}, true);
    fresh.emplace_back("conv.kernel", f1);
    fresh.emplace_back("head.weight", f2);
    fresh.emplace_back("head.bias", f3);
    back.apply_to(fresh);
    CHECK(f1.values() == w1.values());
    CHECK(f3.values() == w3.values());
}

TEST_CASE("checkpoint loader rejects malformed input") {
    NamedParams<double> params;
    auto w = Tensor<double>::from_values({2}, {1.0, 2.0}, true);
    params.emplace_back("w", w);
    auto ckpt = Checkpoint<double>::capture("arch", 1, params);
    auto good = encode_checkpoint(ckpt);

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint<double>(bad_magic, "buffer"), IoError);

    auto bad_version = good;
    bad_version[8] = 99;
    CHECK_THROWS_AS(decode_checkpoint<double>(bad_version, "buffer"), IoError);

    auto truncated = good.substr(0, good.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint<double>(truncated, "buffer"), IoError);

    auto trailing = good + "junk";
    CHECK_THROWS_AS(decode_checkpoint<double>(trailing, "buffer"), IoError);

    // A float64 stream cannot be read as float32.
    CHECK_THROWS_AS(decode_checkpoint<float>(good, "buffer"), IoError);

    CHECK_THROWS_AS(load_checkpoint<double>("/nonexistent/path.bin"), IoError);

    // Mismatched target model.
    NamedParams<double> wrong_name;
    auto q = Tensor<double>::zeros({2}, true);
    wrong_name.emplace_back("other", q);
    CHECK_THROWS_AS(ckpt.apply_to(wrong_name), IoError);
    NamedParams<double> wrong_shape;
    auto r = Tensor<double>::zeros({3}, true);
    wrong_shape.emplace_back("w", r);
    CHECK_THROWS_AS(ckpt.apply_to(wrong_shape), DimensionError);
}

TEST_CASE("identical seeds produce identical checkpoint files") {
    auto train_and_encode = [](std::uint64_t seed) {
        LinearTask task(24, 31);
        std::vector<Tensor<double>> params{task.weights};
        FitConfig cfg;
        cfg.optimizer.learning_rate = 0.1;
        cfg.epochs = 4;
        cfg.batch_size = 8;
        cfg.seed = seed;
        auto result =
            fit(params, 24,
                [&](const std::vector<std::size_t>& batch) { return task.batch_loss(batch); },
                [&] { return task.full_loss(); }, cfg);
        load_values(params, result.best_values);
        NamedParams<double> named;
        named.emplace_back("weights", task.weights);
        auto ckpt = Checkpoint<double>::capture("linear/v1", seed, named);
        ckpt.metrics["best_val"] = result.report.best_val_loss;
        ckpt.optimizer = result.final_state;
        return encode_checkpoint(ckpt);
    };
    CHECK(train_and_encode(9) == train_and_encode(9));
    CHECK(train_and_encode(9) != train_and_encode(10));
}
