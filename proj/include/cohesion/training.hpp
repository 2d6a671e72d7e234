#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cohesion/errors.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/tensor.hpp"

#include "json.hpp"

namespace cohesion {

enum class OptimizerKind { SgdMomentum, Adam };

/// Learning-rate decay: every `every_epochs` completed epochs the rate
/// drops by `amount` as a fraction of its current value (lr ← lr·(1−amount)),
/// clamped below at 10% of the initial rate.
struct DecaySchedule {
    double amount = 0.001;
    std::size_t every_epochs = 10;
};

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::SgdMomentum;
    double learning_rate = 0.001;
    double momentum = 0.9;  // sgd only
    double beta1 = 0.9;     // adam only
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::optional<DecaySchedule> decay;

    void validate() const {
        if (!(learning_rate > 0.0))
            throw ConfigError("optimizer: learning_rate must be positive, got " +
                              std::to_string(learning_rate));
        if (momentum < 0.0 || momentum >= 1.0)
            throw ConfigError("optimizer: momentum must lie in [0, 1), got " +
                              std::to_string(momentum));
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("optimizer: betas must lie in [0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be positive");
        if (decay && decay->every_epochs == 0)
            throw ConfigError("optimizer: decay interval must be at least one epoch");
    }

    std::string fingerprint() const {
        std::ostringstream os;
        os << (kind == OptimizerKind::SgdMomentum ? "sgd" : "adam")
           << "(lr=" << learning_rate;
        if (kind == OptimizerKind::SgdMomentum)
            os << ",momentum=" << momentum;
        else
            os << ",beta1=" << beta1 << ",beta2=" << beta2 << ",eps=" << epsilon;
        if (decay) os << ",decay=" << decay->amount << "/" << decay->every_epochs;
        os << ")";
        return os.str();
    }
};

/// Learning rate in effect during 1-based `epoch`. The decayed rate first
/// applies in the epoch after each full interval: with an interval of 10,
/// epochs 1-10 run at the initial rate and epoch 11 runs at
/// initial·(1−amount).
inline double effective_learning_rate(const OptimizerConfig& config, std::size_t epoch) {
    if (epoch == 0) throw ConfigError("effective_learning_rate: epochs are 1-based");
    if (!config.decay) return config.learning_rate;
    const auto boundaries = (epoch - 1) / config.decay->every_epochs;
    double lr = config.learning_rate;
    for (std::size_t i = 0; i < boundaries; ++i) lr *= 1.0 - config.decay->amount;
    return std::max(lr, 0.1 * config.learning_rate);
}

/// One momentum-SGD update: v ← momentum·v + g; p ← p − lr·v.
/// A pure function of its inputs; replaying from saved state is bitwise
/// reproducible.
template <typename T>
void sgd_step(std::vector<T>& params, const std::vector<T>& grads, std::vector<T>& velocity,
              T lr, T momentum) {
    if (params.size() != grads.size() || params.size() != velocity.size())
        throw DimensionError("sgd_step: params, grads and velocity sizes differ (" +
                             std::to_string(params.size()) + ", " + std::to_string(grads.size()) +
                             ", " + std::to_string(velocity.size()) + ")");
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

/// One Adam update with bias correction. `step` is the 1-based update count
/// for this parameter.
template <typename T>
void adam_step(std::vector<T>& params, const std::vector<T>& grads, std::vector<T>& first_moment,
               std::vector<T>& second_moment, std::size_t step, T lr, T beta1, T beta2, T eps) {
    if (params.size() != grads.size() || params.size() != first_moment.size() ||
        params.size() != second_moment.size())
        throw DimensionError("adam_step: params, grads and moment sizes differ");
    if (step == 0) throw ConfigError("adam_step: step count is 1-based");
    const T correction1 = T(1) - std::pow(beta1, T(step));
    const T correction2 = T(1) - std::pow(beta2, T(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        first_moment[i] = beta1 * first_moment[i] + (T(1) - beta1) * grads[i];
        second_moment[i] = beta2 * second_moment[i] + (T(1) - beta2) * grads[i] * grads[i];
        const T mhat = first_moment[i] / correction1;
        const T vhat = second_moment[i] / correction2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

/// Per-parameter optimizer state, index-aligned with the parameter list it
/// was created for.
template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> velocity;       // sgd
    std::vector<std::vector<T>> first_moment;   // adam
    std::vector<std::vector<T>> second_moment;  // adam
    std::uint64_t step_count = 0;
};

/// Stateful wrapper applying one update to every parameter that received a
/// gradient. Parameters without gradients (frozen or unused branches) are
/// skipped and their state slots stay untouched.
template <typename T>
class Optimizer {
  public:
    Optimizer(OptimizerConfig config, const std::vector<Tensor<T>>& params) : cfg_(config) {
        cfg_.validate();
        state_.velocity.resize(params.size());
        state_.first_moment.resize(params.size());
        state_.second_moment.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::size_t n = params[i].size();
            if (cfg_.kind == OptimizerKind::SgdMomentum) {
                state_.velocity[i].assign(n, T(0));
            } else {
                state_.first_moment[i].assign(n, T(0));
                state_.second_moment[i].assign(n, T(0));
            }
        }
    }

    const OptimizerConfig& config() const { return cfg_; }
    OptimizerState<T>& state() { return state_; }
    const OptimizerState<T>& state() const { return state_; }

    /// Applies one update at the rate in effect for 1-based `epoch`.
    void step(std::vector<Tensor<T>>& params, std::size_t epoch) {
        if (params.size() != state_.velocity.size())
            throw DimensionError("optimizer: parameter list size changed since construction");
        const T lr = T(effective_learning_rate(cfg_, epoch));
        ++state_.step_count;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].has_grad()) continue;
            auto& values = params[i].values_mut();
            const auto& grads = params[i].grad();
            if (cfg_.kind == OptimizerKind::SgdMomentum) {
                sgd_step(values, grads, state_.velocity[i], lr, T(cfg_.momentum));
            } else {
                adam_step(values, grads, state_.first_moment[i], state_.second_moment[i],
                          static_cast<std::size_t>(state_.step_count), lr, T(cfg_.beta1),
                          T(cfg_.beta2), T(cfg_.epsilon));
            }
        }
    }

  private:
    OptimizerConfig cfg_;
    OptimizerState<T> state_;
};

/// Shuffled partition of n samples into k folds whose sizes differ by at
/// most one; the first n mod k folds take the extra sample.
struct FoldAssignment {
    std::size_t k = 0;
    std::vector<std::size_t> fold_of;  // per-sample fold index

    std::vector<std::size_t> members(std::size_t fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < fold_of.size(); ++i)
            if (fold_of[i] == fold) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> complement(std::size_t fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < fold_of.size(); ++i)
            if (fold_of[i] != fold) out.push_back(i);
        return out;
    }
};

inline FoldAssignment kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ConfigError("kfold_split: need at least 2 folds, got " + std::to_string(k));
    if (k > n)
        throw ConfigError("kfold_split: more folds (" + std::to_string(k) + ") than samples (" +
                          std::to_string(n) + ")");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);
    FoldAssignment assignment;
    assignment.k = k;
    assignment.fold_of.assign(n, 0);
    const std::size_t base = n / k, extra = n % k;
    std::size_t cursor = 0;
    for (std::size_t fold = 0; fold < k; ++fold) {
        const std::size_t size = base + (fold < extra ? 1 : 0);
        for (std::size_t j = 0; j < size; ++j) assignment.fold_of[order[cursor++]] = fold;
    }
    return assignment;
}

/// Regression and classification metrics over a labeled evaluation set.
struct EvalMetrics {
    double mse = 0.0;
    std::optional<double> accuracy;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
    std::size_t count = 0;
};

inline double evaluate_mse(const std::vector<double>& predictions,
                           const std::vector<double>& labels) {
    if (predictions.size() != labels.size())
        throw DimensionError("evaluate_mse: " + std::to_string(predictions.size()) +
                             " predictions vs " + std::to_string(labels.size()) + " labels");
    if (predictions.empty()) throw ConfigError("evaluate_mse: empty evaluation set");
    double total = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double d = predictions[i] - labels[i];
        total += d * d;
    }
    return total / static_cast<double>(predictions.size());
}

inline EvalMetrics evaluate_classification(const std::vector<std::size_t>& predicted,
                                           const std::vector<std::size_t>& truth,
                                           std::size_t num_classes) {
    if (predicted.size() != truth.size())
        throw DimensionError("evaluate_classification: prediction/label count mismatch");
    if (predicted.empty()) throw ConfigError("evaluate_classification: empty evaluation set");
    EvalMetrics metrics;
    metrics.count = predicted.size();
    metrics.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] >= num_classes || truth[i] >= num_classes)
            throw IndexError("evaluate_classification: class index out of range at sample " +
                             std::to_string(i));
        metrics.confusion[truth[i]][predicted[i]] += 1;
        hits += predicted[i] == truth[i] ? 1 : 0;
    }
    metrics.accuracy = static_cast<double>(hits) / static_cast<double>(predicted.size());
    return metrics;
}

struct EpochRecord {
    std::size_t epoch = 0;  // consecutive from 1
    double train_loss = 0.0;
    double val_loss = 0.0;
    double learning_rate = 0.0;
};

struct TrainRunReport {
    std::vector<EpochRecord> epochs;
    double best_val_loss = 0.0;
    std::size_t best_epoch = 0;
    std::uint64_t seed = 0;
    std::string config_fingerprint;
    double wall_seconds = 0.0;
    std::map<std::string, double> final_metrics;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["config"] = config_fingerprint;
        j["best_epoch"] = best_epoch;
        j["best_val_loss"] = best_val_loss;
        j["wall_seconds"] = wall_seconds;
        j["epochs"] = nlohmann::json::array();
        for (const auto& e : epochs)
            j["epochs"].push_back({{"epoch", e.epoch},
                                   {"train_loss", e.train_loss},
                                   {"val_loss", e.val_loss},
                                   {"learning_rate", e.learning_rate}});
        j["final_metrics"] = final_metrics;
        return j;
    }
};

struct FitConfig {
    OptimizerConfig optimizer;
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate() const {
        optimizer.validate();
        if (epochs == 0) throw ConfigError("fit: epochs must be at least 1");
        if (batch_size == 0) throw ConfigError("fit: batch_size must be at least 1");
    }

    std::string fingerprint() const {
        std::ostringstream os;
        os << optimizer.fingerprint() << "|epochs=" << epochs << "|batch=" << batch_size
           << "|shuffle=" << (shuffle ? 1 : 0);
        return os.str();
    }
};

template <typename T>
struct FitResult {
    TrainRunReport report;
    std::vector<std::vector<T>> best_values;  // aligned with the parameter list
    OptimizerState<T> final_state;
};

/// Generic mini-batch training loop. `train_loss` receives the sample
/// indices of one batch and must return the scalar loss tensor built in
/// training mode; `val_loss` returns the validation loss as a plain number.
/// Runs are deterministic per seed: batch order, updates, and the selected
/// best parameters depend only on (seed, config, callbacks). A trailing
/// batch of a single sample is skipped because batch statistics need at
/// least two rows. Aborts with TrainingDivergedError when a loss turns
/// non-finite.
template <typename T, typename TrainLossFn, typename ValLossFn>
FitResult<T> fit(std::vector<Tensor<T>>& params, std::size_t num_train, TrainLossFn&& train_loss,
                 ValLossFn&& val_loss, const FitConfig& config) {
    config.validate();
    if (num_train == 0) throw ConfigError("fit: training set is empty");
    const auto started = std::chrono::steady_clock::now();

    Optimizer<T> optimizer(config.optimizer, params);
    Rng shuffle_rng(config.seed);
    std::vector<std::size_t> order(num_train);
    std::iota(order.begin(), order.end(), std::size_t{0});

    FitResult<T> result;
    result.report.seed = config.seed;
    result.report.config_fingerprint = config.fingerprint();
    result.report.best_val_loss = std::numeric_limits<double>::infinity();

    auto snapshot = [&params] {
        std::vector<std::vector<T>> values;
        values.reserve(params.size());
        for (const auto& p : params) values.push_back(p.values());
        return values;
    };
    result.best_values = snapshot();

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        if (config.shuffle) shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < num_train; start += config.batch_size) {
            const std::size_t end = std::min(start + config.batch_size, num_train);
            if (end - start < 2 && num_train > 1) continue;  // not enough rows for batch stats
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(end));
            double loss_value = 0.0;
            try {
                for (auto& p : params) p.zero_grad();
                auto loss = train_loss(batch);
                loss_value = static_cast<double>(loss.item());
                backward(loss);
                optimizer.step(params, epoch);
            } catch (const NumericError& e) {
                throw TrainingDivergedError("training diverged at epoch " + std::to_string(epoch) +
                                                ", batch " + std::to_string(batches + 1) + ": " +
                                                e.what(),
                                            static_cast<int>(epoch), static_cast<int>(batches + 1));
            }
            if (!std::isfinite(loss_value))
                throw TrainingDivergedError(
                    "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                        std::to_string(batches + 1) + ": loss is not finite",
                    static_cast<int>(epoch), static_cast<int>(batches + 1));
            epoch_loss += loss_value;
            ++batches;
        }
        if (batches == 0) throw ConfigError("fit: no trainable batch of at least 2 samples");

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = epoch_loss / static_cast<double>(batches);
        record.val_loss = val_loss();
        record.learning_rate = effective_learning_rate(config.optimizer, epoch);
        if (!std::isfinite(record.val_loss))
            throw TrainingDivergedError("validation loss is not finite at epoch " +
                                            std::to_string(epoch),
                                        static_cast<int>(epoch), 0);
        result.report.epochs.push_back(record);

        if (record.val_loss < result.report.best_val_loss) {
            result.report.best_val_loss = record.val_loss;
            result.report.best_epoch = epoch;
            result.best_values = snapshot();
        }
    }

    result.final_state = optimizer.state();
    result.report.final_metrics["train_loss"] = result.report.epochs.back().train_loss;
    result.report.final_metrics["val_loss"] = result.report.epochs.back().val_loss;
    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

/// Copies saved values back into a parameter list (e.g. the best snapshot
/// from a fit run).
template <typename T>
void load_values(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& values) {
    if (params.size() != values.size())
        throw DimensionError("load_values: " + std::to_string(values.size()) +
                             " value blocks for " + std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].size() != values[i].size())
            throw DimensionError("load_values: size mismatch at parameter " + std::to_string(i));
        params[i].values_mut() = values[i];
    }
}

}  // namespace cohesion
