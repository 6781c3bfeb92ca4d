#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metatst/checkpoint.hpp"
#include "metatst/config.hpp"
#include "metatst/evaluation.hpp"
#include "metatst/model.hpp"
#include "metatst/prepared.hpp"

namespace metatst {

/// Mean squared error over all elements.
double l2_loss(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets);

/// Adam without weight decay. Frozen parameters are left untouched and keep
/// no moment state updates.
template <class T>
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const ParamRefs<T>& params) {
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
                v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
            }
        }
        if (m_.size() != params.size()) throw Error("optimizer parameter list changed between steps");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Param<T>& p = *params[i];
            if (!p.trainable) continue;
            m_[i] = T(beta1_) * m_[i] + T(1.0 - beta1_) * p.grad;
            v_[i] = T(beta2_) * v_[i] + T(1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
            const T step = T(lr_ / c1);
            const T rc2 = T(1.0 / std::sqrt(c2));
            p.value.array() -= step * m_[i].array() / ((v_[i].array().sqrt() * rc2) + T(eps_));
        }
    }

    long steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Mat<T>> m_, v_;
};

// ---------------------------------------------------------------------------

struct BatchRef {
    std::size_t dataset = 0;
    std::vector<std::size_t> indices;
};

/// Homogeneous batches over several datasets. Each epoch shuffles every
/// dataset's indices, then repeatedly picks a dataset with probability
/// proportional to its remaining samples and emits its next batch, so every
/// sample appears exactly once per epoch. The last batch of a dataset may be
/// short. Epochs are reproducible from (seed, epoch).
class MixedBatchSampler {
public:
    MixedBatchSampler(std::vector<std::size_t> dataset_sizes, std::size_t batch_size, std::uint64_t seed);

    std::vector<BatchRef> epoch(std::size_t epoch_index) const;
    std::size_t batches_per_epoch() const;

private:
    std::vector<std::size_t> sizes_;
    std::size_t batch_size_;
    std::uint64_t seed_;
};

/// Plain shuffled batching of one dataset.
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                       std::size_t epoch_index);

// ---------------------------------------------------------------------------

struct EpochRecord {
    std::string run_id;
    std::string dataset;
    int epoch = 0;
    std::string split;
    double mse = 0.0;
    double mae = 0.0;
    std::size_t n_samples = 0;
};

std::string to_json_line(const EpochRecord& r);

using MetricsSink = std::function<void(const EpochRecord&)>;

struct TrainOptions {
    std::uint64_t seed = 0;
    std::string run_id;
    MetricsSink sink;
    /// Written each time the pooled validation loss improves.
    std::optional<std::filesystem::path> checkpoint_path;
    CheckpointInfo checkpoint_info;
    bool restore_best = true;
    /// Overrides the config's train_epochs.
    std::optional<int> epochs;
};

struct TrainState {
    std::uint64_t seed = 0;
    long step = 0;  // optimizer steps taken; Adam bias correction uses the same count
    int epochs_run = 0;
    int best_epoch = -1;
    double best_val_mse = std::numeric_limits<double>::infinity();
    std::vector<double> train_mse;  // per epoch, pooled over datasets
    std::vector<double> val_mse;    // per epoch, pooled; NaN when no validation windows
};

struct TrainResult {
    Model model;
    TrainState state;
    std::vector<EpochRecord> log;
};

/// Trains `model` in place on the given datasets with the config's epochs,
/// batch size and learning rate. Validation after every epoch; the parameters
/// with the lowest pooled validation MSE are restored at the end. A non-finite
/// training loss aborts with NumericError.
TrainState fit(Model& model, std::span<const PreparedDataset* const> datasets, const TrainOptions& options,
               std::vector<EpochRecord>* log = nullptr);

TrainResult train_individual(const PreparedDataset& dataset, const ModelConfig& config, const TrainOptions& options);

/// One model over several datasets. All must share T_en and S; exogenous counts may differ.
TrainResult train_joint(std::span<const PreparedDataset* const> datasets, const ModelConfig& config,
                        const TrainOptions& options);

/// Test-split metrics of a trained model on an unseen dataset, without any update.
ForecastMetrics zero_shot_eval(const Model& model, const PreparedDataset& dataset);

struct ProbeResult {
    TrainResult train;
    ForecastMetrics test;
};

/// Fine-tunes only the forecasting head of a copy of `pretrained` on `dataset`.
ProbeResult linear_probe(const Model& pretrained, const PreparedDataset& dataset, const TrainOptions& options,
                         std::optional<int> epochs = std::nullopt);

/// Relative MSE reduction of joint over individual training: 1 - joint / individual.
double promotion(double joint_mse, double individual_mse);

/// Checks that datasets fit one model (T_en, S and metadata presence).
void check_joint_compatible(std::span<const PreparedDataset* const> datasets, const ModelConfig& config);

}  // namespace metatst
