#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "metatst/model.hpp"
#include "metatst/prepared.hpp"

namespace metatst {

struct ForecastMetrics {
    std::string dataset_id;
    int horizon = 0;
    std::string split;
    std::string scenario;  // "individual", "joint", "zero-shot", "probe", ablation label...
    double mse = 0.0;
    double mae = 0.0;
    std::size_t n_samples = 0;
};

/// Mean squared and mean absolute error over every element. Throws on empty
/// or mismatched input.
ForecastMetrics compute_metrics(std::span<const double> predictions, std::span<const double> targets);
ForecastMetrics compute_metrics(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets);

struct SplitPredictions {
    Eigen::MatrixXd predictions;  // n x S, normalized units
    Eigen::MatrixXd targets;
};

SplitPredictions predict_split(const Model& model, const PreparedSplit& split);

/// Eval-mode metrics of `model` on `split`, in normalized units.
ForecastMetrics evaluate_split(const Model& model, const PreparedSplit& split, const std::string& dataset_id,
                               const std::string& split_name);

/// Metrics on one split of a dataset. With `raw_space` predictions and
/// targets are mapped back to the endogenous variate's original units first.
ForecastMetrics evaluate_dataset(const Model& model, const PreparedDataset& dataset, const std::string& split_name,
                                 bool raw_space = false);

/// Unweighted mean of mse and mae over the records (e.g. the four long-term horizons).
ForecastMetrics average_metrics(std::span<const ForecastMetrics> records);

// ---------------------------------------------------------------------------

/// Attention over the token sequence, averaged across heads and layers.
struct AttentionMap {
    Eigen::MatrixXd weights;  // K x K, rows sum to one
    std::vector<TokenKind> segments;

    /// Sub-block between two token kinds, e.g. (endo, meta).
    Eigen::MatrixXd block(TokenKind rows, TokenKind cols) const;
};

/// Throws when the model has no encoder layers.
AttentionMap extract_attention(const Model& model, const TimeWindowSample& sample, const MetaFeatures& meta);

void write_attention_csv(const AttentionMap& map, std::ostream& out);

// ---------------------------------------------------------------------------

struct MetaRepresentation {
    std::string dataset_id;
    std::size_t sample_index = 0;
    std::size_t level = 0;  // 0 dataset, 1 task, 2 sample
    Eigen::RowVectorXf vector;
};

/// Aligned metadata tokens for up to `max_samples` samples of each dataset's split.
std::vector<MetaRepresentation> export_meta_representations(const Model& model,
                                                            std::span<const PreparedDataset* const> datasets,
                                                            const std::string& split,
                                                            std::optional<std::size_t> max_samples = std::nullopt);

void write_representations_csv(std::span<const MetaRepresentation> reps, std::ostream& out);
void write_representations_archive(std::span<const MetaRepresentation> reps, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

/// Individual vs joint comparison. Datasets are ordered NP, PJM, BE, FR, DE
/// (then long-term benchmarks, then anything else), followed by an "Avg."
/// column. Joint cells carry an up arrow when they improve on the individual
/// cell and a down arrow when they are worse; missing cells print "-".
std::string result_table(std::span<const ForecastMetrics> individual, std::span<const ForecastMetrics> joint);

const PreparedSplit& split_by_name(const PreparedDataset& dataset, const std::string& name);

}  // namespace metatst
