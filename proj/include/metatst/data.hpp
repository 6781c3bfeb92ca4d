#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "metatst/timestamp.hpp"

namespace metatst {

/// Static description of a benchmark, used both for loading and for the
/// dataset-level metadata paragraph.
struct DatasetDescriptor {
    std::string name;
    std::string domain;     // e.g. "Electricity"
    std::string frequency;  // e.g. "1 Hour"
    std::vector<std::string> variate_names;
    std::string endogenous_name;  // human-readable target description
    std::string exogenous_descriptions;
    std::string source_note;

    /// Throws if a text field is blank or variate names are duplicated.
    void validate() const;
};

enum class BorderMode { ratio, fixed_rows };

/// Train/validation/test partition of a table. In ratio mode the train and
/// test sizes are floor(rows * ratio) and validation takes the remainder, as
/// TSLib does; in fixed_rows mode the three row counts are taken verbatim
/// (ETT convention: 12/4/4 months, trailing rows unused).
struct SplitSpec {
    BorderMode border_mode = BorderMode::ratio;
    double train_ratio = 0.7;
    double val_ratio = 0.1;
    double test_ratio = 0.2;
    std::size_t train_rows = 0;
    std::size_t val_rows = 0;
    std::size_t test_rows = 0;

    static SplitSpec ratios(double train, double val, double test);
    static SplitSpec fixed(std::size_t train, std::size_t val, std::size_t test);
    /// 7:1:2, used by every non-ETT benchmark.
    static SplitSpec standard();
    /// 6:2:2 over the first 20 months of hourly ETT data.
    static SplitSpec ett_hourly();
    /// 6:2:2 over the first 20 months of 15-minute ETT data.
    static SplitSpec ett_minutely();

    void validate() const;
};

struct RawTable {
    std::vector<Timestamp> timestamps;
    std::vector<std::string> columns;  // variate names, "date" excluded
    Eigen::MatrixXd values;            // rows x variates

    std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
    std::size_t variates() const { return static_cast<std::size_t>(values.cols()); }
};

struct NormalizationStats {
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<bool> degenerate;  // std was zero and replaced by 1

    Eigen::MatrixXd normalize(const Eigen::MatrixXd& raw) const;
    Eigen::MatrixXd denormalize(const Eigen::MatrixXd& normalized) const;
    /// Fits per-column statistics (population std) on `train`.
    static NormalizationStats fit(const Eigen::MatrixXd& train);
};

/// Contiguous block of rows. `values` are z-scored with the training
/// statistics, `raw` keeps the original measurements.
struct Segment {
    std::string dataset_id;
    std::size_t first_row = 0;  // index of row 0 in the source table
    std::vector<Timestamp> timestamps;
    Eigen::MatrixXd values;
    Eigen::MatrixXd raw;

    std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
    std::size_t variates() const { return static_cast<std::size_t>(values.cols()); }
};

struct SplitSegments {
    Segment train;
    Segment val;
    Segment test;
    NormalizationStats stats;
};

struct TimeWindowSample {
    Eigen::VectorXd x_en;      // T_en, normalized
    Eigen::MatrixXd x_ex;      // T_ex x C, normalized
    Eigen::VectorXd y_en;      // S, normalized
    Eigen::VectorXd x_en_raw;  // T_en, original units
    Timestamp start_timestamp{};
    Timestamp target_timestamp{};  // timestamp of y_en[0]
    std::size_t start_row = 0;     // source-table row of x_en[0]
    std::string dataset_id;
};

struct WindowSpec {
    std::size_t t_en = 96;
    std::size_t t_ex = 96;
    std::size_t horizon = 96;
    std::size_t stride = 1;
};

/// Random-access view over the windows of one segment. Samples are built on
/// demand so large benchmarks do not materialize every window.
class WindowStream {
public:
    WindowStream() = default;
    WindowStream(std::shared_ptr<const Segment> segment, WindowSpec spec);

    std::size_t size() const { return count_; }
    bool empty() const { return count_ == 0; }
    TimeWindowSample at(std::size_t index) const;
    const WindowSpec& spec() const { return spec_; }
    const Segment& segment() const { return *segment_; }
    /// Number of exogenous variates.
    std::size_t exogenous_count() const;

private:
    std::shared_ptr<const Segment> segment_;
    WindowSpec spec_{};
    std::size_t count_ = 0;
};

/// Number of windows a segment of `rows` rows yields under stride 1.
std::size_t window_count(std::size_t rows, std::size_t t_en, std::size_t horizon,
                         std::size_t stride = 1);

/// Parses CSV text whose first column is "date".
RawTable parse_csv(std::istream& in);

/// Loads a benchmark CSV. When `endogenous_column` names a column that is not
/// last, it is moved to the end so the endogenous variate is always last.
RawTable load_csv(const std::filesystem::path& path, const DatasetDescriptor& descriptor,
                  std::string_view endogenous_column = {});

/// Moves the named column to the last position. Throws if absent.
void move_column_last(RawTable& table, std::string_view column);

/// Splits with the TSLib border convention: validation and test segments are
/// prefixed with the last `look_back` rows of the preceding segment. All
/// segments are normalized with statistics of the training rows.
SplitSegments split_and_normalize(const RawTable& table, const SplitSpec& spec,
                                  std::size_t look_back, std::size_t horizon,
                                  const std::string& dataset_id = {});

WindowStream window_stream(const Segment& segment, std::size_t t_en, std::size_t t_ex,
                           std::size_t horizon, std::size_t stride = 1);

// ---------------------------------------------------------------------------
// Dataset registry

struct DatasetEntry {
    DatasetDescriptor descriptor;
    std::filesystem::path path;
    SplitSpec split;
    std::string endogenous_column;  // empty: last column
};

class DatasetRegistry {
public:
    /// Reads a JSON registry. Relative paths resolve against the registry's directory.
    static DatasetRegistry load(const std::filesystem::path& path);
    static DatasetRegistry from_json_text(std::string_view text,
                                          const std::filesystem::path& base_dir = {});

    const DatasetEntry& at(const std::string& name) const;
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    std::vector<std::string> names() const;
    void add(DatasetEntry entry);

private:
    std::map<std::string, DatasetEntry> entries_;
};

/// Descriptors for the five EPF and seven long-term benchmarks. Returns
/// nullptr for unknown names.
const DatasetDescriptor* builtin_descriptor(std::string_view name);
std::vector<std::string> builtin_dataset_names();
/// Split used by the benchmark suite for `name` (ETT fixed borders, otherwise 7:1:2).
SplitSpec builtin_split(std::string_view name);

}  // namespace metatst
