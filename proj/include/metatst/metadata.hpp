#pragma once

#include <map>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "metatst/data.hpp"
#include "metatst/timestamp.hpp"

namespace metatst {

/// Version tag of the wording below. It is part of every embedding-cache key,
/// so changing a template must bump it.
inline constexpr std::string_view kTemplateVersion = "template_v1";

inline constexpr std::string_view kDatasetTemplate =
    "This is a time series dataset named {name} from the {domain} domain, sampled every "
    "{frequency}. Exogenous series describe {exogenous_descriptions}. {source_note}";

inline constexpr std::string_view kTaskTemplate =
    "The task is {task_kind}: predict the next {output_length} steps of {target_name} from "
    "the previous {input_length} observations.";

inline constexpr std::string_view kSampleTemplate =
    "This sample starts at {start_timestamp}. Its history has mean {mean}, standard deviation "
    "{std}, minimum {min} and maximum {max}.";

/// Sample template without the extrema (min/max are not part of the minimal statistic set).
inline constexpr std::string_view kSampleTemplateNoExtrema =
    "This sample starts at {start_timestamp}. Its history has mean {mean} and standard "
    "deviation {std}.";

inline constexpr std::size_t kMetadataLevels = 3;

/// Substitutes every `{key}` in `tmpl`. An unknown key or an empty value throws.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

struct TaskDescriptor {
    std::string target_name;
    int input_length = 0;   // T_en
    int output_length = 0;  // S
    std::string task_kind;  // "short-term forecasting" | "long-term forecasting"
};

struct SampleStats {
    Timestamp start_timestamp{};
    double mean = 0.0;
    double std = 0.0;  // population
    double min = 0.0;
    double max = 0.0;

    static SampleStats from_history(const Eigen::VectorXd& raw_history, Timestamp start);
};

struct SampleTextOptions {
    bool include_extrema = true;
};

struct MetadataBundle {
    std::string dataset_text;
    std::string task_text;
    std::string sample_text;

    static constexpr std::size_t level_count = kMetadataLevels;

    /// Texts in the fixed order dataset, task, sample.
    const std::string& level(std::size_t k) const;
    bool operator==(const MetadataBundle&) const = default;
};

std::string render_dataset_text(const DatasetDescriptor& d);
std::string render_task_text(const TaskDescriptor& t);
std::string render_sample_text(const SampleStats& s, const SampleTextOptions& options = {});

/// Renders the three paragraphs. The task target must be the dataset's endogenous variate.
MetadataBundle meta_parse(const DatasetDescriptor& d, const TaskDescriptor& t, const SampleStats& s,
                          const SampleTextOptions& options = {});

/// "short-term forecasting" for the EPF setting, "long-term forecasting" otherwise.
std::string task_kind_for(bool short_term);

/// Every template, labelled, for auditing.
std::string dump_templates();

}  // namespace metatst
