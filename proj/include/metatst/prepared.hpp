#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "metatst/config.hpp"
#include "metatst/data.hpp"
#include "metatst/metadata.hpp"
#include "metatst/text_encoder.hpp"

namespace metatst {

/// Windows of one split together with their native metadata features.
/// Samples come either from a WindowStream (built on demand) or from an
/// explicit list.
struct PreparedSplit {
    WindowStream windows;
    std::vector<TimeWindowSample> explicit_samples;
    std::vector<MetaFeatures> meta;  // empty when metadata is not used

    std::size_t size() const { return explicit_samples.empty() ? windows.size() : explicit_samples.size(); }
    bool empty() const { return size() == 0; }
    TimeWindowSample sample(std::size_t i) const;
    const MetaFeatures& features(std::size_t i) const;
};

/// A dataset ready for training: windows for all three splits plus the
/// descriptors that produced their metadata.
struct PreparedDataset {
    std::string id;
    DatasetDescriptor descriptor;
    TaskDescriptor task;
    NormalizationStats stats;
    PreparedSplit train, val, test;
    std::size_t exogenous_count = 0;
    std::size_t seq_len = 0;
    std::size_t pred_len = 0;
};

TaskDescriptor task_for(const DatasetDescriptor& descriptor, const ModelConfig& config);

/// Computes metadata features for every sample of `split` (no-op when
/// `encoder` is null or the config drops metadata).
void attach_metadata(PreparedSplit& split, const DatasetDescriptor& descriptor, const TaskDescriptor& task,
                     const ModelConfig& config, const MetaEncoder* encoder);

PreparedDataset prepare_dataset(const DatasetDescriptor& descriptor, const SplitSegments& segments,
                                const ModelConfig& config, const MetaEncoder* encoder);

/// Builds a dataset from explicit samples (synthetic experiments, tests).
PreparedDataset prepare_dataset(const DatasetDescriptor& descriptor, std::vector<TimeWindowSample> train,
                                std::vector<TimeWindowSample> val, std::vector<TimeWindowSample> test,
                                const ModelConfig& config, const MetaEncoder* encoder);

/// Loads, splits, normalizes and windows a registry entry.
PreparedDataset load_prepared(const DatasetEntry& entry, const ModelConfig& config, const MetaEncoder* encoder);

}  // namespace metatst
