#include "metatst/prepared.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "metatst/error.hpp"

namespace metatst {

TimeWindowSample PreparedSplit::sample(std::size_t i) const {
    if (!explicit_samples.empty()) return explicit_samples.at(i);
    return windows.at(i);
}

const MetaFeatures& PreparedSplit::features(std::size_t i) const {
    static const MetaFeatures none{};
    if (meta.empty()) return none;
    return meta.at(i);
}

TaskDescriptor task_for(const DatasetDescriptor& descriptor, const ModelConfig& config) {
    TaskDescriptor t;
    t.target_name = descriptor.endogenous_name;
    t.input_length = config.seq_len;
    t.output_length = config.pred_len;
    t.task_kind = task_kind_for(config.short_term);
    return t;
}

void attach_metadata(PreparedSplit& split, const DatasetDescriptor& descriptor, const TaskDescriptor& task,
                     const ModelConfig& config, const MetaEncoder* encoder) {
    split.meta.clear();
    if (encoder == nullptr || config.ablation.drop_meta) return;
    if (encoder->native_dim() != config.embed_dim) {
        throw ShapeError(fmt::format("encoder produces {}-d features, config expects embed_dim {}",
                                     encoder->native_dim(), config.embed_dim));
    }
    const SampleTextOptions options{config.sample_extrema};
    split.meta.reserve(split.size());
    for (std::size_t i = 0; i < split.size(); ++i) {
        const TimeWindowSample s = split.sample(i);
        const auto bundle = meta_parse(descriptor, task, SampleStats::from_history(s.x_en_raw, s.start_timestamp), options);
        split.meta.push_back(encoder->features(bundle));
    }
}

namespace {

void check_config(const DatasetDescriptor& descriptor, const ModelConfig& config) {
    config.validate();
    descriptor.validate();
    if (config.exo_len > config.seq_len) throw Error("exo_len must not exceed seq_len");
}

}  // namespace

PreparedDataset prepare_dataset(const DatasetDescriptor& descriptor, const SplitSegments& segments,
                                const ModelConfig& config, const MetaEncoder* encoder) {
    check_config(descriptor, config);
    PreparedDataset out;
    out.id = descriptor.name;
    out.descriptor = descriptor;
    out.task = task_for(descriptor, config);
    out.stats = segments.stats;
    out.seq_len = static_cast<std::size_t>(config.seq_len);
    out.pred_len = static_cast<std::size_t>(config.pred_len);
    const auto t_en = out.seq_len, t_ex = static_cast<std::size_t>(config.exo_len), s = out.pred_len;
    out.train.windows = window_stream(segments.train, t_en, t_ex, s);
    out.val.windows = window_stream(segments.val, t_en, t_ex, s);
    out.test.windows = window_stream(segments.test, t_en, t_ex, s);
    out.exogenous_count = out.train.windows.exogenous_count();
    for (auto* split : {&out.train, &out.val, &out.test}) attach_metadata(*split, descriptor, out.task, config, encoder);
    spdlog::info("{}: {} train / {} val / {} test windows", out.id, out.train.size(), out.val.size(), out.test.size());
    return out;
}

PreparedDataset prepare_dataset(const DatasetDescriptor& descriptor, std::vector<TimeWindowSample> train,
                                std::vector<TimeWindowSample> val, std::vector<TimeWindowSample> test,
                                const ModelConfig& config, const MetaEncoder* encoder) {
    check_config(descriptor, config);
    if (train.empty()) throw Error(fmt::format("{}: no training samples", descriptor.name));
    PreparedDataset out;
    out.id = descriptor.name;
    out.descriptor = descriptor;
    out.task = task_for(descriptor, config);
    out.seq_len = static_cast<std::size_t>(config.seq_len);
    out.pred_len = static_cast<std::size_t>(config.pred_len);
    out.exogenous_count = static_cast<std::size_t>(train.front().x_ex.cols());
    for (const auto* list : {&train, &val, &test}) {
        for (const auto& s : *list) {
            if (static_cast<std::size_t>(s.x_en.size()) != out.seq_len ||
                static_cast<std::size_t>(s.y_en.size()) != out.pred_len ||
                s.x_ex.rows() != config.exo_len ||
                static_cast<std::size_t>(s.x_ex.cols()) != out.exogenous_count) {
                throw ShapeError(fmt::format("{}: sample shape does not match the config", descriptor.name));
            }
        }
    }
    out.train.explicit_samples = std::move(train);
    out.val.explicit_samples = std::move(val);
    out.test.explicit_samples = std::move(test);
    for (auto* split : {&out.train, &out.val, &out.test}) attach_metadata(*split, descriptor, out.task, config, encoder);
    return out;
}

PreparedDataset load_prepared(const DatasetEntry& entry, const ModelConfig& config, const MetaEncoder* encoder) {
    const RawTable table = load_csv(entry.path, entry.descriptor, entry.endogenous_column);
    DatasetDescriptor descriptor = entry.descriptor;
    descriptor.variate_names = table.columns;
    const auto segments = split_and_normalize(table, entry.split, static_cast<std::size_t>(config.seq_len),
                                              static_cast<std::size_t>(config.pred_len), descriptor.name);
    return prepare_dataset(descriptor, segments, config, encoder);
}

}  // namespace metatst
