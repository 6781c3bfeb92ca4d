#include "metatst/metadata.hpp"

#include <cmath>

#include <fmt/format.h>

#include "metatst/error.hpp"

namespace metatst {
namespace {

std::string fixed4(double v) {
    // Avoid "-0.0000" for values that round to zero.
    const double rounded = std::round(v * 1e4) / 1e4;
    return fmt::format("{:.4f}", rounded == 0.0 ? 0.0 : v);
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

}  // namespace

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tmpl.size() + 64);
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const auto open = tmpl.find('{', pos);
        if (open == std::string_view::npos) {
            out.append(tmpl.substr(pos));
            break;
        }
        const auto close = tmpl.find('}', open);
        if (close == std::string_view::npos) throw Error("template: unterminated placeholder");
        out.append(tmpl.substr(pos, open - pos));
        const std::string key(tmpl.substr(open + 1, close - open - 1));
        const auto it = values.find(key);
        if (it == values.end()) throw Error(fmt::format("template: no value for '{}'", key));
        if (blank(it->second)) throw Error(fmt::format("template: value for '{}' is empty", key));
        out.append(it->second);
        pos = close + 1;
    }
    return out;
}

SampleStats SampleStats::from_history(const Eigen::VectorXd& raw_history, Timestamp start) {
    if (raw_history.size() == 0) throw ShapeError("sample statistics of an empty history");
    SampleStats s;
    s.start_timestamp = start;
    s.mean = raw_history.mean();
    s.std = std::sqrt((raw_history.array() - s.mean).square().mean());
    s.min = raw_history.minCoeff();
    s.max = raw_history.maxCoeff();
    return s;
}

const std::string& MetadataBundle::level(std::size_t k) const {
    switch (k) {
        case 0: return dataset_text;
        case 1: return task_text;
        case 2: return sample_text;
        default: throw std::out_of_range("metadata level must be 0, 1 or 2");
    }
}

std::string render_dataset_text(const DatasetDescriptor& d) {
    d.validate();
    return render_template(kDatasetTemplate, {{"name", d.name},
                                              {"domain", d.domain},
                                              {"frequency", d.frequency},
                                              {"exogenous_descriptions", d.exogenous_descriptions},
                                              {"source_note", d.source_note}});
}

std::string render_task_text(const TaskDescriptor& t) {
    if (t.input_length <= 0 || t.output_length <= 0) {
        throw Error(fmt::format("task lengths must be positive (input {}, output {})", t.input_length,
                                t.output_length));
    }
    return render_template(kTaskTemplate, {{"task_kind", t.task_kind},
                                           {"output_length", std::to_string(t.output_length)},
                                           {"target_name", t.target_name},
                                           {"input_length", std::to_string(t.input_length)}});
}

std::string render_sample_text(const SampleStats& s, const SampleTextOptions& options) {
    for (double v : {s.mean, s.std, s.min, s.max}) {
        if (!std::isfinite(v)) throw Error("sample statistics must be finite");
    }
    std::map<std::string, std::string> values{{"start_timestamp", format_iso(s.start_timestamp)},
                                              {"mean", fixed4(s.mean)},
                                              {"std", fixed4(s.std)}};
    if (!options.include_extrema) return render_template(kSampleTemplateNoExtrema, values);
    values.emplace("min", fixed4(s.min));
    values.emplace("max", fixed4(s.max));
    return render_template(kSampleTemplate, values);
}

MetadataBundle meta_parse(const DatasetDescriptor& d, const TaskDescriptor& t, const SampleStats& s,
                          const SampleTextOptions& options) {
    if (t.target_name != d.endogenous_name) {
        throw Error(fmt::format("task target '{}' is not the endogenous variate '{}' of {}",
                                t.target_name, d.endogenous_name, d.name));
    }
    return {render_dataset_text(d), render_task_text(t), render_sample_text(s, options)};
}

std::string task_kind_for(bool short_term) {
    return short_term ? "short-term forecasting" : "long-term forecasting";
}

std::string dump_templates() {
    return fmt::format("# {}\n[dataset]\n{}\n\n[task]\n{}\n\n[sample]\n{}\n\n[sample:no-extrema]\n{}\n",
                       kTemplateVersion, kDatasetTemplate, kTaskTemplate, kSampleTemplate,
                       kSampleTemplateNoExtrema);
}

}  // namespace metatst
