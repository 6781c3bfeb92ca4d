#include "metatst/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include <fmt/format.h>

#include "metatst/checkpoint.hpp"
#include "metatst/error.hpp"

namespace metatst {

ForecastMetrics compute_metrics(std::span<const double> predictions, std::span<const double> targets) {
    if (predictions.size() != targets.size()) {
        throw ShapeError(fmt::format("metrics: {} predictions vs {} targets", predictions.size(), targets.size()));
    }
    if (predictions.empty()) throw Error("metrics: empty input");
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double d = predictions[i] - targets[i];
        se += d * d;
        ae += std::abs(d);
    }
    ForecastMetrics m;
    const auto n = static_cast<double>(predictions.size());
    m.mse = se / n;
    m.mae = ae / n;
    m.n_samples = predictions.size();
    return m;
}

ForecastMetrics compute_metrics(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets) {
    if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
        throw ShapeError(fmt::format("metrics: shape {}x{} vs {}x{}", predictions.rows(), predictions.cols(),
                                     targets.rows(), targets.cols()));
    }
    auto m = compute_metrics(std::span<const double>(predictions.data(), static_cast<std::size_t>(predictions.size())),
                             std::span<const double>(targets.data(), static_cast<std::size_t>(targets.size())));
    m.n_samples = static_cast<std::size_t>(predictions.rows());
    m.horizon = static_cast<int>(predictions.cols());
    return m;
}

SplitPredictions predict_split(const Model& model, const PreparedSplit& split) {
    const auto n = static_cast<Eigen::Index>(split.size());
    const Eigen::Index s = model.config().pred_len;
    SplitPredictions out;
    out.predictions.resize(n, s);
    out.targets.resize(n, s);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const TimeWindowSample sample = split.sample(idx);
        out.predictions.row(i) = model.forward(sample, split.features(idx), Mode::eval).cast<double>();
        out.targets.row(i) = sample.y_en.transpose();
    }
    return out;
}

ForecastMetrics evaluate_split(const Model& model, const PreparedSplit& split, const std::string& dataset_id,
                               const std::string& split_name) {
    if (split.empty()) throw Error(fmt::format("{}: {} split has no windows", dataset_id, split_name));
    const auto p = predict_split(model, split);
    auto m = compute_metrics(p.predictions, p.targets);
    m.dataset_id = dataset_id;
    m.split = split_name;
    return m;
}

ForecastMetrics evaluate_dataset(const Model& model, const PreparedDataset& dataset, const std::string& split_name,
                                 bool raw_space) {
    const PreparedSplit& split = split_by_name(dataset, split_name);
    if (!raw_space) return evaluate_split(model, split, dataset.id, split_name);
    if (dataset.stats.mean.empty()) throw Error(fmt::format("{}: no normalization statistics", dataset.id));
    if (split.empty()) throw Error(fmt::format("{}: {} split has no windows", dataset.id, split_name));
    auto p = predict_split(model, split);
    const double mu = dataset.stats.mean.back();
    const double sd = dataset.stats.std.back();
    p.predictions = (p.predictions.array() * sd + mu).matrix();
    p.targets = (p.targets.array() * sd + mu).matrix();
    auto m = compute_metrics(p.predictions, p.targets);
    m.dataset_id = dataset.id;
    m.split = split_name;
    m.scenario = "raw";
    return m;
}

ForecastMetrics average_metrics(std::span<const ForecastMetrics> records) {
    if (records.empty()) throw Error("average of no records");
    ForecastMetrics out = records.front();
    out.mse = 0.0;
    out.mae = 0.0;
    out.n_samples = 0;
    for (const auto& r : records) {
        out.mse += r.mse;
        out.mae += r.mae;
        out.n_samples += r.n_samples;
    }
    out.mse /= static_cast<double>(records.size());
    out.mae /= static_cast<double>(records.size());
    out.horizon = 0;
    return out;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd AttentionMap::block(TokenKind rows, TokenKind cols) const {
    std::vector<Eigen::Index> r, c;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (segments[i] == rows) r.push_back(static_cast<Eigen::Index>(i));
        if (segments[i] == cols) c.push_back(static_cast<Eigen::Index>(i));
    }
    Eigen::MatrixXd out(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(c.size()));
    for (std::size_t i = 0; i < r.size(); ++i) {
        for (std::size_t j = 0; j < c.size(); ++j) {
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = weights(r[i], c[j]);
        }
    }
    return out;
}

AttentionMap extract_attention(const Model& model, const TimeWindowSample& sample, const MetaFeatures& meta) {
    if (model.config().e_layers == 0) throw Error("attention export needs at least one encoder layer");
    Model::ForwardCache cache;
    const TokenBlock<float> h0 = model.embed(sample, meta, &cache);
    model.forward_tokens(h0, Mode::eval, &cache);
    AttentionMap out;
    out.segments = h0.segments;
    out.weights = Eigen::MatrixXd::Zero(h0.size(), h0.size());
    std::size_t maps = 0;
    for (const auto& block : cache.blocks) {
        for (const auto& head : block.attn.attn) {
            out.weights += head.cast<double>();
            ++maps;
        }
    }
    out.weights /= static_cast<double>(maps);
    return out;
}

void write_attention_csv(const AttentionMap& map, std::ostream& out) {
    out << "row,row_kind,col,col_kind,weight\n";
    for (Eigen::Index i = 0; i < map.weights.rows(); ++i) {
        for (Eigen::Index j = 0; j < map.weights.cols(); ++j) {
            out << fmt::format("{},{},{},{},{:.8g}\n", i, to_string(map.segments[static_cast<std::size_t>(i)]), j,
                               to_string(map.segments[static_cast<std::size_t>(j)]), map.weights(i, j));
        }
    }
}

// ---------------------------------------------------------------------------

const PreparedSplit& split_by_name(const PreparedDataset& dataset, const std::string& name) {
    if (name == "train") return dataset.train;
    if (name == "val") return dataset.val;
    if (name == "test") return dataset.test;
    throw Error(fmt::format("unknown split '{}' (train, val, test)", name));
}

std::vector<MetaRepresentation> export_meta_representations(const Model& model,
                                                            std::span<const PreparedDataset* const> datasets,
                                                            const std::string& split,
                                                            std::optional<std::size_t> max_samples) {
    if (model.config().ablation.drop_meta) throw Error("model was built without metadata tokens");
    std::vector<MetaRepresentation> out;
    for (const PreparedDataset* ds : datasets) {
        const PreparedSplit& s = split_by_name(*ds, split);
        if (s.meta.empty()) throw Error(fmt::format("{}: no metadata features attached", ds->id));
        const std::size_t n = std::min(s.size(), max_samples.value_or(s.size()));
        for (std::size_t i = 0; i < n; ++i) {
            const auto tokens = model.meta_embed(s.features(i));
            for (Eigen::Index k = 0; k < tokens.size(); ++k) {
                out.push_back({ds->id, i, static_cast<std::size_t>(k), tokens.tokens.row(k)});
            }
        }
    }
    return out;
}

void write_representations_csv(std::span<const MetaRepresentation> reps, std::ostream& out) {
    out << "dataset,sample,level";
    if (!reps.empty()) {
        for (Eigen::Index j = 0; j < reps.front().vector.size(); ++j) out << ",d" << j;
    }
    out << '\n';
    for (const auto& r : reps) {
        out << r.dataset_id << ',' << r.sample_index << ',' << r.level;
        for (Eigen::Index j = 0; j < r.vector.size(); ++j) out << fmt::format(",{:.8g}", r.vector[j]);
        out << '\n';
    }
}

void write_representations_archive(std::span<const MetaRepresentation> reps, const std::filesystem::path& path) {
    TensorArchive archive;
    archive.manifest["kind"] = "meta-representations";
    auto rows = nlohmann::json::array();
    NamedTensor t{"representations", Mat<float>(static_cast<Eigen::Index>(reps.size()),
                                                reps.empty() ? 0 : reps.front().vector.size())};
    for (std::size_t i = 0; i < reps.size(); ++i) {
        t.value.row(static_cast<Eigen::Index>(i)) = reps[i].vector;
        rows.push_back({{"dataset", reps[i].dataset_id}, {"sample", reps[i].sample_index}, {"level", reps[i].level}});
    }
    archive.manifest["rows"] = std::move(rows);
    archive.tensors.push_back(std::move(t));
    archive.save(path);
}

// ---------------------------------------------------------------------------

namespace {

int order_rank(const std::string& name) {
    static const std::vector<std::string> order = {"NP",    "PJM",   "BE",    "FR",      "DE",      "ETTh1",
                                                   "ETTh2", "ETTm1", "ETTm2", "Weather", "Traffic", "ECL"};
    const auto it = std::find(order.begin(), order.end(), name);
    return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

std::map<std::string, ForecastMetrics> averaged_by_dataset(std::span<const ForecastMetrics> records) {
    std::map<std::string, std::vector<ForecastMetrics>> grouped;
    for (const auto& r : records) grouped[r.dataset_id].push_back(r);
    std::map<std::string, ForecastMetrics> out;
    for (const auto& [k, v] : grouped) out[k] = average_metrics(v);
    return out;
}

std::string cell(const std::optional<double>& v, const std::optional<double>& reference) {
    if (!v) return "-";
    std::string s = fmt::format("{:.3f}", *v);
    if (reference) {
        if (*v < *reference) s += " ↑";
        if (*v > *reference) s += " ↓";
    }
    return s;
}

}  // namespace

std::string result_table(std::span<const ForecastMetrics> individual, std::span<const ForecastMetrics> joint) {
    const auto ind = averaged_by_dataset(individual);
    const auto jnt = averaged_by_dataset(joint);
    std::vector<std::string> names;
    for (const auto* m : {&ind, &jnt}) {
        for (const auto& [k, v] : *m) {
            if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
        }
    }
    std::stable_sort(names.begin(), names.end(),
                     [](const std::string& a, const std::string& b) { return order_rank(a) < order_rank(b); });

    auto lookup = [](const std::map<std::string, ForecastMetrics>& m, const std::string& k,
                     bool mse) -> std::optional<double> {
        const auto it = m.find(k);
        if (it == m.end()) return std::nullopt;
        return mse ? it->second.mse : it->second.mae;
    };
    auto average = [&](const std::map<std::string, ForecastMetrics>& m, bool mse) -> std::optional<double> {
        // Over datasets present in both rows so the two averages are comparable;
        // over the row's own datasets when the other row is empty.
        const bool paired = std::any_of(names.begin(), names.end(),
                                        [&](const std::string& k) { return ind.count(k) && jnt.count(k); });
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& k : names) {
            if (paired ? !(ind.count(k) && jnt.count(k)) : !m.count(k)) continue;
            sum += *lookup(m, k, mse);
            ++n;
        }
        if (n == 0) return std::nullopt;
        return sum / static_cast<double>(n);
    };

    std::string out = fmt::format("{:<12}{:<6}", "Scenario", "Metric");
    for (const auto& k : names) out += fmt::format("{:>12}", k);
    out += fmt::format("{:>12}\n", "Avg.");
    for (const bool mse : {true, false}) {
        for (const bool is_joint : {false, true}) {
            const auto& m = is_joint ? jnt : ind;
            std::string line = fmt::format("{:<12}{:<6}", is_joint ? "Joint" : "Individual", mse ? "MSE" : "MAE");
            for (const auto& k : names) {
                const auto ref = is_joint ? lookup(ind, k, mse) : std::nullopt;
                line += fmt::format("{:>12}", cell(lookup(m, k, mse), ref));
            }
            line += fmt::format("{:>12}", cell(average(m, mse), is_joint ? average(ind, mse) : std::nullopt));
            out += line + "\n";
        }
    }
    return out;
}

}  // namespace metatst
