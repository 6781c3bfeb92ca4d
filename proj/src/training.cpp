#include "metatst/training.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "metatst/error.hpp"

namespace metatst {

double l2_loss(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets) {
    return compute_metrics(predictions, targets).mse;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Unbiased integer in [0, n).
std::size_t below(std::uint64_t& state, std::size_t n) {
    const std::uint64_t bound = n;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
        r = splitmix64(state);
    } while (r >= limit);
    return static_cast<std::size_t>(r % bound);
}

std::uint64_t epoch_state(std::uint64_t seed, std::size_t epoch) {
    std::uint64_t s = seed ^ 0x6a09e667f3bcc908ULL;
    std::uint64_t mixed = splitmix64(s) + static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ULL;
    return splitmix64(mixed);
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t& state) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(state, i)]);
    return p;
}

}  // namespace

MixedBatchSampler::MixedBatchSampler(std::vector<std::size_t> dataset_sizes, std::size_t batch_size, std::uint64_t seed)
    : sizes_(std::move(dataset_sizes)), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ == 0) throw Error("batch size must be positive");
    if (sizes_.empty()) throw Error("sampler needs at least one dataset");
}

std::size_t MixedBatchSampler::batches_per_epoch() const {
    std::size_t n = 0;
    for (auto s : sizes_) n += (s + batch_size_ - 1) / batch_size_;
    return n;
}

std::vector<BatchRef> MixedBatchSampler::epoch(std::size_t epoch_index) const {
    std::uint64_t state = epoch_state(seed_, epoch_index);
    std::vector<std::vector<std::size_t>> order;
    for (auto s : sizes_) order.push_back(permutation(s, state));
    std::vector<std::size_t> cursor(sizes_.size(), 0);
    std::size_t remaining = std::accumulate(sizes_.begin(), sizes_.end(), std::size_t{0});

    std::vector<BatchRef> out;
    out.reserve(batches_per_epoch());
    while (remaining > 0) {
        std::size_t pick = 0;
        std::size_t live = 0;
        for (std::size_t d = 0; d < sizes_.size(); ++d) {
            if (cursor[d] < sizes_[d]) {
                ++live;
                pick = d;
            }
        }
        if (live > 1) {
            std::size_t r = below(state, remaining);
            for (std::size_t d = 0; d < sizes_.size(); ++d) {
                const std::size_t left = sizes_[d] - cursor[d];
                if (r < left) {
                    pick = d;
                    break;
                }
                r -= left;
            }
        }
        const std::size_t take = std::min(batch_size_, sizes_[pick] - cursor[pick]);
        BatchRef b;
        b.dataset = pick;
        b.indices.assign(order[pick].begin() + static_cast<std::ptrdiff_t>(cursor[pick]),
                         order[pick].begin() + static_cast<std::ptrdiff_t>(cursor[pick] + take));
        cursor[pick] += take;
        remaining -= take;
        out.push_back(std::move(b));
    }
    return out;
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                       std::size_t epoch_index) {
    if (batch_size == 0) throw Error("batch size must be positive");
    std::uint64_t state = epoch_state(seed, epoch_index);
    const auto p = permutation(n, state);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(p.begin() + static_cast<std::ptrdiff_t>(i),
                         p.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string to_json_line(const EpochRecord& r) {
    const nlohmann::json j = {{"run_id", r.run_id}, {"dataset", r.dataset}, {"epoch", r.epoch},
                              {"split", r.split},   {"mse", r.mse},         {"mae", r.mae},
                              {"n_samples", r.n_samples}};
    return j.dump();
}

void check_joint_compatible(std::span<const PreparedDataset* const> datasets, const ModelConfig& config) {
    if (datasets.empty()) throw Error("no datasets to train on");
    for (const auto* ds : datasets) {
        if (ds->seq_len != static_cast<std::size_t>(config.seq_len) ||
            ds->pred_len != static_cast<std::size_t>(config.pred_len)) {
            throw ShapeError(fmt::format("{}: windows are {} -> {}, model expects {} -> {}", ds->id, ds->seq_len,
                                         ds->pred_len, config.seq_len, config.pred_len));
        }
        if (!config.ablation.drop_meta && ds->train.meta.empty() && !ds->train.empty()) {
            throw Error(fmt::format("{}: metadata features are missing but the model uses metadata", ds->id));
        }
    }
}

namespace {

std::vector<Mat<float>> snapshot(const Model& model) {
    std::vector<Mat<float>> out;
    for (const auto* p : model.parameters()) out.push_back(p->value);
    return out;
}

void restore(Model& model, const std::vector<Mat<float>>& values) {
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

struct Accum {
    double se = 0.0, ae = 0.0;
    std::size_t elements = 0, samples = 0;
};

}  // namespace

TrainState fit(Model& model, std::span<const PreparedDataset* const> datasets, const TrainOptions& options,
               std::vector<EpochRecord>* log) {
    const ModelConfig& cfg = model.config();
    check_joint_compatible(datasets, cfg);
    const int epochs = options.epochs.value_or(cfg.train_epochs);
    if (epochs < 0) throw Error("epochs must be >= 0");

    std::vector<std::size_t> sizes;
    for (const auto* ds : datasets) sizes.push_back(ds->train.size());
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == 0 && epochs > 0) {
        throw Error("no training windows");
    }
    const MixedBatchSampler sampler(sizes, static_cast<std::size_t>(cfg.batch_size), options.seed);
    Adam<float> optimizer(cfg.learning_rate);
    auto params = model.parameters();
    const auto s = static_cast<Eigen::Index>(cfg.pred_len);

    auto emit = [&](const EpochRecord& r) {
        if (options.sink) options.sink(r);
        if (log) log->push_back(r);
    };

    TrainState state;
    state.seed = options.seed;
    std::vector<Mat<float>> best;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<Accum> acc(datasets.size());
        Model::ForwardCache cache;
        for (const BatchRef& batch : sampler.epoch(static_cast<std::size_t>(epoch))) {
            const PreparedSplit& split = datasets[batch.dataset]->train;
            const float scale = 2.0f / static_cast<float>(static_cast<Eigen::Index>(batch.indices.size()) * s);
            model.zero_grad();
            double batch_se = 0.0;
            for (std::size_t idx : batch.indices) {
                const TimeWindowSample sample = split.sample(idx);
                const RowVec<float> y = model.forward(sample, split.features(idx), Mode::train, &cache);
                const RowVec<float> diff = y - sample.y_en.transpose().cast<float>();
                batch_se += diff.cast<double>().squaredNorm();
                acc[batch.dataset].ae += diff.cast<double>().cwiseAbs().sum();
                model.backward(scale * diff, cache);
            }
            if (!std::isfinite(batch_se)) {
                throw NumericError(fmt::format("non-finite training loss at epoch {}, step {}", epoch, state.step));
            }
            acc[batch.dataset].se += batch_se;
            acc[batch.dataset].elements += batch.indices.size() * static_cast<std::size_t>(s);
            acc[batch.dataset].samples += batch.indices.size();
            optimizer.step(params);
            ++state.step;
        }

        double train_se = 0.0, val_se = 0.0;
        std::size_t train_n = 0, val_n = 0;
        for (std::size_t d = 0; d < datasets.size(); ++d) {
            const auto& a = acc[d];
            if (a.elements > 0) {
                emit({options.run_id, datasets[d]->id, epoch, "train", a.se / static_cast<double>(a.elements),
                      a.ae / static_cast<double>(a.elements), a.samples});
                train_se += a.se;
                train_n += a.elements;
            }
            if (!datasets[d]->val.empty()) {
                const auto m = evaluate_split(model, datasets[d]->val, datasets[d]->id, "val");
                emit({options.run_id, datasets[d]->id, epoch, "val", m.mse, m.mae, m.n_samples});
                val_se += m.mse * static_cast<double>(m.n_samples);
                val_n += m.n_samples;
            }
        }
        const double train_mse = train_n ? train_se / static_cast<double>(train_n) : std::nan("");
        const double val_mse = val_n ? val_se / static_cast<double>(val_n) : std::nan("");
        state.train_mse.push_back(train_mse);
        state.val_mse.push_back(val_mse);
        state.epochs_run = epoch + 1;
        spdlog::info("epoch {}: train mse {:.6f}, val mse {:.6f}", epoch, train_mse, val_mse);

        if (val_n > 0 && val_mse < state.best_val_mse) {
            state.best_val_mse = val_mse;
            state.best_epoch = epoch;
            best = snapshot(model);
            if (options.checkpoint_path) {
                CheckpointInfo info = options.checkpoint_info;
                info.config = model.config();
                info.seed = options.seed;
                info.extra["best_epoch"] = epoch;
                info.extra["best_val_mse"] = val_mse;
                save_checkpoint(model, info, *options.checkpoint_path);
            }
        }
    }
    if (options.restore_best && !best.empty()) restore(model, best);
    return state;
}

TrainResult train_individual(const PreparedDataset& dataset, const ModelConfig& config, const TrainOptions& options) {
    const PreparedDataset* list[] = {&dataset};
    return train_joint(list, config, options);
}

TrainResult train_joint(std::span<const PreparedDataset* const> datasets, const ModelConfig& config,
                        const TrainOptions& options) {
    check_joint_compatible(datasets, config);
    TrainResult r{Model(config, options.seed), {}, {}};
    r.state = fit(r.model, datasets, options, &r.log);
    return r;
}

ForecastMetrics zero_shot_eval(const Model& model, const PreparedDataset& dataset) {
    const PreparedDataset* list[] = {&dataset};
    check_joint_compatible(list, model.config());
    auto m = evaluate_split(model, dataset.test, dataset.id, "test");
    m.scenario = "zero-shot";
    return m;
}

ProbeResult linear_probe(const Model& pretrained, const PreparedDataset& dataset, const TrainOptions& options,
                         std::optional<int> epochs) {
    ProbeResult out{{pretrained, {}, {}}, {}};
    Model& model = out.train.model;
    model.freeze_all_but_head();
    TrainOptions opts = options;
    if (epochs) opts.epochs = epochs;
    const PreparedDataset* list[] = {&dataset};
    out.train.state = fit(model, list, opts, &out.train.log);
    out.test = evaluate_split(model, dataset.test, dataset.id, "test");
    out.test.scenario = "probe";
    return out;
}

double promotion(double joint_mse, double individual_mse) {
    if (!(individual_mse > 0.0)) throw Error("promotion needs a positive individual error");
    return 1.0 - joint_mse / individual_mse;
}

}  // namespace metatst
