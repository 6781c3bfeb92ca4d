// Acceptance suite: one line per criterion, non-zero exit when a gating criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "helpers.hpp"
#include "metatst/checkpoint.hpp"
#include "metatst/evaluation.hpp"
#include "metatst/model.hpp"
#include "metatst/training.hpp"

using namespace metatst;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

MetaFeatures features_for(const MetaEncoder& enc, const DatasetDescriptor& d, const TimeWindowSample& s) {
    const TaskDescriptor t{d.endogenous_name, static_cast<int>(s.x_en.size()), static_cast<int>(s.y_en.size()),
                           "long-term forecasting"};
    return enc.features(meta_parse(d, t, SampleStats::from_history(s.x_en_raw, s.start_timestamp)));
}

// ---------------------------------------------------------------------------

template <class T>
T sample_loss(const MetaTST<T>& m, const TimeWindowSample& s, const MetaFeatures& f) {
    const RowVec<T> y = m.forward(s, f, Mode::eval);
    const RowVec<T> d = y - s.y_en.transpose().template cast<T>();
    return d.squaredNorm() / static_cast<T>(d.size());
}

Outcome gradient_check() {
    ModelConfig c = testing::tiny_config();
    c.d_model = 8;
    c.d_ff = 16;
    c.e_layers = 1;
    c.n_heads = 2;
    c.seq_len = c.exo_len = 8;
    c.patch_len = c.patch_stride = 4;  // N = 2
    c.pred_len = 4;
    c.embed_dim = 8;
    c.dropout = 0.0;
    c.aggregation = {AggregationKind::router, 3};
    MetaTST<double> model(c, 123);

    const auto enc = testing::hash_encoder(8, c.aggregation);
    const auto d = testing::toy_descriptor("Grad");
    const auto samples = testing::random_samples(2, c, 1, 77);
    std::vector<MetaFeatures> feats;
    for (const auto& s : samples) feats.push_back(features_for(*enc, d, s));

    auto total_loss = [&] {
        double l = 0.0;
        for (std::size_t i = 0; i < samples.size(); ++i) l += sample_loss(model, samples[i], feats[i]);
        return l;
    };

    model.zero_grad();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        MetaTST<double>::ForwardCache cache;
        const RowVec<double> y = model.forward(samples[i], feats[i], Mode::eval, &cache);
        const RowVec<double> dy = 2.0 * (y - samples[i].y_en.transpose()) / static_cast<double>(y.size());
        model.backward(dy, cache);
    }

    // Central differences with h = 1e-6 carry about 1e-10 of rounding noise, so
    // errors are taken relative to max(|g|, 1e-4).
    const double h = 1e-6;
    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
    std::set<std::string> groups;
    for (auto* p : model.parameters()) {
        if (!p->trainable) continue;
        groups.insert(p->name.substr(0, p->name.find('.')));
        for (Eigen::Index k = 0; k < p->value.size(); ++k) {
            double& w = p->value.data()[k];
            const double saved = w;
            w = saved + h;
            const double lp = total_loss();
            w = saved - h;
            const double lm = total_loss();
            w = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = p->grad.data()[k];
            const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-4});
            if (rel > worst) {
                worst = rel;
                worst_name = fmt::format("{}[{}] (analytic {:.3g}, numeric {:.3g})", p->name, k, analytic, numeric);
            }
            ++checked;
        }
    }
    const bool router_covered = groups.count("router") == 1;
    return {worst < 1e-4 && router_covered,
            fmt::format("{} parameters, max relative error {:.3g} at {}", checked, worst, worst_name)};
}

// ---------------------------------------------------------------------------

Outcome exo_permutation() {
    ModelConfig c = testing::tiny_config();
    c.seq_len = c.exo_len = 24;
    c.patch_len = c.patch_stride = 6;
    c.pred_len = 12;
    c.d_model = 32;
    c.d_ff = 64;
    c.n_heads = 4;
    c.e_layers = 2;
    c.embed_dim = 32;
    const Model model(c, 5);
    const auto enc = testing::hash_encoder(32);
    const auto d = testing::toy_descriptor("Perm");
    std::mt19937_64 rng(99);
    double worst = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
        const std::size_t n_exo = 2 + i % 7;
        auto s = testing::random_samples(1, c, n_exo, 1000 + i)[0];
        const auto f = features_for(*enc, d, s);
        const RowVec<float> y = model.forward(s, f, Mode::eval);
        std::vector<Eigen::Index> perm(n_exo);
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        TimeWindowSample t = s;
        for (std::size_t j = 0; j < n_exo; ++j) t.x_ex.col(static_cast<Eigen::Index>(j)) = s.x_ex.col(perm[j]);
        const RowVec<float> z = model.forward(t, f, Mode::eval);
        worst = std::max(worst, static_cast<double>((y - z).cwiseAbs().maxCoeff()));
    }
    return {worst < 1e-5, fmt::format("100 samples, max |dy| {:.3g}", worst)};
}

// ---------------------------------------------------------------------------

std::vector<TimeWindowSample> sign_samples(std::size_t n, const ModelConfig& c, double sign, std::uint64_t seed,
                                           const std::string& id) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const double omega = 2.0 * std::numbers::pi / 12.0;
    std::vector<TimeWindowSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const double phi = phase(rng);
        TimeWindowSample s;
        s.x_en = Eigen::VectorXd::NullaryExpr(c.seq_len, [&](Eigen::Index k) { return std::sin(omega * k + phi); });
        s.y_en = Eigen::VectorXd::NullaryExpr(
            c.pred_len, [&](Eigen::Index k) { return sign * std::sin(omega * (c.seq_len + k) + phi); });
        s.x_ex = Eigen::MatrixXd::NullaryExpr(c.exo_len, 1, [&](Eigen::Index k, Eigen::Index) { return std::cos(omega * k + phi); });
        s.x_en_raw = s.x_en;
        s.start_timestamp = testing::epoch_hours(static_cast<long>(i));
        s.target_timestamp = testing::epoch_hours(static_cast<long>(i) + c.seq_len);
        s.start_row = i;
        s.dataset_id = id;
        out.push_back(std::move(s));
    }
    return out;
}

DatasetDescriptor sign_descriptor(const std::string& name, const std::string& domain, const std::string& frequency,
                                  const std::string& note) {
    DatasetDescriptor d = testing::toy_descriptor(name, domain);
    d.frequency = frequency;
    d.endogenous_name = "the signal";
    d.source_note = note;
    return d;
}

double separability_val_mse(bool drop_meta, double* seconds) {
    ModelConfig c;
    c.seq_len = c.exo_len = 24;
    c.patch_len = c.patch_stride = 6;
    c.pred_len = 12;
    c.d_model = 32;
    c.d_ff = 64;
    c.n_heads = 4;
    c.e_layers = 2;
    c.dropout = 0.0;
    c.embed_dim = 32;
    c.learning_rate = 3e-3;
    c.batch_size = 32;
    c.train_epochs = 100;
    c.ablation.drop_meta = drop_meta;
    const auto enc = drop_meta ? nullptr : testing::hash_encoder(32);

    const auto plus_d = sign_descriptor("Plus", "Energy", "1 Hour",
                                        "Recorded at a coastal wind farm, the series keeps its phase going forward.");
    const auto minus_d =
        sign_descriptor("Minus", "Transport", "15 Minutes",
                        "Collected from an urban traffic sensor, the series flips sign after the history window.");
    const auto plus = prepare_dataset(plus_d, sign_samples(512, c, 1.0, 1, "Plus"), sign_samples(128, c, 1.0, 2, "Plus"),
                                      sign_samples(16, c, 1.0, 3, "Plus"), c, enc.get());
    const auto minus = prepare_dataset(minus_d, sign_samples(512, c, -1.0, 4, "Minus"),
                                       sign_samples(128, c, -1.0, 5, "Minus"), sign_samples(16, c, -1.0, 6, "Minus"),
                                       c, enc.get());
    const PreparedDataset* list[] = {&plus, &minus};
    TrainOptions opt;
    opt.seed = 2024;
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = train_joint(list, c, opt);
    *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r.state.best_val_mse;
}

Outcome separability() {
    double s_full = 0.0, s_drop = 0.0;
    const double full = separability_val_mse(false, &s_full);
    const double drop = separability_val_mse(true, &s_drop);
    const double total = s_full + s_drop;
    return {full < 0.1 && drop >= 0.4 && drop <= 0.6 && total <= 300.0,
            fmt::format("full val MSE {:.4f}, drop-meta val MSE {:.4f}, {:.1f}s", full, drop, total)};
}

// ---------------------------------------------------------------------------

Outcome sampler_protocol() {
    ModelConfig c = testing::tiny_config();
    c.batch_size = 4;
    c.train_epochs = 100;
    const auto enc = testing::hash_encoder(16);
    std::vector<PreparedDataset> ds;
    const std::size_t sizes[] = {5, 11, 17};
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string name = fmt::format("D{}", i);
        ds.push_back(prepare_dataset(testing::toy_descriptor(name), testing::random_samples(sizes[i], c, i + 1, i, name),
                                     testing::random_samples(3, c, i + 1, 10 + i, name),
                                     testing::random_samples(3, c, i + 1, 20 + i, name), c, enc.get()));
    }
    const MixedBatchSampler sampler({5, 11, 17}, 4, 31);
    const MixedBatchSampler replay({5, 11, 17}, 4, 31);
    bool homogeneous = true, covered = true, deterministic = true;
    for (std::size_t e = 0; e < 100; ++e) {
        const auto batches = sampler.epoch(e);
        std::vector<std::vector<int>> hits{std::vector<int>(5), std::vector<int>(11), std::vector<int>(17)};
        for (const auto& b : batches) {
            std::set<std::string> ids;
            for (auto i : b.indices) {
                ids.insert(ds[b.dataset].train.sample(i).dataset_id);
                ++hits[b.dataset][i];
            }
            homogeneous = homogeneous && ids.size() == 1 && b.indices.size() <= 4 && !b.indices.empty();
        }
        for (const auto& h : hits) covered = covered && std::all_of(h.begin(), h.end(), [](int x) { return x == 1; });
        const auto again = replay.epoch(e);
        deterministic = deterministic && again.size() == batches.size();
        for (std::size_t i = 0; deterministic && i < again.size(); ++i) {
            deterministic = again[i].dataset == batches[i].dataset && again[i].indices == batches[i].indices;
        }
    }

    std::vector<const PreparedDataset*> ptrs{&ds[0], &ds[1], &ds[2]};
    TrainOptions opt;
    opt.seed = 31;
    const auto a = train_joint(ptrs, c, opt);
    const auto b = train_joint(ptrs, c, opt);
    bool same_run = a.log.size() == b.log.size() && a.state.step == b.state.step;
    for (std::size_t i = 0; same_run && i < a.log.size(); ++i) same_run = to_json_line(a.log[i]) == to_json_line(b.log[i]);
    const auto pa = a.model.parameters();
    const auto pb = b.model.parameters();
    for (std::size_t i = 0; same_run && i < pa.size(); ++i) same_run = pa[i]->value == pb[i]->value;
    const bool steps_ok = a.state.step == static_cast<long>(100 * sampler.batches_per_epoch());
    return {homogeneous && covered && deterministic && same_run && steps_ok,
            fmt::format("homogeneous {}, exact coverage {}, replay {}, training replay {}, {} steps", homogeneous,
                        covered, deterministic, same_run, a.state.step)};
}

// ---------------------------------------------------------------------------

Outcome probe_freeze() {
    ModelConfig c = testing::tiny_config();
    c.train_epochs = 2;
    const auto enc = testing::hash_encoder(16);
    const auto seen = prepare_dataset(testing::toy_descriptor("Seen"), testing::random_samples(24, c, 2, 1, "Seen"),
                                      testing::random_samples(8, c, 2, 2, "Seen"),
                                      testing::random_samples(8, c, 2, 3, "Seen"), c, enc.get());
    const auto target = prepare_dataset(testing::toy_descriptor("Target"),
                                        testing::random_samples(24, c, 3, 4, "Target"),
                                        testing::random_samples(8, c, 3, 5, "Target"),
                                        testing::random_samples(8, c, 3, 6, "Target"), c, enc.get());
    testing::TempDir dir;
    TrainOptions opt;
    opt.seed = 17;
    const auto base = train_individual(seen, c, opt);
    save_checkpoint(base.model, {c, std::string(kTemplateVersion), "hash-stub-v1", 17, {}}, dir / "joint.bin");
    const auto loaded = load_checkpoint(dir / "joint.bin");
    const auto probe = linear_probe(loaded.model, target, opt, 3);

    const auto before = loaded.model.parameters();
    const auto after = probe.train.model.parameters();
    bool frozen_equal = before.size() == after.size();
    bool head_changed = false;
    for (std::size_t i = 0; frozen_equal && i < before.size(); ++i) {
        const auto& x = before[i]->value;
        const auto& y = after[i]->value;
        const bool bitwise = x.size() == y.size() && std::memcmp(x.data(), y.data(), sizeof(float) * x.size()) == 0;
        if (before[i]->name.rfind("head.", 0) == 0) {
            head_changed = head_changed || !bitwise;
        } else {
            frozen_equal = bitwise;
        }
    }
    const std::size_t expected = static_cast<std::size_t>(c.endo_tokens() * c.d_model * c.pred_len + c.pred_len);
    const std::size_t trainable = probe.train.model.trainable_count();
    return {frozen_equal && head_changed && trainable == expected,
            fmt::format("non-head bitwise equal {}, head updated {}, trainable {} (N*D*S+S = {})", frozen_equal,
                        head_changed, trainable, expected)};
}

// ---------------------------------------------------------------------------

Outcome attention_rows() {
    ModelConfig c = testing::tiny_config();
    c.e_layers = 3;
    c.n_heads = 4;
    const Model model(c, 8);
    const auto enc = testing::hash_encoder(16);
    const auto d = testing::toy_descriptor("Attn");
    double worst = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        const auto s = testing::random_samples(1, c, 1 + i % 5, 500 + i)[0];
        const auto map = extract_attention(model, s, features_for(*enc, d, s));
        worst = std::max(worst, (map.weights.rowwise().sum().array() - 1.0).abs().maxCoeff());
    }
    return {worst <= 1e-5, fmt::format("20 samples, max |row sum - 1| {:.3g}", worst)};
}

// ---------------------------------------------------------------------------

Outcome metric_oracle() {
    std::mt19937_64 rng(4242);
    std::uniform_int_distribution<int> len(1, 500);
    std::normal_distribution<double> g(0.0, 3.0);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> y(static_cast<std::size_t>(len(rng))), x(y.size());
        for (auto& v : y) v = g(rng);
        for (auto& v : x) v = g(rng);
        long double se = 0.0L, ae = 0.0L;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const long double diff = static_cast<long double>(y[i]) - static_cast<long double>(x[i]);
            se += diff * diff;
            ae += diff < 0 ? -diff : diff;
        }
        const double mse = static_cast<double>(se / y.size());
        const double mae = static_cast<double>(ae / y.size());
        const auto m = compute_metrics(y, x);
        worst = std::max({worst, std::abs(m.mse - mse) / std::max(1.0, mse), std::abs(m.mae - mae) / std::max(1.0, mae)});
    }
    return {worst <= 1e-12, fmt::format("1000 arrays, max deviation {:.3g}", worst)};
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::err);
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const Criterion criteria[] = {
        {1, "gradient check", gradient_check},
        {2, "exogenous permutation invariance", exo_permutation},
        {3, "metadata separability", separability},
        {4, "sampler and joint protocol", sampler_protocol},
        {5, "linear probe freeze audit", probe_freeze},
        {6, "attention map rows", attention_rows},
        {7, "metric oracle", metric_oracle},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, fmt::format("exception: {}", e.what())};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] %d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), s);
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    }
    std::printf("[NOT RUN] 8 published-benchmark reproduction: needs the public EPF data and a real text "
                "encoder service; not gating\n");
    return failures == 0 ? 0 : 1;
}
