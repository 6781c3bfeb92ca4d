#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "metatst/checkpoint.hpp"
#include "metatst/config.hpp"
#include "metatst/data.hpp"
#include "metatst/digest.hpp"
#include "metatst/error.hpp"
#include "metatst/evaluation.hpp"
#include "metatst/metadata.hpp"
#include "metatst/prepared.hpp"
#include "metatst/text_encoder.hpp"
#include "metatst/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace metatst::cli {
namespace {

struct UsageError : Error {
    using Error::Error;
};

struct Options {
    // data
    std::string registry;
    std::string data_dir;
    std::vector<std::string> datasets;
    // config
    std::string config_path;
    std::string preset;
    std::optional<int> seq_len, exo_len, pred_len, e_layers, d_model, d_ff, n_heads, patch_len, batch_size, train_epochs,
        router_count;
    std::optional<std::size_t> embed_dim;
    std::optional<double> dropout, learning_rate;
    std::string aggregation;
    bool drop_meta = false, drop_exo = false, drop_endo = false;
    // run
    std::uint64_t seed = 0;
    std::string out_dir;
    bool raw = false;
    std::string log_level = "info";
    // backend
    std::string backend = "hash";
    std::string model_id;
    std::string embed_url;
    std::string cache_dir;
    std::optional<int> layer;
    // joint-train
    std::vector<int> horizons;
    bool zero_shot = false;
    bool probe = false;
    std::optional<int> probe_epochs;
    std::vector<std::string> unseen;
    std::vector<std::string> compare;
    // ablate
    std::string full_results;
    // export
    std::string checkpoint;
    bool attention = false;
    bool meta_reps = false;
    bool templates = false;
    std::size_t sample = 0;
    std::string split = "test";
    std::optional<std::size_t> max_samples;
    std::string format = "csv";
};

void add_data_options(CLI::App* app, Options& o) {
    app->add_option("--registry", o.registry, "Dataset registry (JSON)")->check(CLI::ExistingFile);
    app->add_option("--data-dir", o.data_dir, "Directory holding <name>.csv for built-in benchmarks")
        ->check(CLI::ExistingDirectory);
}

void add_model_options(CLI::App* app, Options& o) {
    app->add_option("--config", o.config_path, "Model config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--preset", o.preset, "short (168->24) or long (96->S)")
        ->check(CLI::IsMember({"short", "long"}));
    app->add_option("--seq_len", o.seq_len);
    app->add_option("--exo_len", o.exo_len);
    app->add_option("--pred_len", o.pred_len);
    app->add_option("--e_layers", o.e_layers);
    app->add_option("--d_model", o.d_model);
    app->add_option("--d_ff", o.d_ff);
    app->add_option("--n_heads", o.n_heads);
    app->add_option("--patch_len", o.patch_len, "Patch length; the stride always equals it");
    app->add_option("--dropout", o.dropout);
    app->add_option("--learning_rate", o.learning_rate);
    app->add_option("--batch_size", o.batch_size);
    app->add_option("--train_epochs", o.train_epochs);
    app->add_option("--aggregation", o.aggregation)
        ->check(CLI::IsMember({"special_token", "average_pooling", "router"}));
    app->add_option("--router_count", o.router_count);
    app->add_option("--embed_dim", o.embed_dim, "Native text embedding width (hash default 64, service 768)");
}

void add_backend_options(CLI::App* app, Options& o) {
    app->add_option("--backend", o.backend, "Text encoder backend")->check(CLI::IsMember({"hash", "service"}));
    app->add_option("--model-id", o.model_id, "Encoder model id");
    app->add_option("--embed-url", o.embed_url, "Embedding service URL (default $METATST_EMBED_URL)");
    app->add_option("--cache-dir", o.cache_dir, "Embedding cache directory (default $METATST_CACHE_DIR)");
    app->add_option("--layer", o.layer, "Hidden layer for decoder-only encoders");
}

void add_run_options(CLI::App* app, Options& o) {
    app->add_option("--seed", o.seed);
    app->add_option("--out", o.out_dir, "Run directory")->required();
    app->add_flag("--raw", o.raw, "Report test metrics in original units");
}

// ---------------------------------------------------------------------------

ModelConfig resolve_config(const Options& o) {
    ModelConfig c;
    try {
        if (!o.config_path.empty()) {
            c = load_config(o.config_path);
        } else if (o.preset == "long") {
            c = ModelConfig::long_term_defaults(o.pred_len.value_or(96));
        } else {
            c = ModelConfig::short_term_defaults();
        }
        if (o.seq_len) c.seq_len = c.exo_len = *o.seq_len;
        if (o.exo_len) c.exo_len = *o.exo_len;
        if (o.pred_len) c.pred_len = *o.pred_len;
        if (o.e_layers) c.e_layers = *o.e_layers;
        if (o.d_model) c.d_model = *o.d_model;
        if (o.d_ff) c.d_ff = *o.d_ff;
        if (o.n_heads) c.n_heads = *o.n_heads;
        if (o.patch_len) c.patch_len = c.patch_stride = *o.patch_len;
        if (o.dropout) c.dropout = *o.dropout;
        if (o.learning_rate) c.learning_rate = *o.learning_rate;
        if (o.batch_size) c.batch_size = *o.batch_size;
        if (o.train_epochs) c.train_epochs = *o.train_epochs;
        if (!o.aggregation.empty()) c.aggregation.kind = aggregation_from_string(o.aggregation);
        if (o.router_count) c.aggregation.router_count = *o.router_count;
        if (o.embed_dim) {
            c.embed_dim = *o.embed_dim;
        } else if (o.backend == "service") {
            c.embed_dim = 768;
        }
        c.ablation.drop_meta = c.ablation.drop_meta || o.drop_meta;
        c.ablation.drop_exo = c.ablation.drop_exo || o.drop_exo;
        c.ablation.drop_endo = c.ablation.drop_endo || o.drop_endo;
        c.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    return c;
}

std::string env_or(const std::string& value, const char* name) {
    if (!value.empty()) return value;
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string{};
}

std::shared_ptr<const TextEmbeddingBackend> make_backend(const Options& o, const ModelConfig& c) {
    if (o.backend == "hash") {
        return std::make_shared<HashStubBackend>(c.embed_dim, o.model_id.empty() ? "hash-stub-v1" : o.model_id);
    }
    ServiceOptions so;
    so.url = env_or(o.embed_url, "METATST_EMBED_URL");
    if (so.url.empty()) throw UsageError("--backend service needs --embed-url or METATST_EMBED_URL");
    if (!o.model_id.empty()) so.model_id = o.model_id;
    so.dim = c.embed_dim;
    if (o.layer) so.layer_index = *o.layer;
    return std::make_shared<ServiceBackend>(so);
}

std::shared_ptr<MetaEncoder> make_encoder(const Options& o, const ModelConfig& c,
                                          const std::shared_ptr<const TextEmbeddingBackend>& backend) {
    if (c.ablation.drop_meta) return nullptr;
    auto cache = std::make_shared<EmbeddingCache>();
    const std::string dir = env_or(o.cache_dir, "METATST_CACHE_DIR");
    if (!dir.empty()) {
        fs::create_directories(dir);
        cache = std::make_shared<EmbeddingCache>(fs::path(dir) / "embeddings.bin");
    }
    return std::make_shared<MetaEncoder>(backend, c.aggregation, cache);
}

DatasetEntry resolve_entry(const Options& o, const std::string& name) {
    if (!o.registry.empty()) return DatasetRegistry::load(o.registry).at(name);
    if (o.data_dir.empty()) throw UsageError("give --registry or --data-dir");
    const DatasetDescriptor* d = builtin_descriptor(name);
    if (d == nullptr) {
        throw UsageError(fmt::format("'{}' is not a built-in benchmark; describe it in a --registry file", name));
    }
    DatasetEntry e;
    e.descriptor = *d;
    e.path = fs::path(o.data_dir) / (name + ".csv");
    e.split = builtin_split(name);
    return e;
}

json metrics_json(const ForecastMetrics& m) {
    return {{"dataset", m.dataset_id}, {"horizon", m.horizon}, {"split", m.split},  {"scenario", m.scenario},
            {"mse", m.mse},            {"mae", m.mae},         {"n_samples", m.n_samples}};
}

ForecastMetrics metrics_from_json(const json& j) {
    ForecastMetrics m;
    m.dataset_id = j.at("dataset").get<std::string>();
    m.horizon = j.value("horizon", 0);
    m.split = j.value("split", std::string("test"));
    m.scenario = j.value("scenario", std::string{});
    m.mse = j.at("mse").get<double>();
    m.mae = j.at("mae").get<double>();
    m.n_samples = j.value("n_samples", std::size_t{0});
    return m;
}

std::vector<ForecastMetrics> read_results(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open results '{}'", path.string()));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error(fmt::format("{}: {}", path.string(), e.what()));
    }
    std::vector<ForecastMetrics> out;
    for (const auto& r : j) out.push_back(metrics_from_json(r));
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(fmt::format("cannot write '{}'", path.string()));
    f << text;
}

/// Run directory with manifest, metrics log and results.
class Run {
public:
    Run(const fs::path& dir, json manifest) : dir_(dir), manifest_(std::move(manifest)) {
        fs::create_directories(dir_);
        run_id_ = to_hex(sha256_parts({manifest_.dump()})).substr(0, 16);
        manifest_["run_id"] = run_id_;
        write_text(dir_ / "manifest.json", manifest_.dump(2) + "\n");
        log_.open(dir_ / "metrics.jsonl", std::ios::trunc);
        if (!log_) throw Error(fmt::format("cannot write '{}'", (dir_ / "metrics.jsonl").string()));
    }

    const std::string& id() const { return run_id_; }
    const fs::path& dir() const { return dir_; }

    MetricsSink sink() {
        return [this](const EpochRecord& r) { log_ << to_json_line(r) << '\n' << std::flush; };
    }

    void record(const ForecastMetrics& m, int epoch) {
        sink()({run_id_, m.dataset_id, epoch, m.split + (m.scenario.empty() ? "" : ":" + m.scenario), m.mse, m.mae,
                m.n_samples});
        results_.push_back(m);
    }

    void finish() const {
        json arr = json::array();
        for (const auto& m : results_) arr.push_back(metrics_json(m));
        write_text(dir_ / "results.json", arr.dump(2) + "\n");
    }

    const std::vector<ForecastMetrics>& results() const { return results_; }

private:
    fs::path dir_;
    json manifest_;
    std::string run_id_;
    std::ofstream log_;
    std::vector<ForecastMetrics> results_;
};

json base_manifest(const std::string& command, const std::vector<std::string>& args, const Options& o,
                   const ModelConfig& c, const TextEmbeddingBackend& backend,
                   const std::vector<std::string>& datasets) {
    json ds = json::array();
    for (const auto& name : datasets) {
        const DatasetEntry e = resolve_entry(o, name);
        json entry = {{"name", name}, {"path", e.path.string()}};
        std::error_code ec;
        const auto size = fs::file_size(e.path, ec);
        if (!ec) entry["bytes"] = size;
        ds.push_back(std::move(entry));
    }
    return {{"command", command},
            {"args", args},
            {"datasets", ds},
            {"registry", o.registry},
            {"data_dir", o.data_dir},
            {"config", c},
            {"seed", o.seed},
            {"backend", {{"kind", o.backend}, {"model_id", backend.model_id()}, {"dim", backend.dim()}}},
            {"aggregation", to_string(c.aggregation.kind)},
            {"ablation", c.ablation.label()},
            {"template_version", kTemplateVersion},
            {"raw_metrics", o.raw}};
}

CheckpointInfo checkpoint_info(const ModelConfig& c, const TextEmbeddingBackend& backend, std::uint64_t seed) {
    CheckpointInfo info;
    info.config = c;
    info.template_version = kTemplateVersion;
    info.backend_model_id = backend.model_id();
    info.seed = seed;
    return info;
}

TrainOptions train_options(Run& run, const Options& o, const ModelConfig& c, const TextEmbeddingBackend& backend) {
    TrainOptions t;
    t.seed = o.seed;
    t.run_id = run.id();
    t.sink = run.sink();
    t.checkpoint_path = run.dir() / "checkpoint.bin";
    t.checkpoint_info = checkpoint_info(c, backend, o.seed);
    return t;
}

// Keeps the best-validation checkpoint written during training; writes the
// final parameters when none was written (no epochs or no validation windows).
void ensure_checkpoint(const Model& model, const TrainOptions& t) {
    if (!fs::exists(*t.checkpoint_path)) save_checkpoint(model, t.checkpoint_info, *t.checkpoint_path);
}

void check_unique(const std::vector<std::string>& names) {
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    const auto dup = std::adjacent_find(sorted.begin(), sorted.end());
    if (dup != sorted.end()) throw UsageError(fmt::format("dataset '{}' listed twice", *dup));
}

void print_metrics(std::ostream& out, const ForecastMetrics& m) {
    out << fmt::format("{:<10} {:<12} S={:<4} mse {:.6f}  mae {:.6f}  (n={})\n", m.dataset_id,
                       m.scenario.empty() ? m.split : m.scenario, m.horizon, m.mse, m.mae, m.n_samples);
}

// ---------------------------------------------------------------------------

int cmd_train(const std::vector<std::string>& args, const Options& o, std::ostream& out) {
    if (o.datasets.size() != 1) throw UsageError("train takes exactly one --dataset");
    const ModelConfig c = resolve_config(o);
    const auto backend = make_backend(o, c);
    const auto encoder = make_encoder(o, c, backend);
    Run run(o.out_dir, base_manifest("train", args, o, c, *backend, o.datasets));
    const PreparedDataset ds = load_prepared(resolve_entry(o, o.datasets[0]), c, encoder.get());
    const TrainOptions t = train_options(run, o, c, *backend);
    TrainResult r = train_individual(ds, c, t);
    ensure_checkpoint(r.model, t);
    auto m = evaluate_dataset(r.model, ds, "test", o.raw);
    m.scenario = "individual";
    run.record(m, r.state.best_epoch);
    run.finish();
    print_metrics(out, m);
    out << "run " << run.id() << " written to " << run.dir().string() << "\n";
    return ok;
}

void write_table(const Run& run, const std::vector<ForecastMetrics>& joint, const Options& o, std::ostream& out) {
    std::vector<ForecastMetrics> individual;
    for (const auto& path : o.compare) {
        for (auto& m : read_results(path)) {
            if (m.scenario == "individual") individual.push_back(std::move(m));
        }
    }
    const std::string table = result_table(individual, joint);
    write_text(run.dir() / "table.txt", table);
    out << table;
}

int cmd_joint_train(const std::vector<std::string>& args, const Options& o, std::ostream& out) {
    if (o.datasets.empty()) throw UsageError("joint-train needs --datasets");
    check_unique(o.datasets);
    if (o.datasets.size() == 1) spdlog::warn("joint training on a single dataset is plain individual training");
    const ModelConfig base = resolve_config(o);
    std::vector<ModelConfig> configs = {base};
    if (!o.horizons.empty()) {
        try {
            configs = horizon_matrix(base, o.horizons);
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }
    const auto backend = make_backend(o, base);
    std::vector<ForecastMetrics> all;
    for (const ModelConfig& c : configs) {
        const fs::path dir = o.horizons.empty() ? fs::path(o.out_dir) : fs::path(o.out_dir) / fmt::format("S{}", c.pred_len);
        const auto encoder = make_encoder(o, c, backend);
        Run run(dir, base_manifest("joint-train", args, o, c, *backend, o.datasets));
        std::vector<PreparedDataset> prepared;
        for (const auto& name : o.datasets) prepared.push_back(load_prepared(resolve_entry(o, name), c, encoder.get()));
        std::vector<const PreparedDataset*> ptrs;
        for (const auto& p : prepared) ptrs.push_back(&p);

        const TrainOptions t = train_options(run, o, c, *backend);
        TrainResult r = train_joint(ptrs, c, t);
        ensure_checkpoint(r.model, t);
        for (const auto& ds : prepared) {
            auto m = evaluate_dataset(r.model, ds, "test", o.raw);
            m.scenario = o.zero_shot ? "zero-shot" : "joint";
            run.record(m, r.state.best_epoch);
            print_metrics(out, m);
        }
        std::vector<PreparedDataset> unseen;
        for (const auto& name : o.unseen) {
            unseen.push_back(load_prepared(resolve_entry(o, name), c, encoder.get()));
            const PreparedDataset& ds = unseen.back();
            auto m = o.raw ? evaluate_dataset(r.model, ds, "test", true) : zero_shot_eval(r.model, ds);
            m.scenario = "zero-shot";
            run.record(m, r.state.best_epoch);
            print_metrics(out, m);
        }
        if (o.probe) {
            std::vector<const PreparedDataset*> targets = ptrs;
            for (const auto& ds : unseen) targets.push_back(&ds);
            for (const PreparedDataset* target : targets) {
                const PreparedDataset& ds = *target;
                TrainOptions pt = t;
                pt.checkpoint_path.reset();
                pt.run_id = run.id() + ":probe:" + ds.id;
                ProbeResult p = linear_probe(r.model, ds, pt, o.probe_epochs);
                auto m = o.raw ? evaluate_dataset(p.train.model, ds, "test", true) : p.test;
                m.scenario = "probe";
                run.record(m, p.train.state.best_epoch);
                print_metrics(out, m);
            }
        }
        run.finish();
        all.insert(all.end(), run.results().begin(), run.results().end());
        if (o.horizons.empty()) write_table(run, run.results(), o, out);
        out << "run " << run.id() << " written to " << run.dir().string() << "\n";
    }
    if (!o.horizons.empty()) {
        fs::create_directories(o.out_dir);
        std::vector<ForecastMetrics> joint;
        for (const auto& m : all) {
            if (m.scenario == "joint" || m.scenario == "zero-shot") joint.push_back(m);
        }
        std::vector<ForecastMetrics> individual;
        for (const auto& path : o.compare) {
            for (auto& m : read_results(path)) {
                if (m.scenario == "individual") individual.push_back(std::move(m));
            }
        }
        const std::string table = result_table(individual, joint);
        write_text(fs::path(o.out_dir) / "table.txt", table);
        out << table;
    }
    return ok;
}

int cmd_ablate(const std::vector<std::string>& args, const Options& o, std::ostream& out) {
    if (!o.drop_meta && !o.drop_exo && !o.drop_endo) {
        throw UsageError("ablate needs at least one of --drop-meta, --drop-exo, --drop-endo");
    }
    if (o.drop_meta && o.drop_exo && o.drop_endo) throw UsageError("cannot drop all three token groups");
    if (o.datasets.empty()) throw UsageError("ablate needs --dataset");
    check_unique(o.datasets);
    const ModelConfig c = resolve_config(o);
    const auto backend = make_backend(o, c);
    const auto encoder = make_encoder(o, c, backend);
    Run run(o.out_dir, base_manifest("ablate", args, o, c, *backend, o.datasets));
    std::vector<PreparedDataset> prepared;
    for (const auto& name : o.datasets) prepared.push_back(load_prepared(resolve_entry(o, name), c, encoder.get()));
    std::vector<const PreparedDataset*> ptrs;
    for (const auto& p : prepared) ptrs.push_back(&p);
    const TrainOptions t = train_options(run, o, c, *backend);
    TrainResult r = train_joint(ptrs, c, t);
    ensure_checkpoint(r.model, t);

    std::map<std::string, ForecastMetrics> full;
    if (!o.full_results.empty()) {
        for (auto& m : read_results(o.full_results)) full[m.dataset_id] = m;
    }
    const std::string label = c.ablation.label();
    std::string table = fmt::format("{:<10}{:>14}{:>14}{:>14}{:>14}\n", "Dataset", "Full MSE", "Full MAE",
                                    label + " MSE", label + " MAE");
    for (const auto& ds : prepared) {
        auto m = evaluate_dataset(r.model, ds, "test", o.raw);
        m.scenario = label;
        run.record(m, r.state.best_epoch);
        const auto it = full.find(ds.id);
        const std::string fm = it == full.end() ? "-" : fmt::format("{:.3f}", it->second.mse);
        const std::string fa = it == full.end() ? "-" : fmt::format("{:.3f}", it->second.mae);
        table += fmt::format("{:<10}{:>14}{:>14}{:>14.3f}{:>14.3f}\n", ds.id, fm, fa, m.mse, m.mae);
    }
    run.finish();
    write_text(run.dir() / "table.txt", table);
    out << table;
    out << "run " << run.id() << " written to " << run.dir().string() << "\n";
    return ok;
}

int cmd_export(const Options& o, std::ostream& out) {
    if (!o.attention && !o.meta_reps && !o.templates) {
        throw UsageError("export needs --attention, --meta-reps or --templates");
    }
    if (o.templates) out << dump_templates();
    if (!o.attention && !o.meta_reps) return ok;
    if (o.checkpoint.empty()) throw UsageError("--attention and --meta-reps need --checkpoint");
    if (o.datasets.empty()) throw UsageError("--attention and --meta-reps need --dataset");
    if (o.out_dir.empty()) throw UsageError("--attention and --meta-reps need --out");

    // The backend is rebuilt from the checkpoint's config so features match training.
    const ModelConfig peek = TensorArchive::load(o.checkpoint).manifest.at("config").get<ModelConfig>();
    Options bo = o;
    bo.embed_dim = peek.embed_dim;
    const auto backend = make_backend(bo, peek);
    const LoadedCheckpoint ck = load_checkpoint(o.checkpoint, backend->model_id());
    const ModelConfig& c = ck.info.config;
    const auto encoder = make_encoder(bo, c, backend);
    fs::create_directories(o.out_dir);

    std::vector<PreparedDataset> prepared;
    for (const auto& name : o.datasets) prepared.push_back(load_prepared(resolve_entry(o, name), c, encoder.get()));

    if (o.attention) {
        for (const auto& ds : prepared) {
            const PreparedSplit& split = split_by_name(ds, o.split);
            if (o.sample >= split.size()) {
                throw Error(fmt::format("{}: sample {} out of range ({} {} windows)", ds.id, o.sample, split.size(),
                                        o.split));
            }
            const AttentionMap map = extract_attention(ck.model, split.sample(o.sample), split.features(o.sample));
            const std::string stem = fmt::format("attention_{}_{}_{}", ds.id, o.split, o.sample);
            fs::path path;
            if (o.format == "archive") {
                TensorArchive a;
                a.manifest["kind"] = "attention-map";
                std::vector<std::string> labels;
                for (auto k : map.segments) labels.push_back(to_string(k));
                a.manifest["segments"] = labels;
                a.tensors.push_back({"attention", map.weights.cast<float>()});
                path = fs::path(o.out_dir) / (stem + ".bin");
                a.save(path);
            } else {
                path = fs::path(o.out_dir) / (stem + ".csv");
                std::ofstream f(path, std::ios::trunc);
                write_attention_csv(map, f);
            }
            out << fmt::format("{}x{} attention map written to {}\n", map.weights.rows(), map.weights.cols(),
                               path.string());
        }
    }
    if (o.meta_reps) {
        std::vector<const PreparedDataset*> ptrs;
        for (const auto& p : prepared) ptrs.push_back(&p);
        const auto reps = export_meta_representations(ck.model, ptrs, o.split, o.max_samples);
        fs::path path = fs::path(o.out_dir) / fmt::format("meta_reps_{}", o.split);
        if (o.format == "archive") {
            path += ".bin";
            write_representations_archive(reps, path);
        } else {
            path += ".csv";
            std::ofstream f(path, std::ios::trunc);
            write_representations_csv(reps, f);
        }
        out << fmt::format("{} representation rows written to {}\n", reps.size(), path.string());
    }
    return ok;
}

void configure_logging(const std::string& level) {
    static const bool once = [] {
        auto logger = spdlog::stderr_color_mt("metatst");
        spdlog::set_default_logger(logger);
        return true;
    }();
    (void)once;
    spdlog::set_level(spdlog::level::from_str(level));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Metadata-informed time series forecasting"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--log-level", o.log_level, "trace, debug, info, warn, err, off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "err", "off"}));

    auto* train = app.add_subcommand("train", "Train on one dataset");
    train->add_option("--dataset", o.datasets, "Dataset name")->required();
    add_data_options(train, o);
    add_model_options(train, o);
    add_backend_options(train, o);
    add_run_options(train, o);

    auto* joint = app.add_subcommand("joint-train", "Train one model over several datasets");
    joint->add_option("--datasets,--dataset", o.datasets, "Dataset names")->delimiter(',')->required();
    joint->add_option("--horizons", o.horizons, "One model per prediction length")->delimiter(',');
    joint->add_flag("--zero-shot", o.zero_shot, "Label test metrics of the joint model as zero-shot");
    joint->add_option("--unseen", o.unseen, "Datasets evaluated zero-shot without training")->delimiter(',');
    joint->add_flag("--probe", o.probe, "Linear-probe the head on each dataset after joint training");
    joint->add_option("--probe-epochs", o.probe_epochs);
    joint->add_option("--compare", o.compare, "results.json of individual runs for the comparison table")
        ->check(CLI::ExistingFile);
    add_data_options(joint, o);
    add_model_options(joint, o);
    add_backend_options(joint, o);
    add_run_options(joint, o);

    auto* ablate = app.add_subcommand("ablate", "Train and evaluate a variant without some token group");
    ablate->add_option("--datasets,--dataset", o.datasets, "Dataset names")->delimiter(',')->required();
    ablate->add_flag("--drop-meta", o.drop_meta);
    ablate->add_flag("--drop-exo", o.drop_exo);
    ablate->add_flag("--drop-endo", o.drop_endo);
    ablate->add_option("--full-results", o.full_results, "results.json of the full model")
        ->check(CLI::ExistingFile);
    add_data_options(ablate, o);
    add_model_options(ablate, o);
    add_backend_options(ablate, o);
    add_run_options(ablate, o);

    auto* exp = app.add_subcommand("export", "Export attention maps, metadata representations or templates");
    exp->add_option("--checkpoint", o.checkpoint)->check(CLI::ExistingFile);
    exp->add_option("--datasets,--dataset", o.datasets)->delimiter(',');
    exp->add_flag("--attention", o.attention);
    exp->add_option("--sample", o.sample);
    exp->add_flag("--meta-reps", o.meta_reps);
    exp->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}));
    exp->add_option("--max-samples", o.max_samples);
    exp->add_flag("--templates", o.templates);
    exp->add_option("--format", o.format)->check(CLI::IsMember({"csv", "archive"}));
    exp->add_option("--out", o.out_dir);
    add_data_options(exp, o);
    add_backend_options(exp, o);

    auto* dump = app.add_subcommand("dump-templates", "Print the metadata templates");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage_error;
    }

    try {
        configure_logging(o.log_level);
        if (*train) return cmd_train(args, o, out);
        if (*joint) return cmd_joint_train(args, o, out);
        if (*ablate) return cmd_ablate(args, o, out);
        if (*exp) return cmd_export(o, out);
        if (*dump) {
            out << dump_templates();
            return ok;
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return usage_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return runtime_failure;
    }
    return usage_error;
}

}  // namespace metatst::cli
