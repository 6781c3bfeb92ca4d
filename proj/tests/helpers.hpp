#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <fmt/format.h>

#include "metatst/config.hpp"
#include "metatst/data.hpp"
#include "metatst/prepared.hpp"
#include "metatst/text_encoder.hpp"

namespace testing {

using namespace metatst;

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.seq_len = 8;
    c.exo_len = 8;
    c.pred_len = 4;
    c.patch_len = 4;
    c.patch_stride = 4;
    c.e_layers = 1;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 2;
    c.dropout = 0.0;
    c.embed_dim = 16;
    c.learning_rate = 1e-3;
    c.batch_size = 4;
    c.train_epochs = 2;
    return c;
}

inline DatasetDescriptor toy_descriptor(const std::string& name, const std::string& domain = "Energy") {
    DatasetDescriptor d;
    d.name = name;
    d.domain = domain;
    d.frequency = "1 Hour";
    d.variate_names = {"x", "y"};
    d.endogenous_name = "the target of " + name;
    d.exogenous_descriptions = "a helper signal";
    d.source_note = "Synthetic.";
    return d;
}

inline Timestamp epoch_hours(long h) {
    return Timestamp(std::chrono::seconds(1577836800L + 3600L * h));  // 2020-01-01T00:00:00
}

/// CSV text with an hourly date column and `variates` random-walk columns.
inline std::string synthetic_csv(std::size_t rows, std::size_t variates, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    std::ostringstream out;
    out << "date";
    for (std::size_t j = 0; j < variates; ++j) out << ",v" << j;
    out << "\n";
    std::vector<double> level(variates, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        out << format_iso(epoch_hours(static_cast<long>(i)));
        for (std::size_t j = 0; j < variates; ++j) {
            level[j] = 0.9 * level[j] + n(rng);
            out << fmt::format(",{:.6f}", level[j]);
        }
        out << "\n";
    }
    return out.str();
}

inline RawTable synthetic_table(std::size_t rows, std::size_t variates, std::uint64_t seed) {
    std::istringstream in(synthetic_csv(rows, variates, seed));
    return parse_csv(in);
}

/// Random samples of the config's shape with `c` exogenous variates.
inline std::vector<TimeWindowSample> random_samples(std::size_t n, const ModelConfig& cfg, std::size_t c,
                                                    std::uint64_t seed, const std::string& id = "toy") {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<TimeWindowSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        TimeWindowSample s;
        s.x_en = Eigen::VectorXd::NullaryExpr(cfg.seq_len, [&] { return g(rng); });
        s.x_ex = Eigen::MatrixXd::NullaryExpr(cfg.exo_len, static_cast<Eigen::Index>(c), [&] { return g(rng); });
        s.y_en = Eigen::VectorXd::NullaryExpr(cfg.pred_len, [&] { return g(rng); });
        s.x_en_raw = s.x_en;
        s.start_timestamp = epoch_hours(static_cast<long>(i));
        s.target_timestamp = epoch_hours(static_cast<long>(i) + cfg.seq_len);
        s.start_row = i;
        s.dataset_id = id;
        out.push_back(std::move(s));
    }
    return out;
}

inline std::shared_ptr<MetaEncoder> hash_encoder(std::size_t dim,
                                                 AggregationStrategy strategy = AggregationStrategy{}) {
    return std::make_shared<MetaEncoder>(std::make_shared<HashStubBackend>(dim), strategy);
}

/// Scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               fmt::format("metatst_test_{}_{}", static_cast<long>(::getpid()), counter++);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace testing
