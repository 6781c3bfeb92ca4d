#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "metatst/layers.hpp"
#include "metatst/text_encoder.hpp"

namespace metatst {

struct AblationFlags {
    bool drop_endo = false;
    bool drop_exo = false;
    bool drop_meta = false;

    bool any() const { return drop_endo || drop_exo || drop_meta; }
    /// "w/o Meta", "w/o Ex.", "w/o En." joined with " + "; "Full" when none.
    std::string label() const;
    bool operator==(const AblationFlags&) const = default;
};

/// Architecture and training hyperparameters. Names follow the usual
/// e_layers / d_model / d_ff / n_heads vocabulary so published configurations
/// paste directly.
struct ModelConfig {
    // windows
    int seq_len = 96;   // T_en
    int exo_len = 96;   // T_ex
    int pred_len = 96;  // S
    bool short_term = false;

    // architecture
    int e_layers = 3;
    int d_model = 256;
    int d_ff = 2048;
    int n_heads = 8;
    int patch_len = 12;
    int patch_stride = 12;
    double dropout = 0.1;
    AggregationStrategy aggregation{};
    Activation align_activation = Activation::gelu;
    AblationFlags ablation{};

    // metadata encoder
    std::size_t embed_dim = 64;  // native E of the text backend
    bool sample_extrema = true;  // include min/max in the sample paragraph

    // training
    double learning_rate = 1e-4;
    int batch_size = 32;
    int train_epochs = 10;

    /// Short-term (EPF) unified setting: 168 -> 24, patch 24.
    static ModelConfig short_term_defaults();
    /// Long-term unified setting: 96 -> pred_len, patch 12.
    static ModelConfig long_term_defaults(int pred_len = 96);

    /// Number of endogenous tokens N (1 under drop_endo).
    int endo_tokens() const;
    int meta_tokens() const;
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Reads a JSON config. Missing keys keep the defaults of the preset named by
/// "preset" ("short" or "long"), or of ModelConfig{} when absent.
ModelConfig load_config(const std::filesystem::path& path);
ModelConfig parse_config(std::string_view json_text);

/// Hyperparameter sets explored for individual training.
struct SearchGrid {
    static constexpr int e_layers[] = {1, 2, 3};
    static constexpr int d_model[] = {128, 256, 512};
    static constexpr int d_ff[] = {512, 1024, 2048};
    static constexpr int n_heads[] = {4, 8, 16};
    static constexpr int batch_size[] = {16, 32, 64, 128};
    static constexpr double dropout[] = {0.0, 0.1, 0.2, 0.3};
    static constexpr int long_term_horizons[] = {96, 192, 336, 720};
    static constexpr int router_counts[] = {3, 6, 12};
};

/// One config per prediction length; long-term joint runs train one model per horizon.
std::vector<ModelConfig> horizon_matrix(const ModelConfig& base, const std::vector<int>& horizons);

}  // namespace metatst
