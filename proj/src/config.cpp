#include "metatst/config.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "metatst/error.hpp"

namespace metatst {

std::string AblationFlags::label() const {
    std::vector<std::string> parts;
    if (drop_meta) parts.emplace_back("w/o Meta");
    if (drop_exo) parts.emplace_back("w/o Ex.");
    if (drop_endo) parts.emplace_back("w/o En.");
    if (parts.empty()) return "Full";
    std::string out = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) out += " + " + parts[i];
    return out;
}

ModelConfig ModelConfig::short_term_defaults() {
    ModelConfig c;
    c.seq_len = 168;
    c.exo_len = 168;
    c.pred_len = 24;
    c.short_term = true;
    c.patch_len = 24;
    c.patch_stride = 24;
    return c;
}

ModelConfig ModelConfig::long_term_defaults(int pred_len) {
    ModelConfig c;
    c.seq_len = 96;
    c.exo_len = 96;
    c.pred_len = pred_len;
    c.short_term = false;
    c.patch_len = 12;
    c.patch_stride = 12;
    return c;
}

int ModelConfig::endo_tokens() const { return ablation.drop_endo ? 1 : seq_len / patch_len; }

int ModelConfig::meta_tokens() const { return ablation.drop_meta ? 0 : static_cast<int>(kMetadataLevels); }

void ModelConfig::validate() const {
    if (seq_len <= 0 || exo_len <= 0 || pred_len <= 0) throw Error("window lengths must be positive");
    if (exo_len > seq_len) throw Error("exo_len must not exceed seq_len");
    if (patch_len <= 0) throw Error("patch_len must be positive");
    if (patch_stride != patch_len) throw Error("patches are non-overlapping: patch_stride must equal patch_len");
    if (seq_len < patch_len) {
        throw Error(fmt::format("seq_len {} is shorter than one patch ({})", seq_len, patch_len));
    }
    if (e_layers < 0) throw Error("e_layers must be >= 0");
    if (d_model <= 0 || d_ff <= 0 || n_heads <= 0) throw Error("d_model, d_ff and n_heads must be positive");
    if (d_model % n_heads != 0) throw Error(fmt::format("d_model {} not divisible by n_heads {}", d_model, n_heads));
    if (dropout < 0.0 || dropout >= 1.0) throw Error("dropout must be in [0, 1)");
    if (learning_rate <= 0.0) throw Error("learning_rate must be positive");
    if (batch_size <= 0) throw Error("batch_size must be positive");
    if (train_epochs < 0) throw Error("train_epochs must be >= 0");
    if (embed_dim == 0) throw Error("embed_dim must be positive");
    if (ablation.drop_endo && ablation.drop_exo && ablation.drop_meta) {
        throw Error("cannot drop endogenous, exogenous and metadata tokens at once");
    }
    if (aggregation.kind == AggregationKind::router) {
        if (aggregation.router_count <= 0) throw Error("router_count must be positive");
        if (static_cast<int>(embed_dim) % n_heads != 0) {
            throw Error(fmt::format("router aggregation: embed_dim {} not divisible by n_heads {}", embed_dim, n_heads));
        }
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{
        {"seq_len", c.seq_len},
        {"exo_len", c.exo_len},
        {"pred_len", c.pred_len},
        {"short_term", c.short_term},
        {"e_layers", c.e_layers},
        {"d_model", c.d_model},
        {"d_ff", c.d_ff},
        {"n_heads", c.n_heads},
        {"patch_len", c.patch_len},
        {"patch_stride", c.patch_stride},
        {"dropout", c.dropout},
        {"aggregation", to_string(c.aggregation.kind)},
        {"router_count", c.aggregation.router_count},
        {"align_activation", c.align_activation == Activation::gelu ? "gelu" : "identity"},
        {"drop_endo", c.ablation.drop_endo},
        {"drop_exo", c.ablation.drop_exo},
        {"drop_meta", c.ablation.drop_meta},
        {"embed_dim", c.embed_dim},
        {"sample_extrema", c.sample_extrema},
        {"learning_rate", c.learning_rate},
        {"batch_size", c.batch_size},
        {"train_epochs", c.train_epochs},
    };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("seq_len", c.seq_len);
    get("exo_len", c.exo_len);
    get("pred_len", c.pred_len);
    get("short_term", c.short_term);
    get("e_layers", c.e_layers);
    get("d_model", c.d_model);
    get("d_ff", c.d_ff);
    get("n_heads", c.n_heads);
    get("patch_len", c.patch_len);
    get("patch_stride", c.patch_stride);
    get("dropout", c.dropout);
    if (j.contains("aggregation")) c.aggregation.kind = aggregation_from_string(j.at("aggregation").get<std::string>());
    get("router_count", c.aggregation.router_count);
    if (j.contains("align_activation")) {
        const auto a = j.at("align_activation").get<std::string>();
        if (a == "gelu") {
            c.align_activation = Activation::gelu;
        } else if (a == "identity") {
            c.align_activation = Activation::identity;
        } else {
            throw Error(fmt::format("unknown align_activation '{}'", a));
        }
    }
    get("drop_endo", c.ablation.drop_endo);
    get("drop_exo", c.ablation.drop_exo);
    get("drop_meta", c.ablation.drop_meta);
    get("embed_dim", c.embed_dim);
    get("sample_extrema", c.sample_extrema);
    get("learning_rate", c.learning_rate);
    get("batch_size", c.batch_size);
    get("train_epochs", c.train_epochs);
}

ModelConfig parse_config(std::string_view json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("config: {}", e.what()));
    }
    ModelConfig c;
    const auto preset = j.value("preset", std::string{});
    if (preset == "short") {
        c = ModelConfig::short_term_defaults();
    } else if (preset == "long") {
        c = ModelConfig::long_term_defaults(j.value("pred_len", 96));
    } else if (!preset.empty()) {
        throw Error(fmt::format("config: unknown preset '{}'", preset));
    }
    try {
        from_json(j, c);
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("config: {}", e.what()));
    }
    c.validate();
    return c;
}

ModelConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open config '{}'", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::vector<ModelConfig> horizon_matrix(const ModelConfig& base, const std::vector<int>& horizons) {
    std::vector<ModelConfig> out;
    for (int h : horizons) {
        ModelConfig c = base;
        c.pred_len = h;
        c.validate();
        out.push_back(c);
    }
    return out;
}

}  // namespace metatst
