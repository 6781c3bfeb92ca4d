#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "metatst/config.hpp"
#include "metatst/data.hpp"
#include "metatst/layers.hpp"
#include "metatst/text_encoder.hpp"

namespace metatst {

enum class TokenKind { endo, exo, meta };

std::string to_string(TokenKind kind);

/// K tokens of width D with one segment label per row.
template <class T>
struct TokenBlock {
    Mat<T> tokens;
    std::vector<TokenKind> segments;

    Eigen::Index size() const { return tokens.rows(); }
    std::size_t count(TokenKind kind) const {
        return static_cast<std::size_t>(std::count(segments.begin(), segments.end(), kind));
    }
};

/// h0 = endo ‖ exo ‖ meta. Blocks may be empty; non-empty blocks must share D.
template <class T>
TokenBlock<T> informative_concat(const TokenBlock<T>& endo, const TokenBlock<T>& exo, const TokenBlock<T>& meta) {
    Eigen::Index d = -1;
    for (const auto* b : {&endo, &exo, &meta}) {
        if (b->size() == 0) continue;
        if (d >= 0 && b->tokens.cols() != d) {
            throw ShapeError(fmt::format("token width mismatch: {} vs {}", b->tokens.cols(), d));
        }
        d = b->tokens.cols();
    }
    TokenBlock<T> out;
    out.tokens.resize(endo.size() + exo.size() + meta.size(), std::max<Eigen::Index>(d, 0));
    Eigen::Index row = 0;
    for (const auto* b : {&endo, &exo, &meta}) {
        if (b->size() == 0) continue;
        out.tokens.middleRows(row, b->size()) = b->tokens;
        row += b->size();
        out.segments.insert(out.segments.end(), b->segments.begin(), b->segments.end());
    }
    return out;
}

/// The forecasting network: patch embedding of the endogenous history,
/// series embedding of each exogenous variate, aligned metadata tokens, an
/// L-layer post-norm Transformer encoder over all tokens and a linear head
/// over the flattened endogenous outputs.
template <class T>
class MetaTST {
public:
    struct ForwardCache {
        Mat<T> patches;   // N x P
        Mat<T> exo_in;    // C x T_ex
        Mat<T> meta_native;  // M x E (post aggregation)
        std::array<typename RouterAggregator<T>::Cache, kMetadataLevels> router;
        typename ModalAlign<T>::Cache align;
        std::vector<typename EncoderBlock<T>::Cache> blocks;
        Mat<T> flat;  // 1 x N*D
        Eigen::Index n_endo = 0, n_exo = 0, n_meta = 0;
    };

    MetaTST(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    Eigen::Index native_dim() const { return static_cast<Eigen::Index>(config_.embed_dim); }

    TokenBlock<T> patch_embed(const Eigen::VectorXd& x_en, ForwardCache* cache = nullptr) const;
    TokenBlock<T> series_embed(const Eigen::MatrixXd& x_ex, ForwardCache* cache = nullptr) const;
    /// Aggregates (router strategy) and aligns the three metadata levels.
    TokenBlock<T> meta_embed(const MetaFeatures& features, ForwardCache* cache = nullptr) const;
    /// Applies the L blocks. Throws NumericError naming the first block whose output is not finite.
    Mat<T> encoder_forward(const Mat<T>& h0, Mode mode, ForwardCache* cache = nullptr) const;
    /// Linear head over the first N rows.
    RowVec<T> forecast(const Mat<T>& h_last, ForwardCache* cache = nullptr) const;

    /// Full forward pass for one sample.
    RowVec<T> forward(const TimeWindowSample& sample, const MetaFeatures& meta, Mode mode,
                      ForwardCache* cache = nullptr) const;
    /// Same as forward, starting from already-built tokens.
    RowVec<T> forward_tokens(const TokenBlock<T>& h0, Mode mode, ForwardCache* cache = nullptr) const;
    /// Accumulates gradients of a loss whose derivative w.r.t. the prediction is `dy`.
    void backward(const RowVec<T>& dy, const ForwardCache& cache);

    TokenBlock<T> embed(const TimeWindowSample& sample, const MetaFeatures& meta, ForwardCache* cache = nullptr) const;

    ParamRefs<T> parameters();
    std::vector<const Param<T>*> parameters() const;
    Param<T>* find(const std::string& name);
    void zero_grad();
    std::size_t parameter_count() const;
    std::size_t trainable_count() const;

    /// Freezes every parameter except the forecasting head.
    void freeze_all_but_head();
    void unfreeze_all();
    bool backbone_frozen() const { return backbone_frozen_; }

    ModalAlign<T>& align() { return align_; }
    const ModalAlign<T>& align() const { return align_; }
    const RouterAggregator<T>* router() const { return router_ ? &*router_ : nullptr; }
    Linear<T>& head() { return head_; }

    /// Reseeds the dropout stream.
    void seed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

private:
    void collect(ParamRefs<T>& out);

    ModelConfig config_;
    Linear<T> patch_;
    Param<T> position_;
    Param<T> placeholder_;  // drop_endo only
    Linear<T> series_;
    std::optional<RouterAggregator<T>> router_;
    ModalAlign<T> align_;
    std::vector<EncoderBlock<T>> blocks_;
    Linear<T> head_;
    bool backbone_frozen_ = false;
    mutable std::mt19937_64 dropout_rng_;  // advanced by train-mode forward passes only
};

// ---------------------------------------------------------------------------

/// Metadata tokens of one bundle: encode, aggregate (router if given), align.
template <class T>
TokenBlock<T> meta_embed(const MetadataBundle& bundle, const MetaEncoder& encoder, const ModalAlign<T>& align,
                         const RouterAggregator<T>* router = nullptr) {
    const MetaFeatures f = encoder.features(bundle);
    Mat<T> native(static_cast<Eigen::Index>(kMetadataLevels), static_cast<Eigen::Index>(encoder.native_dim()));
    for (std::size_t k = 0; k < kMetadataLevels; ++k) {
        const Mat<T> words = f.levels[k]->template cast<T>();
        if (encoder.strategy().kind == AggregationKind::router) {
            if (router == nullptr || !router->initialized()) {
                throw Error("router aggregation used before its parameters were initialized");
            }
            native.row(static_cast<Eigen::Index>(k)) = router->forward(words).row(0);
        } else {
            native.row(static_cast<Eigen::Index>(k)) = words.row(0);
        }
    }
    TokenBlock<T> out;
    out.tokens = align.forward(native);
    out.segments.assign(kMetadataLevels, TokenKind::meta);
    return out;
}

// ---------------------------------------------------------------------------

template <class T>
MetaTST<T>::MetaTST(const ModelConfig& config, std::uint64_t seed) : config_(config), dropout_rng_(seed ^ 0xd5a61266f0c9392cULL) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const Eigen::Index d = config_.d_model;
    const Eigen::Index n = config_.endo_tokens();
    if (config_.ablation.drop_endo) {
        placeholder_ = Param<T>("endo.placeholder", 1, d);
        fill_normal(placeholder_.value, 0.02, rng);
    } else {
        patch_ = Linear<T>("patch", config_.patch_len, d, rng);
        position_ = Param<T>("patch.position", n, d);
        fill_normal(position_.value, 0.02, rng);
    }
    if (!config_.ablation.drop_exo) series_ = Linear<T>("series", config_.exo_len, d, rng);
    if (!config_.ablation.drop_meta) {
        const Eigen::Index e = native_dim();
        if (config_.aggregation.kind == AggregationKind::router) {
            router_.emplace(e, config_.aggregation.router_count, config_.n_heads, rng);
        }
        align_ = ModalAlign<T>(e, d, config_.align_activation, rng);
    }
    for (int l = 0; l < config_.e_layers; ++l) {
        blocks_.emplace_back(fmt::format("block{}", l), d, config_.d_ff, config_.n_heads, config_.dropout, rng);
    }
    head_ = Linear<T>("head", n * d, config_.pred_len, rng);
}

template <class T>
TokenBlock<T> MetaTST<T>::patch_embed(const Eigen::VectorXd& x_en, ForwardCache* cache) const {
    TokenBlock<T> out;
    if (config_.ablation.drop_endo) {
        out.tokens = placeholder_.value;
        out.segments.assign(1, TokenKind::endo);
        return out;
    }
    const Eigen::Index p = config_.patch_len;
    if (x_en.size() < p) {
        throw ShapeError(fmt::format("endogenous history of {} values is shorter than one patch ({})", x_en.size(), p));
    }
    const Eigen::Index n = x_en.size() / p;
    if (n != position_.value.rows()) {
        throw ShapeError(fmt::format("history yields {} patches, model expects {}", n, position_.value.rows()));
    }
    // Oldest x_en.size() mod P values are dropped.
    const Eigen::Index skip = x_en.size() - n * p;
    Mat<T> patches(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) patches(i, j) = static_cast<T>(x_en(skip + i * p + j));
    }
    out.tokens = patch_.forward(patches) + position_.value;
    out.segments.assign(static_cast<std::size_t>(n), TokenKind::endo);
    if (cache) cache->patches = std::move(patches);
    return out;
}

template <class T>
TokenBlock<T> MetaTST<T>::series_embed(const Eigen::MatrixXd& x_ex, ForwardCache* cache) const {
    TokenBlock<T> out;
    if (config_.ablation.drop_exo || x_ex.cols() == 0) {
        out.tokens.resize(0, config_.d_model);
        if (cache) cache->exo_in.resize(0, config_.exo_len);
        return out;
    }
    if (x_ex.rows() != config_.exo_len) {
        throw ShapeError(fmt::format("exogenous window has {} steps, model expects {}", x_ex.rows(), config_.exo_len));
    }
    Mat<T> in = x_ex.transpose().template cast<T>();  // C x T_ex, one row per variate
    out.tokens = series_.forward(in);
    out.segments.assign(static_cast<std::size_t>(in.rows()), TokenKind::exo);
    if (cache) cache->exo_in = std::move(in);
    return out;
}

template <class T>
TokenBlock<T> MetaTST<T>::meta_embed(const MetaFeatures& features, ForwardCache* cache) const {
    TokenBlock<T> out;
    if (config_.ablation.drop_meta) {
        out.tokens.resize(0, config_.d_model);
        return out;
    }
    if (features.empty()) throw Error("model expects metadata features but none were supplied");
    const Eigen::Index m = static_cast<Eigen::Index>(kMetadataLevels);
    Mat<T> native(m, native_dim());
    for (Eigen::Index k = 0; k < m; ++k) {
        const auto& words = *features.levels[static_cast<std::size_t>(k)];
        if (words.cols() != native_dim()) {
            throw ShapeError(fmt::format("metadata features have width {}, model expects {}", words.cols(), native_dim()));
        }
        if (router_) {
            typename RouterAggregator<T>::Cache local;
            auto& rc = cache ? cache->router[static_cast<std::size_t>(k)] : local;
            native.row(k) = router_->forward(words.template cast<T>(), rc).row(0);
        } else {
            if (words.rows() != 1) throw ShapeError("aggregated metadata features must be a single row");
            native.row(k) = words.row(0).template cast<T>();
        }
    }
    typename ModalAlign<T>::Cache local_align;
    out.tokens = align_.forward(native, cache ? cache->align : local_align);
    out.segments.assign(kMetadataLevels, TokenKind::meta);
    if (cache) cache->meta_native = std::move(native);
    return out;
}

template <class T>
Mat<T> MetaTST<T>::encoder_forward(const Mat<T>& h0, Mode mode, ForwardCache* cache) const {
    if (!h0.allFinite()) throw NumericError("encoder input contains non-finite values");
    std::vector<typename EncoderBlock<T>::Cache> local(blocks_.size());
    auto& caches = cache ? cache->blocks : local;
    caches.resize(blocks_.size());
    Mat<T> h = h0;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        h = blocks_[l].forward(h, caches[l], mode, dropout_rng_);
        if (!h.allFinite()) throw NumericError(fmt::format("encoder block{} produced non-finite output", l));
    }
    return h;
}

template <class T>
RowVec<T> MetaTST<T>::forecast(const Mat<T>& h_last, ForwardCache* cache) const {
    const Eigen::Index n = config_.endo_tokens();
    if (h_last.rows() < n) throw ShapeError(fmt::format("forecast needs {} endogenous rows, got {}", n, h_last.rows()));
    Mat<T> flat(1, n * h_last.cols());
    for (Eigen::Index i = 0; i < n; ++i) flat.middleCols(i * h_last.cols(), h_last.cols()) = h_last.row(i);
    RowVec<T> y = head_.forward(flat).row(0);
    if (cache) cache->flat = std::move(flat);
    return y;
}

template <class T>
TokenBlock<T> MetaTST<T>::embed(const TimeWindowSample& sample, const MetaFeatures& meta, ForwardCache* cache) const {
    const auto endo = patch_embed(sample.x_en, cache);
    const auto exo = series_embed(sample.x_ex, cache);
    const auto m = meta_embed(meta, cache);
    if (cache) {
        cache->n_endo = endo.size();
        cache->n_exo = exo.size();
        cache->n_meta = m.size();
    }
    return informative_concat(endo, exo, m);
}

template <class T>
RowVec<T> MetaTST<T>::forward_tokens(const TokenBlock<T>& h0, Mode mode, ForwardCache* cache) const {
    const Mat<T> h = encoder_forward(h0.tokens, mode, cache);
    return forecast(h, cache);
}

template <class T>
RowVec<T> MetaTST<T>::forward(const TimeWindowSample& sample, const MetaFeatures& meta, Mode mode, ForwardCache* cache) const {
    if (sample.x_en.size() != config_.seq_len) {
        throw ShapeError(fmt::format("sample history has {} steps, model expects {}", sample.x_en.size(), config_.seq_len));
    }
    const TokenBlock<T> h0 = embed(sample, meta, cache);
    return forward_tokens(h0, mode, cache);
}

template <class T>
void MetaTST<T>::backward(const RowVec<T>& dy, const ForwardCache& c) {
    const Eigen::Index d = config_.d_model;
    const Eigen::Index n = c.n_endo;
    const Mat<T> dflat = head_.backward(c.flat, Mat<T>(dy));
    if (backbone_frozen_) return;

    Mat<T> dh = Mat<T>::Zero(c.n_endo + c.n_exo + c.n_meta, d);
    for (Eigen::Index i = 0; i < n; ++i) dh.row(i) = dflat.middleCols(i * d, d);
    for (std::size_t l = blocks_.size(); l-- > 0;) dh = blocks_[l].backward(dh, c.blocks[l]);

    const Mat<T> dendo = dh.topRows(n);
    if (config_.ablation.drop_endo) {
        placeholder_.grad += dendo;
    } else {
        position_.grad += dendo;
        patch_.backward(c.patches, dendo);
    }
    if (c.n_exo > 0) series_.backward(c.exo_in, dh.middleRows(n, c.n_exo));
    if (c.n_meta > 0) {
        const Mat<T> dnative = align_.backward(dh.bottomRows(c.n_meta), c.align);
        if (router_) {
            for (Eigen::Index k = 0; k < c.n_meta; ++k) {
                router_->backward(dnative.row(k), c.router[static_cast<std::size_t>(k)]);
            }
        }
    }
}

template <class T>
void MetaTST<T>::collect(ParamRefs<T>& out) {
    if (config_.ablation.drop_endo) {
        out.push_back(&placeholder_);
    } else {
        patch_.collect(out);
        out.push_back(&position_);
    }
    if (!config_.ablation.drop_exo) series_.collect(out);
    if (!config_.ablation.drop_meta) {
        if (router_) router_->collect(out);
        align_.collect(out);
    }
    for (auto& b : blocks_) b.collect(out);
    head_.collect(out);
}

template <class T>
ParamRefs<T> MetaTST<T>::parameters() {
    ParamRefs<T> out;
    collect(out);
    return out;
}

template <class T>
std::vector<const Param<T>*> MetaTST<T>::parameters() const {
    ParamRefs<T> tmp;
    const_cast<MetaTST*>(this)->collect(tmp);
    return {tmp.begin(), tmp.end()};
}

template <class T>
Param<T>* MetaTST<T>::find(const std::string& name) {
    for (auto* p : parameters()) {
        if (p->name == name) return p;
    }
    return nullptr;
}

template <class T>
void MetaTST<T>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template <class T>
std::size_t MetaTST<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += static_cast<std::size_t>(p->size());
    return n;
}

template <class T>
std::size_t MetaTST<T>::trainable_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) {
        if (p->trainable) n += static_cast<std::size_t>(p->size());
    }
    return n;
}

template <class T>
void MetaTST<T>::freeze_all_but_head() {
    for (auto* p : parameters()) p->trainable = false;
    head_.weight().trainable = true;
    head_.bias().trainable = true;
    backbone_frozen_ = true;
}

template <class T>
void MetaTST<T>::unfreeze_all() {
    for (auto* p : parameters()) p->trainable = true;
    backbone_frozen_ = false;
}

extern template class MetaTST<float>;
extern template class MetaTST<double>;

using Model = MetaTST<float>;

}  // namespace metatst
