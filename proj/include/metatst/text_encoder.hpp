#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "metatst/digest.hpp"
#include "metatst/layers.hpp"
#include "metatst/metadata.hpp"

namespace metatst {

using WordMatrix = Mat<float>;

/// Word-level output of a text encoder: W rows of E reals.
struct WordTokenSequence {
    WordMatrix rows;
    std::optional<std::size_t> special_token;  // row holding the sentence-level token, if any

    std::size_t length() const { return static_cast<std::size_t>(rows.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(rows.cols()); }
};

enum class BackendKind { external_service, hash_stub };

/// A frozen text encoder. Implementations hold no trainable state and map
/// identical text to identical output.
class TextEmbeddingBackend {
public:
    virtual ~TextEmbeddingBackend() = default;
    virtual BackendKind kind() const = 0;
    virtual const std::string& model_id() const = 0;
    virtual std::size_t dim() const = 0;
    virtual WordTokenSequence encode(std::string_view text) const = 0;
    virtual std::vector<WordTokenSequence> encode_batch(std::span<const std::string> texts) const;
};

/// One unit vector per whitespace token, built from the token's character
/// trigrams so that tokens sharing n-grams land close to each other.
WordTokenSequence hash_stub_encode(std::string_view text, std::size_t dim = 64);

class HashStubBackend final : public TextEmbeddingBackend {
public:
    explicit HashStubBackend(std::size_t dim = 64, std::string model_id = "hash-stub-v1");
    BackendKind kind() const override { return BackendKind::hash_stub; }
    const std::string& model_id() const override { return model_id_; }
    std::size_t dim() const override { return dim_; }
    WordTokenSequence encode(std::string_view text) const override;

private:
    std::size_t dim_;
    std::string model_id_;
};

struct ServiceOptions {
    std::string url;                 // e.g. http://localhost:8080/embed
    std::string model_id = "t5-base";
    std::size_t dim = 768;
    int layer_index = -1;            // hidden layer for decoder-only models; -1 = final
    bool accept_precollapsed = false;  // allow {"embeddings": ...} replies (one row per text)
    int max_in_flight = 4;
    int timeout_seconds = 60;
};

/// Client for the embedding service.
///   request:  {"model": str, "texts": [str...], "mode": "tokens", "layer": int}
///   response: {"dim": int, "token_embeddings": [[[num...]...]...]}
///             optionally "special_token_index": [int...] (one per text)
///             or, precollapsed, {"dim": int, "embeddings": [[num...]...]}
class ServiceBackend final : public TextEmbeddingBackend {
public:
    explicit ServiceBackend(ServiceOptions options);
    ~ServiceBackend() override;
    BackendKind kind() const override { return BackendKind::external_service; }
    const std::string& model_id() const override { return options_.model_id; }
    std::size_t dim() const override { return options_.dim; }
    WordTokenSequence encode(std::string_view text) const override;
    std::vector<WordTokenSequence> encode_batch(std::span<const std::string> texts) const override;

    /// Decodes a response body; exposed for fixture replay.
    static std::vector<WordTokenSequence> decode_response(std::string_view body, std::size_t expected_texts,
                                                          std::size_t expected_dim,
                                                          bool accept_precollapsed);

private:
    ServiceOptions options_;
    struct Gate;
    std::unique_ptr<Gate> gate_;
};

// ---------------------------------------------------------------------------

enum class AggregationKind { special_token, average_pooling, router };

struct AggregationStrategy {
    AggregationKind kind = AggregationKind::average_pooling;
    int router_count = 3;  // R in {3, 6, 12}; router strategy only

    bool operator==(const AggregationStrategy&) const = default;
};

std::string to_string(AggregationKind kind);
AggregationKind aggregation_from_string(std::string_view s);

/// Collapses a word sequence into one native vector. The router strategy
/// needs initialized router parameters.
Eigen::RowVectorXf aggregate(const WordTokenSequence& seq, const AggregationStrategy& strategy,
                             const RouterAggregator<float>* router = nullptr);

// ---------------------------------------------------------------------------

/// Persistent map from a 32-byte digest to a float vector. The backing file
/// is an append-only sequence of records: digest, u32 little-endian dim, dim
/// little-endian f32. Later records for the same key win.
class EmbeddingCache {
public:
    EmbeddingCache() = default;  // in-memory only
    explicit EmbeddingCache(std::filesystem::path file);

    std::optional<std::vector<float>> get(const Digest& key) const;
    void put(const Digest& key, std::span<const float> value);
    std::size_t size() const;
    std::size_t dropped_records() const { return dropped_; }
    const std::optional<std::filesystem::path>& file() const { return file_; }

    static Digest key(std::string_view model_id, std::string_view template_version,
                      std::string_view kind, std::string_view text);

private:
    void load();
    struct DigestHash {
        std::size_t operator()(const Digest& d) const noexcept;
    };
    std::optional<std::filesystem::path> file_;
    std::unordered_map<Digest, std::vector<float>, DigestHash> entries_;
    mutable std::shared_mutex mutex_;
    std::size_t dropped_ = 0;
};

// ---------------------------------------------------------------------------

/// Native-space metadata features of one sample, level order dataset, task,
/// sample. For parameter-free strategies each level is a 1 x E aggregated
/// vector; for the router strategy it is the full W x E word sequence.
struct MetaFeatures {
    std::array<std::shared_ptr<const WordMatrix>, kMetadataLevels> levels;

    bool empty() const { return !levels[0]; }
};

/// Frozen encoder plus aggregation plus cache. Produces MetaFeatures; the
/// trainable alignment is applied by the model.
class MetaEncoder {
public:
    MetaEncoder(std::shared_ptr<const TextEmbeddingBackend> backend, AggregationStrategy strategy,
                std::shared_ptr<EmbeddingCache> cache = std::make_shared<EmbeddingCache>());

    MetaFeatures features(const MetadataBundle& bundle) const;
    /// Native features of one paragraph (1 x E, or W x E for the router strategy).
    std::shared_ptr<const WordMatrix> paragraph(const std::string& text) const;

    const TextEmbeddingBackend& backend() const { return *backend_; }
    const AggregationStrategy& strategy() const { return strategy_; }
    EmbeddingCache& cache() const { return *cache_; }
    std::size_t native_dim() const { return backend_->dim(); }
    std::size_t backend_calls() const;

private:
    std::shared_ptr<const TextEmbeddingBackend> backend_;
    AggregationStrategy strategy_;
    std::shared_ptr<EmbeddingCache> cache_;
    // Decoded matrices for texts already seen in this process.
    mutable std::mutex memo_mutex_;
    mutable std::unordered_map<std::string, std::shared_ptr<const WordMatrix>> memo_;
    mutable std::size_t backend_calls_ = 0;
};

}  // namespace metatst
