#include "metatst/text_encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <semaphore>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "metatst/error.hpp"

namespace metatst {
namespace {

constexpr std::uint64_t kStubSeed = 0x6d657461747374ULL;

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void add_gaussian(std::vector<double>& acc, std::uint64_t seed) {
    std::uint64_t state = seed ^ kStubSeed;
    for (std::size_t i = 0; i < acc.size(); i += 2) {
        const double u1 = (static_cast<double>(splitmix64(state) >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        acc[i] += r * std::cos(6.283185307179586 * u2);
        if (i + 1 < acc.size()) acc[i + 1] += r * std::sin(6.283185307179586 * u2);
    }
}

std::vector<std::string_view> whitespace_tokens(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        const std::size_t start = i;
        while (i < text.size() && !is_space(text[i])) ++i;
        if (i > start) out.push_back(text.substr(start, i - start));
    }
    return out;
}

void put_u32_le(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32_le(std::ostream& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }

struct UrlParts {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

UrlParts split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(fmt::format("embedding URL '{}' has no scheme", url));
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

std::vector<WordTokenSequence> TextEmbeddingBackend::encode_batch(std::span<const std::string> texts) const {
    std::vector<WordTokenSequence> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(encode(t));
    return out;
}

// ---------------------------------------------------------------------------

WordTokenSequence hash_stub_encode(std::string_view text, std::size_t dim) {
    if (dim == 0) throw ShapeError("hash stub dimension must be positive");
    const auto tokens = whitespace_tokens(text);
    if (tokens.empty()) throw Error("cannot encode empty text");
    WordTokenSequence seq;
    seq.rows.resize(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(dim));
    std::vector<double> acc(dim);
    for (std::size_t w = 0; w < tokens.size(); ++w) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const std::string padded = fmt::format("<{}>", tokens[w]);
        add_gaussian(acc, fnv1a64(padded));  // whole-token component
        for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
            add_gaussian(acc, fnv1a64(std::string_view(padded).substr(i, 3)));
        }
        double norm = 0.0;
        for (double v : acc) norm += v * v;
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < dim; ++j) {
            seq.rows(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(j)) = static_cast<float>(acc[j] / norm);
        }
    }
    return seq;
}

HashStubBackend::HashStubBackend(std::size_t dim, std::string model_id)
    : dim_(dim), model_id_(std::move(model_id)) {
    if (dim_ == 0) throw ShapeError("hash stub dimension must be positive");
}

WordTokenSequence HashStubBackend::encode(std::string_view text) const { return hash_stub_encode(text, dim_); }

// ---------------------------------------------------------------------------

struct ServiceBackend::Gate {
    explicit Gate(int n) : slots(n) {}
    std::counting_semaphore<64> slots;
};

ServiceBackend::ServiceBackend(ServiceOptions options)
    : options_(std::move(options)), gate_(std::make_unique<Gate>(std::clamp(options_.max_in_flight, 1, 64))) {
    if (options_.url.empty()) throw Error("embedding service URL is empty (set METATST_EMBED_URL)");
    if (options_.dim == 0) throw ShapeError("embedding dimension must be positive");
}

ServiceBackend::~ServiceBackend() = default;

WordTokenSequence ServiceBackend::encode(std::string_view text) const {
    const std::string t(text);
    return encode_batch(std::span<const std::string>(&t, 1)).front();
}

std::vector<WordTokenSequence> ServiceBackend::encode_batch(std::span<const std::string> texts) const {
    for (const auto& t : texts) {
        if (whitespace_tokens(t).empty()) throw Error("cannot encode empty text");
    }
    nlohmann::json req{{"model", options_.model_id}, {"texts", texts}, {"mode", "tokens"}};
    if (options_.layer_index >= 0) req["layer"] = options_.layer_index;

    const auto url = split_url(options_.url);
    httplib::Result res;
    {
        gate_->slots.acquire();
        struct Release {
            Gate& g;
            ~Release() { g.slots.release(); }
        } release{*gate_};
        httplib::Client client(url.origin);
        client.set_connection_timeout(options_.timeout_seconds);
        client.set_read_timeout(options_.timeout_seconds);
        res = client.Post(url.path, req.dump(), "application/json");
    }

    if (!res) {
        throw RetryableError(fmt::format("embedding service {} unreachable: {}", options_.url,
                                         httplib::to_string(res.error())));
    }
    if (res->status >= 500 || res->status == 429) {
        throw RetryableError(fmt::format("embedding service returned HTTP {}", res->status));
    }
    if (res->status != 200) {
        throw Error(fmt::format("embedding service returned HTTP {}: {}", res->status, res->body));
    }
    return decode_response(res->body, texts.size(), options_.dim, options_.accept_precollapsed);
}

std::vector<WordTokenSequence> ServiceBackend::decode_response(std::string_view body, std::size_t expected_texts,
                                                               std::size_t expected_dim,
                                                               bool accept_precollapsed) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("embedding service: malformed response: {}", e.what()));
    }
    const auto dim = j.value("dim", expected_dim);
    if (dim != expected_dim) {
        throw ShapeError(fmt::format("embedding service: dim {} but {} expected", dim, expected_dim));
    }
    std::vector<WordTokenSequence> out;
    if (j.contains("token_embeddings")) {
        const auto& all = j.at("token_embeddings");
        if (all.size() != expected_texts) throw ShapeError("embedding service: wrong number of sequences");
        for (std::size_t t = 0; t < all.size(); ++t) {
            const auto& rows = all[t];
            if (rows.empty()) throw ShapeError("embedding service: empty token sequence");
            WordTokenSequence seq;
            seq.rows.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
            for (std::size_t w = 0; w < rows.size(); ++w) {
                if (rows[w].size() != dim) throw ShapeError("embedding service: ragged token row");
                for (std::size_t c = 0; c < dim; ++c) {
                    const float v = rows[w][c].get<float>();
                    if (!std::isfinite(v)) throw Error("embedding service: non-finite value");
                    seq.rows(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(c)) = v;
                }
            }
            if (j.contains("special_token_index")) {
                seq.special_token = j.at("special_token_index")[t].get<std::size_t>();
                if (*seq.special_token >= seq.length()) throw ShapeError("special token index out of range");
            }
            out.push_back(std::move(seq));
        }
        return out;
    }
    if (j.contains("embeddings")) {
        if (!accept_precollapsed) {
            throw Error("embedding service returned precollapsed embeddings; word-level mode is required");
        }
        const auto& all = j.at("embeddings");
        if (all.size() != expected_texts) throw ShapeError("embedding service: wrong number of embeddings");
        for (const auto& row : all) {
            if (row.size() != dim) throw ShapeError("embedding service: ragged embedding");
            WordTokenSequence seq;
            seq.rows.resize(1, static_cast<Eigen::Index>(dim));
            for (std::size_t c = 0; c < dim; ++c) seq.rows(0, static_cast<Eigen::Index>(c)) = row[c].get<float>();
            out.push_back(std::move(seq));
        }
        return out;
    }
    throw Error("embedding service: response has neither token_embeddings nor embeddings");
}

// ---------------------------------------------------------------------------

std::string to_string(AggregationKind kind) {
    switch (kind) {
        case AggregationKind::special_token: return "special_token";
        case AggregationKind::average_pooling: return "average_pooling";
        case AggregationKind::router: return "router";
    }
    return "unknown";
}

AggregationKind aggregation_from_string(std::string_view s) {
    if (s == "special_token") return AggregationKind::special_token;
    if (s == "average_pooling") return AggregationKind::average_pooling;
    if (s == "router") return AggregationKind::router;
    throw Error(fmt::format("unknown aggregation strategy '{}'", s));
}

Eigen::RowVectorXf aggregate(const WordTokenSequence& seq, const AggregationStrategy& strategy,
                             const RouterAggregator<float>* router) {
    if (seq.rows.rows() == 0) throw ShapeError("cannot aggregate an empty word sequence");
    switch (strategy.kind) {
        case AggregationKind::average_pooling:
            return seq.rows.colwise().mean();
        case AggregationKind::special_token:
            if (!seq.special_token) throw Error("special_token aggregation needs a special token index");
            return seq.rows.row(static_cast<Eigen::Index>(*seq.special_token));
        case AggregationKind::router:
            if (router == nullptr || !router->initialized()) {
                throw Error("router aggregation used before its parameters were initialized");
            }
            return router->forward(seq.rows).row(0);
    }
    throw Error("unknown aggregation strategy");
}

// ---------------------------------------------------------------------------

std::size_t EmbeddingCache::DigestHash::operator()(const Digest& d) const noexcept {
    std::size_t h = 0;
    std::memcpy(&h, d.data(), sizeof(h));
    return h;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path file) : file_(std::move(file)) { load(); }

void EmbeddingCache::load() {
    std::ifstream in(*file_, std::ios::binary);
    if (!in) return;  // created on first put
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        if (bytes.size() - pos < 36) {
            ++dropped_;
            break;
        }
        Digest key{};
        std::memcpy(key.data(), bytes.data() + pos, 32);
        const std::uint32_t dim = get_u32_le(bytes.data() + pos + 32);
        pos += 36;
        if (bytes.size() - pos < static_cast<std::size_t>(dim) * 4) {
            ++dropped_;
            break;
        }
        std::vector<float> v(dim);
        for (std::uint32_t i = 0; i < dim; ++i) v[i] = std::bit_cast<float>(get_u32_le(bytes.data() + pos + 4 * i));
        pos += static_cast<std::size_t>(dim) * 4;
        entries_.insert_or_assign(key, std::move(v));
    }
    if (dropped_ > 0) {
        spdlog::warn("embedding cache {}: truncated trailing record ignored", file_->string());
    }
}

std::optional<std::vector<float>> EmbeddingCache::get(const Digest& key) const {
    std::shared_lock lock(mutex_);
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void EmbeddingCache::put(const Digest& key, std::span<const float> value) {
    std::unique_lock lock(mutex_);
    entries_.insert_or_assign(key, std::vector<float>(value.begin(), value.end()));
    if (!file_) return;
    if (file_->has_parent_path()) std::filesystem::create_directories(file_->parent_path());
    std::ofstream out(*file_, std::ios::binary | std::ios::app);
    if (!out) throw Error(fmt::format("cannot write embedding cache '{}'", file_->string()));
    out.write(reinterpret_cast<const char*>(key.data()), static_cast<std::streamsize>(key.size()));
    put_u32_le(out, static_cast<std::uint32_t>(value.size()));
    for (float f : value) put_f32_le(out, f);
}

std::size_t EmbeddingCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

Digest EmbeddingCache::key(std::string_view model_id, std::string_view template_version, std::string_view kind,
                           std::string_view text) {
    return sha256_parts({model_id, template_version, kind, text});
}

// ---------------------------------------------------------------------------

MetaEncoder::MetaEncoder(std::shared_ptr<const TextEmbeddingBackend> backend, AggregationStrategy strategy,
                         std::shared_ptr<EmbeddingCache> cache)
    : backend_(std::move(backend)), strategy_(strategy), cache_(std::move(cache)) {
    if (!backend_) throw Error("meta encoder needs a backend");
    if (!cache_) cache_ = std::make_shared<EmbeddingCache>();
}

std::size_t MetaEncoder::backend_calls() const {
    std::lock_guard lock(memo_mutex_);
    return backend_calls_;
}

std::shared_ptr<const WordMatrix> MetaEncoder::paragraph(const std::string& text) const {
    {
        std::lock_guard lock(memo_mutex_);
        if (auto it = memo_.find(text); it != memo_.end()) return it->second;
    }
    const bool keep_words = strategy_.kind == AggregationKind::router;
    const auto kind = keep_words ? std::string{"words"} : to_string(strategy_.kind);
    const auto key = EmbeddingCache::key(backend_->model_id(), kTemplateVersion, kind, text);
    const auto e = static_cast<Eigen::Index>(backend_->dim());

    std::shared_ptr<const WordMatrix> result;
    if (auto hit = cache_->get(key)) {
        const auto n = static_cast<Eigen::Index>(hit->size());
        const bool finite = std::all_of(hit->begin(), hit->end(), [](float f) { return std::isfinite(f); });
        const bool shape_ok = keep_words ? (n > 0 && n % e == 0) : n == e;
        if (finite && shape_ok) {
            result = std::make_shared<const WordMatrix>(Eigen::Map<const WordMatrix>(hit->data(), n / e, e));
        } else {
            spdlog::warn("embedding cache: corrupt record {} (size {}), recomputing", to_hex(key).substr(0, 16), n);
        }
    }
    if (!result) {
        WordTokenSequence seq = backend_->encode(text);
        if (seq.rows.cols() != e) throw ShapeError("backend returned vectors of the wrong dimension");
        WordMatrix m = keep_words ? seq.rows : WordMatrix(aggregate(seq, strategy_));
        cache_->put(key, std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
        result = std::make_shared<const WordMatrix>(std::move(m));
        std::lock_guard lock(memo_mutex_);
        ++backend_calls_;
    }
    std::lock_guard lock(memo_mutex_);
    memo_.emplace(text, result);
    return result;
}

MetaFeatures MetaEncoder::features(const MetadataBundle& bundle) const {
    MetaFeatures f;
    for (std::size_t k = 0; k < kMetadataLevels; ++k) f.levels[k] = paragraph(bundle.level(k));
    return f;
}

}  // namespace metatst
