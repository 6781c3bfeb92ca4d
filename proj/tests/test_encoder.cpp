#include <doctest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "metatst/error.hpp"
#include "metatst/layers.hpp"
#include "metatst/text_encoder.hpp"

#include <httplib.h>

#ifndef METATST_FIXTURE_DIR
#define METATST_FIXTURE_DIR "tests/fixtures"
#endif

using namespace metatst;

namespace {

WordTokenSequence seq_of(std::initializer_list<std::initializer_list<float>> rows) {
    WordTokenSequence s;
    s.rows.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (float v : r) s.rows(i, j++) = v;
        ++i;
    }
    return s;
}

bool same_bits(const WordMatrix& a, const WordMatrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

std::string random_text(std::mt19937_64& rng) {
    static const char* words[] = {"price", "load", "wind", "hourly", "series", "sample", "mean",
                                  "2013",  "0.5",  "grid", "Nord",   "market", "the",    "of"};
    std::string out;
    const auto n = 1 + rng() % 12;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) out += ' ';
        out += words[rng() % 14];
        if (rng() % 3 == 0) out += std::to_string(rng() % 1000);
    }
    return out;
}

/// Local stand-in for the embedding service.
struct FakeService {
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit FakeService(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server.Post("/embed", handler);
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~FakeService() {
        server.stop();
        thread.join();
    }
    std::string url() const { return fmt::format("http://127.0.0.1:{}/embed", port); }
};

nlohmann::json load_fixture() {
    std::ifstream in(std::string(METATST_FIXTURE_DIR) + "/service_t5_base.json");
    REQUIRE(in.good());
    nlohmann::json j;
    in >> j;
    return j;
}

}  // namespace

TEST_CASE("hash stub is deterministic, token-wise and unit norm") {
    const auto a = hash_stub_encode("abc");
    const auto b = hash_stub_encode("abc");
    CHECK(same_bits(a.rows, b.rows));
    CHECK(a.dim() == 64);
    CHECK(a.length() == 1);
    CHECK_FALSE(a.special_token.has_value());

    const auto aa = hash_stub_encode("a a");
    REQUIRE(aa.length() == 2);
    CHECK(same_bits(WordMatrix(aa.rows.row(0)), WordMatrix(aa.rows.row(1))));

    const auto ab = hash_stub_encode("a b");
    const auto ba = hash_stub_encode("b a");
    CHECK(same_bits(WordMatrix(ab.rows.row(0)), WordMatrix(ba.rows.row(1))));
    CHECK(same_bits(WordMatrix(ab.rows.row(1)), WordMatrix(ba.rows.row(0))));
    CHECK_FALSE(same_bits(ab.rows, ba.rows));

    const auto long_text = hash_stub_encode("This is a time series dataset named NP from the Electricity domain", 32);
    CHECK(long_text.dim() == 32);
    for (Eigen::Index i = 0; i < long_text.rows.rows(); ++i) {
        CHECK(std::abs(long_text.rows.row(i).norm() - 1.0f) < 1e-6f);
    }
    CHECK_THROWS(hash_stub_encode(""));
    CHECK_THROWS(hash_stub_encode("  \t\n"));
    CHECK_THROWS(HashStubBackend(0));
}

TEST_CASE("hash stub tokens sharing n-grams are closer than unrelated ones") {
    const auto s = hash_stub_encode("electricity electrical zebra", 64);
    const float near = s.rows.row(0).dot(s.rows.row(1));
    const float far = s.rows.row(0).dot(s.rows.row(2));
    CHECK(near > far);
}

TEST_CASE("average pooling and special token aggregation") {
    const auto s = seq_of({{1, 0}, {0, 1}});
    const auto avg = aggregate(s, {AggregationKind::average_pooling});
    CHECK(avg(0) == doctest::Approx(0.5));
    CHECK(avg(1) == doctest::Approx(0.5));

    auto special = seq_of({{1, 2}, {3, 4}, {5, 6}});
    CHECK_THROWS(aggregate(special, {AggregationKind::special_token}));
    special.special_token = 2;
    CHECK(aggregate(special, {AggregationKind::special_token})(1) == 6.0f);

    std::mt19937_64 rng(1);
    const auto words = hash_stub_encode("one two three four five six", 16);
    WordTokenSequence shuffled = words;
    shuffled.rows.row(0) = words.rows.row(5);
    shuffled.rows.row(5) = words.rows.row(0);
    shuffled.rows.row(2) = words.rows.row(3);
    shuffled.rows.row(3) = words.rows.row(2);
    const auto p1 = aggregate(words, {AggregationKind::average_pooling});
    const auto p2 = aggregate(shuffled, {AggregationKind::average_pooling});
    CHECK((p1 - p2).cwiseAbs().maxCoeff() < 1e-6f);
    for (Eigen::Index j = 0; j < 16; ++j) {
        CHECK(p1(j) >= words.rows.col(j).minCoeff() - 1e-6f);
        CHECK(p1(j) <= words.rows.col(j).maxCoeff() + 1e-6f);
    }
}

TEST_CASE("single-row sequence aggregates to that row under every strategy") {
    auto s = hash_stub_encode("alone", 16);
    s.special_token = 0;
    std::mt19937_64 rng(3);
    const RouterAggregator<float> router(16, 3, 2, rng);
    for (auto kind : {AggregationKind::special_token, AggregationKind::average_pooling, AggregationKind::router}) {
        const auto out = aggregate(s, {kind, 3}, &router);
        CHECK((out - s.rows.row(0)).cwiseAbs().maxCoeff() < 1e-6f);
    }
}

TEST_CASE("router aggregation stays in the convex hull and needs parameters") {
    const auto words = hash_stub_encode("a few words for the router to read", 16);
    std::mt19937_64 rng(5);
    for (int r : {3, 6, 12}) {
        const RouterAggregator<float> router(16, r, 4, rng);
        const auto out = aggregate(words, {AggregationKind::router, r}, &router);
        for (Eigen::Index j = 0; j < 16; ++j) {
            CHECK(out(j) >= words.rows.col(j).minCoeff() - 1e-5f);
            CHECK(out(j) <= words.rows.col(j).maxCoeff() + 1e-5f);
        }
    }
    const RouterAggregator<float> uninitialized;
    CHECK_THROWS(aggregate(words, {AggregationKind::router, 3}, &uninitialized));
    CHECK_THROWS(aggregate(words, {AggregationKind::router, 3}, nullptr));
    CHECK(aggregation_from_string("router") == AggregationKind::router);
    CHECK(to_string(AggregationKind::average_pooling) == "average_pooling");
    CHECK_THROWS(aggregation_from_string("max_pooling"));
}

TEST_CASE("cache keys separate every component") {
    const auto k = EmbeddingCache::key("m", "v1", "average_pooling", "text");
    CHECK(k != EmbeddingCache::key("m2", "v1", "average_pooling", "text"));
    CHECK(k != EmbeddingCache::key("m", "v2", "average_pooling", "text"));
    CHECK(k != EmbeddingCache::key("m", "v1", "words", "text"));
    CHECK(k != EmbeddingCache::key("m", "v1", "average_pooling", "text2"));
    CHECK(EmbeddingCache::key("ab", "c", "k", "t") != EmbeddingCache::key("a", "bc", "k", "t"));
    CHECK(k == EmbeddingCache::key("m", "v1", "average_pooling", "text"));
}

TEST_CASE("file-backed cache persists, later records win, truncation is tolerated") {
    testing::TempDir dir;
    const auto path = dir / "cache.bin";
    const auto k1 = EmbeddingCache::key("m", "v", "k", "one");
    const auto k2 = EmbeddingCache::key("m", "v", "k", "two");
    {
        EmbeddingCache c(path);
        const float a[] = {1.0f, 2.0f, 3.0f};
        const float b[] = {4.0f, 5.0f};
        const float a2[] = {7.0f, 8.0f, 9.0f};
        c.put(k1, a);
        c.put(k2, b);
        c.put(k1, a2);
        CHECK(c.size() == 2);
    }
    CHECK(std::filesystem::file_size(path) == 3 * 36 + 8 * 4);
    {
        EmbeddingCache c(path);
        CHECK(c.size() == 2);
        CHECK(c.dropped_records() == 0);
        CHECK(*c.get(k1) == std::vector<float>{7.0f, 8.0f, 9.0f});
        CHECK(*c.get(k2) == std::vector<float>{4.0f, 5.0f});
    }
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 2);
    {
        EmbeddingCache c(path);
        CHECK(c.dropped_records() == 1);
        CHECK(*c.get(k1) == std::vector<float>{1.0f, 2.0f, 3.0f});
        CHECK(c.get(k2).has_value());
    }
}

TEST_CASE("cached and recomputed paragraphs agree bitwise") {
    testing::TempDir dir;
    auto backend = std::make_shared<HashStubBackend>(32);
    std::mt19937_64 rng(17);
    std::vector<std::string> texts;
    for (int i = 0; i < 1000; ++i) texts.push_back(random_text(rng));

    for (auto kind : {AggregationKind::average_pooling, AggregationKind::router}) {
        const auto file = dir / ("cache_" + to_string(kind) + ".bin");
        {
            MetaEncoder writer(backend, {kind, 3}, std::make_shared<EmbeddingCache>(file));
            for (const auto& t : texts) writer.paragraph(t);
        }
        MetaEncoder reader(backend, {kind, 3}, std::make_shared<EmbeddingCache>(file));
        for (const auto& t : texts) {
            const auto cached = reader.paragraph(t);
            const auto seq = backend->encode(t);
            const WordMatrix fresh = kind == AggregationKind::router ? seq.rows : WordMatrix(aggregate(seq, {kind}));
            REQUIRE(same_bits(*cached, fresh));
        }
        CHECK(reader.backend_calls() == 0);
    }
}

TEST_CASE("corrupt cache records are recomputed") {
    auto backend = std::make_shared<HashStubBackend>(8);
    auto cache = std::make_shared<EmbeddingCache>();
    const std::string text = "some paragraph";
    const float bad[] = {1.0f, 2.0f};
    cache->put(EmbeddingCache::key(backend->model_id(), kTemplateVersion, "average_pooling", text), bad);
    MetaEncoder enc(backend, {}, cache);
    const auto v = enc.paragraph(text);
    CHECK(v->cols() == 8);
    CHECK(enc.backend_calls() == 1);
    const auto expected = aggregate(backend->encode(text), {});
    CHECK(same_bits(*v, WordMatrix(expected)));
}

TEST_CASE("meta encoder shares dataset and task features across samples") {
    const auto enc = testing::hash_encoder(16);
    const auto d = testing::toy_descriptor("toy");
    const TaskDescriptor t{d.endogenous_name, 8, 4, "short-term forecasting"};
    Eigen::VectorXd h1(3), h2(3);
    h1 << 1, 2, 3;
    h2 << 4, 5, 7;
    const auto f1 = enc->features(meta_parse(d, t, SampleStats::from_history(h1, testing::epoch_hours(0))));
    const auto f2 = enc->features(meta_parse(d, t, SampleStats::from_history(h2, testing::epoch_hours(1))));
    CHECK(f1.levels[0] == f2.levels[0]);
    CHECK(f1.levels[1] == f2.levels[1]);
    CHECK_FALSE(same_bits(*f1.levels[2], *f2.levels[2]));
    CHECK(enc->backend_calls() == 4);
    CHECK(f1.levels.size() == 3);
}

TEST_CASE("identity alignment returns the aggregated vectors") {
    std::mt19937_64 rng(1);
    ModalAlign<float> align(4, 4, Activation::identity, rng);
    // Param names are align.first.* / align.second.*; set both maps to the identity.
    ParamRefs<float> ps;
    align.collect(ps);
    for (auto* p : ps) {
        if (p->name.ends_with("weight")) {
            p->value = Mat<float>::Identity(4, 4);
        } else {
            p->value.setZero();
        }
    }
    Mat<float> x(3, 4);
    x << 1, 2, 3, 4, -1, 0, 0.5f, 2, 9, 8, 7, 6;
    CHECK((align.forward(x) - x).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("backend output is unchanged by encoding other texts") {
    HashStubBackend b(16);
    const auto before = b.encode("frozen check");
    std::mt19937_64 rng(2);
    for (int i = 0; i < 100; ++i) b.encode(random_text(rng));
    CHECK(same_bits(before.rows, b.encode("frozen check").rows));
}

TEST_CASE("service client replays the recorded fixture") {
    const auto fixture = load_fixture();
    std::atomic<int> calls{0};
    nlohmann::json seen;
    FakeService svc([&](const httplib::Request& req, httplib::Response& res) {
        ++calls;
        seen = nlohmann::json::parse(req.body);
        res.set_content(fixture.at("response").dump(), "application/json");
    });
    ServiceOptions so;
    so.url = svc.url();
    ServiceBackend backend(so);
    CHECK(backend.dim() == 768);
    CHECK(backend.model_id() == "t5-base");
    const std::string text = fixture.at("request").at("texts")[0];
    const auto seq = backend.encode(text);
    CHECK(seq.length() == 12);
    CHECK(seq.dim() == 768);
    CHECK(seq.rows(3, 100) == doctest::Approx(fixture["response"]["token_embeddings"][0][3][100].get<double>()));
    CHECK(seen == fixture.at("request"));
    CHECK(calls == 1);
    CHECK_THROWS(backend.encode(""));
    CHECK(calls == 1);

    so.layer_index = 6;
    ServiceBackend layered(so);
    layered.encode(text);
    CHECK(seen.at("layer") == 6);
}

TEST_CASE("service errors: retryable and malformed") {
    FakeService busy([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    ServiceOptions so;
    so.url = busy.url();
    so.dim = 4;
    CHECK_THROWS_AS(ServiceBackend(so).encode("x"), RetryableError);

    FakeService bad([](const httplib::Request&, httplib::Response& res) { res.status = 400; });
    so.url = bad.url();
    CHECK_THROWS(ServiceBackend(so).encode("x"));
    try {
        ServiceBackend(so).encode("x");
    } catch (const RetryableError&) {
        FAIL("HTTP 400 is not retryable");
    } catch (const Error&) {
    }

    so.url = "http://127.0.0.1:1/embed";
    so.timeout_seconds = 2;
    CHECK_THROWS_AS(ServiceBackend(so).encode("x"), RetryableError);
}

TEST_CASE("decode_response validates shapes and modes") {
    const std::string words = R"({"dim":2,"token_embeddings":[[[1,2],[3,4]]],"special_token_index":[1]})";
    const auto seqs = ServiceBackend::decode_response(words, 1, 2, false);
    REQUIRE(seqs.size() == 1);
    CHECK(seqs[0].length() == 2);
    CHECK(seqs[0].special_token == 1u);
    CHECK_THROWS_AS(ServiceBackend::decode_response(words, 1, 3, false), ShapeError);
    CHECK_THROWS_AS(ServiceBackend::decode_response(words, 2, 2, false), ShapeError);
    CHECK_THROWS(ServiceBackend::decode_response(R"({"dim":2,"token_embeddings":[[[1,2],[3]]]})", 1, 2, false));
    CHECK_THROWS(ServiceBackend::decode_response(R"({"dim":2,"token_embeddings":[[]]})", 1, 2, false));
    CHECK_THROWS(ServiceBackend::decode_response("not json", 1, 2, false));

    const std::string collapsed = R"({"dim":2,"embeddings":[[0.5,0.25]]})";
    CHECK_THROWS(ServiceBackend::decode_response(collapsed, 1, 2, false));
    const auto c = ServiceBackend::decode_response(collapsed, 1, 2, true);
    CHECK(c[0].length() == 1);
    CHECK(c[0].rows(0, 1) == 0.25f);
}

TEST_CASE("service requests respect the in-flight bound") {
    std::atomic<int> active{0}, peak{0};
    FakeService slow([&](const httplib::Request&, httplib::Response& res) {
        const int now = ++active;
        int p = peak.load();
        while (now > p && !peak.compare_exchange_weak(p, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(30));
        --active;
        res.set_content(R"({"dim":2,"token_embeddings":[[[1,0]]]})", "application/json");
    });
    ServiceOptions so;
    so.url = slow.url();
    so.dim = 2;
    so.max_in_flight = 2;
    ServiceBackend backend(so);
    std::vector<std::thread> threads;
    for (int i = 0; i < 8; ++i) threads.emplace_back([&] { backend.encode("x"); });
    for (auto& t : threads) t.join();
    CHECK(peak.load() <= 2);
    CHECK(peak.load() >= 1);
}
