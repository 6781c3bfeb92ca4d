#include <doctest.h>

#include <set>
#include <sstream>

#include "helpers.hpp"
#include "metatst/data.hpp"
#include "metatst/error.hpp"

using namespace metatst;
using testing::synthetic_table;

namespace {

RawTable from_text(const std::string& text) {
    std::istringstream in(text);
    return parse_csv(in);
}

}  // namespace

TEST_CASE("parse_csv reads a small table") {
    const auto t = from_text(
        "date,a,b\n"
        "2020-01-01 00:00:00,1,2\n"
        "2020-01-01 01:00:00,3,4\n"
        "2020-01-01 02:00:00,5,6\n"
        "2020-01-01T03:00:00,7,8.5\n");
    CHECK(t.rows() == 4);
    CHECK(t.variates() == 2);
    CHECK(t.columns == std::vector<std::string>{"a", "b"});
    CHECK(t.values(3, 1) == doctest::Approx(8.5));
    CHECK(format_iso(t.timestamps[0]) == "2020-01-01T00:00:00");
}

TEST_CASE("parse_csv names the offending cell") {
    try {
        from_text("date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,oops\n");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.row() == 3);
        CHECK(e.column() == 3);
        CHECK(std::string(e.what()).find("oops") != std::string::npos);
    }
}

TEST_CASE("parse_csv rejects unordered timestamps and foreign formats") {
    CHECK_THROWS_AS(from_text("date,a\n2020-01-01 01:00:00,1\n2020-01-01 00:00:00,2\n"), ParseError);
    CHECK_THROWS_AS(from_text("date,a\n2020-01-01 00:00:00,1\n2020-01-01 00:00:00,2\n"), ParseError);
    CHECK_THROWS_AS(from_text("date,a\n01/02/2020 00:00,1\n"), ParseError);
    CHECK_THROWS_AS(from_text("time,a\n2020-01-01 00:00:00,1\n"), ParseError);
}

TEST_CASE("timestamps accept ISO and space-separated forms only") {
    CHECK(parse_timestamp("2013-01-01T00:00:00").has_value());
    CHECK(parse_timestamp("2013-01-01 00:00:00").has_value());
    CHECK(*parse_timestamp("2013-01-01T00:00:00") == *parse_timestamp("2013-01-01 00:00:00"));
    CHECK_FALSE(parse_timestamp("2013-01-01").has_value());
    CHECK_FALSE(parse_timestamp("2013/01/01 00:00:00").has_value());
    CHECK_FALSE(parse_timestamp("2013-13-01 00:00:00").has_value());
}

TEST_CASE("window_count formula") {
    CHECK(window_count(120, 96, 24) == 1);
    CHECK(window_count(119, 96, 24) == 0);
    for (std::size_t rows = 1; rows < 60; ++rows) {
        for (std::size_t t = 1; t < 20; t += 3) {
            for (std::size_t s = 1; s < 10; s += 2) {
                const std::size_t expected = rows >= t + s ? rows - t - s + 1 : 0;
                REQUIRE(window_count(rows, t, s) == expected);
            }
        }
    }
}

TEST_CASE("ETT hourly borders reproduce 8545/2881/2881 windows") {
    const auto table = synthetic_table(17420, 7, 1);
    const auto seg = split_and_normalize(table, SplitSpec::ett_hourly(), 96, 1, "ETTh1");
    CHECK(seg.train.rows() == 8640);
    CHECK(window_count(seg.train.rows(), 96, 0) == 8545);
    CHECK(window_count(seg.val.rows(), 96, 0) == 2881);
    CHECK(window_count(seg.test.rows(), 96, 0) == 2881);
    CHECK(seg.val.first_row == 8640 - 96);
    CHECK(seg.test.first_row == 8640 + 2880 - 96);
}

TEST_CASE("EPF 7:1:2 ratio borders reproduce 36500/5219/10460 windows") {
    const auto table = synthetic_table(52416, 3, 2);
    const auto seg = split_and_normalize(table, SplitSpec::standard(), 168, 24, "NP");
    CHECK(window_stream(seg.train, 168, 168, 24).size() == 36500);
    CHECK(window_stream(seg.val, 168, 168, 24).size() == 5219);
    CHECK(window_stream(seg.test, 168, 168, 24).size() == 10460);
}

TEST_CASE("normalization uses train statistics and round-trips") {
    const auto table = synthetic_table(400, 3, 3);
    const auto seg = split_and_normalize(table, SplitSpec::standard(), 24, 12);
    const Eigen::MatrixXd train = table.values.topRows(280);
    for (Eigen::Index c = 0; c < 3; ++c) {
        CHECK(seg.stats.mean[static_cast<std::size_t>(c)] == doctest::Approx(train.col(c).mean()).epsilon(1e-12));
        CHECK(seg.train.values.col(c).mean() == doctest::Approx(0.0).epsilon(1e-9).scale(1.0));
        const double var = seg.train.values.col(c).array().square().mean();
        CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
    }
    for (const auto* s : {&seg.train, &seg.val, &seg.test}) {
        const Eigen::MatrixXd back = seg.stats.denormalize(s->values);
        const double rel = (back - s->raw).cwiseAbs().maxCoeff() / s->raw.cwiseAbs().maxCoeff();
        CHECK(rel < 1e-9);
    }
}

TEST_CASE("constant column is flagged and normalizes to zero") {
    auto table = synthetic_table(200, 2, 4);
    table.values.col(0).setConstant(5.0);
    const auto seg = split_and_normalize(table, SplitSpec::standard(), 16, 4);
    CHECK(seg.stats.degenerate[0]);
    CHECK_FALSE(seg.stats.degenerate[1]);
    CHECK(seg.stats.std[0] == 1.0);
    CHECK(seg.train.values.col(0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("segments too short for one window are rejected") {
    const auto table = synthetic_table(100, 2, 5);
    CHECK_THROWS_AS(split_and_normalize(table, SplitSpec::standard(), 40, 20), ShapeError);
    CHECK_THROWS_AS(split_and_normalize(table, SplitSpec::standard(), 90, 20), ShapeError);
}

TEST_CASE("window_stream shapes, alignment and error paths") {
    const auto table = synthetic_table(300, 7, 6);
    const auto seg = split_and_normalize(table, SplitSpec::ratios(0.6, 0.2, 0.2), 24, 8);
    const auto ws = window_stream(seg.train, 24, 16, 8);
    REQUIRE(ws.size() == 180 - 24 - 8 + 1);
    CHECK(ws.exogenous_count() == 6);
    const auto s = ws.at(5);
    CHECK(s.x_en.size() == 24);
    CHECK(s.x_ex.rows() == 16);
    CHECK(s.x_ex.cols() == 6);
    CHECK(s.y_en.size() == 8);
    // endogenous = last column, exogenous right-aligned with it
    CHECK(s.x_en(0) == seg.train.values(5, 6));
    CHECK(s.x_en(23) == seg.train.values(28, 6));
    CHECK(s.x_ex(15, 0) == seg.train.values(28, 0));
    CHECK(s.x_ex(0, 5) == seg.train.values(13, 5));
    CHECK(s.y_en(0) == seg.train.values(29, 6));
    CHECK(s.x_en_raw(0) == table.values(5, 6));
    // the target starts right after the history
    CHECK(s.target_timestamp - s.start_timestamp == std::chrono::hours(24));
    CHECK_THROWS_AS(window_stream(seg.train, 16, 24, 8), ShapeError);
    CHECK_THROWS_AS(window_stream(seg.train, 24, 24, 8, 0), ShapeError);
    CHECK_THROWS(ws.at(ws.size()));
}

TEST_CASE("split targets are disjoint and never overlap their history") {
    const auto table = synthetic_table(500, 2, 7);
    const auto seg = split_and_normalize(table, SplitSpec::standard(), 48, 12);
    std::set<std::size_t> seen;
    for (const auto* s : {&seg.train, &seg.val, &seg.test}) {
        const auto ws = window_stream(*s, 48, 48, 12);
        std::set<std::size_t> rows;
        for (std::size_t i = 0; i < ws.size(); ++i) {
            const auto w = ws.at(i);
            CHECK(w.target_timestamp > w.start_timestamp + std::chrono::hours(47));
            for (std::size_t r = w.start_row + 48; r < w.start_row + 60; ++r) rows.insert(r);
        }
        for (auto r : rows) CHECK(seen.insert(r).second);
    }
}

TEST_CASE("move_column_last and registry entries") {
    auto t = from_text("date,OT,a,b\n2020-01-01 00:00:00,1,2,3\n");
    move_column_last(t, "OT");
    CHECK(t.columns == std::vector<std::string>{"a", "b", "OT"});
    CHECK(t.values(0, 2) == 1.0);
    CHECK_THROWS(move_column_last(t, "missing"));

    const auto reg = DatasetRegistry::from_json_text(R"({
        "NP": {"path": "np.csv"},
        "Mine": {"path": "/data/mine.csv", "domain": "Retail", "frequency": "1 Day",
                 "endogenous_name": "sales", "exogenous_descriptions": "promotions",
                 "source_note": "In-house.", "split": {"mode": "fixed_rows", "train": 10, "val": 5, "test": 5},
                 "endogenous_column": "sales"}
    })", "/base");
    CHECK(reg.at("NP").path == std::filesystem::path("/base/np.csv"));
    CHECK(reg.at("NP").descriptor.domain == "Electricity");
    CHECK(reg.at("Mine").split.border_mode == BorderMode::fixed_rows);
    CHECK(reg.at("Mine").split.val_rows == 5);
    CHECK(reg.at("Mine").endogenous_column == "sales");
    CHECK_THROWS(reg.at("nope"));
}

TEST_CASE("built-in descriptors carry the dataset table") {
    CHECK(builtin_dataset_names().size() == 12);
    const auto* np = builtin_descriptor("NP");
    REQUIRE(np != nullptr);
    CHECK(np->domain == "Electricity");
    CHECK(np->frequency == "1 Hour");
    CHECK(builtin_descriptor("nonexistent") == nullptr);
    CHECK(builtin_split("ETTm2").border_mode == BorderMode::fixed_rows);
    CHECK(builtin_split("ETTm2").train_rows == 34560);
    CHECK(builtin_split("ECL").border_mode == BorderMode::ratio);
    DatasetDescriptor bad = *np;
    bad.domain = " ";
    CHECK_THROWS(bad.validate());
    bad = *np;
    bad.variate_names = {"a", "a"};
    CHECK_THROWS(bad.validate());
}

TEST_CASE("load_csv moves the endogenous column last") {
    testing::TempDir dir;
    {
        std::ofstream f(dir / "x.csv");
        f << "date,OT,a\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n";
    }
    const auto t = load_csv(dir / "x.csv", testing::toy_descriptor("x"), "OT");
    CHECK(t.columns.back() == "OT");
    CHECK(t.values(1, 1) == 3.0);
    CHECK_THROWS(load_csv(dir / "missing.csv", testing::toy_descriptor("x")));
}
