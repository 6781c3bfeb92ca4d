#include "metatst/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "metatst/error.hpp"

namespace metatst {
namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

bool parse_double(std::string_view text, double& out) {
    if (text.empty()) return false;
    if (text.front() == '+') text.remove_prefix(1);
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    return ec == std::errc{} && ptr == text.data() + text.size() && std::isfinite(out);
}

Segment make_segment(const RawTable& table, const NormalizationStats& stats, std::size_t begin,
                     std::size_t end, const std::string& dataset_id) {
    Segment seg;
    seg.dataset_id = dataset_id;
    seg.first_row = begin;
    const auto n = static_cast<Eigen::Index>(end - begin);
    seg.raw = table.values.middleRows(static_cast<Eigen::Index>(begin), n);
    seg.values = stats.normalize(seg.raw);
    seg.timestamps.assign(table.timestamps.begin() + static_cast<std::ptrdiff_t>(begin),
                          table.timestamps.begin() + static_cast<std::ptrdiff_t>(end));
    return seg;
}

SplitSpec split_from_json(const nlohmann::json& j) {
    const auto mode = j.value("mode", std::string{"ratio"});
    if (mode == "ratio") {
        return SplitSpec::ratios(j.value("train", 0.7), j.value("val", 0.1), j.value("test", 0.2));
    }
    if (mode == "fixed_rows") {
        return SplitSpec::fixed(j.at("train").get<std::size_t>(), j.at("val").get<std::size_t>(),
                                j.at("test").get<std::size_t>());
    }
    throw Error(fmt::format("unknown split mode '{}'", mode));
}

}  // namespace

void DatasetDescriptor::validate() const {
    const std::pair<const char*, const std::string*> fields[] = {
        {"name", &name},
        {"domain", &domain},
        {"frequency", &frequency},
        {"endogenous_name", &endogenous_name},
        {"exogenous_descriptions", &exogenous_descriptions},
        {"source_note", &source_note},
    };
    for (const auto& [label, value] : fields) {
        if (trim(*value).empty()) {
            throw Error(fmt::format("dataset descriptor '{}': field '{}' is empty", name, label));
        }
    }
    if (variate_names.empty()) {
        throw Error(fmt::format("dataset descriptor '{}': no variate names", name));
    }
    std::set<std::string> seen;
    for (const auto& v : variate_names) {
        if (!seen.insert(v).second) {
            throw Error(fmt::format("dataset descriptor '{}': duplicate variate '{}'", name, v));
        }
    }
}

// ---------------------------------------------------------------------------

SplitSpec SplitSpec::ratios(double train, double val, double test) {
    SplitSpec s;
    s.border_mode = BorderMode::ratio;
    s.train_ratio = train;
    s.val_ratio = val;
    s.test_ratio = test;
    s.validate();
    return s;
}

SplitSpec SplitSpec::fixed(std::size_t train, std::size_t val, std::size_t test) {
    SplitSpec s;
    s.border_mode = BorderMode::fixed_rows;
    s.train_rows = train;
    s.val_rows = val;
    s.test_rows = test;
    const double total = static_cast<double>(train + val + test);
    s.train_ratio = static_cast<double>(train) / total;
    s.val_ratio = static_cast<double>(val) / total;
    s.test_ratio = static_cast<double>(test) / total;
    s.validate();
    return s;
}

SplitSpec SplitSpec::standard() { return ratios(0.7, 0.1, 0.2); }

SplitSpec SplitSpec::ett_hourly() {
    constexpr std::size_t month = 30 * 24;
    return fixed(12 * month, 4 * month, 4 * month);
}

SplitSpec SplitSpec::ett_minutely() {
    constexpr std::size_t month = 30 * 24 * 4;
    return fixed(12 * month, 4 * month, 4 * month);
}

void SplitSpec::validate() const {
    if (border_mode == BorderMode::ratio) {
        if (!(train_ratio > 0 && val_ratio > 0 && test_ratio > 0)) {
            throw Error("split ratios must be positive");
        }
        if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
            throw Error(fmt::format("split ratios sum to {}, expected 1",
                                    train_ratio + val_ratio + test_ratio));
        }
    } else if (train_rows == 0 || val_rows == 0 || test_rows == 0) {
        throw Error("fixed split row counts must be positive");
    }
}

// ---------------------------------------------------------------------------

NormalizationStats NormalizationStats::fit(const Eigen::MatrixXd& train) {
    NormalizationStats stats;
    const auto cols = static_cast<std::size_t>(train.cols());
    stats.mean.resize(cols);
    stats.std.resize(cols);
    stats.degenerate.assign(cols, false);
    for (Eigen::Index c = 0; c < train.cols(); ++c) {
        const double mean = train.col(c).mean();
        const double var = (train.col(c).array() - mean).square().mean();
        double sd = std::sqrt(var);
        if (!(sd > 0.0)) {
            sd = 1.0;
            stats.degenerate[static_cast<std::size_t>(c)] = true;
        }
        stats.mean[static_cast<std::size_t>(c)] = mean;
        stats.std[static_cast<std::size_t>(c)] = sd;
    }
    return stats;
}

Eigen::MatrixXd NormalizationStats::normalize(const Eigen::MatrixXd& raw) const {
    if (static_cast<std::size_t>(raw.cols()) != mean.size()) {
        throw ShapeError("normalize: column count does not match statistics");
    }
    Eigen::MatrixXd out(raw.rows(), raw.cols());
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
        const auto i = static_cast<std::size_t>(c);
        out.col(c) = (raw.col(c).array() - mean[i]) / std[i];
    }
    return out;
}

Eigen::MatrixXd NormalizationStats::denormalize(const Eigen::MatrixXd& normalized) const {
    if (static_cast<std::size_t>(normalized.cols()) != mean.size()) {
        throw ShapeError("denormalize: column count does not match statistics");
    }
    Eigen::MatrixXd out(normalized.rows(), normalized.cols());
    for (Eigen::Index c = 0; c < normalized.cols(); ++c) {
        const auto i = static_cast<std::size_t>(c);
        out.col(c) = normalized.col(c).array() * std[i] + mean[i];
    }
    return out;
}

// ---------------------------------------------------------------------------

RawTable parse_csv(std::istream& in) {
    RawTable table;
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty CSV input", 1, 0);
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
    const auto header = split_fields(line);
    if (trim(header[0]) != "date") {
        throw ParseError(fmt::format("first column must be named 'date', got '{}'", trim(header[0])),
                         1, 1);
    }
    if (header.size() < 2) throw ParseError("CSV has no value columns", 1, 0);
    for (std::size_t i = 1; i < header.size(); ++i) {
        const auto name = trim(header[i]);
        if (name.empty()) throw ParseError(fmt::format("column {} has an empty name", i + 1), 1, i + 1);
        table.columns.emplace_back(name);
    }

    const std::size_t cols = table.columns.size();
    std::vector<double> flat;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != cols + 1) {
            throw ParseError(fmt::format("row {}: expected {} fields, found {}", row, cols + 1,
                                         fields.size()),
                             row, 0);
        }
        const auto ts = parse_timestamp(trim(fields[0]));
        if (!ts) {
            throw ParseError(
                fmt::format("row {}, column 'date': cannot parse timestamp '{}'", row, trim(fields[0])),
                row, 1);
        }
        if (!table.timestamps.empty() && *ts <= table.timestamps.back()) {
            throw ParseError(fmt::format("row {}: timestamps are not strictly increasing", row), row, 1);
        }
        table.timestamps.push_back(*ts);
        for (std::size_t c = 0; c < cols; ++c) {
            double v = 0.0;
            const auto cell = trim(fields[c + 1]);
            if (!parse_double(cell, v)) {
                throw ParseError(fmt::format("row {}, column '{}': non-numeric value '{}'", row,
                                             table.columns[c], cell),
                                 row, c + 2);
            }
            flat.push_back(v);
        }
    }
    const auto n = static_cast<Eigen::Index>(table.timestamps.size());
    table.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        flat.data(), n, static_cast<Eigen::Index>(cols));
    return table;
}

void move_column_last(RawTable& table, std::string_view column) {
    const auto it = std::find(table.columns.begin(), table.columns.end(), column);
    if (it == table.columns.end()) {
        throw Error(fmt::format("column '{}' not found", column));
    }
    const auto idx = static_cast<Eigen::Index>(it - table.columns.begin());
    const auto last = static_cast<Eigen::Index>(table.columns.size()) - 1;
    if (idx == last) return;
    Eigen::MatrixXd reordered(table.values.rows(), table.values.cols());
    std::vector<std::string> names;
    Eigen::Index out = 0;
    for (Eigen::Index c = 0; c <= last; ++c) {
        if (c == idx) continue;
        reordered.col(out++) = table.values.col(c);
        names.push_back(table.columns[static_cast<std::size_t>(c)]);
    }
    reordered.col(last) = table.values.col(idx);
    names.emplace_back(column);
    table.values = std::move(reordered);
    table.columns = std::move(names);
}

RawTable load_csv(const std::filesystem::path& path, const DatasetDescriptor& descriptor,
                  std::string_view endogenous_column) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open '{}'", path.string()));
    RawTable table = parse_csv(in);
    std::set<std::string> unique(table.columns.begin(), table.columns.end());
    if (unique.size() != table.columns.size()) {
        throw ParseError(fmt::format("'{}': duplicate column names", path.string()), 1, 0);
    }
    if (!endogenous_column.empty()) move_column_last(table, endogenous_column);
    spdlog::debug("{}: loaded {} rows, columns [{}]", descriptor.name, table.rows(),
                  fmt::join(table.columns, ", "));
    return table;
}

// ---------------------------------------------------------------------------

std::size_t window_count(std::size_t rows, std::size_t t_en, std::size_t horizon,
                         std::size_t stride) {
    if (stride == 0) throw ShapeError("stride must be >= 1");
    if (rows < t_en + horizon || t_en + horizon == 0) return 0;
    return (rows - t_en - horizon) / stride + 1;
}

SplitSegments split_and_normalize(const RawTable& table, const SplitSpec& spec,
                                  std::size_t look_back, std::size_t horizon,
                                  const std::string& dataset_id) {
    spec.validate();
    const std::size_t rows = table.rows();
    if (rows < look_back + horizon) {
        throw ShapeError(fmt::format("{} rows cannot hold one window of {}+{}", rows, look_back,
                                     horizon));
    }
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    if (spec.border_mode == BorderMode::ratio) {
        n_train = static_cast<std::size_t>(static_cast<double>(rows) * spec.train_ratio);
        n_test = static_cast<std::size_t>(static_cast<double>(rows) * spec.test_ratio);
        n_val = rows - n_train - n_test;
    } else {
        n_train = spec.train_rows;
        n_val = spec.val_rows;
        n_test = spec.test_rows;
        if (n_train + n_val + n_test > rows) {
            throw ShapeError(fmt::format("fixed split needs {} rows, table has {}",
                                         n_train + n_val + n_test, rows));
        }
    }
    if (n_train < look_back) throw ShapeError("training split shorter than the look-back window");

    // Borders follow TSLib: each later segment starts look_back rows early.
    const std::size_t train_begin = 0, train_end = n_train;
    const std::size_t val_begin = n_train - look_back, val_end = n_train + n_val;
    const std::size_t test_begin = n_train + n_val - look_back, test_end = n_train + n_val + n_test;

    SplitSegments out;
    out.stats = NormalizationStats::fit(table.values.topRows(static_cast<Eigen::Index>(n_train)));
    for (std::size_t c = 0; c < out.stats.degenerate.size(); ++c) {
        if (out.stats.degenerate[c]) {
            spdlog::warn("{}: variate '{}' is constant on the training split; std set to 1",
                         dataset_id, c < table.columns.size() ? table.columns[c] : std::to_string(c));
        }
    }
    out.train = make_segment(table, out.stats, train_begin, train_end, dataset_id);
    out.val = make_segment(table, out.stats, val_begin, val_end, dataset_id);
    out.test = make_segment(table, out.stats, test_begin, test_end, dataset_id);

    for (const auto* seg : {&out.train, &out.val, &out.test}) {
        if (window_count(seg->rows(), look_back, horizon) == 0) {
            throw ShapeError(fmt::format("{}: segment starting at row {} has {} rows, too short "
                                         "for one window of {}+{}",
                                         dataset_id, seg->first_row, seg->rows(), look_back, horizon));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

WindowStream::WindowStream(std::shared_ptr<const Segment> segment, WindowSpec spec)
    : segment_(std::move(segment)), spec_(spec) {
    if (spec_.stride == 0) throw ShapeError("stride must be >= 1");
    if (spec_.t_en == 0 || spec_.t_ex == 0 || spec_.horizon == 0) {
        throw ShapeError("window lengths must be positive");
    }
    if (spec_.t_ex > spec_.t_en) {
        throw ShapeError(fmt::format("exogenous window {} exceeds endogenous window {}", spec_.t_ex,
                                     spec_.t_en));
    }
    if (segment_->variates() == 0) throw ShapeError("segment has no variates");
    count_ = window_count(segment_->rows(), spec_.t_en, spec_.horizon, spec_.stride);
}

std::size_t WindowStream::exogenous_count() const { return segment_->variates() - 1; }

TimeWindowSample WindowStream::at(std::size_t index) const {
    if (index >= count_) {
        throw std::out_of_range(fmt::format("window {} out of range ({})", index, count_));
    }
    const Segment& seg = *segment_;
    const auto begin = static_cast<Eigen::Index>(index * spec_.stride);
    const auto t_en = static_cast<Eigen::Index>(spec_.t_en);
    const auto t_ex = static_cast<Eigen::Index>(spec_.t_ex);
    const auto s = static_cast<Eigen::Index>(spec_.horizon);
    const auto endo = static_cast<Eigen::Index>(seg.variates()) - 1;

    TimeWindowSample sample;
    sample.x_en = seg.values.col(endo).segment(begin, t_en);
    sample.x_en_raw = seg.raw.col(endo).segment(begin, t_en);
    // Exogenous window is right-aligned with the endogenous one.
    sample.x_ex = seg.values.block(begin + t_en - t_ex, 0, t_ex, endo);
    sample.y_en = seg.values.col(endo).segment(begin + t_en, s);
    sample.start_timestamp = seg.timestamps[static_cast<std::size_t>(begin)];
    sample.target_timestamp = seg.timestamps[static_cast<std::size_t>(begin + t_en)];
    sample.start_row = seg.first_row + static_cast<std::size_t>(begin);
    sample.dataset_id = seg.dataset_id;
    return sample;
}

WindowStream window_stream(const Segment& segment, std::size_t t_en, std::size_t t_ex,
                           std::size_t horizon, std::size_t stride) {
    return WindowStream(std::make_shared<const Segment>(segment),
                        WindowSpec{t_en, t_ex, horizon, stride});
}

// ---------------------------------------------------------------------------

DatasetRegistry DatasetRegistry::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open registry '{}'", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str(), path.parent_path());
}

DatasetRegistry DatasetRegistry::from_json_text(std::string_view text,
                                                const std::filesystem::path& base_dir) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("registry: {}", e.what()));
    }
    const auto& datasets = root.contains("datasets") ? root.at("datasets") : root;
    if (!datasets.is_object()) throw Error("registry: expected an object of datasets");

    DatasetRegistry reg;
    for (const auto& [name, j] : datasets.items()) {
        try {
            DatasetEntry e;
            if (const auto* builtin = builtin_descriptor(name)) e.descriptor = *builtin;
            e.descriptor.name = name;
            e.descriptor.domain = j.value("domain", e.descriptor.domain);
            e.descriptor.frequency = j.value("frequency", e.descriptor.frequency);
            e.descriptor.endogenous_name = j.value("endogenous_name", e.descriptor.endogenous_name);
            e.descriptor.exogenous_descriptions =
                j.value("exogenous_descriptions", e.descriptor.exogenous_descriptions);
            e.descriptor.source_note = j.value("source_note", e.descriptor.source_note);
            std::filesystem::path p = j.at("path").get<std::string>();
            e.path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
            e.split = j.contains("split") ? split_from_json(j.at("split")) : builtin_split(name);
            e.endogenous_column = j.value("endogenous_column", std::string{});
            reg.add(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw Error(fmt::format("registry entry '{}': {}", name, ex.what()));
        }
    }
    return reg;
}

const DatasetEntry& DatasetRegistry::at(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) throw Error(fmt::format("dataset '{}' is not in the registry", name));
    return it->second;
}

std::vector<std::string> DatasetRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

void DatasetRegistry::add(DatasetEntry entry) {
    auto name = entry.descriptor.name;
    entries_.insert_or_assign(std::move(name), std::move(entry));
}

// ---------------------------------------------------------------------------

namespace {

const std::vector<DatasetDescriptor>& builtin_table() {
    static const std::vector<DatasetDescriptor> table = {
        {"NP", "Electricity", "1 Hour", {}, "Nord Pool Electricity Price",
         "Grid Load, Wind Power",
         "Nord Pool market, hourly prices with grid load and wind power forecasts, 2013-01-01 to "
         "2018-12-24."},
        {"PJM", "Electricity", "1 Hour", {}, "Pennsylvania-New Jersey-Maryland Electricity Price",
         "System Load, Zonal COMED Load",
         "PJM market, COMED zonal prices with system load and COMED load forecasts, 2013-01-01 to "
         "2018-12-24."},
        {"BE", "Electricity", "1 Hour", {}, "Belgium's Electricity Price", "Generation, System Load",
         "Belgian market, hourly prices with Belgian load forecasts and French generation "
         "forecasts, 2011-01-09 to 2016-12-31."},
        {"FR", "Electricity", "1 Hour", {}, "France's Electricity Price", "Generation, System Load",
         "French market, hourly prices with load and generation forecasts, 2012-01-09 to "
         "2017-12-31."},
        {"DE", "Electricity", "1 Hour", {}, "German's Electricity Price",
         "Wind Power, Ampirion Zonal Load",
         "German market, hourly prices with Amprion zonal load and wind and solar generation "
         "forecasts, 2012-01-09 to 2017-12-31."},
        {"ECL", "Electricity", "1 Hour", {}, "Electricity Consumption", "Electricity Consumption",
         "Hourly electricity consumption of 321 clients; the last client is the target."},
        {"Weather", "Weather", "10 Minutes", {}, "CO2-Concentration", "Climate Feature",
         "21 meteorological indicators recorded every 10 minutes during 2020."},
        {"ETTh1", "Electricity", "1 Hour", {}, "Oil Temperature", "Power Load Feature",
         "Electricity transformer station 1, oil temperature with six power load features."},
        {"ETTh2", "Electricity", "1 Hour", {}, "Oil Temperature", "Power Load Feature",
         "Electricity transformer station 2, oil temperature with six power load features."},
        {"ETTm1", "Electricity", "15 Minutes", {}, "Oil Temperature", "Power Load Feature",
         "Electricity transformer station 1, oil temperature with six power load features."},
        {"ETTm2", "Electricity", "15 Minutes", {}, "Oil Temperature", "Power Load Feature",
         "Electricity transformer station 2, oil temperature with six power load features."},
        {"Traffic", "Transportation", "1 Hour", {}, "Road Occupancy Rates", "Road Occupancy Rates",
         "Hourly road occupancy from 862 San Francisco Bay Area freeway sensors; the last sensor "
         "is the target."},
    };
    return table;
}

}  // namespace

const DatasetDescriptor* builtin_descriptor(std::string_view name) {
    for (const auto& d : builtin_table()) {
        if (d.name == name) return &d;
    }
    return nullptr;
}

std::vector<std::string> builtin_dataset_names() {
    std::vector<std::string> out;
    for (const auto& d : builtin_table()) out.push_back(d.name);
    return out;
}

SplitSpec builtin_split(std::string_view name) {
    if (name.starts_with("ETTh")) return SplitSpec::ett_hourly();
    if (name.starts_with("ETTm")) return SplitSpec::ett_minutely();
    return SplitSpec::standard();
}

}  // namespace metatst
