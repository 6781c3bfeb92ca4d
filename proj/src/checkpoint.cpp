#include "metatst/checkpoint.hpp"

#include <bit>
#include <fstream>

#include <fmt/format.h>

#include "metatst/digest.hpp"
#include "metatst/error.hpp"
#include "metatst/metadata.hpp"

namespace metatst {
namespace {

constexpr char kMagic[8] = {'M', 'T', 'S', 'T', 'A', 'R', 'C', '1'};

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <class U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw Error("archive is truncated");
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> encode_tensors(const std::vector<NamedTensor>& tensors) {
    std::vector<std::uint8_t> out;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
        for (Eigen::Index i = 0; i < t.value.size(); ++i) {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(t.value.data()[i]));
        }
    }
    return out;
}

}  // namespace

void TensorArchive::save(const std::filesystem::path& path) const {
    const auto body = encode_tensors(tensors);
    nlohmann::json m = manifest;
    m["content_digest"] = to_hex(sha256(body));
    const std::string mtext = m.dump();

    std::vector<std::uint8_t> header(kMagic, kMagic + 8);
    put_le<std::uint64_t>(header, mtext.size());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(fmt::format("cannot write '{}'", tmp));
        out.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
        out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
        out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
        if (!out) throw Error(fmt::format("write to '{}' failed", tmp));
    }
    std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open archive '{}'", path.string()));
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(bytes);
    if (r.str(8) != std::string(kMagic, 8)) throw Error(fmt::format("'{}' is not a tensor archive", path.string()));
    const auto mlen = r.get<std::uint64_t>();
    TensorArchive a;
    try {
        a.manifest = nlohmann::json::parse(r.str(static_cast<std::size_t>(mlen)));
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("archive manifest: {}", e.what()));
    }
    const std::span<const std::uint8_t> body(bytes.data() + r.pos(), bytes.size() - r.pos());
    if (a.manifest.value("content_digest", std::string{}) != to_hex(sha256(body))) {
        throw Error(fmt::format("archive '{}': content digest mismatch", path.string()));
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str(r.get<std::uint32_t>());
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        t.value.resize(rows, cols);
        for (Eigen::Index k = 0; k < t.value.size(); ++k) t.value.data()[k] = std::bit_cast<float>(r.get<std::uint32_t>());
        a.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw Error("archive has trailing bytes");
    return a;
}

const NamedTensor* TensorArchive::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const Model& model, const CheckpointInfo& info, const std::filesystem::path& path) {
    TensorArchive a;
    a.manifest["kind"] = "metatst-checkpoint";
    a.manifest["config"] = model.config();
    a.manifest["template_version"] = info.template_version;
    a.manifest["backend_model_id"] = info.backend_model_id;
    a.manifest["seed"] = info.seed;
    a.manifest["extra"] = info.extra;
    for (const auto* p : model.parameters()) a.tensors.push_back({p->name, p->value});
    a.save(path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_backend) {
    const TensorArchive a = TensorArchive::load(path);
    if (a.manifest.value("kind", std::string{}) != "metatst-checkpoint") {
        throw Error(fmt::format("'{}' is not a model checkpoint", path.string()));
    }
    CheckpointInfo info;
    try {
        info.config = a.manifest.at("config").get<ModelConfig>();
        info.template_version = a.manifest.at("template_version").get<std::string>();
        info.backend_model_id = a.manifest.at("backend_model_id").get<std::string>();
        info.seed = a.manifest.value("seed", std::uint64_t{0});
        info.extra = a.manifest.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("checkpoint manifest: {}", e.what()));
    }
    if (info.template_version != kTemplateVersion) {
        throw Error(fmt::format("checkpoint uses metadata templates '{}', this build renders '{}'",
                                info.template_version, kTemplateVersion));
    }
    if (expected_backend && *expected_backend != info.backend_model_id) {
        throw Error(fmt::format("checkpoint was trained with text backend '{}', not '{}'", info.backend_model_id,
                                *expected_backend));
    }
    Model model(info.config, info.seed);
    const auto params = model.parameters();
    if (params.size() != a.tensors.size()) {
        throw Error(fmt::format("checkpoint has {} tensors, model has {} parameters", a.tensors.size(), params.size()));
    }
    for (auto* p : params) {
        const auto* t = a.find(p->name);
        if (!t) throw Error(fmt::format("checkpoint lacks tensor '{}'", p->name));
        if (t->value.rows() != p->value.rows() || t->value.cols() != p->value.cols()) {
            throw Error(fmt::format("tensor '{}' has shape {}x{}, expected {}x{}", p->name, t->value.rows(),
                                    t->value.cols(), p->value.rows(), p->value.cols()));
        }
        p->value = t->value;
    }
    return {std::move(model), std::move(info)};
}

void copy_parameters(const Model& from, Model& to) {
    const auto src = from.parameters();
    auto dst = to.parameters();
    if (src.size() != dst.size()) throw ShapeError("copy_parameters: models differ");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i]->name != dst[i]->name || src[i]->value.rows() != dst[i]->value.rows() ||
            src[i]->value.cols() != dst[i]->value.cols()) {
            throw ShapeError(fmt::format("copy_parameters: '{}' does not match '{}'", src[i]->name, dst[i]->name));
        }
        dst[i]->value = src[i]->value;
    }
}

}  // namespace metatst
