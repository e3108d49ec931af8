#include "smf/checkpoint.hpp"

#include "smf/errors.hpp"
#include "smf/io.hpp"

#include <fmt/format.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace smf {

namespace {

constexpr char kMagic[8] = {'S', 'M', 'F', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    template <typename T>
    void pod(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        out_.append(buf, sizeof(T));
    }
    void str(const std::string& s) {
        pod<std::uint64_t>(s.size());
        out_ += s;
    }
    void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    template <typename T>
    T pod() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint64_t>();
        return {take(n), n};
    }
    const char* take(std::size_t n) {
        if (n > bytes_.size() - pos_) {
            throw CheckpointError(fmt::format("{}: truncated checkpoint", source_));
        }
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

} // namespace

std::string serialize_checkpoint(const RunConfig& config, const Vocabulary& vocab, const MatchingModel& model) {
    Writer w;
    w.raw(kMagic, sizeof(kMagic));
    w.pod(kVersion);
    w.str(model_shape_text(config));
    w.pod<std::uint64_t>(vocab.size());
    for (const auto& t : vocab.tokens()) {
        w.str(t);
    }
    std::uint64_t count = 0;
    model.visit([&](const std::string&, const Tensor&) { ++count; });
    w.pod(count);
    model.visit([&](const std::string& name, const Tensor& t) {
        w.str(name);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.dim()));
        for (auto d : t.shape()) {
            w.pod<std::uint64_t>(d);
        }
        w.raw(t.data().data(), t.size() * sizeof(double));
    });
    return w.take();
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const Vocabulary& vocab,
                     const MatchingModel& model) {
    write_file_atomic(path, serialize_checkpoint(config, vocab, model));
}

LoadedCheckpoint deserialize_checkpoint(const std::string& bytes, const std::string& source, RunConfig base) {
    Reader r(bytes, source);
    if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError(fmt::format("{}: not a model checkpoint", source));
    }
    if (const auto v = r.pod<std::uint32_t>(); v != kVersion) {
        throw CheckpointError(fmt::format("{}: unsupported checkpoint version {}", source, v));
    }
    RunConfig config;
    try {
        config = parse_config(r.str(), std::move(base));
    } catch (const ConfigError& e) {
        throw CheckpointError(fmt::format("{}: bad stored configuration: {}", source, e.what()));
    }
    std::vector<std::string> tokens(r.pod<std::uint64_t>());
    for (auto& t : tokens) {
        t = r.str();
    }
    Vocabulary vocab;
    try {
        vocab = Vocabulary::from_tokens(tokens);
    } catch (const std::exception& e) {
        throw CheckpointError(fmt::format("{}: bad vocabulary: {}", source, e.what()));
    }

    std::map<std::string, std::pair<Shape, std::vector<double>>> stored;
    const auto count = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.str();
        Shape shape(r.pod<std::uint32_t>());
        for (auto& d : shape) {
            d = r.pod<std::uint64_t>();
        }
        std::vector<double> values(shape_size(shape));
        std::memcpy(values.data(), r.take(values.size() * sizeof(double)), values.size() * sizeof(double));
        stored.emplace(std::move(name), std::make_pair(std::move(shape), std::move(values)));
    }
    if (!r.done()) {
        throw CheckpointError(fmt::format("{}: trailing bytes after the last tensor", source));
    }

    Rng rng(0);
    MatchingModel model;
    try {
        model = MatchingModel::create(config.model_config(vocab.size()), rng);
    } catch (const ConfigError& e) {
        throw CheckpointError(fmt::format("{}: {}", source, e.what()));
    }
    std::size_t matched = 0;
    model.visit([&](const std::string& name, Tensor& t) {
        const auto it = stored.find(name);
        if (it == stored.end()) {
            throw CheckpointError(fmt::format("{}: missing parameter {}", source, name));
        }
        if (it->second.first != t.shape()) {
            throw CheckpointError(fmt::format("{}: parameter {} has shape {} but the model expects {}", source, name,
                                              shape_str(it->second.first), shape_str(t.shape())));
        }
        std::copy(it->second.second.begin(), it->second.second.end(), t.mutable_data().begin());
        ++matched;
    });
    if (matched != stored.size()) {
        throw CheckpointError(fmt::format("{}: {} stored parameters do not belong to this model", source,
                                          stored.size() - matched));
    }
    return {std::move(config), std::move(vocab), std::move(model)};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, RunConfig base) {
    if (!std::filesystem::exists(path)) {
        throw CheckpointError(fmt::format("checkpoint not found: {}", path.string()));
    }
    return deserialize_checkpoint(read_file(path), path.string(), std::move(base));
}

bool is_model_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    char magic[sizeof(kMagic)] = {};
    return in.read(magic, sizeof(magic)) && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0;
}

} // namespace smf
