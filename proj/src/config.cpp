#include "smf/config.hpp"

#include "smf/errors.hpp"
#include "smf/io.hpp"

#include <fmt/format.h>

#include <charconv>
#include <functional>
#include <sstream>

namespace smf {

std::string to_string(ModelKind kind) {
    switch (kind) {
    case ModelKind::scn:
        return "scn";
    case ModelKind::san:
        return "san";
    case ModelKind::tfidf:
        return "tfidf";
    case ModelKind::scn_single:
        return "scn_single";
    case ModelKind::san_single:
        return "san_single";
    }
    return "?";
}

ModelKind parse_model_kind(const std::string& text) {
    for (auto k : {ModelKind::scn, ModelKind::san, ModelKind::tfidf, ModelKind::scn_single, ModelKind::san_single}) {
        if (to_string(k) == text) {
            return k;
        }
    }
    throw ConfigError(fmt::format("unknown model '{}' (expected scn, san, tfidf, scn_single or san_single)", text));
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
    if (!neural()) {
        throw ConfigError("the tfidf model has no neural configuration");
    }
    ModelConfig m;
    m.matcher = (model == ModelKind::scn || model == ModelKind::scn_single) ? MatcherKind::scn : MatcherKind::san;
    m.head = head;
    m.channels = channels;
    m.single_turn = model == ModelKind::scn_single || model == ModelKind::san_single;
    m.vocab_size = vocab_size;
    m.embed_dim = embed_dim;
    m.encoder_hidden = encoder_hidden;
    m.scn_match_dim = scn_match_dim;
    m.conv_kernels = conv_kernels;
    m.conv_window = conv_window;
    m.pool_window = pool_window;
    m.conv_layers = conv_layers;
    m.san_hidden = san_hidden;
    m.accumulator_hidden = accumulator_hidden;
    m.max_turns = m.single_turn ? 1 : max_turns;
    m.max_len = max_len;
    m.gru_bias = gru_bias;
    m.init_scale = init_scale;
    return m;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.batch_size = batch_size;
    t.max_epochs = max_epochs;
    t.patience = patience;
    t.seed = seed;
    t.workers = workers;
    t.clip_norm = clip_norm;
    t.freeze_embeddings = freeze_embeddings;
    t.adam = {lr, beta1, beta2, epsilon};
    return t;
}

namespace {

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const auto r = std::from_chars(value.data(), value.data() + value.size(), out);
    if (r.ec != std::errc{} || r.ptr != value.data() + value.size()) {
        throw ConfigError(fmt::format("{}: '{}' is not a valid number", key, value));
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") {
        return true;
    }
    if (value == "false" || value == "0") {
        return false;
    }
    throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, value));
}

template <typename T>
Field number(std::string key, T RunConfig::*member) {
    return {key, [member](const RunConfig& c) { return fmt::format("{}", c.*member); },
            [key, member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>(key, v); }};
}

Field boolean(std::string key, bool RunConfig::*member) {
    return {key, [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
            [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

Field text(std::string key, std::string RunConfig::*member) {
    return {key, [member](const RunConfig& c) { return c.*member; },
            [member](RunConfig& c, const std::string& v) { c.*member = v; }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> all = {
        {"model", [](const RunConfig& c) { return to_string(c.model); },
         [](RunConfig& c, const std::string& v) { c.model = parse_model_kind(v); }},
        {"head", [](const RunConfig& c) { return to_string(c.head); },
         [](RunConfig& c, const std::string& v) { c.head = parse_head(v); }},
        {"channels", [](const RunConfig& c) { return to_string(c.channels); },
         [](RunConfig& c, const std::string& v) { c.channels = parse_channels(v); }},
        number("embed_dim", &RunConfig::embed_dim),
        number("encoder_hidden", &RunConfig::encoder_hidden),
        number("scn_match_dim", &RunConfig::scn_match_dim),
        number("conv_kernels", &RunConfig::conv_kernels),
        number("conv_window", &RunConfig::conv_window),
        number("pool_window", &RunConfig::pool_window),
        number("conv_layers", &RunConfig::conv_layers),
        number("san_hidden", &RunConfig::san_hidden),
        number("accumulator_hidden", &RunConfig::accumulator_hidden),
        number("max_turns", &RunConfig::max_turns),
        number("max_len", &RunConfig::max_len),
        boolean("gru_bias", &RunConfig::gru_bias),
        number("init_scale", &RunConfig::init_scale),
        number("min_count", &RunConfig::min_count),
        boolean("lowercase", &RunConfig::lowercase),
        number("batch_size", &RunConfig::batch_size),
        number("max_epochs", &RunConfig::max_epochs),
        number("patience", &RunConfig::patience),
        number("lr", &RunConfig::lr),
        number("beta1", &RunConfig::beta1),
        number("beta2", &RunConfig::beta2),
        number("epsilon", &RunConfig::epsilon),
        number("clip_norm", &RunConfig::clip_norm),
        boolean("freeze_embeddings", &RunConfig::freeze_embeddings),
        number("workers", &RunConfig::workers),
        number("seed", &RunConfig::seed),
        {"eval_mode", [](const RunConfig& c) { return to_string(c.eval_mode); },
         [](RunConfig& c, const std::string& v) { c.eval_mode = parse_eval_mode(v); }},
        {"bucket", [](const RunConfig& c) { return c.bucket; },
         [](RunConfig& c, const std::string& v) {
             if (!v.empty()) {
                 parse_bucket(v);
             }
             c.bucket = v;
         }},
        text("train", &RunConfig::train),
        text("valid", &RunConfig::valid),
        text("test", &RunConfig::test),
        text("embeddings", &RunConfig::embeddings),
        text("checkpoint", &RunConfig::checkpoint),
        text("out", &RunConfig::out),
    };
    return all;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(config, value);
            return;
        }
    }
    throw ConfigError(fmt::format("unknown configuration key '{}'", key));
}

std::string get_config_value(const RunConfig& config, const std::string& key) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            return f.get(config);
        }
    }
    throw ConfigError(fmt::format("unknown configuration key '{}'", key));
}

RunConfig parse_config(const std::string& text, RunConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(fmt::format("config line {}: expected 'key = value'", number));
        }
        try {
            set_config_value(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(fmt::format("config line {}: {}", number, e.what()));
        }
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    if (!std::filesystem::exists(path)) {
        throw ConfigError(fmt::format("config file not found: {}", path.string()));
    }
    return parse_config(read_file(path), std::move(base));
}

std::string to_config_text(const RunConfig& config) {
    std::string out;
    for (const auto& f : fields()) {
        out += fmt::format("{} = {}\n", f.key, f.get(config));
    }
    return out;
}

const std::vector<std::string>& model_shape_keys() {
    static const std::vector<std::string> keys = {
        "model",      "head",        "channels",   "embed_dim",          "encoder_hidden", "scn_match_dim",
        "conv_kernels", "conv_window", "pool_window", "conv_layers",      "san_hidden",     "accumulator_hidden",
        "max_turns",  "max_len",     "gru_bias",   "init_scale",         "lowercase",
    };
    return keys;
}

std::string model_shape_text(const RunConfig& config) {
    std::string out;
    for (const auto& key : model_shape_keys()) {
        for (const auto& f : fields()) {
            if (f.key == key) {
                out += fmt::format("{} = {}\n", key, f.get(config));
            }
        }
    }
    return out;
}

} // namespace smf
