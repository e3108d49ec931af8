#pragma once

#include "smf/metrics.hpp"
#include "smf/model.hpp"
#include "smf/training.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace smf {

enum class ModelKind { scn, san, tfidf, scn_single, san_single };
std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& text);

/// Flat run configuration. Defaults reproduce the published experimental
/// setup; toy runs override dimensions.
struct RunConfig {
    ModelKind model = ModelKind::scn;
    HeadMode head = HeadMode::last;
    Channels channels = Channels::both;

    std::size_t embed_dim = 200;
    std::size_t encoder_hidden = 200;
    std::size_t scn_match_dim = 50;
    std::size_t conv_kernels = 8;
    std::size_t conv_window = 3;
    std::size_t pool_window = 3;
    std::size_t conv_layers = 1;
    std::size_t san_hidden = 400;
    std::size_t accumulator_hidden = 50;
    std::size_t max_turns = 10;
    std::size_t max_len = 50;
    bool gru_bias = false;
    double init_scale = 0.1;
    std::size_t min_count = 1;
    bool lowercase = true;

    std::size_t batch_size = 200;
    std::size_t max_epochs = 30;
    std::size_t patience = 3;
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 0.0;
    bool freeze_embeddings = false;
    std::size_t workers = 1;
    std::uint64_t seed = 1;

    EvalMode eval_mode = EvalMode::ubuntu;
    std::string bucket; // empty = all contexts

    std::string train;
    std::string valid;
    std::string test;
    std::string embeddings;
    std::string checkpoint;
    std::string out;

    bool operator==(const RunConfig&) const = default;

    bool neural() const { return model != ModelKind::tfidf; }
    ModelConfig model_config(std::size_t vocab_size) const;
    TrainConfig train_config() const;
};

/// Applies one `key = value` assignment; throws ConfigError for unknown keys
/// or malformed values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

/// Textual value of one key, as written by to_config_text.
std::string get_config_value(const RunConfig& config, const std::string& key);

/// Parses `key = value` lines. Blank lines and lines starting with '#' are ignored.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
/// Every key, one per line, in a fixed order; parse_config(to_config_text(c)) == c.
std::string to_config_text(const RunConfig& config);

/// Keys that describe the model shape (stored inside checkpoints).
const std::vector<std::string>& model_shape_keys();
std::string model_shape_text(const RunConfig& config);

} // namespace smf
