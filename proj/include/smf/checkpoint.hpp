#pragma once

#include "smf/config.hpp"
#include "smf/corpus.hpp"
#include "smf/model.hpp"

#include <filesystem>
#include <string>

namespace smf {

/// Binary container: magic, format version, model-shape config text,
/// vocabulary, then every named parameter tensor with its shape. Contains no
/// paths or timestamps, so identical training runs give identical bytes.
std::string serialize_checkpoint(const RunConfig& config, const Vocabulary& vocab, const MatchingModel& model);
void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const Vocabulary& vocab,
                     const MatchingModel& model);

struct LoadedCheckpoint {
    RunConfig config; // model-shape keys from the file, everything else from `base`
    Vocabulary vocab;
    MatchingModel model;
};

LoadedCheckpoint deserialize_checkpoint(const std::string& bytes, const std::string& source, RunConfig base = {});
/// Throws CheckpointError for a missing, truncated or incompatible file.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, RunConfig base = {});

bool is_model_checkpoint(const std::filesystem::path& path);

} // namespace smf
