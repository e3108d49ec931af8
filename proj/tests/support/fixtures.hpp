#pragma once

#include "smf/corpus.hpp"
#include "smf/model.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace smf::testing {

inline ModelConfig tiny_config(MatcherKind matcher, HeadMode head, Channels channels = Channels::both) {
    ModelConfig c;
    c.matcher = matcher;
    c.head = head;
    c.channels = channels;
    c.vocab_size = 12;
    c.embed_dim = 4;
    c.encoder_hidden = 4;
    c.scn_match_dim = 3;
    c.conv_kernels = 2;
    c.conv_window = 2;
    c.pool_window = 2;
    c.san_hidden = 3;
    c.accumulator_hidden = 3;
    c.max_turns = 4;
    c.max_len = 5;
    c.init_scale = 0.5;
    return c;
}

/// Owns the storage an EncodedInstance points into.
struct OwnedInstance {
    EncodedBatch batch;
    EncodedInstance view() const { return batch.instance(0); }
};

/// Random instance over ids 2..vocab-1 with the given real turn count.
inline OwnedInstance random_encoded(Rng& rng, const ModelConfig& c, std::size_t turns) {
    std::uniform_int_distribution<int> id(2, static_cast<int>(c.vocab_size) - 1);
    std::uniform_int_distribution<std::size_t> len(1, c.max_len);
    OwnedInstance o;
    auto& b = o.batch;
    b.max_turns = c.max_turns;
    b.max_len = c.max_len;
    b.contexts.assign(c.max_turns * c.max_len, kPadId);
    b.utterance_lengths.assign(c.max_turns, 0);
    for (std::size_t s = c.max_turns - turns; s < c.max_turns; ++s) {
        const std::size_t n = len(rng);
        b.utterance_lengths[s] = static_cast<int>(n);
        for (std::size_t k = 0; k < n; ++k) {
            b.contexts[s * c.max_len + k] = id(rng);
        }
    }
    b.turn_counts = {static_cast<int>(turns)};
    b.responses.assign(c.max_len, kPadId);
    const std::size_t rn = len(rng);
    for (std::size_t k = 0; k < rn; ++k) {
        b.responses[k] = id(rng);
    }
    b.response_lengths = {static_cast<int>(rn)};
    b.labels = {1};
    return o;
}

/// Same context with every real utterance kept in place and `extra` more
/// leading pad slots (a model with a larger max_turns).
inline OwnedInstance widen(const OwnedInstance& in, std::size_t extra) {
    OwnedInstance o = in;
    auto& b = o.batch;
    b.max_turns += extra;
    b.contexts.insert(b.contexts.begin(), extra * b.max_len, kPadId);
    b.utterance_lengths.insert(b.utterance_lengths.begin(), extra, 0);
    return o;
}

/// Model with max_turns larger by `extra`, sharing every parameter value of
/// `source`; static position weights are right-aligned.
inline MatchingModel widen(const MatchingModel& source, std::size_t extra, Rng& rng) {
    ModelConfig c = source.config();
    c.max_turns += extra;
    MatchingModel wide = MatchingModel::create(c, rng);
    std::vector<Tensor> from;
    source.visit([&](const std::string&, const Tensor& t) { from.push_back(t); });
    std::size_t i = 0;
    wide.visit([&](const std::string& name, Tensor& t) {
        const auto src = from[i++].data();
        auto dst = t.mutable_data();
        const std::size_t offset = name == "head.position_weights" ? extra : 0;
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
    });
    return wide;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("smf-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace smf::testing
