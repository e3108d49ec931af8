#pragma once

#include "smf/errors.hpp"
#include "smf/layers.hpp"

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace smf {

using TokenSeq = std::vector<std::string>;

TokenSeq tokenize(std::string_view text, bool lowercase = true);

class Vocabulary {
public:
    static constexpr const char* kPadToken = "<pad>";
    static constexpr const char* kUnkToken = "<unk>";

    Vocabulary();

    /// Adds the token if absent and returns its id.
    int add(const std::string& token);
    /// Id of `token`, or the unk id when unknown.
    int id(const std::string& token) const;
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    const std::string& token(int id) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    static Vocabulary from_tokens(const std::vector<std::string>& tokens);

private:
    std::unordered_map<std::string, int> index_;
    std::vector<std::string> tokens_;
};

/// One labeled (context, response) pair. `line` is the 1-based source line.
struct Instance {
    int label = 0;
    std::vector<TokenSeq> utterances;
    TokenSeq response;
    std::size_t line = 0;
};

/// Streams instances from the tab-separated format
///   label \t utterance_1 \t ... \t utterance_k \t response
/// Blank lines are skipped.
class DatasetReader {
public:
    DatasetReader(std::istream& in, std::string source_name, bool lowercase = true);

    std::optional<Instance> next();
    std::size_t line() const { return line_; }

private:
    std::istream& in_;
    std::string source_;
    bool lowercase_;
    std::size_t line_ = 0;
};

Instance parse_line(std::string_view line, std::size_t line_number, const std::string& source, bool lowercase = true);

std::vector<Instance> parse_dataset(std::istream& in, const std::string& source_name, bool lowercase = true);
/// Throws DataError("dataset not found: ...") for a missing path and
/// DataError for a file without instances.
std::vector<Instance> parse_dataset(const std::filesystem::path& path, bool lowercase = true);

/// Consecutive instances sharing an identical context form one ranking group.
std::vector<std::vector<std::size_t>> group_by_context(std::span<const Instance> instances);

/// Ids are assigned in first-occurrence order over contexts then responses.
Vocabulary build_vocabulary(std::span<const Instance> training, std::size_t min_count = 1);

struct EmbeddingLoadReport {
    std::size_t file_rows = 0;
    std::size_t matched = 0;
};

/// Reads the textual word-vector format (header "count dim", then one token
/// and dim floats per line). Unmatched vocabulary rows are drawn uniformly
/// from [-scale, scale]; the pad row stays zero.
EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::size_t dim, Rng& rng, double scale = 0.1,
                                          EmbeddingLoadReport* report = nullptr);
EmbeddingTable load_pretrained_embeddings(std::istream& in, const std::string& source, const Vocabulary& vocab,
                                          std::size_t dim, Rng& rng, double scale = 0.1,
                                          EmbeddingLoadReport* report = nullptr);

struct EncodeOptions {
    std::size_t max_turns = 10;
    std::size_t max_len = 50;
    /// Concatenate every utterance into one (single-turn matcher variants).
    bool single_turn = false;
};

/// Read-only view of one encoded instance inside an EncodedBatch.
struct EncodedInstance {
    std::size_t max_turns = 0;
    std::size_t max_len = 0;
    std::span<const int> context;            // max_turns * max_len ids
    std::span<const int> utterance_lengths;  // max_turns
    std::size_t turns = 0;                   // real turns, right-aligned
    std::span<const int> response;           // max_len ids
    std::size_t response_length = 0;
    int label = 0;

    std::span<const int> utterance(std::size_t slot) const { return context.subspan(slot * max_len, max_len); }
    std::size_t utterance_length(std::size_t slot) const {
        return static_cast<std::size_t>(utterance_lengths[slot]);
    }
    std::size_t first_real_slot() const { return max_turns - turns; }
};

/// batch x max_turns x max_len context ids, batch x max_len response ids.
/// Contexts keep their last max_turns utterances and are padded on the
/// oldest side; sequences keep their last max_len tokens and are padded at
/// the end.
struct EncodedBatch {
    std::size_t max_turns = 0;
    std::size_t max_len = 0;
    std::vector<int> contexts;
    std::vector<int> utterance_lengths;
    std::vector<int> turn_counts;
    std::vector<int> responses;
    std::vector<int> response_lengths;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    EncodedInstance instance(std::size_t i) const;
};

EncodedBatch encode_batch(std::span<const Instance> instances, const Vocabulary& vocab,
                          const EncodeOptions& options = {});

/// Non-pad tokens of instance i, utterances first (oldest to newest), then the response.
struct DecodedInstance {
    std::vector<TokenSeq> utterances;
    TokenSeq response;
};
DecodedInstance decode_instance(const EncodedBatch& batch, std::size_t i, const Vocabulary& vocab);

} // namespace smf
