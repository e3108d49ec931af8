#include "smf/corpus.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace smf {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return fields;
}

std::string_view trim_cr(std::string_view s) {
    if (!s.empty() && s.back() == '\r') {
        s.remove_suffix(1);
    }
    return s;
}

template <typename T>
std::span<const T> tail(const std::vector<T>& v, std::size_t n) {
    const std::size_t keep = std::min(n, v.size());
    return std::span<const T>(v).subspan(v.size() - keep, keep);
}

} // namespace

TokenSeq tokenize(std::string_view text, bool lowercase) {
    TokenSeq tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        const std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        if (i > start) {
            std::string token(text.substr(start, i - start));
            if (lowercase) {
                for (char& c : token) {
                    if (c >= 'A' && c <= 'Z') {
                        c = static_cast<char>(c - 'A' + 'a');
                    }
                }
            }
            tokens.push_back(std::move(token));
        }
    }
    return tokens;
}

// ---- Vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary() {
    tokens_ = {kPadToken, kUnkToken};
    index_[kPadToken] = kPadId;
    index_[kUnkToken] = kUnkId;
}

int Vocabulary::add(const std::string& token) {
    const auto [it, inserted] = index_.emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) {
        tokens_.push_back(token);
    }
    return it->second;
}

int Vocabulary::id(const std::string& token) const {
    if (token == kPadToken) {
        return kUnkId;
    }
    const auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw VocabularyError(fmt::format("token id {} outside vocabulary of {}", id, tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
        throw DataError("vocabulary must start with the reserved pad and unk tokens");
    }
    Vocabulary v;
    for (std::size_t i = 2; i < tokens.size(); ++i) {
        if (v.add(tokens[i]) != static_cast<int>(i)) {
            throw DataError(fmt::format("duplicate vocabulary token '{}'", tokens[i]));
        }
    }
    return v;
}

Vocabulary build_vocabulary(std::span<const Instance> training, std::size_t min_count) {
    std::unordered_map<std::string, std::size_t> counts;
    std::vector<std::string> order;
    auto count = [&](const TokenSeq& seq) {
        for (const auto& tok : seq) {
            if (counts[tok]++ == 0) {
                order.push_back(tok);
            }
        }
    };
    for (const auto& inst : training) {
        for (const auto& u : inst.utterances) {
            count(u);
        }
        count(inst.response);
    }
    Vocabulary vocab;
    for (const auto& tok : order) {
        if (counts[tok] >= min_count && tok != Vocabulary::kPadToken && tok != Vocabulary::kUnkToken) {
            vocab.add(tok);
        }
    }
    return vocab;
}

// ---- dataset parsing -----------------------------------------------------------

Instance parse_line(std::string_view line, std::size_t line_number, const std::string& source, bool lowercase) {
    const auto fields = split_tabs(trim_cr(line));
    if (fields.size() < 3) {
        throw ParseError(source, line_number,
                         fmt::format("expected label, at least one utterance and a response; found {} field(s)",
                                     fields.size()));
    }
    Instance inst;
    inst.line = line_number;
    const std::string_view label = fields.front();
    if (label == "1") {
        inst.label = 1;
    } else if (label == "0") {
        inst.label = 0;
    } else {
        throw ParseError(source, line_number, fmt::format("label '{}' is not 0 or 1", label));
    }
    for (std::size_t i = 1; i + 1 < fields.size(); ++i) {
        inst.utterances.push_back(tokenize(fields[i], lowercase));
    }
    inst.response = tokenize(fields.back(), lowercase);
    return inst;
}

DatasetReader::DatasetReader(std::istream& in, std::string source_name, bool lowercase)
    : in_(in), source_(std::move(source_name)), lowercase_(lowercase) {}

std::optional<Instance> DatasetReader::next() {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_;
        if (trim_cr(line).find_first_not_of(" \t") == std::string_view::npos) {
            continue;
        }
        return parse_line(line, line_, source_, lowercase_);
    }
    return std::nullopt;
}

std::vector<Instance> parse_dataset(std::istream& in, const std::string& source_name, bool lowercase) {
    DatasetReader reader(in, source_name, lowercase);
    std::vector<Instance> out;
    while (auto inst = reader.next()) {
        out.push_back(std::move(*inst));
    }
    if (out.empty()) {
        throw DataError(fmt::format("{}: dataset contains no instances", source_name));
    }
    return out;
}

std::vector<Instance> parse_dataset(const std::filesystem::path& path, bool lowercase) {
    std::ifstream in(path);
    if (!in) {
        throw DataError(fmt::format("dataset not found: {}", path.string()));
    }
    return parse_dataset(in, path.string(), lowercase);
}

std::vector<std::vector<std::size_t>> group_by_context(std::span<const Instance> instances) {
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (i == 0 || instances[i].utterances != instances[i - 1].utterances) {
            groups.emplace_back();
        }
        groups.back().push_back(i);
    }
    return groups;
}

// ---- pretrained embeddings -----------------------------------------------------

EmbeddingTable load_pretrained_embeddings(std::istream& in, const std::string& source, const Vocabulary& vocab,
                                          std::size_t dim, Rng& rng, double scale, EmbeddingLoadReport* report) {
    EmbeddingTable table = EmbeddingTable::random(vocab.size(), dim, rng, scale);
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError(source, 1, "missing 'count dim' header");
    }
    std::istringstream header(line);
    std::size_t count = 0;
    std::size_t file_dim = 0;
    if (!(header >> count >> file_dim)) {
        throw ParseError(source, 1, "malformed header; expected 'count dim'");
    }
    if (file_dim != dim) {
        throw ConfigError(fmt::format("{}: embedding dimension {} does not match configured {}", source, file_dim, dim));
    }
    EmbeddingLoadReport local;
    std::size_t line_number = 1;
    auto weights = table.weights.mutable_data();
    while (std::getline(in, line)) {
        ++line_number;
        const auto fields = tokenize(trim_cr(line), false);
        if (fields.empty()) {
            continue;
        }
        if (fields.size() != dim + 1) {
            throw ParseError(source, line_number,
                             fmt::format("expected a token and {} values, found {} fields", dim, fields.size()));
        }
        std::vector<double> values(dim);
        for (std::size_t k = 0; k < dim; ++k) {
            const auto& f = fields[k + 1];
            const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), values[k]);
            if (ec != std::errc() || ptr != f.data() + f.size()) {
                throw ParseError(source, line_number, fmt::format("'{}' is not a number", f));
            }
        }
        ++local.file_rows;
        const std::string& tok = fields[0];
        if (!vocab.contains(tok) || tok == Vocabulary::kPadToken) {
            continue;
        }
        const int id = vocab.id(tok);
        std::copy(values.begin(), values.end(), weights.begin() + static_cast<std::ptrdiff_t>(id * dim));
        ++local.matched;
    }
    if (report) {
        *report = local;
    }
    return table;
}

EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::size_t dim, Rng& rng, double scale, EmbeddingLoadReport* report) {
    std::ifstream in(path);
    if (!in) {
        throw DataError(fmt::format("embeddings not found: {}", path.string()));
    }
    return load_pretrained_embeddings(in, path.string(), vocab, dim, rng, scale, report);
}

// ---- encoding ----------------------------------------------------------------

EncodedInstance EncodedBatch::instance(std::size_t i) const {
    EncodedInstance e;
    e.max_turns = max_turns;
    e.max_len = max_len;
    e.context = std::span<const int>(contexts).subspan(i * max_turns * max_len, max_turns * max_len);
    e.utterance_lengths = std::span<const int>(utterance_lengths).subspan(i * max_turns, max_turns);
    e.turns = static_cast<std::size_t>(turn_counts[i]);
    e.response = std::span<const int>(responses).subspan(i * max_len, max_len);
    e.response_length = static_cast<std::size_t>(response_lengths[i]);
    e.label = labels[i];
    return e;
}

EncodedBatch encode_batch(std::span<const Instance> instances, const Vocabulary& vocab,
                          const EncodeOptions& options) {
    if (options.max_turns == 0 || options.max_len == 0) {
        throw ConfigError("encode_batch: max_turns and max_len must be positive");
    }
    const std::size_t T = options.max_turns;
    const std::size_t L = options.max_len;
    EncodedBatch batch;
    batch.max_turns = T;
    batch.max_len = L;
    const std::size_t B = instances.size();
    batch.contexts.assign(B * T * L, kPadId);
    batch.utterance_lengths.assign(B * T, 0);
    batch.turn_counts.assign(B, 0);
    batch.responses.assign(B * L, kPadId);
    batch.response_lengths.assign(B, 0);
    batch.labels.assign(B, 0);

    auto write_seq = [&](const TokenSeq& seq, int* out) {
        const auto kept = tail(seq, L);
        for (std::size_t k = 0; k < kept.size(); ++k) {
            out[k] = vocab.id(kept[k]);
        }
        return static_cast<int>(kept.size());
    };

    for (std::size_t b = 0; b < B; ++b) {
        const Instance& inst = instances[b];
        if (inst.utterances.empty()) {
            throw DataError(fmt::format("instance at line {} has no utterances", inst.line));
        }
        if (inst.label != 0 && inst.label != 1) {
            throw DataError(fmt::format("instance at line {} has label {}", inst.line, inst.label));
        }
        std::vector<TokenSeq> joined;
        std::span<const TokenSeq> utterances = inst.utterances;
        if (options.single_turn) {
            TokenSeq all;
            for (const auto& u : inst.utterances) {
                all.insert(all.end(), u.begin(), u.end());
            }
            joined.push_back(std::move(all));
            utterances = joined;
        }
        const auto kept = utterances.subspan(utterances.size() - std::min(T, utterances.size()));
        const std::size_t first = T - kept.size();
        for (std::size_t k = 0; k < kept.size(); ++k) {
            const std::size_t slot = first + k;
            batch.utterance_lengths[b * T + slot] = write_seq(kept[k], &batch.contexts[(b * T + slot) * L]);
        }
        batch.turn_counts[b] = static_cast<int>(kept.size());
        batch.response_lengths[b] = write_seq(inst.response, &batch.responses[b * L]);
        batch.labels[b] = inst.label;
    }
    return batch;
}

DecodedInstance decode_instance(const EncodedBatch& batch, std::size_t i, const Vocabulary& vocab) {
    const EncodedInstance e = batch.instance(i);
    DecodedInstance out;
    auto decode = [&](std::span<const int> ids) {
        TokenSeq seq;
        for (const int id : ids) {
            if (id != kPadId) {
                seq.push_back(vocab.token(id));
            }
        }
        return seq;
    };
    for (std::size_t slot = e.first_real_slot(); slot < e.max_turns; ++slot) {
        out.utterances.push_back(decode(e.utterance(slot)));
    }
    out.response = decode(e.response);
    return out;
}

} // namespace smf
