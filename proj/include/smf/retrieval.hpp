#pragma once

#include "smf/corpus.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace smf {

struct Posting {
    std::size_t doc = 0;
    std::size_t tf = 0;

    bool operator==(const Posting&) const = default;
};

/// term -> tf * idf, ordered by term.
using TfIdfVector = std::map<std::string, double>;

struct IndexedDocument {
    TokenSeq tokens;
    std::size_t source = 0; // caller-defined reference, e.g. the originating instance
};

class InvertedIndex {
public:
    /// Throws DataError for an empty corpus.
    static InvertedIndex build(std::vector<IndexedDocument> documents);

    std::size_t document_count() const { return documents_.size(); }
    const IndexedDocument& document(std::size_t id) const { return documents_.at(id); }
    std::span<const Posting> postings(const std::string& term) const;
    std::size_t df(const std::string& term) const;
    bool contains(const std::string& term) const { return postings_.count(term) != 0; }
    /// ln(N / df); 0 for unknown terms.
    double idf(const std::string& term) const;

    /// Raw counts times idf; terms absent from the index are dropped.
    TfIdfVector vectorize(std::span<const std::string> tokens) const;
    const TfIdfVector& document_vector(std::size_t id) const { return doc_vectors_.at(id); }

    void save(const std::filesystem::path& path) const;
    static InvertedIndex load(const std::filesystem::path& path);
    static bool is_index_file(const std::filesystem::path& path);

    bool operator==(const InvertedIndex& other) const {
        return same_documents(other) && postings_ == other.postings_;
    }

private:
    bool same_documents(const InvertedIndex& other) const;
    void finish();

    std::vector<IndexedDocument> documents_;
    std::map<std::string, std::vector<Posting>> postings_;
    std::vector<TfIdfVector> doc_vectors_;
};

double cosine(const TfIdfVector& a, const TfIdfVector& b);

/// Cosine between the concatenated context and the response.
double tfidf_baseline_score(std::span<const TokenSeq> context, const TokenSeq& response, const InvertedIndex& stats);

/// Index whose idf comes from the training instances: each instance
/// contributes its concatenated context and its response as two documents.
InvertedIndex build_tfidf_stats(std::span<const Instance> training);

/// The last utterance followed by the top `keywords` history terms by
/// tf * idf (tf counted over the earlier utterances). Terms already in the
/// message or unknown to the index are skipped; ties go to the smaller term.
TokenSeq expand_message(std::span<const TokenSeq> context, const InvertedIndex& index, std::size_t keywords = 5);

struct ScoredDocument {
    std::size_t doc = 0;
    double score = 0.0;
};

struct RetrievalResult {
    std::vector<ScoredDocument> hits;
    /// k exceeded the corpus size, so every matching document was returned.
    bool k_exceeds_corpus = false;
};

/// Documents sharing at least one weighted term with the query, by
/// descending cosine then ascending id, cut to k. Throws ConfigError for k = 0.
RetrievalResult retrieve_candidates(std::span<const std::string> query, const InvertedIndex& index, std::size_t k);

/// query \t doc \t score \t rank
std::string format_retrieval_tsv(std::size_t query_id, const RetrievalResult& result);

} // namespace smf
