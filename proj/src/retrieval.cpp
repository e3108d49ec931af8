#include "smf/retrieval.hpp"

#include "smf/io.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace smf {

namespace {

constexpr const char* kIndexMagic = "SMF-INDEX";
constexpr int kIndexVersion = 1;

} // namespace

InvertedIndex InvertedIndex::build(std::vector<IndexedDocument> documents) {
    if (documents.empty()) {
        throw DataError("cannot build an index from an empty corpus");
    }
    InvertedIndex index;
    index.documents_ = std::move(documents);
    index.finish();
    return index;
}

void InvertedIndex::finish() {
    postings_.clear();
    for (std::size_t id = 0; id < documents_.size(); ++id) {
        std::map<std::string, std::size_t> counts;
        for (const auto& t : documents_[id].tokens) {
            ++counts[t];
        }
        for (const auto& [term, tf] : counts) {
            postings_[term].push_back({id, tf}); // ids increase, so postings stay sorted
        }
    }
    doc_vectors_.clear();
    doc_vectors_.reserve(documents_.size());
    for (const auto& doc : documents_) {
        doc_vectors_.push_back(vectorize(doc.tokens));
    }
}

bool InvertedIndex::same_documents(const InvertedIndex& other) const {
    if (documents_.size() != other.documents_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < documents_.size(); ++i) {
        if (documents_[i].tokens != other.documents_[i].tokens || documents_[i].source != other.documents_[i].source) {
            return false;
        }
    }
    return true;
}

std::span<const Posting> InvertedIndex::postings(const std::string& term) const {
    const auto it = postings_.find(term);
    if (it == postings_.end()) {
        return {};
    }
    return it->second;
}

std::size_t InvertedIndex::df(const std::string& term) const { return postings(term).size(); }

double InvertedIndex::idf(const std::string& term) const {
    const std::size_t n = df(term);
    if (n == 0) {
        return 0.0;
    }
    return std::log(static_cast<double>(documents_.size()) / static_cast<double>(n));
}

TfIdfVector InvertedIndex::vectorize(std::span<const std::string> tokens) const {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : tokens) {
        if (contains(t)) {
            ++counts[t];
        }
    }
    TfIdfVector v;
    for (const auto& [term, tf] : counts) {
        v.emplace(term, static_cast<double>(tf) * idf(term));
    }
    return v;
}

void InvertedIndex::save(const std::filesystem::path& path) const {
    std::ostringstream out;
    out << kIndexMagic << ' ' << kIndexVersion << '\n' << documents_.size() << '\n';
    for (const auto& doc : documents_) {
        out << doc.source << '\t' << doc.tokens.size();
        for (const auto& t : doc.tokens) {
            out << '\t' << t;
        }
        out << '\n';
    }
    write_file_atomic(path, out.str());
}

bool InvertedIndex::is_index_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::string magic;
    return static_cast<bool>(in >> magic) && magic == kIndexMagic;
}

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError(fmt::format("index not found: {}", path.string()));
    }
    std::string magic;
    int version = 0;
    std::size_t count = 0;
    if (!(in >> magic >> version >> count) || magic != kIndexMagic) {
        throw CheckpointError(fmt::format("{}: not an index file", path.string()));
    }
    if (version != kIndexVersion) {
        throw CheckpointError(fmt::format("{}: unsupported index version {}", path.string(), version));
    }
    std::string line;
    std::getline(in, line);
    std::vector<IndexedDocument> docs;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) {
            throw CheckpointError(fmt::format("{}: truncated after {} documents", path.string(), i));
        }
        std::istringstream fields(line);
        IndexedDocument doc;
        std::size_t n = 0;
        if (!(fields >> doc.source >> n)) {
            throw CheckpointError(fmt::format("{}: malformed document line {}", path.string(), i + 3));
        }
        doc.tokens.resize(n);
        for (auto& t : doc.tokens) {
            if (!(fields >> t)) {
                throw CheckpointError(fmt::format("{}: malformed document line {}", path.string(), i + 3));
            }
        }
        docs.push_back(std::move(doc));
    }
    return build(std::move(docs));
}

double cosine(const TfIdfVector& a, const TfIdfVector& b) {
    double dot = 0.0;
    auto ia = a.begin();
    auto ib = b.begin();
    while (ia != a.end() && ib != b.end()) {
        if (ia->first < ib->first) {
            ++ia;
        } else if (ib->first < ia->first) {
            ++ib;
        } else {
            dot += ia->second * ib->second;
            ++ia;
            ++ib;
        }
    }
    auto norm = [](const TfIdfVector& v) {
        double s = 0.0;
        for (const auto& [term, w] : v) {
            s += w * w;
        }
        return std::sqrt(s);
    };
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    // symmetric in (a, b) and clamped against rounding just above 1
    return std::min(1.0, dot / (na * nb));
}

namespace {

TokenSeq concatenate(std::span<const TokenSeq> parts) {
    TokenSeq out;
    for (const auto& p : parts) {
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

} // namespace

double tfidf_baseline_score(std::span<const TokenSeq> context, const TokenSeq& response, const InvertedIndex& stats) {
    return cosine(stats.vectorize(concatenate(context)), stats.vectorize(response));
}

InvertedIndex build_tfidf_stats(std::span<const Instance> training) {
    std::vector<IndexedDocument> docs;
    docs.reserve(training.size() * 2);
    for (std::size_t i = 0; i < training.size(); ++i) {
        docs.push_back({concatenate(training[i].utterances), i});
        docs.push_back({training[i].response, i});
    }
    return InvertedIndex::build(std::move(docs));
}

TokenSeq expand_message(std::span<const TokenSeq> context, const InvertedIndex& index, std::size_t keywords) {
    if (context.empty()) {
        throw DataError("expand_message: empty context");
    }
    const TokenSeq& message = context.back();
    TokenSeq query = message;
    if (context.size() == 1) {
        return query;
    }
    std::map<std::string, std::size_t> tf;
    for (const auto& u : context.first(context.size() - 1)) {
        for (const auto& t : u) {
            if (index.contains(t) && std::find(message.begin(), message.end(), t) == message.end()) {
                ++tf[t];
            }
        }
    }
    std::vector<std::pair<std::string, double>> ranked;
    for (const auto& [term, count] : tf) {
        ranked.emplace_back(term, static_cast<double>(count) * index.idf(term));
    }
    // map iteration already orders by term, so a stable sort keeps lexicographic ties
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (std::size_t i = 0; i < std::min(keywords, ranked.size()); ++i) {
        query.push_back(ranked[i].first);
    }
    return query;
}

RetrievalResult retrieve_candidates(std::span<const std::string> query, const InvertedIndex& index, std::size_t k) {
    if (k == 0) {
        throw ConfigError("retrieve_candidates: k must be at least 1");
    }
    RetrievalResult result;
    result.k_exceeds_corpus = k > index.document_count();
    const TfIdfVector q = index.vectorize(query);
    std::vector<std::size_t> candidates;
    for (const auto& [term, weight] : q) {
        for (const auto& p : index.postings(term)) {
            candidates.push_back(p.doc);
        }
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    for (std::size_t doc : candidates) {
        const double s = cosine(q, index.document_vector(doc));
        if (s > 0.0) {
            result.hits.push_back({doc, s});
        }
    }
    std::sort(result.hits.begin(), result.hits.end(), [](const ScoredDocument& a, const ScoredDocument& b) {
        return a.score != b.score ? a.score > b.score : a.doc < b.doc;
    });
    if (result.hits.size() > k) {
        result.hits.resize(k);
    }
    return result;
}

std::string format_retrieval_tsv(std::size_t query_id, const RetrievalResult& result) {
    std::string out;
    for (std::size_t r = 0; r < result.hits.size(); ++r) {
        out += fmt::format("{}\t{}\t{:.17g}\t{}\n", query_id, result.hits[r].doc, result.hits[r].score, r + 1);
    }
    return out;
}

} // namespace smf
