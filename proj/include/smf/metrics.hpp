#pragma once

#include "smf/corpus.hpp"
#include "smf/errors.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace smf {

struct Candidate {
    std::size_t id = 0;
    double score = 0.0;
    int label = 0;
};

struct RankedGroup {
    std::size_t context = 0;
    std::size_t turns = 0; // utterances in the context, used for length bucketing
    std::vector<Candidate> candidates;

    std::size_t positives() const;
};

using RankedRun = std::vector<RankedGroup>;

/// Candidate indices by descending score; equal scores keep input order.
std::vector<std::size_t> rank_order(const RankedGroup& group);
/// 1-based rank of every candidate, aligned with group.candidates.
std::vector<std::size_t> ranks(const RankedGroup& group);

/// R_n@k for one group: requires exactly n candidates and exactly one positive.
double recall_n_at_k(const RankedGroup& group, std::size_t n, std::size_t k);
/// Fraction of the group's positives ranked within the top k.
double recall_at_k(const RankedGroup& group, std::size_t k);
/// The positive followed by the first n-1 negatives, in input order. Needs
/// exactly one positive and at least n candidates.
RankedGroup subsample(const RankedGroup& group, std::size_t n);
/// Mean R_n@k over groups that have one positive and at least n candidates
/// (subsampled to n); nullopt when no group qualifies.
std::optional<double> mean_recall_n_at_k(const RankedRun& run, std::size_t n, std::size_t k,
                                         std::size_t* used_groups = nullptr);

double average_precision(const RankedGroup& group);
double mean_average_precision(const RankedRun& run);
double reciprocal_rank(const RankedGroup& group);
double mean_reciprocal_rank(const RankedRun& run);
double precision_at_1(const RankedGroup& group);
double mean_precision_at_1(const RankedRun& run);

struct FilterResult {
    RankedRun run;
    std::size_t removed = 0;
};
/// Drops groups whose candidates are all positive or all negative.
FilterResult filter_contexts(const RankedRun& run);

/// Context-length bucket such as "(0,5]", "(5,10]" or "(10,)".
struct TurnBucket {
    std::size_t lower = 0;             // exclusive
    std::optional<std::size_t> upper;  // inclusive; none = unbounded
    bool contains(std::size_t turns) const { return turns > lower && (!upper || turns <= *upper); }
};
TurnBucket parse_bucket(const std::string& text);
std::string to_string(const TurnBucket& bucket);
RankedRun filter_bucket(const RankedRun& run, const TurnBucket& bucket);

/// Groups consecutive instances with identical contexts and attaches scores.
RankedRun build_run(std::span<const Instance> instances, std::span<const double> scores);

enum class EvalMode { ubuntu, douban };
EvalMode parse_eval_mode(const std::string& text);
std::string to_string(EvalMode mode);

struct MetricValue {
    std::string name;
    double value = 0.0;
    std::size_t groups = 0;
};

struct EvalReport {
    EvalMode mode = EvalMode::ubuntu;
    std::size_t groups = 0;   // groups in the run before filtering
    std::size_t filtered = 0; // removed by context filtering (douban mode)
    std::vector<MetricValue> metrics;

    std::optional<double> get(const std::string& name) const;
};

/// ubuntu: R_2@1, R_10@1, R_10@2, R_10@5.
/// douban: context filtering, then MAP, MRR, P@1 and R_10@{1,2,5}, where
/// R_10@k counts the fraction of positives in the top k over 10-candidate groups.
EvalReport evaluate_run(const RankedRun& run, EvalMode mode);

std::string format_report_table(const EvalReport& report);
/// One JSON object per metric.
std::string format_report_jsonl(const EvalReport& report);
/// context \t candidate \t score \t label
std::string format_score_dump(const RankedRun& run);

} // namespace smf
