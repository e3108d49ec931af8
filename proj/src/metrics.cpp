#include "smf/metrics.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace smf {

std::size_t RankedGroup::positives() const {
    return static_cast<std::size_t>(
        std::count_if(candidates.begin(), candidates.end(), [](const Candidate& c) { return c.label == 1; }));
}

std::vector<std::size_t> rank_order(const RankedGroup& group) {
    std::vector<std::size_t> order(group.candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return group.candidates[a].score > group.candidates[b].score;
    });
    return order;
}

std::vector<std::size_t> ranks(const RankedGroup& group) {
    const auto order = rank_order(group);
    std::vector<std::size_t> r(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        r[order[pos]] = pos + 1;
    }
    return r;
}

namespace {

void require_positive(const RankedGroup& group, const char* metric) {
    if (group.positives() == 0) {
        throw ProtocolError(fmt::format("{}: context {} has no positive candidate; filter it first", metric,
                                        group.context));
    }
}

template <typename F>
double mean_over(const RankedRun& run, F&& per_group) {
    if (run.empty()) {
        throw ProtocolError("metric over an empty run");
    }
    double total = 0.0;
    for (const auto& g : run) {
        total += per_group(g);
    }
    return total / static_cast<double>(run.size());
}

} // namespace

double recall_n_at_k(const RankedGroup& group, std::size_t n, std::size_t k) {
    if (group.candidates.size() != n) {
        throw ProtocolError(fmt::format("R_{}@{}: context {} has {} candidates", n, k, group.context,
                                        group.candidates.size()));
    }
    if (group.positives() != 1) {
        throw ProtocolError(fmt::format("R_{}@{}: context {} has {} positives, expected exactly 1", n, k,
                                        group.context, group.positives()));
    }
    return recall_at_k(group, k);
}

double recall_at_k(const RankedGroup& group, std::size_t k) {
    require_positive(group, "recall");
    const auto r = ranks(group);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (group.candidates[i].label == 1 && r[i] <= k) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(group.positives());
}

RankedGroup subsample(const RankedGroup& group, std::size_t n) {
    if (group.positives() != 1 || group.candidates.size() < n || n == 0) {
        throw ProtocolError(fmt::format("cannot subsample context {} ({} candidates, {} positives) to {}",
                                        group.context, group.candidates.size(), group.positives(), n));
    }
    RankedGroup out{group.context, group.turns, {}};
    std::size_t negatives = 0;
    for (const auto& c : group.candidates) {
        if (c.label == 1) {
            out.candidates.push_back(c);
        } else if (negatives + 1 < n) {
            out.candidates.push_back(c);
            ++negatives;
        }
    }
    return out;
}

std::optional<double> mean_recall_n_at_k(const RankedRun& run, std::size_t n, std::size_t k,
                                         std::size_t* used_groups) {
    double total = 0.0;
    std::size_t used = 0;
    for (const auto& g : run) {
        if (g.positives() == 1 && g.candidates.size() >= n) {
            total += recall_n_at_k(subsample(g, n), n, k);
            ++used;
        }
    }
    if (used_groups) {
        *used_groups = used;
    }
    if (used == 0) {
        return std::nullopt;
    }
    return total / static_cast<double>(used);
}

double average_precision(const RankedGroup& group) {
    require_positive(group, "average precision");
    const auto order = rank_order(group);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        if (group.candidates[order[pos]].label == 1) {
            ++seen;
            total += static_cast<double>(seen) / static_cast<double>(pos + 1);
        }
    }
    return total / static_cast<double>(seen);
}

double mean_average_precision(const RankedRun& run) { return mean_over(run, average_precision); }

double reciprocal_rank(const RankedGroup& group) {
    require_positive(group, "reciprocal rank");
    const auto order = rank_order(group);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        if (group.candidates[order[pos]].label == 1) {
            return 1.0 / static_cast<double>(pos + 1);
        }
    }
    return 0.0;
}

double mean_reciprocal_rank(const RankedRun& run) { return mean_over(run, reciprocal_rank); }

double precision_at_1(const RankedGroup& group) {
    require_positive(group, "P@1");
    return group.candidates[rank_order(group).front()].label == 1 ? 1.0 : 0.0;
}

double mean_precision_at_1(const RankedRun& run) { return mean_over(run, precision_at_1); }

FilterResult filter_contexts(const RankedRun& run) {
    FilterResult out;
    for (const auto& g : run) {
        const std::size_t pos = g.positives();
        if (pos == 0 || pos == g.candidates.size()) {
            ++out.removed;
        } else {
            out.run.push_back(g);
        }
    }
    return out;
}

TurnBucket parse_bucket(const std::string& text) {
    auto fail = [&]() -> TurnBucket {
        throw ConfigError(fmt::format("malformed bucket '{}' (expected e.g. \"(0,5]\" or \"(10,)\")", text));
    };
    if (text.size() < 4 || text.front() != '(') {
        return fail();
    }
    const auto comma = text.find(',');
    if (comma == std::string::npos) {
        return fail();
    }
    auto number = [&](std::string_view s, std::size_t& v) {
        const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        return r.ec == std::errc{} && r.ptr == s.data() + s.size();
    };
    TurnBucket b;
    const std::string_view body(text);
    if (!number(body.substr(1, comma - 1), b.lower)) {
        return fail();
    }
    const auto rest = body.substr(comma + 1);
    if (rest == ")") {
        return b;
    }
    if (rest.back() != ']') {
        return fail();
    }
    std::size_t upper = 0;
    if (!number(rest.substr(0, rest.size() - 1), upper) || upper <= b.lower) {
        return fail();
    }
    b.upper = upper;
    return b;
}

std::string to_string(const TurnBucket& bucket) {
    return bucket.upper ? fmt::format("({},{}]", bucket.lower, *bucket.upper) : fmt::format("({},)", bucket.lower);
}

RankedRun filter_bucket(const RankedRun& run, const TurnBucket& bucket) {
    RankedRun out;
    std::copy_if(run.begin(), run.end(), std::back_inserter(out),
                 [&](const RankedGroup& g) { return bucket.contains(g.turns); });
    return out;
}

RankedRun build_run(std::span<const Instance> instances, std::span<const double> scores) {
    if (instances.size() != scores.size()) {
        throw ContractError(fmt::format("build_run: {} instances but {} scores", instances.size(), scores.size()));
    }
    RankedRun run;
    const auto groups = group_by_context(instances);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        RankedGroup group{g, instances[groups[g].front()].utterances.size(), {}};
        for (std::size_t i : groups[g]) {
            if (!std::isfinite(scores[i])) {
                throw NumericError(fmt::format("non-finite score for instance on line {}", instances[i].line));
            }
            group.candidates.push_back({i, scores[i], instances[i].label});
        }
        run.push_back(std::move(group));
    }
    return run;
}

EvalMode parse_eval_mode(const std::string& text) {
    if (text == "ubuntu") {
        return EvalMode::ubuntu;
    }
    if (text == "douban") {
        return EvalMode::douban;
    }
    throw ConfigError(fmt::format("unknown evaluation mode '{}' (expected ubuntu or douban)", text));
}

std::string to_string(EvalMode mode) { return mode == EvalMode::ubuntu ? "ubuntu" : "douban"; }

std::optional<double> EvalReport::get(const std::string& name) const {
    for (const auto& m : metrics) {
        if (m.name == name) {
            return m.value;
        }
    }
    return std::nullopt;
}

EvalReport evaluate_run(const RankedRun& run, EvalMode mode) {
    EvalReport report;
    report.mode = mode;
    report.groups = run.size();
    if (mode == EvalMode::ubuntu) {
        for (const auto& [n, k] : {std::pair<std::size_t, std::size_t>{2, 1}, {10, 1}, {10, 2}, {10, 5}}) {
            std::size_t used = 0;
            if (const auto v = mean_recall_n_at_k(run, n, k, &used)) {
                report.metrics.push_back({fmt::format("R{}@{}", n, k), *v, used});
            }
        }
        return report;
    }
    const FilterResult kept = filter_contexts(run);
    report.filtered = kept.removed;
    if (kept.run.empty()) {
        return report;
    }
    const std::size_t n = kept.run.size();
    report.metrics.push_back({"MAP", mean_average_precision(kept.run), n});
    report.metrics.push_back({"MRR", mean_reciprocal_rank(kept.run), n});
    report.metrics.push_back({"P@1", mean_precision_at_1(kept.run), n});
    RankedRun tens;
    std::copy_if(kept.run.begin(), kept.run.end(), std::back_inserter(tens),
                 [](const RankedGroup& g) { return g.candidates.size() == 10; });
    if (!tens.empty()) {
        for (std::size_t k : {1, 2, 5}) {
            report.metrics.push_back({fmt::format("R10@{}", k),
                                      mean_over(tens, [k](const RankedGroup& g) { return recall_at_k(g, k); }),
                                      tens.size()});
        }
    }
    return report;
}

std::string format_report_table(const EvalReport& report) {
    std::string out = fmt::format("mode {}  groups {}", to_string(report.mode), report.groups);
    if (report.mode == EvalMode::douban) {
        out += fmt::format("  filtered {}", report.filtered);
    }
    out += fmt::format("\n{:<8} {:>8} {:>8}\n", "metric", "value", "groups");
    for (const auto& m : report.metrics) {
        out += fmt::format("{:<8} {:>8.4f} {:>8}\n", m.name, m.value, m.groups);
    }
    return out;
}

std::string format_report_jsonl(const EvalReport& report) {
    std::string out;
    for (const auto& m : report.metrics) {
        nlohmann::json j = {{"metric", m.name}, {"value", m.value}, {"groups", m.groups},
                            {"mode", to_string(report.mode)}, {"filtered", report.filtered}};
        out += j.dump() + "\n";
    }
    return out;
}

std::string format_score_dump(const RankedRun& run) {
    std::string out = "context\tcandidate\tscore\tlabel\n";
    for (const auto& g : run) {
        for (const auto& c : g.candidates) {
            out += fmt::format("{}\t{}\t{:.17g}\t{}\n", g.context, c.id, c.score, c.label);
        }
    }
    return out;
}

} // namespace smf
