#include "smf/cli.hpp"

#include "smf/checkpoint.hpp"
#include "smf/config.hpp"
#include "smf/corpus.hpp"
#include "smf/errors.hpp"
#include "smf/grad_suite.hpp"
#include "smf/io.hpp"
#include "smf/metrics.hpp"
#include "smf/model.hpp"
#include "smf/retrieval.hpp"
#include "smf/training.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace smf {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---- shared flags ------------------------------------------------------------------

struct CommonFlags {
    std::string config_path;
    std::map<std::string, std::string> flags; // config key -> value, in flag order of the table below
    std::vector<std::string> sets;
};

const std::vector<std::pair<std::string, std::string>>& flag_table() {
    static const std::vector<std::pair<std::string, std::string>> table = {
        {"--model", "model"},         {"--head", "head"},           {"--channels", "channels"},
        {"--seed", "seed"},           {"--workers", "workers"},     {"--train", "train"},
        {"--valid", "valid"},         {"--test", "test"},           {"--embeddings", "embeddings"},
        {"--checkpoint", "checkpoint"}, {"--out", "out"},           {"--max-turns", "max_turns"},
        {"--max-len", "max_len"},     {"--bucket", "bucket"},       {"--eval-mode", "eval_mode"},
        {"--epochs", "max_epochs"},   {"--batch-size", "batch_size"}, {"--lr", "lr"},
    };
    return table;
}

void add_common(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config_path, "key = value configuration file");
    for (const auto& [flag, key] : flag_table()) {
        app->add_option_function<std::string>(
            flag, [&f, key = key](const std::string& v) { f.flags[key] = v; }, fmt::format("sets '{}'", key));
    }
    app->add_option("--set", f.sets, "additional key=value overrides");
}

RunConfig resolve(const CommonFlags& f, std::set<std::string>* explicit_keys = nullptr) {
    RunConfig config;
    if (!f.config_path.empty()) {
        const std::string text = [&] {
            if (!fs::exists(f.config_path)) {
                throw ConfigError(fmt::format("config file not found: {}", f.config_path));
            }
            return read_file(f.config_path);
        }();
        config = parse_config(text);
        if (explicit_keys) {
            std::istringstream in(text);
            std::string line;
            while (std::getline(in, line)) {
                const auto eq = line.find('=');
                const auto b = line.find_first_not_of(" \t");
                if (eq != std::string::npos && b != std::string::npos && line[b] != '#') {
                    std::string key = line.substr(b, eq - b);
                    key.erase(key.find_last_not_of(" \t") + 1);
                    explicit_keys->insert(key);
                }
            }
        }
    }
    for (const auto& [flag, key] : flag_table()) {
        if (const auto it = f.flags.find(key); it != f.flags.end()) {
            set_config_value(config, key, it->second);
            if (explicit_keys) {
                explicit_keys->insert(key);
            }
        }
    }
    for (const auto& s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(fmt::format("--set expects key=value, got '{}'", s));
        }
        set_config_value(config, s.substr(0, eq), s.substr(eq + 1));
        if (explicit_keys) {
            explicit_keys->insert(s.substr(0, eq));
        }
    }
    return config;
}

std::vector<Instance> load_split(const std::string& path, const char* what, bool lowercase) {
    if (path.empty()) {
        throw UsageError(fmt::format("no {} dataset given", what));
    }
    return parse_dataset(fs::path(path), lowercase);
}

fs::path out_dir(const RunConfig& c) { return c.out.empty() ? fs::path("smf-run") : fs::path(c.out); }

fs::path checkpoint_path(const RunConfig& c) {
    return c.checkpoint.empty() ? out_dir(c) / "model.ckpt" : fs::path(c.checkpoint);
}

// A loaded scorer: either a neural checkpoint or tf-idf statistics.
struct Scorer {
    RunConfig config;
    std::optional<LoadedCheckpoint> neural;
    std::optional<InvertedIndex> tfidf;

    std::vector<double> score(std::span<const Instance> instances) const {
        if (tfidf) {
            std::vector<double> s;
            s.reserve(instances.size());
            for (const auto& inst : instances) {
                s.push_back(tfidf_baseline_score(inst.utterances, inst.response, *tfidf));
            }
            return s;
        }
        const EncodedBatch batch = encode_batch(instances, neural->vocab, neural->model.config().encode_options());
        return score_instances(neural->model, batch);
    }
};

Scorer load_scorer(const RunConfig& requested, const std::set<std::string>& explicit_keys) {
    const fs::path path = checkpoint_path(requested);
    if (!fs::exists(path)) {
        throw CheckpointError(fmt::format("checkpoint not found: {}", path.string()));
    }
    Scorer s;
    if (InvertedIndex::is_index_file(path)) {
        s.config = requested;
        s.config.model = ModelKind::tfidf;
        s.tfidf = InvertedIndex::load(path);
        return s;
    }
    s.neural = load_checkpoint(path, requested);
    s.config = s.neural->config;
    // shape keys given explicitly must agree with the checkpoint
    for (const auto& key : model_shape_keys()) {
        if (explicit_keys.count(key) && get_config_value(requested, key) != get_config_value(s.config, key)) {
            throw CheckpointError(fmt::format("{} = {} does not match the checkpoint's {} in {}", key,
                                              get_config_value(requested, key), get_config_value(s.config, key),
                                              path.string()));
        }
    }
    return s;
}

// ---- train ---------------------------------------------------------------------------

int cmd_train(const CommonFlags& flags, std::ostream& out) {
    const RunConfig config = resolve(flags);
    std::vector<Instance> training = load_split(config.train, "training", config.lowercase);
    std::vector<Instance> validation;
    if (!config.valid.empty()) {
        validation = load_split(config.valid, "validation", config.lowercase);
    }
    const fs::path ckpt = checkpoint_path(config);
    const fs::path dir = out_dir(config);

    if (!config.neural()) {
        const InvertedIndex stats = build_tfidf_stats(training);
        stats.save(ckpt);
        write_file_atomic(dir / "config.txt", to_config_text(config));
        out << fmt::format("tf-idf statistics over {} documents written to {}\n", stats.document_count(),
                           ckpt.string());
        return kExitOk;
    }

    if (validation.empty()) {
        out << "no validation set given; early stopping uses the training set\n";
        validation = training;
    }
    const Vocabulary vocab = build_vocabulary(training, config.min_count);
    Rng rng(config.seed);
    MatchingModel model = MatchingModel::create(config.model_config(vocab.size()), rng);
    if (!config.embeddings.empty()) {
        EmbeddingLoadReport report;
        model.embedding = load_pretrained_embeddings(fs::path(config.embeddings), vocab, config.embed_dim, rng,
                                                     config.init_scale, &report);
        out << fmt::format("embeddings: {} of {} vocabulary rows initialized from file\n", report.matched,
                           vocab.size());
    }
    out << fmt::format("{} training instances, vocabulary {}, {} parameters\n", training.size(), vocab.size(),
                       model.parameter_count());
    const TrainResult result = train(model, training, validation, vocab, config.train_config(), [&](const EpochRecord& r) {
        out << fmt::format("epoch {:>3}  loss {:.6f}  valid R2@1 {:.4f}{}\n", r.epoch, r.train_loss, r.valid_r2_at_1,
                           r.improved ? "  *" : "");
        out.flush();
    });
    save_checkpoint(ckpt, config, vocab, model);
    write_file_atomic(dir / "history.jsonl", history_jsonl(result));
    write_file_atomic(dir / "config.txt", to_config_text(config));
    out << fmt::format("best epoch {} (valid R2@1 {:.4f}); checkpoint {}\n", result.best_epoch,
                       result.best_valid_r2_at_1, ckpt.string());
    return kExitOk;
}

// ---- evaluate ------------------------------------------------------------------------

int cmd_evaluate(const CommonFlags& flags, std::ostream& out) {
    std::set<std::string> explicit_keys;
    const RunConfig requested = resolve(flags, &explicit_keys);
    const Scorer scorer = load_scorer(requested, explicit_keys);
    const std::string path = !requested.test.empty() ? requested.test : requested.valid;
    const std::vector<Instance> data = load_split(path, "test", scorer.config.lowercase);
    RankedRun run = build_run(data, scorer.score(data));
    if (!requested.bucket.empty()) {
        run = filter_bucket(run, parse_bucket(requested.bucket));
    }
    const EvalReport report = evaluate_run(run, requested.eval_mode);
    out << format_report_table(report);
    if (!requested.out.empty()) {
        const fs::path dir = requested.out;
        write_file_atomic(dir / "report.txt", format_report_table(report));
        write_file_atomic(dir / "report.jsonl", format_report_jsonl(report));
        write_file_atomic(dir / "scores.tsv", format_score_dump(run));
    }
    return kExitOk;
}

// ---- score ---------------------------------------------------------------------------

int cmd_score(const CommonFlags& flags, const std::vector<std::string>& context,
              std::vector<std::string> candidates, const std::string& candidates_file, std::ostream& out) {
    std::set<std::string> explicit_keys;
    const RunConfig requested = resolve(flags, &explicit_keys);
    if (context.empty() ||
        std::all_of(context.begin(), context.end(), [](const std::string& u) { return tokenize(u).empty(); })) {
        throw UsageError("score needs a non-empty --context");
    }
    if (!candidates_file.empty()) {
        std::ifstream in(candidates_file);
        if (!in) {
            throw DataError(fmt::format("candidates file not found: {}", candidates_file));
        }
        for (std::string line; std::getline(in, line);) {
            if (!line.empty()) {
                candidates.push_back(line);
            }
        }
    }
    if (candidates.empty()) {
        throw UsageError("score needs at least one candidate");
    }
    const Scorer scorer = load_scorer(requested, explicit_keys);
    std::vector<Instance> instances;
    for (const auto& c : candidates) {
        Instance inst;
        for (const auto& u : context) {
            inst.utterances.push_back(tokenize(u, scorer.config.lowercase));
        }
        inst.response = tokenize(c, scorer.config.lowercase);
        instances.push_back(std::move(inst));
    }
    const auto scores = scorer.score(instances);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    out << "rank\tscore\tcandidate\n";
    for (std::size_t r = 0; r < order.size(); ++r) {
        out << fmt::format("{}\t{:.10f}\t{}\n", r + 1, scores[order[r]], candidates[order[r]]);
    }
    return kExitOk;
}

// ---- retrieve ------------------------------------------------------------------------

struct RetrieveFlags {
    std::string index;
    std::string build_from;
    std::string save_index;
    std::vector<std::string> query;
    std::string queries;
    std::size_t k = 10;
    bool no_expand = false;
};

int cmd_retrieve(const CommonFlags& flags, const RetrieveFlags& r, std::ostream& out) {
    const RunConfig config = resolve(flags);
    if (r.k == 0) {
        throw UsageError("--k must be at least 1");
    }
    std::optional<InvertedIndex> index;
    if (!r.build_from.empty()) {
        const auto data = parse_dataset(fs::path(r.build_from), config.lowercase);
        std::vector<IndexedDocument> docs;
        std::set<TokenSeq> seen;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (seen.insert(data[i].response).second) {
                docs.push_back({data[i].response, data[i].line});
            }
        }
        index = InvertedIndex::build(std::move(docs));
        if (!r.save_index.empty()) {
            index->save(r.save_index);
        }
    } else if (!r.index.empty()) {
        index = InvertedIndex::load(r.index);
    } else {
        throw UsageError("retrieve needs --index or --build-from");
    }

    std::vector<std::vector<TokenSeq>> contexts;
    if (!r.query.empty()) {
        std::vector<TokenSeq> c;
        for (const auto& u : r.query) {
            c.push_back(tokenize(u, config.lowercase));
        }
        contexts.push_back(std::move(c));
    }
    if (!r.queries.empty()) {
        std::ifstream in(r.queries);
        if (!in) {
            throw DataError(fmt::format("queries file not found: {}", r.queries));
        }
        for (std::string line; std::getline(in, line);) {
            if (line.empty()) {
                continue;
            }
            std::vector<TokenSeq> c;
            std::istringstream fields(line);
            for (std::string u; std::getline(fields, u, '\t');) {
                c.push_back(tokenize(u, config.lowercase));
            }
            contexts.push_back(std::move(c));
        }
    }
    if (contexts.empty()) {
        if (!r.save_index.empty()) {
            out << fmt::format("index over {} documents written to {}\n", index->document_count(), r.save_index);
            return kExitOk;
        }
        throw UsageError("retrieve needs --query or --queries");
    }
    std::string tsv = "query\tdoc\tscore\trank\n";
    for (std::size_t q = 0; q < contexts.size(); ++q) {
        const TokenSeq query = r.no_expand ? contexts[q].back() : expand_message(contexts[q], *index);
        const RetrievalResult result = retrieve_candidates(query, *index, r.k);
        tsv += format_retrieval_tsv(q, result);
    }
    if (config.out.empty()) {
        out << tsv;
    } else {
        write_file_atomic(fs::path(config.out) / "retrieval.tsv", tsv);
        out << fmt::format("{} queries written to {}\n", contexts.size(), (fs::path(config.out) / "retrieval.tsv").string());
    }
    return kExitOk;
}

// ---- visualize -----------------------------------------------------------------------

std::string grid_text(const Tensor& grid, std::size_t rows, std::size_t cols, const TokenSeq& row_labels,
                      const TokenSeq& col_labels) {
    auto join = [](const TokenSeq& labels) {
        std::string s;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            s += (i ? "\t" : "") + labels[i];
        }
        return s;
    };
    std::string out = fmt::format("{} {}\n{}\n{}\n", rows, cols, join(row_labels), join(col_labels));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out += fmt::format("{}{:.9g}", j ? "\t" : "", grid.at(i, j));
        }
        out += "\n";
    }
    return out;
}

int cmd_visualize(const CommonFlags& flags, const std::string& instance_line, std::size_t index, std::ostream& out) {
    std::set<std::string> explicit_keys;
    const RunConfig requested = resolve(flags, &explicit_keys);
    if (requested.out.empty()) {
        throw UsageError("visualize needs --out");
    }
    const Scorer scorer = load_scorer(requested, explicit_keys);
    if (!scorer.neural) {
        throw UsageError("visualize needs a neural checkpoint");
    }
    Instance inst;
    if (!instance_line.empty()) {
        inst = parse_line(instance_line, 1, "--instance", scorer.config.lowercase);
    } else {
        const auto data = load_split(requested.test, "test", scorer.config.lowercase);
        if (index >= data.size()) {
            throw UsageError(fmt::format("--index {} is out of range ({} instances)", index, data.size()));
        }
        inst = data[index];
    }
    const auto& loaded = *scorer.neural;
    const EncodedBatch batch = encode_batch(std::span(&inst, 1), loaded.vocab, loaded.model.config().encode_options());
    MatchTrace trace;
    const double g = loaded.model.score(batch.instance(0), &trace);
    const DecodedInstance tokens = decode_instance(batch, 0, loaded.vocab);

    const fs::path dir = requested.out;
    const bool scn = trace.matcher == MatcherKind::scn;
    nlohmann::json meta = {{"matcher", to_string(trace.matcher)},
                           {"head", to_string(loaded.model.config().head)},
                           {"probability", g},
                           {"response", tokens.response},
                           {"grid_format", "line 1: rows cols; line 2: row labels; line 3: column labels; then rows"},
                           {"turns", nlohmann::json::array()}};
    for (std::size_t k = 0; k < trace.turns.size(); ++k) {
        const TurnTrace& t = trace.turns[k];
        const TokenSeq& utt = tokens.utterances[k];
        nlohmann::json turn = {{"slot", t.slot}, {"utterance", utt}, {"files", nlohmann::json::array()}};
        auto emit = [&](const Tensor& grid, const std::string& name) {
            if (!grid.defined()) {
                return;
            }
            const std::string file = fmt::format("turn{}_{}.grid", k + 1, name);
            // SCN grids are utterance x response over padded length; SAN attention is response x utterance
            const std::string text = scn ? grid_text(grid, t.utterance_length, t.response_length, utt, tokens.response)
                                         : grid_text(grid, t.response_length, t.utterance_length, tokens.response, utt);
            write_file_atomic(dir / file, text);
            turn["files"].push_back(file);
        };
        emit(t.word_grid, scn ? "M1" : "A1");
        emit(t.segment_grid, scn ? "M2" : "A2");
        meta["turns"].push_back(turn);
    }
    std::string gates = fmt::format("{} 3\n", trace.turns.size());
    for (std::size_t k = 0; k < trace.turns.size(); ++k) {
        gates += fmt::format("{}turn{}", k ? "\t" : "", k + 1);
    }
    gates += "\nupdate_gate\treset_gate\tturn_weight\n";
    for (std::size_t k = 0; k < trace.turns.size(); ++k) {
        gates += fmt::format("{:.9g}\t{:.9g}\t{:.9g}\n", trace.update_gate_mean[k], trace.reset_gate_mean[k],
                             trace.turn_weights[k]);
    }
    write_file_atomic(dir / "gates.grid", gates);
    write_file_atomic(dir / "trace.json", meta.dump(2) + "\n");
    out << fmt::format("g = {:.6f}; {} turns traced into {}\n", g, trace.turns.size(), dir.string());
    return kExitOk;
}

// ---- gradcheck -----------------------------------------------------------------------

int cmd_gradcheck(const GradSuiteOptions& options, const std::string& fault, std::ostream& out) {
    if (!fault.empty()) {
        debug::inject_gradient_fault(fault, 2.0);
    }
    std::vector<GradSuiteEntry> entries;
    try {
        entries = run_gradient_suite(options);
    } catch (...) {
        debug::clear_gradient_fault();
        throw;
    }
    debug::clear_gradient_fault();
    out << format_gradient_suite(entries);
    const bool ok = std::all_of(entries.begin(), entries.end(), [](const GradSuiteEntry& e) { return e.passed; });
    return ok ? kExitOk : kExitFailure;
}

// ---- bench ---------------------------------------------------------------------------

struct BenchFlags {
    std::size_t batches = 100;
    std::string phase = "both";
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_bench(const CommonFlags& flags, const BenchFlags& b, std::ostream& out) {
    const RunConfig config = resolve(flags);
    if (b.batches == 0) {
        throw UsageError("--batches must be at least 1");
    }
    if (b.phase != "both" && b.phase != "train" && b.phase != "inference") {
        throw UsageError("--phase must be train, inference or both");
    }
    // synthetic batch with every utterance and response at full length
    Vocabulary vocab;
    for (int i = 0; i < 1000; ++i) {
        vocab.add(fmt::format("t{}", i));
    }
    Rng data_rng(config.seed);
    std::uniform_int_distribution<int> tok(0, 999);
    std::vector<Instance> instances(config.batch_size);
    for (std::size_t i = 0; i < instances.size(); ++i) {
        auto seq = [&] {
            TokenSeq s(config.max_len);
            for (auto& t : s) {
                t = fmt::format("t{}", tok(data_rng));
            }
            return s;
        };
        for (std::size_t k = 0; k < config.max_turns; ++k) {
            instances[i].utterances.push_back(seq());
        }
        instances[i].response = seq();
        instances[i].label = static_cast<int>(i % 2);
    }
    std::vector<std::size_t> rows(instances.size());
    std::iota(rows.begin(), rows.end(), 0);

    struct Timing {
        std::string name;
        double train_ms = 0.0;
        double infer_ms = 0.0;
    };
    std::vector<Timing> timings;
    for (auto kind : {ModelKind::scn, ModelKind::san}) {
        RunConfig c = config;
        c.model = kind;
        Rng rng(config.seed);
        MatchingModel model = MatchingModel::create(c.model_config(vocab.size()), rng);
        const EncodedBatch batch = encode_batch(instances, vocab, model.config().encode_options());
        auto params = parameters(model);
        std::vector<double> train_ms;
        std::vector<double> infer_ms;
        for (std::size_t i = 0; i < b.batches; ++i) {
            using clock = std::chrono::steady_clock;
            if (b.phase != "inference") {
                for (auto& p : params) {
                    p.zero_grad();
                }
                const auto t0 = clock::now();
                accumulate_batch_gradients(model, batch, rows, config.workers);
                train_ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
            }
            if (b.phase != "train") {
                const auto t0 = clock::now();
                score_instances(model, batch);
                infer_ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
            }
        }
        timings.push_back({to_string(kind), train_ms.empty() ? 0.0 : median(train_ms),
                           infer_ms.empty() ? 0.0 : median(infer_ms)});
    }
    out << fmt::format("batch {} instances, {} batches, d={} m={} turns={} len={} san_hidden={}\n", config.batch_size,
                       b.batches, config.embed_dim, config.encoder_hidden, config.max_turns, config.max_len,
                       config.san_hidden);
    out << fmt::format("{:<6} {:>16} {:>16}\n", "model", "train ms/batch", "infer ms/batch");
    for (const auto& t : timings) {
        out << fmt::format("{:<6} {:>16.1f} {:>16.1f}\n", t.name, t.train_ms, t.infer_ms);
    }
    if (b.phase != "inference") {
        out << fmt::format("ratio SCN:SAN train {:.3f}\n", timings[0].train_ms / timings[1].train_ms);
    }
    if (b.phase != "train") {
        out << fmt::format("ratio SCN:SAN inference {:.3f}\n", timings[0].infer_ms / timings[1].infer_ms);
    }
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-turn response selection: sequential matching models, evaluation and tf-idf retrieval"};
    app.require_subcommand(1);

    CommonFlags train_flags, eval_flags, score_flags, retrieve_flags, vis_flags, bench_flags;

    auto* train_cmd = app.add_subcommand("train", "train a model and write its checkpoint and history");
    add_common(train_cmd, train_flags);

    auto* eval_cmd = app.add_subcommand("evaluate", "score a test set and report ranking metrics");
    add_common(eval_cmd, eval_flags);

    auto* score_cmd = app.add_subcommand("score", "rank candidate responses for one context");
    add_common(score_cmd, score_flags);
    std::vector<std::string> context, candidates;
    std::string candidates_file;
    score_cmd->add_option("--context", context, "context utterances, oldest first");
    score_cmd->add_option("--candidate", candidates, "candidate responses");
    score_cmd->add_option("--candidates-file", candidates_file, "one candidate per line");

    auto* retrieve_cmd = app.add_subcommand("retrieve", "tf-idf candidate retrieval with message expansion");
    add_common(retrieve_cmd, retrieve_flags);
    RetrieveFlags rf;
    retrieve_cmd->add_option("--index", rf.index, "saved index file");
    retrieve_cmd->add_option("--build-from", rf.build_from, "dataset whose distinct responses are indexed");
    retrieve_cmd->add_option("--save-index", rf.save_index, "write the built index here");
    retrieve_cmd->add_option("--query", rf.query, "context utterances, oldest first");
    retrieve_cmd->add_option("--queries", rf.queries, "file with one tab-separated context per line");
    retrieve_cmd->add_option("--k", rf.k, "candidates per query");
    retrieve_cmd->add_flag("--no-expand", rf.no_expand, "query with the last utterance only");

    auto* vis_cmd = app.add_subcommand("visualize", "export similarity/attention grids and gate activations");
    add_common(vis_cmd, vis_flags);
    std::string instance_line;
    std::size_t instance_index = 0;
    vis_cmd->add_option("--instance", instance_line, "one dataset line: label<TAB>utterances...<TAB>response");
    vis_cmd->add_option("--index", instance_index, "instance number within --test");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op and micro model");
    GradSuiteOptions gopts;
    std::string fault;
    grad_cmd->add_option("--points", gopts.points, "random points per primitive op");
    grad_cmd->add_option("--model-points", gopts.model_points, "random instances per micro model");
    grad_cmd->add_option("--seed", gopts.seed);
    grad_cmd->add_option("--inject-fault", fault, "test hook: double the backward of this op");
    bool no_models = false;
    grad_cmd->add_flag("--no-models", no_models, "primitive ops only");

    auto* bench_cmd = app.add_subcommand("bench", "time SCN against SAN on a synthetic batch");
    add_common(bench_cmd, bench_flags);
    BenchFlags bf;
    bench_cmd->add_option("--batches", bf.batches, "timed batches per model");
    bench_cmd->add_option("--phase", bf.phase, "train, inference or both");

    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (train_cmd->parsed()) {
            return cmd_train(train_flags, out);
        }
        if (eval_cmd->parsed()) {
            return cmd_evaluate(eval_flags, out);
        }
        if (score_cmd->parsed()) {
            return cmd_score(score_flags, context, candidates, candidates_file, out);
        }
        if (retrieve_cmd->parsed()) {
            return cmd_retrieve(retrieve_flags, rf, out);
        }
        if (vis_cmd->parsed()) {
            return cmd_visualize(vis_flags, instance_line, instance_index, out);
        }
        if (grad_cmd->parsed()) {
            gopts.include_models = !no_models;
            return cmd_gradcheck(gopts, fault, out);
        }
        if (bench_cmd->parsed()) {
            return cmd_bench(bench_flags, bf, out);
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace smf
