// Randomized invariant checks; every property runs at least 100 cases.

#include "smf/errors.hpp"
#include "smf/grad_check.hpp"
#include "smf/metrics.hpp"
#include "smf/retrieval.hpp"
#include "smf/training.hpp"
#include "support/fixtures.hpp"
#include "support/reference.hpp"
#include "support/synthetic.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace smf;
using smf::testing::tiny_config;

namespace {

constexpr int kCases = 100;

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor random_tensor(Rng& rng, Shape shape, bool grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), grad);
    fill_uniform(t, rng, 1.0);
    return t;
}

ModelConfig random_config(Rng& rng) {
    const auto matcher = (rng() & 1) ? MatcherKind::scn : MatcherKind::san;
    const HeadMode heads[] = {HeadMode::last, HeadMode::static_average, HeadMode::dynamic_average};
    const Channels channels[] = {Channels::both, Channels::words, Channels::segments};
    return tiny_config(matcher, heads[uniform(rng, 0, 2)], channels[uniform(rng, 0, 2)]);
}

} // namespace

TEST_SUITE("properties") {

TEST_CASE("masked softmax rows are normalized and masked entries are zero") {
    Rng rng(101);
    for (int c = 0; c < kCases; ++c) {
        const std::size_t rows = uniform(rng, 1, 5), cols = uniform(rng, 1, 9);
        Tensor logits = random_tensor(rng, {rows, cols});
        for (double& x : logits.mutable_data()) {
            x *= 30.0;
        }
        std::vector<bool> mask(rows * cols);
        for (std::size_t i = 0; i < mask.size(); ++i) {
            mask[i] = uniform(rng, 0, 3) != 0;
        }
        const Tensor p = masked_softmax(logits, mask);
        for (std::size_t i = 0; i < rows; ++i) {
            double total = 0.0;
            bool any = false;
            for (std::size_t j = 0; j < cols; ++j) {
                const double v = p.at(i, j);
                if (!mask[i * cols + j]) {
                    REQUIRE(v == 0.0);
                }
                any = any || mask[i * cols + j];
                total += v;
            }
            REQUIRE(std::abs(total - (any ? 1.0 : 0.0)) <= 1e-12);
        }
    }
}

TEST_CASE("attention rows and dynamic weights sum to one") {
    Rng rng(102);
    for (int c = 0; c < kCases; ++c) {
        ModelConfig cfg = tiny_config(MatcherKind::san, HeadMode::dynamic_average);
        const MatchingModel m = MatchingModel::create(cfg, rng);
        const auto inst = smf::testing::random_encoded(rng, cfg, uniform(rng, 1, cfg.max_turns));
        MatchTrace trace;
        m.score(inst.view(), &trace);
        for (const auto& t : trace.turns) {
            for (const Tensor* grid : {&t.word_grid, &t.segment_grid}) {
                for (std::size_t i = 0; i < grid->rows(); ++i) {
                    double total = 0.0;
                    for (std::size_t j = 0; j < grid->cols(); ++j) {
                        total += grid->at(i, j);
                    }
                    REQUIRE(std::abs(total - 1.0) <= 1e-12);
                }
            }
        }
        REQUIRE(std::abs(std::accumulate(trace.turn_weights.begin(), trace.turn_weights.end(), 0.0) - 1.0) <= 1e-12);
    }
}

TEST_CASE("model outputs are valid probabilities") {
    Rng rng(103);
    for (int c = 0; c < kCases; ++c) {
        const ModelConfig cfg = random_config(rng);
        const MatchingModel m = MatchingModel::create(cfg, rng);
        const auto inst = smf::testing::random_encoded(rng, cfg, uniform(rng, 1, cfg.max_turns));
        NoGradGuard guard;
        const Tensor g = m.forward(inst.view());
        REQUIRE(g[1] > 0.0);
        REQUIRE(g[1] < 1.0);
        REQUIRE(std::abs(g[0] + g[1] - 1.0) <= 1e-12);
    }
}

TEST_CASE("leading pad utterances do not change the score") {
    Rng rng(104);
    for (int c = 0; c < kCases; ++c) {
        const ModelConfig cfg = random_config(rng);
        const MatchingModel m = MatchingModel::create(cfg, rng);
        const auto inst = smf::testing::random_encoded(rng, cfg, uniform(rng, 1, cfg.max_turns));
        const std::size_t extra = uniform(rng, 1, 6);
        const MatchingModel wide = smf::testing::widen(m, extra, rng);
        const auto padded = smf::testing::widen(inst, extra);
        const double a = m.score(inst.view());
        const double b = wide.score(padded.view());
        REQUIRE(std::abs(a - b) <= 1e-12);
    }
}

TEST_CASE("gru prefix property and bounded states") {
    Rng rng(105);
    for (int c = 0; c < kCases; ++c) {
        const std::size_t d = uniform(rng, 1, 5), m = uniform(rng, 1, 5), n = uniform(rng, 1, 8);
        const GruParams p = GruParams::random(d, m, rng, 1.0, rng() & 1);
        const Tensor x = random_tensor(rng, {n, d});
        const Tensor full = gru_forward(x, p);
        const std::size_t k = uniform(rng, 1, n);
        const Tensor prefix = gru_forward(slice_rows(x, 0, k), p);
        for (std::size_t i = 0; i < k * m; ++i) {
            REQUIRE(prefix[i] == full[i]);
        }
        for (double v : full.data()) {
            REQUIRE(std::abs(v) < 1.0);
        }
    }
}

TEST_CASE("metrics are invariant under strictly increasing score maps") {
    Rng rng(106);
    for (int c = 0; c < kCases; ++c) {
        RankedRun run;
        for (int g = 0; g < 5; ++g) {
            run.push_back(smf::testing::random_group(rng, 10, uniform(rng, 1, 3), rng() & 1));
        }
        RankedRun mapped = run;
        const int kind = static_cast<int>(uniform(rng, 0, 2));
        for (auto& g : mapped) {
            for (auto& cand : g.candidates) {
                cand.score = kind == 0 ? std::exp(3.0 * cand.score) : kind == 1 ? 7.0 * cand.score - 2.0
                                                                                : std::pow(cand.score, 3.0) + 1.0;
            }
        }
        for (auto mode : {EvalMode::ubuntu, EvalMode::douban}) {
            const EvalReport a = evaluate_run(run, mode);
            const EvalReport b = evaluate_run(mapped, mode);
            REQUIRE(a.metrics.size() == b.metrics.size());
            for (std::size_t i = 0; i < a.metrics.size(); ++i) {
                REQUIRE(a.metrics[i].value == b.metrics[i].value);
                REQUIRE(a.metrics[i].value >= 0.0);
                REQUIRE(a.metrics[i].value <= 1.0);
            }
        }
    }
}

TEST_CASE("metrics match an exhaustive reference") {
    Rng rng(107);
    for (int c = 0; c < 500; ++c) {
        const std::size_t n = uniform(rng, 2, 8);
        const RankedGroup g = smf::testing::random_group(rng, n, uniform(rng, 1, n), rng() & 1);
        REQUIRE(std::abs(average_precision(g) - reference::average_precision(g)) <= 1e-12);
        REQUIRE(std::abs(reciprocal_rank(g) - reference::reciprocal_rank(g)) <= 1e-12);
        REQUIRE(precision_at_1(g) == reference::precision_at_1(g));
        for (std::size_t k = 1; k <= n; ++k) {
            REQUIRE(std::abs(recall_at_k(g, k) - reference::recall_at_k(g, k)) <= 1e-12);
        }
        if (g.positives() == 1) {
            for (std::size_t k = 1; k <= n; ++k) {
                REQUIRE(recall_n_at_k(g, n, k) == reference::recall_at_k(g, k));
            }
        } else {
            REQUIRE_THROWS_AS(recall_n_at_k(g, n, 1), ProtocolError);
        }
    }
}

TEST_CASE("retrieval equals exhaustive cosine ranking") {
    Rng rng(108);
    for (int c = 0; c < kCases; ++c) {
        const std::size_t n = uniform(rng, 1, c < 10 ? 1000 : 150);
        const std::size_t vocab = uniform(rng, 5, 80);
        std::vector<TokenSeq> docs;
        std::vector<IndexedDocument> indexed;
        for (std::size_t i = 0; i < n; ++i) {
            docs.push_back(smf::testing::random_tokens(rng, vocab, 1, 8));
            indexed.push_back({docs.back(), i});
        }
        const InvertedIndex idx = InvertedIndex::build(indexed);
        const TokenSeq query = smf::testing::random_tokens(rng, vocab + 5, 1, 6);
        const std::size_t k = uniform(rng, 1, n + 3);
        const auto got = retrieve_candidates(query, idx, k);
        const auto want = reference::brute_force_retrieve(docs, query, k);
        REQUIRE(got.hits.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            REQUIRE(got.hits[i].doc == want[i].doc);
            REQUIRE(got.hits[i].score == want[i].score);
        }
        REQUIRE(got.k_exceeds_corpus == (k > n));
    }
}

TEST_CASE("cosine is symmetric") {
    Rng rng(109);
    std::vector<IndexedDocument> docs;
    for (std::size_t i = 0; i < 50; ++i) {
        docs.push_back({smf::testing::random_tokens(rng, 30, 1, 10), i});
    }
    const InvertedIndex idx = InvertedIndex::build(docs);
    for (int c = 0; c < kCases; ++c) {
        const auto a = idx.vectorize(smf::testing::random_tokens(rng, 35, 0, 12));
        const auto b = idx.vectorize(smf::testing::random_tokens(rng, 35, 0, 12));
        const double ab = cosine(a, b);
        REQUIRE(std::abs(ab - cosine(b, a)) <= 1e-12);
        REQUIRE(ab >= 0.0);
        REQUIRE(ab <= 1.0);
    }
}

TEST_CASE("backward is linear in the loss") {
    Rng rng(110);
    for (int c = 0; c < kCases; ++c) {
        const std::size_t r = uniform(rng, 1, 4), k = uniform(rng, 1, 4), q = uniform(rng, 1, 4);
        Tensor x = random_tensor(rng, {r, k}, true);
        const Tensor w = random_tensor(rng, {k, q});
        auto loss1 = [&] { return sum(tanh(matmul(x, w))); };
        auto loss2 = [&] { return sum(hadamard(sigmoid(x), x)); };
        backward(loss1());
        std::vector<double> g1(x.grad().begin(), x.grad().end());
        x.zero_grad();
        backward(loss2());
        std::vector<double> g2(x.grad().begin(), x.grad().end());
        x.zero_grad();
        backward(add(loss1(), loss2()));
        for (std::size_t i = 0; i < g1.size(); ++i) {
            REQUIRE(std::abs(x.grad()[i] - (g1[i] + g2[i])) <= 1e-12 * (1.0 + std::abs(g1[i] + g2[i])));
        }
    }
}

TEST_CASE("zero-bias convolution scales with a positive input factor") {
    Rng rng(111);
    for (int c = 0; c < kCases; ++c) {
        const std::size_t ch = uniform(rng, 1, 3), h = uniform(rng, 2, 7), w = uniform(rng, 2, 7);
        const std::size_t kh = uniform(rng, 1, h), kw = uniform(rng, 1, w), f = uniform(rng, 1, 3);
        const Tensor x = random_tensor(rng, {ch, h, w});
        const Tensor kernels = random_tensor(rng, {f, ch, kh, kw});
        const Tensor bias = Tensor::zeros({1, f});
        const double scale_by = 0.1 + 5.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const Tensor a = conv2d(scale(x, scale_by), kernels, bias);
        const Tensor b = conv2d(x, kernels, bias);
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(std::abs(a[i] - scale_by * b[i]) <= 1e-12 * (1.0 + std::abs(a[i])));
        }
    }
}

TEST_CASE("encoding round trip, id range and pad consistency") {
    Rng rng(112);
    for (int c = 0; c < kCases; ++c) {
        std::vector<Instance> data(uniform(rng, 1, 4));
        for (auto& inst : data) {
            inst.label = static_cast<int>(rng() & 1);
            const std::size_t turns = uniform(rng, 1, 13);
            for (std::size_t t = 0; t < turns; ++t) {
                inst.utterances.push_back(smf::testing::random_tokens(rng, 40, 0, 60));
            }
            inst.response = smf::testing::random_tokens(rng, 40, 1, 60);
        }
        const Vocabulary v = build_vocabulary(data);
        const EncodedBatch b = encode_batch(data, v);
        REQUIRE(encode_batch(data, v).contexts == b.contexts);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const EncodedInstance e = b.instance(i);
            const DecodedInstance dec = decode_instance(b, i, v);
            const std::size_t kept = std::min<std::size_t>(10, data[i].utterances.size());
            REQUIRE(dec.utterances.size() == kept);
            for (std::size_t k = 0; k < kept; ++k) {
                const TokenSeq& src = data[i].utterances[data[i].utterances.size() - kept + k];
                const TokenSeq tail(src.end() - static_cast<std::ptrdiff_t>(std::min<std::size_t>(50, src.size())),
                                    src.end());
                REQUIRE(dec.utterances[k] == tail);
            }
            for (std::size_t s = 0; s < e.max_turns; ++s) {
                const auto u = e.utterance(s);
                for (std::size_t j = 0; j < u.size(); ++j) {
                    REQUIRE(u[j] >= 0);
                    REQUIRE(static_cast<std::size_t>(u[j]) < v.size());
                    REQUIRE((u[j] == kPadId) == (j >= e.utterance_length(s)));
                }
            }
        }
    }
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    Rng rng(113);
    smf::testing::CorpusShape shape;
    shape.contexts = 2;
    shape.vocab = 12;
    shape.markers = 4;
    shape.max_turns = 3;
    shape.max_len = 5;
    for (int c = 0; c < kCases; ++c) {
        const auto data = smf::testing::copy_token_corpus(shape, rng());
        const Vocabulary v = build_vocabulary(data);
        ModelConfig cfg = random_config(rng);
        cfg.vocab_size = v.size();
        MatchingModel m = MatchingModel::create(cfg, rng);
        std::vector<double> before;
        m.visit([&](const std::string&, const Tensor& t) { before.insert(before.end(), t.data().begin(), t.data().end()); });
        TrainConfig tc;
        tc.max_epochs = 1;
        tc.batch_size = 2;
        tc.adam.lr = 0.0;
        train(m, data, data, v, tc);
        std::vector<double> after;
        m.visit([&](const std::string&, const Tensor& t) { after.insert(after.end(), t.data().begin(), t.data().end()); });
        REQUIRE(before == after);
    }
}

TEST_CASE("batch loss is the sum of per-instance losses") {
    Rng rng(114);
    for (int c = 0; c < kCases; ++c) {
        const ModelConfig cfg = random_config(rng);
        MatchingModel m = MatchingModel::create(cfg, rng);
        std::vector<smf::testing::OwnedInstance> owned;
        EncodedBatch batch;
        batch.max_turns = cfg.max_turns;
        batch.max_len = cfg.max_len;
        const std::size_t n = uniform(rng, 1, 4);
        double separate = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto one = smf::testing::random_encoded(rng, cfg, uniform(rng, 1, cfg.max_turns));
            one.batch.labels[0] = static_cast<int>(rng() & 1);
            {
                NoGradGuard guard;
                separate += cross_entropy(m.forward(one.view()), one.batch.labels[0]).item();
            }
            auto append = [](std::vector<int>& dst, const std::vector<int>& src) {
                dst.insert(dst.end(), src.begin(), src.end());
            };
            append(batch.contexts, one.batch.contexts);
            append(batch.utterance_lengths, one.batch.utterance_lengths);
            append(batch.turn_counts, one.batch.turn_counts);
            append(batch.responses, one.batch.responses);
            append(batch.response_lengths, one.batch.response_lengths);
            append(batch.labels, one.batch.labels);
        }
        std::vector<std::size_t> rows(n);
        std::iota(rows.begin(), rows.end(), 0);
        const double together = accumulate_batch_gradients(m, batch, rows, 1 + (rng() % 2));
        REQUIRE(std::abs(together - separate) <= 1e-10);
    }
}

} // TEST_SUITE
