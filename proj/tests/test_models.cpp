#include "smf/grad_check.hpp"
#include "smf/layers.hpp"
#include "smf/model.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace smf;
using smf::testing::tiny_config;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Tensor t = Tensor::zeros({r, c});
    fill_uniform(t, rng, 1.0);
    return t;
}

void zero(Tensor& t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); }

} // namespace

TEST_SUITE("layers") {

TEST_CASE("embedding lookup") {
    Rng rng(3);
    EmbeddingTable table = EmbeddingTable::random(6, 3, rng);
    const std::vector<int> pads(4, kPadId);
    const Tensor e = embed(pads, table);
    CHECK(e.shape() == Shape{4, 3});
    for (double v : e.data()) {
        CHECK(v == 0.0);
    }
    const std::vector<int> one{4};
    const Tensor row = embed(one, table);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(row[j] == table.weights.at(4, j));
    }
    const std::vector<int> bad{6};
    CHECK_THROWS_AS(embed(bad, table), VocabularyError);
}

TEST_CASE("embedding gradient scatters") {
    Rng rng(4);
    EmbeddingTable table = EmbeddingTable::random(5, 2, rng);
    table.weights.set_requires_grad(true);
    const std::vector<int> ids{3, 3};
    backward(sum(embed(ids, table)));
    for (std::size_t r = 0; r < 5; ++r) {
        for (std::size_t j = 0; j < 2; ++j) {
            CHECK(table.weights.grad()[r * 2 + j] == (r == 3 ? 2.0 : 0.0));
        }
    }
    const auto check = grad_check(
        [&](const std::vector<Tensor>& in) {
            EmbeddingTable t{in[0], kPadId};
            return sum(tanh(embed(ids, t)));
        },
        {table.weights});
    CHECK(check.max_relative_error < 1e-6);
}

TEST_CASE("gru") {
    SUBCASE("all-zero parameters give zero states") {
        Rng init(1);
        GruParams p = GruParams::random(3, 2, init);
        p.visit("g", [](const std::string&, Tensor& t) { zero(t); });
        Rng rng(2);
        const Tensor h = gru_forward(random_matrix(rng, 4, 3), p);
        for (double v : h.data()) {
            CHECK(v == 0.0);
        }
    }
    SUBCASE("empty sequence") {
        Rng rng(1);
        const GruParams p = GruParams::random(3, 2, rng);
        CHECK(gru_forward(Tensor::zeros({0, 3}), p).rows() == 0);
    }
    SUBCASE("single scalar step") {
        Rng rng(1);
        GruParams p = GruParams::random(1, 1, rng);
        p.visit("g", [](const std::string&, Tensor& t) { zero(t); });
        p.W_h.mutable_data()[0] = 1.0;
        const Tensor h = gru_forward(Tensor::scalar(1.0), p);
        CHECK(h.item() == doctest::Approx(0.5 * std::tanh(1.0)).epsilon(1e-14));
        CHECK(h.item() == doctest::Approx(0.38080).epsilon(1e-4));
    }
    SUBCASE("width mismatch") {
        Rng rng(1);
        const GruParams p = GruParams::random(3, 2, rng);
        CHECK_THROWS_AS(gru_forward(Tensor::zeros({2, 4}), p), ShapeError);
    }
    SUBCASE("five-step gradient check") {
        Rng rng(9);
        GruParams p = GruParams::random(3, 4, rng, 0.5);
        std::vector<Tensor> inputs{random_matrix(rng, 5, 3).clone(true)};
        p.visit("g", [&](const std::string&, Tensor& t) {
            t.set_requires_grad(true);
            inputs.push_back(t);
        });
        const auto r = grad_check(
            [&](const std::vector<Tensor>& in) {
                GruParams q = p;
                std::size_t i = 1;
                q.visit("g", [&](const std::string&, Tensor& t) { t = in[i++]; });
                return sum(gru_forward(in[0], q));
            },
            inputs);
        CHECK(r.max_relative_error < 1e-4);
    }
}

} // TEST_SUITE

TEST_SUITE("models") {

TEST_CASE("word similarity matrix") {
    Rng rng(5);
    const Tensor u = random_matrix(rng, 4, 3);
    const Tensor m = word_similarity_matrix(u, u);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(m.at(i, j) == m.at(j, i));
        }
    }
    const Tensor padded = concat_rows({u, Tensor::zeros({1, 3})});
    const Tensor mp = word_similarity_matrix(padded, u);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(mp.at(4, j) == 0.0);
    }
    const Tensor col = word_similarity_matrix(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{2, 3}}));
    CHECK(col.shape() == Shape{2, 1});
    CHECK(col.at(0, 0) == 2.0);
    CHECK(col.at(1, 0) == 3.0);
    CHECK_THROWS_AS(word_similarity_matrix(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("segment similarity matrix") {
    Rng rng(6);
    const Tensor h = random_matrix(rng, 3, 2);
    const Tensor z = segment_similarity_matrix(h, random_matrix(rng, 4, 2), Tensor::zeros({2, 2}));
    for (double v : z.data()) {
        CHECK(v == 0.0);
    }
    const Tensor g = segment_similarity_matrix(h, h, Tensor::matrix({{1, 0}, {0, 1}}));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(g.at(i, i) > 0.0);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(g.at(i, j) == doctest::Approx(g.at(j, i)).epsilon(1e-15));
        }
    }
    const Tensor v = segment_similarity_matrix(Tensor::matrix({{1, 2}}), Tensor::matrix({{3, 4}}),
                                               Tensor::matrix({{0, 1}, {1, 0}}));
    CHECK(v.item() == 10.0);
    CHECK_THROWS_AS(segment_similarity_matrix(h, h, Tensor::zeros({3, 3})), ShapeError);
}

TEST_CASE("scn match on all-pad input is the bias-derived constant") {
    Rng rng(7);
    const ModelConfig c = tiny_config(MatcherKind::scn, HeadMode::last);
    MatchingModel m = MatchingModel::create(c, rng);
    zero(m.scn.A);
    fill_uniform(m.scn.conv[0].bias, rng, 1.0);
    const Tensor zeros_e = Tensor::zeros({c.max_len, c.embed_dim});
    const Tensor zeros_h = Tensor::zeros({c.max_len, c.encoder_hidden});
    const ScnMatch out = scn_match(zeros_e, zeros_h, zeros_e, zeros_h, m.scn, c);
    // every pooled cell of feature map f is relu(bias_f)
    const auto [fh, fw] = *c.scn_feature_size();
    std::vector<double> flat;
    for (std::size_t f = 0; f < c.conv_kernels; ++f) {
        for (std::size_t k = 0; k < fh * fw; ++k) {
            flat.push_back(std::max(0.0, m.scn.conv[0].bias[f]));
        }
    }
    for (std::size_t j = 0; j < c.scn_match_dim; ++j) {
        double expect = m.scn.b_c[j];
        for (std::size_t i = 0; i < flat.size(); ++i) {
            expect += flat[i] * m.scn.W_c.at(i, j);
        }
        CHECK(out.vector[j] == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("scn match is deterministic and differentiable in A") {
    Rng rng(8);
    const ModelConfig c = tiny_config(MatcherKind::scn, HeadMode::last);
    MatchingModel m = MatchingModel::create(c, rng);
    fill_uniform(m.scn.conv[0].bias, rng, 0.5);
    const Tensor ue = random_matrix(rng, c.max_len, c.embed_dim), re = random_matrix(rng, c.max_len, c.embed_dim);
    const Tensor uh = random_matrix(rng, c.max_len, c.encoder_hidden), rh = random_matrix(rng, c.max_len, c.encoder_hidden);
    const auto a = scn_match(ue, uh, re, rh, m.scn, c).vector;
    const auto b = scn_match(ue, uh, re, rh, m.scn, c).vector;
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    Tensor A = m.scn.A.clone(true);
    const auto r = grad_check(
        [&](const std::vector<Tensor>& in) {
            ScnParams p = m.scn;
            p.A = in[0];
            return sum(scn_match(ue, uh, re, rh, p, c).vector);
        },
        {A});
    CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("san word interaction") {
    Rng rng(10);
    const ModelConfig c = tiny_config(MatcherKind::san, HeadMode::last);
    MatchingModel m = MatchingModel::create(c, rng);
    const Tensor u = random_matrix(rng, c.max_len, c.embed_dim);
    Tensor r = random_matrix(rng, 3, c.embed_dim);
    SUBCASE("constant logits spread evenly over the unmasked words") {
        SanParams p = m.san;
        zero(p.W_att1);
        const Interaction out = san_word_interaction(u, r, 4, p);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < c.max_len; ++j) {
                CHECK(out.attention.at(i, j) == doctest::Approx(j < 4 ? 0.25 : 0.0).epsilon(1e-15));
            }
        }
    }
    SUBCASE("zero response word gives a zero row") {
        std::fill_n(r.mutable_data().begin() + c.embed_dim, c.embed_dim, 0.0);
        const Interaction out = san_word_interaction(u, r, 4, m.san);
        for (std::size_t j = 0; j < c.embed_dim; ++j) {
            CHECK(out.rows.at(1, j) == 0.0);
        }
    }
    SUBCASE("a single unmasked word is copied exactly") {
        const Interaction out = san_word_interaction(u, r, 1, m.san);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < c.embed_dim; ++j) {
                CHECK(out.rows.at(i, j) == u.at(0, j) * r.at(i, j));
            }
        }
    }
}

TEST_CASE("san segment interaction") {
    Rng rng(11);
    const ModelConfig c = tiny_config(MatcherKind::san, HeadMode::last);
    MatchingModel m = MatchingModel::create(c, rng);
    const Tensor hu = random_matrix(rng, 4, c.encoder_hidden);
    Tensor hr = random_matrix(rng, 2, c.encoder_hidden);
    std::fill_n(hr.mutable_data().begin(), c.encoder_hidden, 0.0);
    const Interaction multi = san_segment_interaction(hu, hr, 4, m.san);
    for (std::size_t j = 0; j < c.encoder_hidden; ++j) {
        CHECK(multi.rows.at(0, j) == 0.0);
    }
    const Interaction single = san_segment_interaction(hu, hr, 1, m.san);
    for (std::size_t j = 0; j < c.encoder_hidden; ++j) {
        CHECK(single.rows.at(1, j) == hu.at(0, j) * hr.at(1, j));
    }
}

TEST_CASE("san match") {
    Rng rng(12);
    const ModelConfig c = tiny_config(MatcherKind::san, HeadMode::last);
    MatchingModel m = MatchingModel::create(c, rng);
    const Tensor ue = random_matrix(rng, 3, c.embed_dim), uh = random_matrix(rng, 3, c.encoder_hidden);
    SUBCASE("zero response rows give a zero vector") {
        const SanMatch out = san_match(ue, uh, Tensor::zeros({2, c.embed_dim}), Tensor::zeros({2, c.encoder_hidden}), 3,
                                       2, m.san, c);
        for (double v : out.vector.data()) {
            CHECK(v == 0.0);
        }
    }
    SUBCASE("deterministic and differentiable in W_att1") {
        const Tensor re = random_matrix(rng, 2, c.embed_dim), rh = random_matrix(rng, 2, c.encoder_hidden);
        const auto a = san_match(ue, uh, re, rh, 3, 2, m.san, c).vector;
        const auto b = san_match(ue, uh, re, rh, 3, 2, m.san, c).vector;
        CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
        Tensor W = m.san.W_att1.clone(true);
        const auto r = grad_check(
            [&](const std::vector<Tensor>& in) {
                SanParams p = m.san;
                p.W_att1 = in[0];
                return sum(san_match(ue, uh, re, rh, 3, 2, p, c).vector);
            },
            {W});
        CHECK(r.max_relative_error < 1e-4);
    }
    SUBCASE("segments-only rows are m wide") {
        const ModelConfig s = tiny_config(MatcherKind::san, HeadMode::last, Channels::segments);
        Rng r2(1);
        const MatchingModel ms = MatchingModel::create(s, r2);
        CHECK(ms.san.aggregate.input_dim() == s.encoder_hidden);
        const ModelConfig w = tiny_config(MatcherKind::san, HeadMode::last, Channels::words);
        CHECK(MatchingModel::create(w, r2).san.aggregate.input_dim() == w.embed_dim);
        CHECK(m.san.aggregate.input_dim() == c.embed_dim + c.encoder_hidden);
    }
}

TEST_CASE("accumulator") {
    Rng rng(13);
    AccumulatorParams p{GruParams::random(3, 2, rng)};
    const Accumulation one = accumulate_matching({random_matrix(rng, 1, 3)}, p);
    CHECK(one.states.rows() == 1);
    CHECK(one.update_gate_mean.size() == 1);
    p.gru.visit("a", [](const std::string&, Tensor& t) { zero(t); });
    const Accumulation z = accumulate_matching({Tensor::zeros({1, 3}), Tensor::zeros({1, 3})}, p);
    for (double v : z.states.data()) {
        CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(accumulate_matching({Tensor::zeros({1, 4})}, p), ShapeError);
}

TEST_CASE("prediction heads") {
    Rng rng(14);
    const Tensor states = random_matrix(rng, 3, 3);
    const Tensor last_u = random_matrix(rng, 1, 4);
    const ModelConfig base = tiny_config(MatcherKind::scn, HeadMode::last);
    for (auto mode : {HeadMode::last, HeadMode::static_average, HeadMode::dynamic_average}) {
        ModelConfig c = base;
        c.head = mode;
        const MatchingModel m = MatchingModel::create(c, rng);
        const Tensor g = predict(states, 1, last_u, m.head);
        CHECK(g.size() == 2);
        CHECK(g[0] + g[1] == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(g[1] > 0.0);
        CHECK(g[1] < 1.0);
    }
    SUBCASE("one-hot static weights reproduce the last head") {
        ModelConfig c = base;
        c.head = HeadMode::static_average;
        MatchingModel s = MatchingModel::create(c, rng);
        zero(s.head.position_weights);
        s.head.position_weights.mutable_data()[3] = 1.0;
        PredictionHead last = s.head;
        last.mode = HeadMode::last;
        const Tensor a = predict(states, 1, {}, s.head);
        const Tensor b = predict(states, 1, {}, last);
        CHECK(a[1] == doctest::Approx(b[1]).epsilon(1e-15));
    }
    SUBCASE("dynamic head with one state") {
        ModelConfig c = base;
        c.head = HeadMode::dynamic_average;
        const MatchingModel d = MatchingModel::create(c, rng);
        std::vector<double> alpha;
        const Tensor one = slice_rows(states, 2, 1);
        const Tensor g = predict(one, 3, last_u, d.head, &alpha);
        REQUIRE(alpha.size() == 1);
        CHECK(alpha[0] == 1.0);
        const Tensor direct = softmax_rows(add(matmul(one, d.head.W_out), d.head.b_out));
        CHECK(g[1] == doctest::Approx(direct[1]).epsilon(1e-15));
    }
    SUBCASE("missing parameters") {
        ModelConfig c = base;
        c.head = HeadMode::dynamic_average;
        PredictionHead h = MatchingModel::create(c, rng).head;
        CHECK_THROWS_AS(predict(states, 1, {}, h), ConfigError);
        h.t_s = {};
        CHECK_THROWS_AS(predict(states, 1, last_u, h), ConfigError);
    }
}

TEST_CASE("score is deterministic and a probability") {
    Rng rng(15);
    for (auto matcher : {MatcherKind::scn, MatcherKind::san}) {
        const ModelConfig c = tiny_config(matcher, HeadMode::dynamic_average);
        const MatchingModel m = MatchingModel::create(c, rng);
        const auto inst = smf::testing::random_encoded(rng, c, 3);
        const double a = m.score(inst.view());
        CHECK(a == m.score(inst.view()));
        CHECK(a > 0.0);
        CHECK(a < 1.0);
    }
}

TEST_CASE("single-turn reduction") {
    Rng rng(16);
    for (auto matcher : {MatcherKind::scn, MatcherKind::san}) {
        const ModelConfig c = tiny_config(matcher, HeadMode::last);
        const MatchingModel m = MatchingModel::create(c, rng);
        const auto inst = smf::testing::random_encoded(rng, c, 1);
        const auto e = inst.view();
        const std::size_t slot = e.first_real_slot();
        const std::vector<int> u(e.utterance(slot).begin(), e.utterance(slot).begin() + e.utterance_length(slot));
        const std::vector<int> r(e.response.begin(), e.response.begin() + e.response_length);
        NoGradGuard guard;
        const Accumulation acc = accumulate_matching({m.match_vector(u, r)}, m.accumulator);
        CHECK(acc.states.rows() == 1);
        const double direct = predict(acc.states, slot, {}, m.head)[1];
        CHECK(m.score(e) == doctest::Approx(direct).epsilon(1e-14));
    }
}

TEST_CASE("channel ablation") {
    Rng rng(17);
    const ModelConfig full = tiny_config(MatcherKind::scn, HeadMode::last);
    CHECK(full == tiny_config(MatcherKind::scn, HeadMode::last, Channels::both));
    MatchingModel a = MatchingModel::create(full, rng);
    MatchingModel w = MatchingModel::create(tiny_config(MatcherKind::scn, HeadMode::last, Channels::words), rng);
    CHECK(w.scn.conv[0].kernels.shape()[1] == 1);
    CHECK(a.scn.conv[0].kernels.shape()[1] == 2);
    fill_uniform(a.scn.conv[0].bias, rng, 1.0);
    // share every parameter whose shape does not depend on the channel count
    std::map<std::string, Tensor> src;
    a.visit([&](const std::string& n, Tensor& t) { src[n] = t; });
    w.visit([&](const std::string& n, Tensor& t) {
        if (src.count(n) && src[n].shape() == t.shape()) {
            std::copy(src[n].data().begin(), src[n].data().end(), t.mutable_data().begin());
        }
    });
    const std::vector<int> pads(full.max_len, kPadId);
    NoGradGuard guard;
    const Tensor va = a.match_vector(pads, pads);
    const Tensor vw = w.match_vector(pads, pads);
    for (std::size_t j = 0; j < va.size(); ++j) {
        CHECK(va[j] == vw[j]);
    }
}

TEST_CASE("model configuration validation") {
    ModelConfig c = tiny_config(MatcherKind::scn, HeadMode::last);
    c.conv_window = 9;
    Rng rng(1);
    CHECK_THROWS_AS(MatchingModel::create(c, rng), ConfigError);
    CHECK_THROWS_AS(parse_head("middle"), ConfigError);
    CHECK(parse_head(to_string(HeadMode::dynamic_average)) == HeadMode::dynamic_average);
}

TEST_CASE("trace records one grid pair and gate value per real turn") {
    Rng rng(18);
    for (auto matcher : {MatcherKind::scn, MatcherKind::san}) {
        const ModelConfig c = tiny_config(matcher, HeadMode::last);
        const MatchingModel m = MatchingModel::create(c, rng);
        const auto inst = smf::testing::random_encoded(rng, c, 3);
        MatchTrace trace;
        m.score(inst.view(), &trace);
        REQUIRE(trace.turns.size() == 3);
        CHECK(trace.update_gate_mean.size() == 3);
        for (const auto& t : trace.turns) {
            CHECK(t.word_grid.defined());
            CHECK(t.segment_grid.defined());
        }
    }
}

} // TEST_SUITE
