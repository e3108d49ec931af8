#include "smf/corpus.hpp"

#include <doctest.h>

#include <sstream>

using namespace smf;

namespace {

std::vector<Instance> parse(const std::string& text) {
    std::istringstream in(text);
    return parse_dataset(in, "mem");
}

std::string context_line(int label, std::size_t turns, const std::string& response) {
    std::string line = std::to_string(label);
    for (std::size_t t = 1; t <= turns; ++t) {
        line += "\tu" + std::to_string(t);
    }
    return line + "\t" + response + "\n";
}

} // namespace

TEST_SUITE("corpus") {

TEST_CASE("parse a single line") {
    const auto d = parse("1\thello\thi there\n");
    REQUIRE(d.size() == 1);
    CHECK(d[0].label == 1);
    CHECK(d[0].utterances == std::vector<TokenSeq>{{"hello"}});
    CHECK(d[0].response == TokenSeq{"hi", "there"});
    CHECK(d[0].line == 1);
}

TEST_CASE("lowercasing and whitespace tokens") {
    const auto d = parse("0\tHello   World\tOK\n");
    CHECK(d[0].utterances[0] == TokenSeq{"hello", "world"});
    std::istringstream in("0\tHello\tOK\n");
    CHECK(parse_dataset(in, "mem", false)[0].utterances[0] == TokenSeq{"Hello"});
}

TEST_CASE("parse errors carry the line number") {
    try {
        parse("1\ta\tb\n2\ta\tb\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS(parse("1\tonly\n"), ParseError);
    CHECK_THROWS_AS(parse(""), DataError);
    CHECK_THROWS_WITH_AS(parse_dataset(std::filesystem::path("/nonexistent/x.tsv")), doctest::Contains("dataset not found"),
                         DataError);
}

TEST_CASE("evaluation groups") {
    std::string text;
    text += context_line(1, 3, "good");
    for (int i = 0; i < 9; ++i) {
        text += context_line(0, 3, "bad" + std::to_string(i));
    }
    text += context_line(1, 2, "a");
    text += context_line(1, 2, "b");
    text += context_line(0, 2, "c");
    const auto d = parse(text);
    const auto groups = group_by_context(d);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].size() == 10);
    int positives = 0;
    for (auto i : groups[0]) {
        positives += d[i].label;
    }
    CHECK(positives == 1);
    CHECK(groups[1].size() == 3);
    CHECK(d[groups[1][0]].label + d[groups[1][1]].label == 2);
}

TEST_CASE("vocabulary") {
    const auto train = parse("1\ta b b\tc\n0\ta\td\n");
    const Vocabulary v = build_vocabulary(train);
    CHECK(v.token(kPadId) == "<pad>");
    CHECK(v.token(kUnkId) == "<unk>");
    CHECK(v.id("<pad>") == kUnkId); // literal text never becomes padding
    for (auto t : {"a", "b", "c", "d"}) {
        CHECK(v.contains(t));
    }
    CHECK(v.id("validation-only") == kUnkId);
    const Vocabulary v2 = build_vocabulary(train);
    CHECK(v.tokens() == v2.tokens());
    const Vocabulary thresholded = build_vocabulary(train, 2);
    CHECK(thresholded.contains("a"));
    CHECK(thresholded.contains("b"));
    CHECK_FALSE(thresholded.contains("c"));
    CHECK_THROWS_AS(v.token(99), VocabularyError);
}

TEST_CASE("pretrained embeddings") {
    const auto train = parse("1\talpha beta\tgamma\n");
    const Vocabulary v = build_vocabulary(train);
    Rng rng(1);
    SUBCASE("copy semantics and pad row") {
        std::istringstream in("3 2\nbeta 0.5 -1.25\n<pad> 9 9\nzzz 1 1\n");
        EmbeddingLoadReport report;
        const EmbeddingTable t = load_pretrained_embeddings(in, "emb", v, 2, rng, 0.1, &report);
        CHECK(report.file_rows == 3);
        CHECK(report.matched == 1);
        CHECK(t.weights.at(v.id("beta"), 0) == 0.5);
        CHECK(t.weights.at(v.id("beta"), 1) == -1.25);
        CHECK(t.weights.at(kPadId, 0) == 0.0);
        CHECK(t.weights.at(kPadId, 1) == 0.0);
    }
    SUBCASE("no overlap gives the seeded random table") {
        std::istringstream in("1 2\nzzz 1 1\n");
        const EmbeddingTable a = load_pretrained_embeddings(in, "emb", v, 2, rng);
        Rng again(1);
        std::istringstream in2("1 2\nzzz 1 1\n");
        const EmbeddingTable b = load_pretrained_embeddings(in2, "emb", v, 2, again);
        CHECK(std::equal(a.weights.data().begin(), a.weights.data().end(), b.weights.data().begin()));
    }
    SUBCASE("dimension mismatch") {
        std::istringstream in("1 3\nbeta 1 2 3\n");
        CHECK_THROWS_AS(load_pretrained_embeddings(in, "emb", v, 2, rng), ConfigError);
    }
    SUBCASE("malformed row") {
        std::istringstream in("1 2\nbeta 1 x\n");
        CHECK_THROWS_AS(load_pretrained_embeddings(in, "emb", v, 2, rng), ParseError);
    }
}

TEST_CASE("encoding keeps the last turns and tail tokens") {
    const auto twelve = parse(context_line(1, 12, "r"));
    Vocabulary v = build_vocabulary(twelve);
    EncodedBatch b = encode_batch(twelve, v);
    DecodedInstance dec = decode_instance(b, 0, v);
    REQUIRE(dec.utterances.size() == 10);
    CHECK(dec.utterances.front() == TokenSeq{"u3"});
    CHECK(dec.utterances.back() == TokenSeq{"u12"});

    const auto four = parse(context_line(1, 4, "r"));
    v = build_vocabulary(four);
    b = encode_batch(four, v);
    const EncodedInstance e = b.instance(0);
    CHECK(e.turns == 4);
    CHECK(e.first_real_slot() == 6);
    for (std::size_t s = 0; s < 6; ++s) {
        CHECK(e.utterance_length(s) == 0);
        for (int id : e.utterance(s)) {
            CHECK(id == kPadId);
        }
    }
    CHECK(v.token(e.utterance(6)[0]) == "u1");

    std::string response;
    for (int i = 1; i <= 60; ++i) {
        response += (i > 1 ? " " : "") + std::string("x") + std::to_string(i);
    }
    const auto long_r = parse("1\thi\t" + response + "\n");
    v = build_vocabulary(long_r);
    b = encode_batch(long_r, v);
    dec = decode_instance(b, 0, v);
    REQUIRE(dec.response.size() == 50);
    CHECK(dec.response.front() == "x11");
    CHECK(dec.response.back() == "x60");
    CHECK(b.instance(0).response_length == 50);
}

TEST_CASE("encoding errors") {
    Instance empty;
    empty.response = {"r"};
    const Vocabulary v;
    CHECK_THROWS_AS(encode_batch(std::vector<Instance>{empty}, v), DataError);
}

} // TEST_SUITE
