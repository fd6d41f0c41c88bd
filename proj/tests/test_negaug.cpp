#include <catch_amalgamated.hpp>

#include <algorithm>

#include "dac/negaug.hpp"

using namespace dac;

namespace {

Lexicon colors_only() {
    Lexicon lex;
    lex.words[WordCategory::color] = {"red", "blue"};
    return lex;
}

std::vector<std::string> sorted_tokens(const std::string& s) {
    auto t = split_whitespace(s);
    std::sort(t.begin(), t.end());
    return t;
}

} // namespace

TEST_CASE("detect_candidates", "[negaug]") {
    auto lex = colors_only();
    auto c = detect_candidates("a red car", lex);
    REQUIRE(c.size() == 1);
    CHECK(c[0] == NegativeCandidate{1, WordCategory::color, "red"});
    CHECK(detect_candidates("a dog runs", lex).empty());

    auto two = detect_candidates("a Red car and a blue. dog", lex);
    REQUIRE(two.size() == 2);
    CHECK(two[0].token_index == 1);
    CHECK(two[0].word == "red");
    CHECK(two[1].token_index == 5);
    CHECK(two[1].word == "blue");
}

TEST_CASE("make_negative examples", "[negaug]") {
    auto lex = colors_only();
    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto n = make_negative("a red car", lex, seed);
        CHECK(n.text == "a blue car");
        CHECK(n.changed_position == 1);
        CHECK(n.category == WordCategory::color);
        CHECK(n.source_text == "a red car");
    }
    CHECK_THROWS_AS(make_negative("a dog", lex, 0), NoCandidateError);
    auto full = Lexicon::from_vocabulary(Vocabulary::standard());
    CHECK_THROWS_AS(make_negative("a red car", full, 0, WordCategory::action), NoCandidateError);
    CHECK(make_negative("A red car.", lex, 0).text == "A blue car.");
}

TEST_CASE("lexicon validation", "[negaug]") {
    Lexicon lex;
    lex.words[WordCategory::color] = {"red"};
    CHECK_THROWS_AS(lex.validate(), Error);
    lex.words[WordCategory::color] = {"red", "Red"};
    CHECK_THROWS_AS(lex.validate(), Error);
    auto j = Vocabulary::standard().to_json();
    auto from_file = Lexicon::from_json(j);
    CHECK(from_file.words.size() == 6);
    CHECK_FALSE(from_file.category_of("car").has_value());
}

TEST_CASE("make_negative property sweep over rendered captions", "[negaug][property]") {
    const auto vocab = Vocabulary::standard();
    const auto lex = Lexicon::from_vocabulary(vocab);
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        auto scene = generate_scene(seed, vocab, 3);
        auto caption = render_caption(scene, vocab, CaptionMode::full, seed);
        auto neg = make_negative(caption, lex, seed);
        auto a = split_whitespace(caption);
        auto b = split_whitespace(neg.text);
        REQUIRE(a.size() == b.size());
        size_t diff = 0;
        for (size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
        REQUIRE(diff == 1);
        REQUIRE(a[neg.changed_position] != b[neg.changed_position]);
        REQUIRE(lex.category_of(b[neg.changed_position]) == neg.category);
        REQUIRE(lex.category_of(a[neg.changed_position]) == neg.category);
        REQUIRE(make_negative(caption, lex, seed).text == neg.text);
        REQUIRE_FALSE(caption_truth(scene, neg.text, vocab));
    }
}

TEST_CASE("make_order_negative", "[negaug]") {
    const auto lex = Lexicon::from_vocabulary(Vocabulary::standard());
    CHECK(make_order_negative("the man feeds the dog", lex, 0) == "the dog feeds the man");
    CHECK(make_order_negative("a red car on a wooden table.", lex, 0) == "a wooden table on a red car.");
    CHECK_THROWS_AS(make_order_negative("a red car", lex, 0), Error);
    CHECK_THROWS_AS(make_order_negative("a dog on a dog", lex, 0), Error);
}

TEST_CASE("order negatives preserve tokens and are oracle-false", "[negaug][property]") {
    const auto vocab = Vocabulary::standard();
    const auto lex = Lexicon::from_vocabulary(vocab);
    size_t checked = 0;
    for (uint64_t seed = 0; checked < 1000; ++seed) {
        auto scene = generate_scene(seed, vocab, 3);
        if (scene.relations.empty()) continue;
        auto caption = render_caption(scene, vocab, CaptionMode::full, seed);
        auto neg = make_order_negative(caption, lex, seed);
        REQUIRE(neg != caption);
        REQUIRE(sorted_tokens(neg) == sorted_tokens(caption));
        REQUIRE_FALSE(caption_truth(scene, neg, vocab));
        ++checked;
    }
}
