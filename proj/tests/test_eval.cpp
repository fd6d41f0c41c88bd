#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "dac/eval.hpp"
#include "dac/sweep.hpp"
#include "fixture.hpp"

using namespace dac;

namespace {

std::vector<EvalItem> items_for(const fixture::Setup& s, size_t scenes, uint64_t seed = 3) {
    return build_eval_items(s.world, eval_scene_refs(s.world, scenes, seed), s.lexicon, seed).items;
}

// Every text embeds to the same vector.
DualEncoder constant_text_model(const DualEncoder& base) {
    auto m = base;
    auto& emb = m.layers[0].base;
    for (Eigen::Index r = 1; r < emb.rows(); ++r) emb.row(r) = emb.row(0);
    return m;
}

LabeledSet gaussian_set(int classes, size_t per_class, double spread, std::mt19937_64& rng, const Matrix& centers) {
    std::normal_distribution<double> normal;
    LabeledSet s;
    s.classes = classes;
    s.x.resize(static_cast<Eigen::Index>(classes * per_class), centers.cols());
    Eigen::Index row = 0;
    for (int c = 0; c < classes; ++c)
        for (size_t i = 0; i < per_class; ++i, ++row) {
            for (Eigen::Index k = 0; k < centers.cols(); ++k) s.x(row, k) = centers(c, k) + spread * normal(rng);
            s.labels.push_back(c);
        }
    return s;
}

} // namespace

TEST_CASE("preference accuracy: all preferred and all tied", "[eval]") {
    std::vector<EvalItem> items(6);
    std::vector<ItemScore> scores(6);
    for (size_t i = 0; i < items.size(); ++i) {
        items[i].category = kItemCategories[i % 3];
        scores[i] = {2.0, 1.0};
    }
    auto r = preference_from_scores(items, scores);
    CHECK(r.overall.accuracy() == 1.0);
    CHECK(r.mean_accuracy() == 1.0);
    CHECK_FALSE(r.accuracy(ItemCategory::order).has_value());
    CHECK_FALSE(r.to_json()["categories"].contains("order"));

    for (auto& s : scores) s.negative = s.positive;
    CHECK(preference_from_scores(items, scores).overall.accuracy() == 0.0);
    CHECK_THROWS(preference_from_scores(items, {}));
}

TEST_CASE("degenerate text encoder scores zero under the tie rule", "[eval]") {
    const auto& s = fixture::shared();
    const auto model = constant_text_model(s.base);
    const auto items = items_for(s, 50);
    const auto r = preference_eval(model, items);
    CHECK(r.overall.total == items.size());
    CHECK(r.overall.correct == 0);
}

TEST_CASE("preference accuracy matches a brute-force recount on 200 items", "[eval][oracle]") {
    const auto& s = fixture::shared();
    auto items = items_for(s, 120, 17);
    REQUIRE(items.size() >= 200);
    items.resize(200);
    const EncoderView view(s.base);
    const double tau = s.base.similarity.temperature();
    std::map<ItemCategory, std::pair<size_t, size_t>> tally;
    for (const auto& item : items) {
        const Vector img = view.encode_image(item.features);
        const Vector p = view.encode_text(item.positive);
        const Vector n = view.encode_text(item.negative);
        double dp = 0.0, dn = 0.0;
        for (Eigen::Index k = 0; k < img.size(); ++k) {
            dp += p[k] * img[k];
            dn += n[k] * img[k];
        }
        auto& t = tally[item.category];
        t.first += std::exp(tau * dp) > std::exp(tau * dn);
        ++t.second;
    }
    const auto r = preference_eval(view, items);
    for (const auto& [cat, t] : tally) {
        INFO(item_category_name(cat));
        CHECK(r.categories.at(cat).correct == t.first);
        CHECK(r.categories.at(cat).total == t.second);
    }
}

TEST_CASE("preference accuracy is invariant under monotone transforms", "[eval][property]") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> normal;
    std::vector<EvalItem> items(300);
    std::vector<ItemScore> scores(300);
    for (size_t i = 0; i < items.size(); ++i) {
        items[i].category = kItemCategories[i % 4];
        scores[i] = {normal(rng), normal(rng)};
        if (i % 17 == 0) scores[i].negative = scores[i].positive;
    }
    const auto base = preference_from_scores(items, scores).to_json();
    for (auto f : std::vector<double (*)(double)>{[](double x) { return std::exp(x); },
                                                  [](double x) { return 3.0 * x - 7.0; },
                                                  [](double x) { return std::atan(x); }}) {
        auto t = scores;
        for (auto& sc : t) sc = {f(sc.positive), f(sc.negative)};
        CHECK(preference_from_scores(items, t).to_json() == base);
    }
}

TEST_CASE("built items satisfy the truth invariants", "[eval][property]") {
    const auto& s = fixture::shared();
    const auto set = build_eval_items(s.world, eval_scene_refs(s.world, 300, 9), s.lexicon, 9);
    std::map<ItemCategory, size_t> counts;
    for (const auto& item : set.items) {
        CHECK_NOTHROW(verify_item(item, s.world));
        ++counts[item.category];
        if (item.category == ItemCategory::order) {
            auto a = split_whitespace(item.positive), b = split_whitespace(item.negative);
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            CHECK(a == b);
        }
    }
    for (auto c : kItemCategories) CHECK(counts[c] > 0);
    CHECK(set.items.size() + set.rejected > 0);
}

TEST_CASE("pooling-only encoder cannot separate word order", "[eval]") {
    const auto& s = fixture::shared();
    REQUIRE_FALSE(s.base.config.attention);
    const auto r = order_eval(EncoderView(s.base), items_for(s, 100));
    CHECK(r.total > 0);
    CHECK(r.correct == 0);
}

TEST_CASE("attention encoder after negatives training beats pooling on order", "[eval][slow]") {
    const auto& pooled = fixture::shared();
    const auto att = fixture::make(400, true);
    auto c = fixture::small_train();
    c.epochs = 2;
    const auto trained = train(att.records, att.world, att.base, c, att.lexicon);
    const auto items = items_for(att, 150);
    const auto with_attention = order_eval(EncoderView(trained.model), items);
    const auto pooling = order_eval(EncoderView(train(pooled.records, pooled.world, pooled.base, c, pooled.lexicon).model), items);
    CHECK(pooling.correct == 0);
    CHECK(with_attention.accuracy() > pooling.accuracy());
}

TEST_CASE("clipscore analysis", "[eval]") {
    const auto& s = fixture::shared();
    const auto trained = train(s.records, s.world, s.base, fixture::small_train(), s.lexicon);
    const EncoderView view(trained.model);
    const auto r = clipscore_analysis(view, s.records, s.world);
    size_t total = 0;
    for (auto b : r.original.bins) total += b;
    CHECK(total == s.records.size());
    total = 0;
    for (auto b : r.quality.bins) total += b;
    CHECK(total == s.records.size());
    CHECK(r.quality.mean() > r.original.mean());

    auto same = s.records;
    for (auto& rec : same) rec.original_caption = *rec.quality_caption;
    const auto eq = clipscore_analysis(view, same, s.world);
    CHECK(eq.original.bins == eq.quality.bins);
    CHECK(eq.original.mean() == eq.quality.mean());

    auto missing = s.records;
    missing[0].quality_caption.reset();
    CHECK_THROWS(clipscore_analysis(view, missing, s.world));

    ScoreHistogram h;
    h.add(-1.0);
    h.add(1.0);
    h.add(0.05);
    CHECK(h.bins.front() == 1);
    CHECK(h.bins.back() == 1);
    CHECK(h.bins[10] == 1);
}

TEST_CASE("linear probe on separable data", "[eval][probe]") {
    std::mt19937_64 rng(2);
    Matrix centers(2, 3);
    centers << 3, 0, 0, -3, 0, 0;
    const auto train = gaussian_set(2, 30, 0.5, rng, centers);
    const auto test = gaussian_set(2, 30, 0.5, rng, centers);
    CHECK(linear_probe(train, test, 0, 1) == 1.0);
    CHECK(linear_probe(train, test, 5, 1) == 1.0);
    CHECK_THROWS_AS(linear_probe(train, test, 31, 1), Error);
}

TEST_CASE("linear probe with shuffled labels is at chance", "[eval][probe]") {
    std::mt19937_64 rng(3);
    const int classes = 10;
    Matrix centers = Matrix::Zero(classes, 16);
    auto train = gaussian_set(classes, 40, 1.0, rng, centers);
    auto test = gaussian_set(classes, 200, 1.0, rng, centers);
    std::shuffle(train.labels.begin(), train.labels.end(), rng);
    const double acc = linear_probe(train, test, 0, 1);
    CHECK(std::abs(acc - 1.0 / classes) <= 0.05);
}

TEST_CASE("linear probe is deterministic in its seed", "[eval][probe]") {
    const auto& s = fixture::shared();
    const auto data = probe_dataset(s.world, 10, 10, 4, 0.1);
    CHECK(data.train.size() == 10 * static_cast<size_t>(data.classes));
    CHECK(data.test.size() == 10 * static_cast<size_t>(data.classes));
    const EncoderView view(s.base);
    CHECK(probe_accuracies(view, data, {5, 0}, 8) == probe_accuracies(view, data, {5, 0}, 8));
    CHECK_THROWS_AS(probe_accuracies(view, data, {11}, 8), Error);
}

TEST_CASE("evaluation leaves the checkpoint untouched", "[eval]") {
    const auto& s = fixture::shared();
    const auto model = train(s.records, s.world, s.base, fixture::small_train(), s.lexicon).model;
    const auto before = checkpoint_to_json(model).dump();
    const EncoderView view(model);
    const auto items = items_for(s, 50);
    const auto first = preference_eval(view, items).to_json();
    order_eval(view, items);
    clipscore_analysis(view, s.records, s.world);
    probe_accuracies(view, probe_dataset(s.world, 5, 5, 1), {5}, 1);
    CHECK(checkpoint_to_json(model).dump() == before);
    CHECK(preference_eval(view, items).to_json() == first);
}

TEST_CASE("eval scenes are deterministic and seed-dependent", "[eval]") {
    World world;
    CHECK(eval_scene_refs(world, 20, 1) == eval_scene_refs(world, 20, 1));
    CHECK(eval_scene_refs(world, 20, 1) != eval_scene_refs(world, 20, 2));
}

// ---- sweep ------------------------------------------------------------------

TEST_CASE("sweep axis parsing and grid checks", "[sweep]") {
    CHECK(parse_sweep_axis("bag_size") == SweepAxis::bag_size);
    CHECK(sweep_axis_name(SweepAxis::quality_ratio) == "quality_ratio");
    CHECK_THROWS(parse_sweep_axis("lr"));
    const auto& s = fixture::shared();
    CHECK_THROWS(sweep(SweepAxis::bag_size, {}, s.records, s.world, s.base, fixture::small_train(), s.lexicon, {}));
    CHECK_THROWS(sweep(SweepAxis::bag_size, {2, 1}, s.records, s.world, s.base, fixture::small_train(), s.lexicon, {}));
}

TEST_CASE("single-point sweep equals a plain train and eval", "[sweep]") {
    const auto& s = fixture::shared();
    const auto items = items_for(s, 60);
    auto c = fixture::small_train();
    const auto r = sweep(SweepAxis::bag_size, {1}, s.records, s.world, s.base, c, s.lexicon, items);
    REQUIRE(r.points.size() == 1);
    REQUIRE(r.points[0].report);
    c.bag_size = 1;
    const auto plain = preference_eval(train(s.records, s.world, s.base, c, s.lexicon).model, items);
    CHECK(r.points[0].report->to_json() == plain.to_json());
}

TEST_CASE("sweeps are reproducible and keep going past failures", "[sweep][property]") {
    const auto& s = fixture::shared();
    const auto items = items_for(s, 40);
    const auto c = fixture::small_train();
    const auto a = sweep(SweepAxis::quality_ratio, {0.0, 0.5, 1.0}, s.records, s.world, s.base, c, s.lexicon, items);
    const auto b = sweep(SweepAxis::quality_ratio, {0.0, 0.5, 1.0}, s.records, s.world, s.base, c, s.lexicon, items);
    REQUIRE(a.points.size() == 3);
    for (size_t i = 0; i < 3; ++i) CHECK(std::abs(*a.points[i].metric() - *b.points[i].metric()) <= 1e-6);
    const auto table = a.table();
    CHECK(table == b.table());
    CHECK(std::count(table.begin(), table.end(), '\n') == 4);

    const auto bad = sweep(SweepAxis::bag_size, {0.5, 1.0}, s.records, s.world, s.base, c, s.lexicon, items);
    REQUIRE(bad.points.size() == 2);
    CHECK(bad.points[0].error);
    CHECK_FALSE(bad.points[0].metric());
    CHECK(bad.points[1].report);
    CHECK(bad.to_json()["points"][0]["mean_accuracy"].is_null());
}
