#include <catch_amalgamated.hpp>

#include <filesystem>
#include <numeric>

#include "dac/eval.hpp"
#include "dac/train.hpp"
#include "fixture.hpp"
#include "oracle.hpp"

using namespace dac;
using Catch::Approx;

namespace {

std::vector<const CaptionRecord*> first(const std::vector<CaptionRecord>& records, size_t n) {
    std::vector<const CaptionRecord*> out;
    for (size_t i = 0; i < n && i < records.size(); ++i) out.push_back(&records[i]);
    return out;
}

double epoch_mean(const TrainResult& r, size_t epoch) {
    double sum = 0.0;
    size_t n = 0;
    for (const auto& m : r.metrics)
        if (m.epoch == epoch) {
            sum += m.total;
            ++n;
        }
    return sum / static_cast<double>(n);
}

} // namespace

TEST_CASE("batch size defaults follow the density toggle", "[train]") {
    TrainConfig c;
    CHECK(c.effective_batch_size() == 32);
    c.use_density = false;
    CHECK(c.effective_batch_size() == 128);
    c.batch_size = 7;
    CHECK(c.effective_batch_size() == 7);
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("use_mil off drops the bags and the MIL term", "[train]") {
    const auto& s = fixture::shared();
    auto c = fixture::small_train();
    c.use_mil = false;
    const auto batch = build_batch(first(s.records, 16), s.world, s.base, s.lexicon, c);
    CHECK_FALSE(batch.has_bags());
    CHECK(batch.bags.rows() == 0);

    const auto w = effective_weights(c, 16);
    CHECK(w.mil == 0.0);
    const auto loss = dac_loss(batch, s.base.similarity, w);
    CHECK(loss.mil == 0.0);
    CHECK(loss.total == Approx(w.contrastive * loss.contrastive + w.negatives * loss.negatives).epsilon(1e-12));

    c.epochs = 1;
    const auto r = train(s.records, s.world, s.base, c, s.lexicon);
    REQUIRE_FALSE(r.metrics.empty());
    for (const auto& m : r.metrics) CHECK(m.mil == 0.0);
}

TEST_CASE("disabling negatives zeroes L_neg in the log", "[train]") {
    const auto& s = fixture::shared();
    auto c = fixture::small_train();
    c.use_negatives = false;
    const auto batch = build_batch(first(s.records, 16), s.world, s.base, s.lexicon, c);
    CHECK_FALSE(batch.has_text_negatives());
    CHECK_FALSE(batch.has_bag_negatives());
    const auto r = train(s.records, s.world, s.base, c, s.lexicon);
    for (const auto& m : r.metrics) {
        CHECK(m.negatives == 0.0);
        CHECK(m.mil > 0.0);
    }
}

TEST_CASE("bag size 1 reduces MIL to image-to-text InfoNCE", "[train]") {
    const auto& s = fixture::shared();
    auto c = fixture::small_train();
    c.bag_size = 1;
    c.use_negatives = false;
    const auto batch = build_batch(first(s.records, 12), s.world, s.base, s.lexicon, c);
    REQUIRE(batch.bag_size == 1);
    REQUIRE(batch.bags.rows() == batch.batch_size());
    const auto loss = dac_loss(batch, s.base.similarity, effective_weights(c, 12));

    LossBatch reduced;
    reduced.images = batch.images;
    reduced.texts = batch.bags;
    const double expected = oracle::image_to_text(reduced, s.base.similarity.temperature()) / 12.0;
    CHECK(loss.mil == Approx(expected).epsilon(1e-9));
}

TEST_CASE("batch composition is a function of the seed", "[train][property]") {
    const auto& s = fixture::shared();
    const auto records = first(s.records, 32);
    auto c = fixture::small_train(5);
    const auto a = plan_batch(records, s.world, s.base.tokenizer, s.lexicon, c, 1);
    const auto b = plan_batch(records, s.world, s.base.tokenizer, s.lexicon, c, 1);
    CHECK(a.image_ids == b.image_ids);
    CHECK(a.positives == b.positives);
    CHECK(a.negatives == b.negatives);
    CHECK(a.bags == b.bags);
    CHECK(a.bag_negatives == b.bag_negatives);

    c.seed = 6;
    const auto other = plan_batch(records, s.world, s.base.tokenizer, s.lexicon, c, 1);
    CHECK(other.bags != a.bags);
}

TEST_CASE("records missing stage data are skipped and counted", "[train]") {
    const auto& s = fixture::shared();
    auto records = std::vector<CaptionRecord>(s.records.begin(), s.records.begin() + 10);
    records[3].quality_caption.reset();
    records[7].quality_caption.reset();
    std::vector<const CaptionRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    const auto plan = plan_batch(ptrs, s.world, s.base.tokenizer, s.lexicon, fixture::small_train(), 1);
    CHECK(plan.skipped == 2);
    CHECK(plan.size() == 8);
}

TEST_CASE("quality selection is nested in the ratio", "[train][property]") {
    const auto& s = fixture::shared();
    TrainConfig lo, hi;
    lo.quality_ratio = 0.3;
    hi.quality_ratio = 0.7;
    size_t n_lo = 0;
    for (const auto& r : s.records) {
        if (uses_quality_caption(r, lo)) {
            ++n_lo;
            CHECK(uses_quality_caption(r, hi));
        }
    }
    CHECK(n_lo > 0);
    hi.use_quality = false;
    for (const auto& r : s.records) CHECK_FALSE(uses_quality_caption(r, hi));
}

TEST_CASE("zero epochs returns a model functionally equal to the base", "[train]") {
    const auto& s = fixture::shared();
    auto c = fixture::small_train();
    c.epochs = 0;
    const auto r = train(s.records, s.world, s.base, c, s.lexicon);
    CHECK(r.metrics.empty());
    const EncoderView a(s.base), b(r.model);
    for (size_t i = 0; i < 20; ++i) {
        const auto& rec = s.records[i];
        CHECK(a.encode_text(rec.original_caption) == b.encode_text(rec.original_caption));
        const Vector f = s.world.features(rec.image_ref, rec.image_id);
        CHECK(a.encode_image(f) == b.encode_image(f));
    }
    const auto items = build_eval_items(s.world, eval_scene_refs(s.world, 100, 3), s.lexicon, 3).items;
    CHECK(preference_eval(a, items).to_json() == preference_eval(b, items).to_json());
}

TEST_CASE("training keeps the base frozen and moves only adapters and temperature", "[train]") {
    const auto& s = fixture::shared();
    const auto r = train(s.records, s.world, s.base, fixture::small_train(), s.lexicon);
    CHECK(r.model.base_hash() == s.base.base_hash());
    for (size_t k = 0; k < r.model.layers.size(); ++k) CHECK(r.model.layers[k].base == s.base.layers[k].base);
    double moved = 0.0;
    for (const auto& l : r.model.layers) moved += l.b.norm();
    CHECK(moved > 0.0);
    CHECK(r.model.similarity.log_temperature != s.base.similarity.log_temperature);
}

TEST_CASE("same seed gives identical loss traces", "[train][property]") {
    const auto& s = fixture::shared();
    auto c = fixture::small_train(11);
    c.epochs = 2;
    const auto a = train(s.records, s.world, s.base, c, s.lexicon);
    const auto b = train(s.records, s.world, s.base, c, s.lexicon);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(std::abs(a.metrics[i].total - b.metrics[i].total) <= 1e-6);
        CHECK(std::abs(a.metrics[i].mil - b.metrics[i].mil) <= 1e-6);
    }
}

TEST_CASE("five epochs on 2k records lower the loss", "[train][slow]") {
    const auto s = fixture::make(2000);
    auto c = fixture::small_train();
    c.epochs = 5;
    const auto r = train(s.records, s.world, s.base, c, s.lexicon);
    CHECK(epoch_mean(r, 5) < epoch_mean(r, 1));
    CHECK(r.metrics.back().total < r.metrics.front().total);
}

TEST_CASE("held-out records are excluded and scored per epoch", "[train]") {
    const auto& s = fixture::shared();
    auto c = fixture::small_train();
    c.epochs = 2;
    c.eval_each_epoch = true;
    const auto r = train(s.records, s.world, s.base, c, s.lexicon);
    size_t held = 0;
    for (const auto& rec : s.records) held += is_holdout(rec, c.holdout_fraction);
    CHECK(r.holdout_refs.size() == held);
    CHECK(held > 0);
    REQUIRE(r.epochs.size() == 3);
    CHECK(r.epochs[0].epoch == 0);
    CHECK(r.epochs[2].epoch == 2);
    const size_t batches = (s.records.size() - held + c.effective_batch_size() - 1) / c.effective_batch_size();
    CHECK(r.metrics.size() == 2 * batches);
}

TEST_CASE("non-finite loss aborts with a dump of the batch", "[train]") {
    const auto& s = fixture::shared();
    auto base = s.base;
    base.similarity.max_temperature = 1e308;
    base.similarity.log_temperature = 800.0; // exp overflows
    const auto dir = std::filesystem::temp_directory_path() / "dac-nonfinite-dump";
    std::filesystem::remove_all(dir);
    auto c = fixture::small_train();
    c.dump_dir = dir;
    try {
        train(s.records, s.world, base, c, s.lexicon);
        FAIL("expected TrainError");
    } catch (const TrainError& e) {
        CHECK(std::string(e.what()).find("non-finite loss at step 1") != std::string::npos);
    }
    const auto dump = dir / "nonfinite-step-1.json";
    REQUIRE(std::filesystem::exists(dump));
    const auto j = nlohmann::json::parse(std::ifstream(dump));
    CHECK(j.at("image_ids").size() == c.effective_batch_size());
    std::filesystem::remove_all(dir);
}

TEST_CASE("pretraining is deterministic", "[train]") {
    World world;
    auto pc = fixture::small_pretrain();
    pc.steps = 3;
    CHECK(pretrain_base(world, pc).base_hash() == pretrain_base(world, pc).base_hash());
    auto other = pc;
    other.seed = 1;
    CHECK(pretrain_base(world, other).base_hash() != pretrain_base(world, pc).base_hash());
}
