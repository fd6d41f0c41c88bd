#include <catch_amalgamated.hpp>

#include <numeric>

#include "dac/losses.hpp"
#include "oracle.hpp"

using namespace dac;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

SimilarityParams tau(double t) {
    SimilarityParams p;
    p.log_temperature = std::log(t);
    return p;
}

Vector unit(std::initializer_list<double> xs) {
    Vector v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v.normalized();
}

LossBatch identical_batch(Eigen::Index B, size_t M) {
    LossBatch b;
    Matrix row = unit({1, 2, 3}).transpose();
    b.images = row.replicate(B, 1);
    b.texts = b.images;
    b.text_negatives = b.images;
    b.text_negative_mask.assign(static_cast<size_t>(B), 1);
    b.bag_size = M;
    b.bags = row.replicate(B * static_cast<Eigen::Index>(M), 1);
    b.bag_negatives = b.bags;
    b.bag_mask.assign(static_cast<size_t>(b.bags.rows()), 1);
    b.bag_negative_mask = b.bag_mask;
    return b;
}

LossBatch permuted(const LossBatch& b, const std::vector<Eigen::Index>& perm) {
    LossBatch out = b;
    const auto M = static_cast<Eigen::Index>(b.bag_size);
    for (Eigen::Index i = 0; i < b.batch_size(); ++i) {
        const auto src = perm[static_cast<size_t>(i)];
        out.images.row(i) = b.images.row(src);
        out.texts.row(i) = b.texts.row(src);
        out.text_negatives.row(i) = b.text_negatives.row(src);
        out.text_negative_mask[i] = b.text_negative_mask[src];
        for (Eigen::Index m = 0; m < M; ++m) {
            out.bags.row(i * M + m) = b.bags.row(src * M + m);
            out.bag_negatives.row(i * M + m) = b.bag_negatives.row(src * M + m);
            out.bag_mask[i * M + m] = b.bag_mask[src * M + m];
            out.bag_negative_mask[i * M + m] = b.bag_negative_mask[src * M + m];
        }
    }
    return out;
}

} // namespace

TEST_CASE("similarity examples", "[losses]") {
    auto a = unit({1, 0, 0});
    CHECK_THAT(similarity(a, a, tau(1)), WithinRel(std::exp(1.0), 1e-12));
    CHECK_THAT(similarity(a, unit({0, 1, 0}), tau(7)), WithinRel(1.0, 1e-12));
    CHECK_THAT(similarity(a, Vector(-a), tau(2)), WithinRel(0.1353352832366127, 1e-12));
    Vector bad = a;
    bad[0] = std::nan("");
    CHECK_THROWS_AS(similarity(bad, a, tau(1)), LossError);
}

TEST_CASE("contrastive examples", "[losses]") {
    CHECK(contrastive_loss(identical_batch(1, 1), tau(10)) == 0.0);
    CHECK_THAT(contrastive_loss(identical_batch(2, 1), tau(3)), WithinRel(4 * std::log(2.0), 1e-12));

    LossBatch b;
    b.images = Matrix::Identity(2, 2);
    b.texts = Matrix::Identity(2, 2);
    // S_ii = e, S_ij = 1: each of the four log terms is log((e + 1) / e)
    const double hand = 4.0 * std::log((std::exp(1.0) + 1.0) / std::exp(1.0));
    CHECK_THAT(contrastive_loss(b, tau(1)), WithinRel(hand, 1e-12));
    CHECK_THAT(contrastive_loss(b, tau(1)), WithinRel(oracle::contrastive(b, 1.0), 1e-12));
}

TEST_CASE("negatives examples", "[losses]") {
    auto b = identical_batch(1, 1);
    CHECK_THAT(negatives_loss(b, tau(4)), WithinRel(std::log(2.0), 1e-12));

    b.text_negatives = -b.texts;
    double prev = std::numeric_limits<double>::infinity();
    for (double t : {1.0, 2.0, 5.0, 10.0, 50.0, 100.0}) {
        double v = negatives_loss(b, tau(t));
        CHECK(v < prev);
        prev = v;
    }
    CHECK(prev < 1e-80);

    std::mt19937_64 rng(3);
    auto r = oracle::random_batch(rng, 3, 1);
    r.text_negative_mask.assign(3, 1);
    CHECK_THAT(negatives_loss(r, tau(5)), WithinRel(oracle::negatives(r, 5), 1e-12));

    LossBatch none = r;
    none.text_negatives.resize(0, 0);
    CHECK_THROWS_AS(negatives_loss(none, tau(5)), LossError);
}

TEST_CASE("MIL base examples", "[losses]") {
    std::mt19937_64 rng(5);
    auto one = oracle::random_batch(rng, 1, 3);
    CHECK_THAT(mil_base_loss(one, tau(10)), WithinAbs(0.0, 1e-15));

    auto m1 = oracle::random_batch(rng, 4, 1);
    m1.bags = m1.texts;
    CHECK_THAT(mil_base_loss(m1, tau(6)), WithinRel(contrastive_terms(m1, tau(6)).image_to_text / 4.0, 1e-12));

    auto b = oracle::random_batch(rng, 2, 2);
    CHECK_THAT(mil_base_loss(b, tau(8)), WithinRel(oracle::mil(b, 8, false), 1e-12));

    auto empty = b;
    empty.bag_mask[0] = empty.bag_mask[1] = 0;
    CHECK_THROWS_AS(mil_base_loss(empty, tau(8)), LossError);
}

TEST_CASE("MIL negatives examples", "[losses]") {
    CHECK_THAT(mil_neg_loss(identical_batch(1, 1), tau(9)), WithinRel(std::log(2.0), 1e-12));

    std::mt19937_64 rng(6);
    auto b = oracle::random_batch(rng, 2, 3);
    CHECK_THAT(mil_neg_loss(b, tau(4)), WithinRel(oracle::mil(b, 4, true), 1e-12));

    auto masked = b;
    std::fill(masked.bag_negative_mask.begin(), masked.bag_negative_mask.end(), 0);
    CHECK(mil_neg_loss(masked, tau(4)) == mil_base_loss(masked, tau(4)));
}

TEST_CASE("DAC loss composition", "[losses]") {
    std::mt19937_64 rng(7);
    auto b = oracle::random_batch(rng, 3, 2);
    auto p = tau(5);
    auto only = dac_loss(b, p, {1, 0, 0});
    CHECK(only.total == contrastive_loss(b, p));
    CHECK(only.negatives == 0.0);
    CHECK(only.mil == 0.0);

    auto trivial = dac_loss(identical_batch(1, 1), tau(3));
    CHECK_THAT(trivial.contrastive, WithinAbs(0.0, 1e-15));
    CHECK_THAT(trivial.negatives, WithinRel(std::log(2.0), 1e-12));
    CHECK_THAT(trivial.mil, WithinRel(std::log(2.0), 1e-12));
    CHECK_THAT(trivial.total, WithinRel(2 * std::log(2.0), 1e-12));

    auto full = dac_loss(b, p, {1.0, 0.5, 2.0});
    const double expect = oracle::contrastive(b, 5) + 0.5 * oracle::negatives(b, 5) + 2.0 * oracle::mil(b, 5, true);
    CHECK_THAT(full.total, WithinRel(expect, 1e-12));

    auto missing = b;
    missing.text_negatives.resize(0, 0);
    CHECK_THROWS_AS(dac_loss(missing, p), LossError);
}

TEST_CASE("MIL variants", "[losses]") {
    std::mt19937_64 rng(8);
    auto p = tau(7);
    auto m1 = oracle::random_batch(rng, 3, 1);
    for (auto v : {MilVariant::max, MilVariant::avg, MilVariant::rand})
        CHECK_THAT(mil_variant_loss(m1, p, v, 1), WithinRel(mil_base_loss(m1, p), 1e-12));

    SECTION("max selects the caption aligned with the image") {
        auto b = oracle::random_batch(rng, 3, 3);
        std::fill(b.bag_mask.begin(), b.bag_mask.end(), 1);
        LossBatch expect = b;
        expect.bag_size = 1;
        expect.bags = Matrix(3, b.bags.cols());
        expect.bag_mask.assign(3, 1);
        expect.bag_negatives.resize(0, 0);
        for (Eigen::Index i = 0; i < 3; ++i) {
            b.bags.row(i * 3 + 1) = b.images.row(i);
            expect.bags.row(i) = b.images.row(i);
        }
        CHECK_THAT(mil_variant_loss(b, p, MilVariant::max, 0), WithinRel(mil_base_loss(expect, p), 1e-12));
    }

    SECTION("avg of symmetric perturbations recovers the center") {
        auto b = oracle::random_batch(rng, 3, 2);
        std::fill(b.bag_mask.begin(), b.bag_mask.end(), 1);
        LossBatch center = b;
        center.bag_size = 1;
        center.bags = oracle::random_unit_rows(rng, 3, b.bags.cols());
        center.bag_mask.assign(3, 1);
        center.bag_negatives.resize(0, 0);
        for (Eigen::Index i = 0; i < 3; ++i) {
            Vector c = center.bags.row(i).transpose();
            Vector q = Vector::Random(c.size());
            q -= c * c.dot(q);
            q = 0.3 * q.normalized();
            b.bags.row(2 * i) = (c + q).normalized().transpose();
            b.bags.row(2 * i + 1) = (c - q).normalized().transpose();
        }
        CHECK_THAT(mil_variant_loss(b, p, MilVariant::avg, 0), WithinRel(mil_base_loss(center, p), 1e-12));
    }

    SECTION("rand is seed deterministic") {
        auto b = oracle::random_batch(rng, 4, 3);
        CHECK(mil_variant_loss(b, p, MilVariant::rand, 11) == mil_variant_loss(b, p, MilVariant::rand, 11));
    }
}

TEST_CASE("analytic gradients match central finite differences", "[losses][gradient]") {
    std::mt19937_64 rng(2024);
    struct Named {
        const char* name;
        oracle::LossFn fn;
        std::function<double(const LossBatch&, const SimilarityParams&, LossGrad*)> with_grad;
    };
    const std::vector<Named> losses{
        {"contrastive", [](auto& b, auto& p) { return contrastive_loss(b, p); },
         [](auto& b, auto& p, LossGrad* g) { return contrastive_loss(b, p, g); }},
        {"negatives", [](auto& b, auto& p) { return negatives_loss(b, p); },
         [](auto& b, auto& p, LossGrad* g) { return negatives_loss(b, p, g); }},
        {"mil_base", [](auto& b, auto& p) { return mil_base_loss(b, p); },
         [](auto& b, auto& p, LossGrad* g) { return mil_base_loss(b, p, g); }},
        {"mil_neg", [](auto& b, auto& p) { return mil_neg_loss(b, p); },
         [](auto& b, auto& p, LossGrad* g) { return mil_neg_loss(b, p, g); }},
        {"dac", [](auto& b, auto& p) { return dac_loss(b, p, {1, 0.7, 1.3}).total; },
         [](auto& b, auto& p, LossGrad* g) { return dac_loss(b, p, {1, 0.7, 1.3}, MilMode::nce, 0, g).total; }},
        {"max", [](auto& b, auto& p) { return mil_variant_loss(b, p, MilVariant::max, 3); },
         [](auto& b, auto& p, LossGrad* g) { return mil_variant_loss(b, p, MilVariant::max, 3, g); }},
        {"avg", [](auto& b, auto& p) { return mil_variant_loss(b, p, MilVariant::avg, 3); },
         [](auto& b, auto& p, LossGrad* g) { return mil_variant_loss(b, p, MilVariant::avg, 3, g); }},
        {"rand", [](auto& b, auto& p) { return mil_variant_loss(b, p, MilVariant::rand, 3); },
         [](auto& b, auto& p, LossGrad* g) { return mil_variant_loss(b, p, MilVariant::rand, 3, g); }},
    };
    for (int trial = 0; trial < 20; ++trial) {
        const auto B = 1 + static_cast<Eigen::Index>(rng() % 4);
        const auto M = 1 + static_cast<size_t>(rng() % 3);
        auto b = oracle::random_batch(rng, B, M);
        auto p = tau(1.0 + static_cast<double>(rng() % 1000) / 100.0);
        for (const auto& l : losses) {
            auto g = LossGrad::zeros_like(b);
            const double v = l.with_grad(b, p, &g);
            REQUIRE(v == l.fn(b, p));
            auto fd = oracle::finite_difference(l.fn, b, p);
            INFO(l.name << " trial " << trial);
            CHECK(oracle::relative_error(g, fd) < 1e-4);
        }
    }
}

TEST_CASE("losses are invariant to batch permutation", "[losses][property]") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        const auto B = 2 + static_cast<Eigen::Index>(rng() % 5);
        auto b = oracle::random_batch(rng, B, 1 + rng() % 3);
        std::vector<Eigen::Index> perm(static_cast<size_t>(B));
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        auto q = permuted(b, perm);
        auto p = tau(6);
        CHECK_THAT(contrastive_loss(q, p), WithinAbs(contrastive_loss(b, p), 1e-9));
        CHECK_THAT(negatives_loss(q, p), WithinAbs(negatives_loss(b, p), 1e-9));
        CHECK_THAT(mil_base_loss(q, p), WithinAbs(mil_base_loss(b, p), 1e-9));
        CHECK_THAT(mil_neg_loss(q, p), WithinAbs(mil_neg_loss(b, p), 1e-9));
        CHECK_THAT(mil_variant_loss(q, p, MilVariant::max, 0), WithinAbs(mil_variant_loss(b, p, MilVariant::max, 0), 1e-9));
        CHECK_THAT(mil_variant_loss(q, p, MilVariant::avg, 0), WithinAbs(mil_variant_loss(b, p, MilVariant::avg, 0), 1e-9));
    }
}

TEST_CASE("positivity and MIL monotonicity", "[losses][property]") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const auto B = 1 + static_cast<Eigen::Index>(rng() % 5);
        auto b = oracle::random_batch(rng, B, 1 + rng() % 4);
        // tau <= 10 keeps the smallest negative term above double rounding
        auto p = tau(1.0 + static_cast<double>(rng() % 10));
        CHECK(contrastive_loss(b, p) >= 0.0);
        CHECK(negatives_loss(b, p) >= 0.0);
        const double base = mil_base_loss(b, p);
        const double neg = mil_neg_loss(b, p);
        CHECK(base >= -1e-15);
        const bool any = std::any_of(b.bag_negative_mask.begin(), b.bag_negative_mask.end(), [](char c) { return c; });
        if (any) CHECK(neg > base);
        else CHECK(neg == base);
    }
}

TEST_CASE("temperature clamping", "[losses]") {
    SimilarityParams p;
    CHECK_THAT(p.temperature(), WithinRel(10.0, 1e-12));
    p.log_temperature = 50;
    p.clamp();
    CHECK_THAT(p.temperature(), WithinRel(100.0, 1e-12));
    p.log_temperature = -3;
    p.clamp();
    CHECK_THAT(p.temperature(), WithinRel(1.0, 1e-12));
}
