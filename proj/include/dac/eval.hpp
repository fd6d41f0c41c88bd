#pragma once

// Caption-preference benchmarks over oracle-verified synthetic items,
// CLIP-score histograms, and few-shot linear probing of frozen image
// embeddings.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dac/corpus.hpp"
#include "dac/encoder.hpp"
#include "dac/negaug.hpp"
#include "dac/scene.hpp"
#include "dac/util.hpp"

namespace dac {

enum class ItemCategory { object, attribute, relation, order };

inline constexpr std::array<ItemCategory, 4> kItemCategories{ItemCategory::object, ItemCategory::attribute,
                                                             ItemCategory::relation, ItemCategory::order};

inline std::string_view item_category_name(ItemCategory c) {
    switch (c) {
    case ItemCategory::object: return "object";
    case ItemCategory::attribute: return "attribute";
    case ItemCategory::relation: return "relation";
    case ItemCategory::order: return "order";
    }
    return "?";
}

inline ItemCategory parse_item_category(std::string_view s) {
    for (auto c : kItemCategories)
        if (item_category_name(c) == s) return c;
    throw Error("unknown item category '" + std::string(s) + "'");
}

struct EvalItem {
    std::string image_ref;
    Vector features;
    std::string positive;
    std::string negative;
    ItemCategory category = ItemCategory::object;
};

class ItemError : public Error {
public:
    using Error::Error;
};

// Throws unless the item satisfies the truth invariants against its scene.
inline void verify_item(const EvalItem& item, const World& world) {
    if (item.positive == item.negative) throw ItemError("positive and negative are identical");
    const auto scene = world.scene(item.image_ref);
    if (!caption_truth(scene, item.positive, world.vocab)) throw ItemError("positive is false: " + item.positive);
    if (caption_truth(scene, item.negative, world.vocab)) throw ItemError("negative is true: " + item.negative);
}

namespace detail {

inline std::optional<std::string> noun_swap(const Scene& scene, const std::string& caption, const Vocabulary& vocab,
                                            std::mt19937_64& rng) {
    auto tokens = split_whitespace(caption);
    std::vector<size_t> nouns;
    for (size_t i = 0; i < tokens.size(); ++i)
        if (vocab.category_of(normalize_token(tokens[i])) == WordCategory::noun) nouns.push_back(i);
    std::vector<std::string> absent;
    for (const auto& n : vocab.of(WordCategory::noun))
        if (!scene.find(n)) absent.push_back(n);
    if (nouns.empty() || absent.empty()) return std::nullopt;
    const size_t pos = nouns[std::uniform_int_distribution<size_t>(0, nouns.size() - 1)(rng)];
    auto& tok = tokens[pos];
    size_t stem = tok.size();
    while (stem > 0 && (is_terminator(tok[stem - 1]) || tok[stem - 1] == ',')) --stem;
    tok = absent[std::uniform_int_distribution<size_t>(0, absent.size() - 1)(rng)] + tok.substr(stem);
    return join(tokens, " ");
}

inline std::optional<std::string> category_swap(const std::string& caption, const Lexicon& lexicon, bool relation,
                                                uint64_t seed) {
    std::vector<WordCategory> present;
    for (const auto& c : detect_candidates(caption, lexicon))
        if (is_relation_category(c.category) == relation &&
            std::find(present.begin(), present.end(), c.category) == present.end())
            present.push_back(c.category);
    if (present.empty()) return std::nullopt;
    std::mt19937_64 rng(mix_seed(seed, "category"));
    const auto cat = present[std::uniform_int_distribution<size_t>(0, present.size() - 1)(rng)];
    return make_negative(caption, lexicon, seed, cat).text;
}

} // namespace detail

struct ItemSet {
    std::vector<EvalItem> items;
    size_t rejected = 0; // candidates dropped by the truth check
};

// One item per category and scene where the category applies. The positive
// is the scene's full render.
inline ItemSet build_eval_items(const World& world, const std::vector<std::string>& image_refs,
                                const Lexicon& lexicon, uint64_t seed) {
    ItemSet out;
    for (const auto& ref : image_refs) {
        const auto scene = world.scene(ref);
        const auto positive = render_caption(scene, world.vocab, CaptionMode::full, 0);
        const Vector features = world.features(scene, mix_seed(seed, ref));
        const uint64_t s = mix_seed(seed, ref);
        std::mt19937_64 rng(s);
        std::array<std::optional<std::string>, 4> negatives;
        negatives[0] = detail::noun_swap(scene, positive, world.vocab, rng);
        negatives[1] = detail::category_swap(positive, lexicon, false, s);
        negatives[2] = detail::category_swap(positive, lexicon, true, s);
        if (!scene.relations.empty()) {
            try {
                negatives[3] = make_order_negative(positive, lexicon, s);
            } catch (const Error&) {
            }
        }
        for (size_t k = 0; k < kItemCategories.size(); ++k) {
            if (!negatives[k]) continue;
            EvalItem item{ref, features, positive, *negatives[k], kItemCategories[k]};
            try {
                verify_item(item, world);
            } catch (const ItemError&) {
                ++out.rejected;
                continue;
            }
            out.items.push_back(std::move(item));
        }
    }
    return out;
}

struct ItemScore {
    double positive = 0.0;
    double negative = 0.0;
};

inline std::vector<ItemScore> score_items(const EncoderView& model, const std::vector<EvalItem>& items) {
    std::vector<ItemScore> out;
    out.reserve(items.size());
    std::map<std::string, Vector> text_cache;
    auto text = [&](const std::string& t) -> const Vector& {
        auto it = text_cache.find(t);
        if (it == text_cache.end()) it = text_cache.emplace(t, model.encode_text(t)).first;
        return it->second;
    };
    for (const auto& item : items) {
        const Vector img = model.encode_image(item.features);
        out.push_back({similarity(text(item.positive), img, model.similarity()),
                       similarity(text(item.negative), img, model.similarity())});
    }
    return out;
}

struct CategoryResult {
    size_t correct = 0;
    size_t total = 0;
    double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

struct PreferenceReport {
    std::map<ItemCategory, CategoryResult> categories; // absent categories have no entry
    CategoryResult overall;

    std::optional<double> accuracy(ItemCategory c) const {
        auto it = categories.find(c);
        if (it == categories.end()) return std::nullopt;
        return it->second.accuracy();
    }

    // Plain mean of the per-category accuracies that are present.
    double mean_accuracy(const std::vector<ItemCategory>& which = {ItemCategory::object, ItemCategory::attribute,
                                                                   ItemCategory::relation}) const {
        double sum = 0.0;
        size_t n = 0;
        for (auto c : which)
            if (auto a = accuracy(c)) {
                sum += *a;
                ++n;
            }
        return n == 0 ? 0.0 : sum / static_cast<double>(n);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        auto& cats = j["categories"] = nlohmann::ordered_json::object();
        for (auto c : kItemCategories) {
            auto it = categories.find(c);
            if (it == categories.end()) continue;
            cats[std::string(item_category_name(c))] = {
                {"accuracy", it->second.accuracy()}, {"correct", it->second.correct}, {"total", it->second.total}};
        }
        j["overall"] = {{"accuracy", overall.accuracy()}, {"correct", overall.correct}, {"total", overall.total}};
        j["mean_accuracy"] = mean_accuracy();
        return j;
    }
};

// Strict preference: ties count as incorrect.
inline PreferenceReport preference_from_scores(const std::vector<EvalItem>& items, const std::vector<ItemScore>& scores) {
    if (items.size() != scores.size()) throw Error("one score per item required");
    PreferenceReport r;
    for (size_t i = 0; i < items.size(); ++i) {
        auto& c = r.categories[items[i].category];
        const bool ok = scores[i].positive > scores[i].negative;
        c.correct += ok;
        ++c.total;
        r.overall.correct += ok;
        ++r.overall.total;
    }
    return r;
}

inline PreferenceReport preference_eval(const EncoderView& model, const std::vector<EvalItem>& items) {
    return preference_from_scores(items, score_items(model, items));
}

inline PreferenceReport preference_eval(const DualEncoder& model, const std::vector<EvalItem>& items) {
    return preference_eval(EncoderView(model), items);
}

// Word-order items only, reported under the order category.
inline CategoryResult order_eval(const EncoderView& model, const std::vector<EvalItem>& items) {
    std::vector<EvalItem> order;
    for (const auto& item : items)
        if (item.category == ItemCategory::order) order.push_back(item);
    auto r = preference_eval(model, order);
    auto it = r.categories.find(ItemCategory::order);
    return it == r.categories.end() ? CategoryResult{} : it->second;
}

// ---- CLIP-score analysis ----------------------------------------------------

inline constexpr size_t kScoreBins = 20;

struct ScoreHistogram {
    std::array<size_t, kScoreBins> bins{}; // width 0.1 over [-1, 1]
    double sum = 0.0;
    size_t count = 0;

    void add(double cosine) {
        auto bin = static_cast<long>(std::floor((cosine + 1.0) / 0.1));
        bin = std::clamp<long>(bin, 0, static_cast<long>(kScoreBins) - 1);
        ++bins[static_cast<size_t>(bin)];
        sum += cosine;
        ++count;
    }

    double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
};

struct ClipScoreReport {
    ScoreHistogram original;
    ScoreHistogram quality;

    nlohmann::ordered_json to_json() const {
        auto h = [](const ScoreHistogram& s) {
            return nlohmann::ordered_json{{"mean", s.mean()}, {"count", s.count}, {"bins", s.bins}};
        };
        return {{"bin_width", 0.1}, {"range", {-1.0, 1.0}}, {"original", h(original)}, {"quality", h(quality)}};
    }
};

inline ClipScoreReport clipscore_analysis(const EncoderView& model, const std::vector<CaptionRecord>& records,
                                          const World& world) {
    ClipScoreReport r;
    for (const auto& rec : records) {
        if (!rec.quality_caption) throw Error("record '" + rec.image_id + "' has no quality caption");
        const Vector img = model.encode_image(world.features(rec.image_ref, rec.image_id));
        r.original.add(model.encode_text(rec.original_caption).dot(img));
        r.quality.add(model.encode_text(*rec.quality_caption).dot(img));
    }
    return r;
}

// ---- linear probe -----------------------------------------------------------

struct ProbeConfig {
    double l2 = 1e-4;
    size_t iterations = 500;
    double learning_rate = 1.0;
};

struct LabeledSet {
    Matrix x; // n x d
    std::vector<int> labels;
    int classes = 0;
};

// Multinomial logistic regression by full-batch gradient descent. Trains on
// k examples per class drawn from `train` (k = 0 uses all) and reports test
// accuracy.
inline double linear_probe(const LabeledSet& train, const LabeledSet& test, size_t k, uint64_t seed,
                           const ProbeConfig& config = {}) {
    const int C = train.classes;
    std::vector<std::vector<Eigen::Index>> by_class(static_cast<size_t>(C));
    for (Eigen::Index i = 0; i < train.x.rows(); ++i) by_class[static_cast<size_t>(train.labels[static_cast<size_t>(i)])].push_back(i);
    std::vector<Eigen::Index> rows;
    std::mt19937_64 rng(mix_seed(seed, "probe"));
    for (int c = 0; c < C; ++c) {
        auto& pool = by_class[static_cast<size_t>(c)];
        if (k > 0 && pool.size() < k)
            throw Error("class " + std::to_string(c) + " has " + std::to_string(pool.size()) + " examples, fewer than k = " +
                        std::to_string(k));
        std::shuffle(pool.begin(), pool.end(), rng);
        const size_t take = k == 0 ? pool.size() : k;
        rows.insert(rows.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = train.x.cols();
    Matrix x(n, d + 1);
    Matrix y = Matrix::Zero(n, C);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i).head(d) = train.x.row(rows[static_cast<size_t>(i)]);
        x(i, d) = 1.0;
        y(i, train.labels[static_cast<size_t>(rows[static_cast<size_t>(i)])]) = 1.0;
    }
    Matrix w = Matrix::Zero(d + 1, C);
    for (size_t it = 0; it < config.iterations; ++it) {
        Matrix logits = x * w;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double mx = logits.row(i).maxCoeff();
            logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
            logits.row(i) /= logits.row(i).sum();
        }
        Matrix grad = x.transpose() * (logits - y) / static_cast<double>(n);
        grad.topRows(d) += config.l2 * w.topRows(d);
        w -= config.learning_rate * grad;
    }
    size_t correct = 0;
    for (Eigen::Index i = 0; i < test.x.rows(); ++i) {
        Vector xi(d + 1);
        xi.head(d) = test.x.row(i).transpose();
        xi[d] = 1.0;
        Eigen::Index best = 0;
        (w.transpose() * xi).maxCoeff(&best);
        correct += best == test.labels[static_cast<size_t>(i)];
    }
    return static_cast<double>(correct) / static_cast<double>(test.x.rows());
}

// Probe task: single-object scenes labeled by noun. Images are rendered
// with `noise_sigma` (world default when unset); at the world's own noise the
// task is trivially separable, so evaluation raises it.
struct ProbeData {
    std::vector<std::pair<Vector, int>> train;
    std::vector<std::pair<Vector, int>> test;
    int classes = 0;
};

inline ProbeData probe_dataset(const World& base_world, size_t train_per_class, size_t test_per_class, uint64_t seed,
                               std::optional<double> noise_sigma = std::nullopt) {
    World world = base_world;
    if (noise_sigma) world.config.noise_sigma = *noise_sigma;
    ProbeData d;
    const auto& nouns = world.vocab.of(WordCategory::noun);
    d.classes = static_cast<int>(nouns.size());
    std::vector<size_t> train_left(nouns.size(), train_per_class), test_left(nouns.size(), test_per_class);
    size_t remaining = nouns.size() * (train_per_class + test_per_class);
    for (uint64_t k = 0; remaining > 0; ++k) {
        const uint64_t s = mix_seed(mix_seed(seed, "probe-scene"), k);
        const auto scene = generate_scene(s, world.vocab, 1);
        const auto label = static_cast<size_t>(
            std::find(nouns.begin(), nouns.end(), scene.objects.front().noun) - nouns.begin());
        const Vector f = world.features(scene, s);
        if (train_left[label] > 0) {
            --train_left[label];
            d.train.emplace_back(f, static_cast<int>(label));
            --remaining;
        } else if (test_left[label] > 0) {
            --test_left[label];
            d.test.emplace_back(f, static_cast<int>(label));
            --remaining;
        }
    }
    return d;
}

inline LabeledSet embed_labeled(const EncoderView& model, const std::vector<std::pair<Vector, int>>& data, int classes) {
    LabeledSet s;
    s.classes = classes;
    s.x.resize(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(model.weights().image_projection.rows()));
    for (size_t i = 0; i < data.size(); ++i) {
        s.x.row(static_cast<Eigen::Index>(i)) = model.encode_image(data[i].first).transpose();
        s.labels.push_back(data[i].second);
    }
    return s;
}

// Probe accuracy per shot count (0 = all training examples).
inline std::map<size_t, double> probe_accuracies(const EncoderView& model, const ProbeData& data,
                                                 const std::vector<size_t>& shots, uint64_t seed,
                                                 const ProbeConfig& config = {}) {
    const auto train = embed_labeled(model, data.train, data.classes);
    const auto test = embed_labeled(model, data.test, data.classes);
    std::map<size_t, double> out;
    for (size_t k : shots) out[k] = linear_probe(train, test, k, seed, config);
    return out;
}

inline nlohmann::ordered_json probe_to_json(const std::map<size_t, double>& acc) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, a] : acc) j[k == 0 ? std::string("all") : std::to_string(k)] = a;
    return j;
}

// Locators of freshly drawn scenes for evaluation; their seeds live in a
// different stream from synthesized training records.
inline std::vector<std::string> eval_scene_refs(const World& world, size_t count, uint64_t seed) {
    std::vector<std::string> refs;
    refs.reserve(count);
    const uint64_t stream = mix_seed(seed, "eval-scenes");
    for (uint64_t k = 0; k < count; ++k) refs.push_back(scene_ref(mix_seed(stream, k), world.config.complexity));
    return refs;
}

} // namespace dac
