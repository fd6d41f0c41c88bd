#pragma once

// Synthetic compositional world: scenes of attributed objects with pairwise
// relations, a regular caption grammar over them, a truth oracle, and a
// hashed-factor "image" embedding.
//
// Grammar (whitespace tokens, case-insensitive, trailing . ! ? ignored):
//   caption := clause ("and" clause)*
//   clause  := np [relation np]
//   np      := ("a" | "an" | "the") [attribute] noun

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dac/util.hpp"

namespace dac {

enum class WordCategory { noun, color, material, size, state, action, spatial };

inline std::string_view category_name(WordCategory c) {
    switch (c) {
    case WordCategory::noun: return "noun";
    case WordCategory::color: return "color";
    case WordCategory::material: return "material";
    case WordCategory::size: return "size";
    case WordCategory::state: return "state";
    case WordCategory::action: return "action";
    case WordCategory::spatial: return "spatial-relation";
    }
    return "unknown";
}

inline WordCategory parse_category(std::string_view name) {
    for (auto c : {WordCategory::noun, WordCategory::color, WordCategory::material, WordCategory::size,
                   WordCategory::state, WordCategory::action, WordCategory::spatial}) {
        if (category_name(c) == name) return c;
    }
    throw Error("unknown word category '" + std::string(name) + "'");
}

inline bool is_attribute_category(WordCategory c) {
    return c == WordCategory::color || c == WordCategory::material || c == WordCategory::size ||
           c == WordCategory::state;
}

inline bool is_relation_category(WordCategory c) {
    return c == WordCategory::action || c == WordCategory::spatial;
}

inline const std::vector<std::string>& function_words() {
    static const std::vector<std::string> words{"a", "an", "the", "and"};
    return words;
}

// Keys of the vocabulary / lexicon config file, in file order.
inline const std::vector<std::pair<std::string, WordCategory>>& vocabulary_keys() {
    static const std::vector<std::pair<std::string, WordCategory>> keys{
        {"nouns", WordCategory::noun},     {"colors", WordCategory::color},
        {"materials", WordCategory::material}, {"sizes", WordCategory::size},
        {"states", WordCategory::state},   {"actions", WordCategory::action},
        {"spatial_relations", WordCategory::spatial},
    };
    return keys;
}

struct Vocabulary {
    std::map<WordCategory, std::vector<std::string>> words;

    static Vocabulary standard() {
        Vocabulary v;
        v.words[WordCategory::noun] = {"car",  "dog",   "man",   "woman", "house", "tree",  "cat",   "ball",
                                       "table", "chair", "horse", "boat",  "bird",  "cup",   "lamp",  "book",
                                       "bike", "girl",  "boy",   "box",   "bottle", "phone", "plate", "truck"};
        v.words[WordCategory::color] = {"red", "blue", "green", "yellow", "black", "white"};
        v.words[WordCategory::material] = {"wooden", "metal", "plastic", "glass"};
        v.words[WordCategory::size] = {"big", "small", "tall", "tiny"};
        v.words[WordCategory::state] = {"wet", "broken", "clean", "dirty"};
        v.words[WordCategory::action] = {"feeds", "chases", "holds", "watches", "pushes"};
        v.words[WordCategory::spatial] = {"on", "under", "behind", "above", "beside"};
        return v;
    }

    const std::vector<std::string>& of(WordCategory c) const {
        static const std::vector<std::string> empty;
        auto it = words.find(c);
        return it == words.end() ? empty : it->second;
    }

    std::vector<std::string> attributes() const {
        std::vector<std::string> out;
        for (auto& [c, ws] : words)
            if (is_attribute_category(c)) out.insert(out.end(), ws.begin(), ws.end());
        return out;
    }

    std::vector<std::string> relations() const {
        std::vector<std::string> out;
        for (auto& [c, ws] : words)
            if (is_relation_category(c)) out.insert(out.end(), ws.begin(), ws.end());
        return out;
    }

    std::optional<WordCategory> category_of(std::string_view word) const {
        for (auto& [c, ws] : words)
            if (std::find(ws.begin(), ws.end(), word) != ws.end()) return c;
        return std::nullopt;
    }

    // Number of distinct content words; the image embedding must be at least this wide.
    size_t factor_count() const {
        size_t n = 0;
        for (auto& [c, ws] : words) n += ws.size();
        return n;
    }

    void validate() const {
        std::set<std::string> seen;
        for (auto& [key, c] : vocabulary_keys()) {
            const auto& ws = of(c);
            if (ws.size() < 2) throw Error("vocabulary category '" + key + "' needs at least 2 words");
            for (const auto& w : ws) {
                if (w.empty() || w != normalize_token(w) || split_whitespace(w).size() != 1)
                    throw Error("vocabulary word '" + w + "' must be a single lower-case token");
                if (std::find(function_words().begin(), function_words().end(), w) != function_words().end())
                    throw Error("vocabulary word '" + w + "' collides with a grammar word");
                if (!seen.insert(w).second) throw Error("vocabulary word '" + w + "' appears twice");
            }
        }
    }

    uint64_t hash() const {
        uint64_t h = fnv1a("vocabulary");
        for (auto& [key, c] : vocabulary_keys())
            for (const auto& w : of(c)) h = fnv1a(key + ":" + w + ";", h);
        return h;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        for (auto& [key, c] : vocabulary_keys()) j[key] = of(c);
        return j;
    }

    static Vocabulary from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw Error("vocabulary must be a JSON object");
        Vocabulary v;
        for (auto it = j.begin(); it != j.end(); ++it) {
            auto key = std::find_if(vocabulary_keys().begin(), vocabulary_keys().end(),
                                    [&](auto& kv) { return kv.first == it.key(); });
            if (key == vocabulary_keys().end()) throw Error("unknown vocabulary key '" + it.key() + "'");
            v.words[key->second] = it.value().get<std::vector<std::string>>();
        }
        v.validate();
        return v;
    }
};

struct SceneObject {
    std::string noun;
    std::string attribute;
    bool operator==(const SceneObject&) const = default;
};

struct Relation {
    std::string subject;
    std::string relation;
    std::string object;
    bool operator==(const Relation&) const = default;
};

struct Scene {
    uint64_t scene_id = 0;
    std::vector<SceneObject> objects;
    std::vector<Relation> relations;
    uint64_t vocab_hash = 0;

    bool operator==(const Scene&) const = default;

    const SceneObject* find(std::string_view noun) const {
        for (const auto& o : objects)
            if (o.noun == noun) return &o;
        return nullptr;
    }

    bool has_relation(std::string_view s, std::string_view r, std::string_view o) const {
        return std::any_of(relations.begin(), relations.end(),
                           [&](const Relation& rel) { return rel.subject == s && rel.relation == r && rel.object == o; });
    }
};

// Checks the structural invariants of a scene against a vocabulary.
inline bool scene_is_valid(const Scene& scene, const Vocabulary& vocab) {
    std::set<std::string> nouns;
    for (const auto& o : scene.objects) {
        if (vocab.category_of(o.noun) != WordCategory::noun) return false;
        auto ac = vocab.category_of(o.attribute);
        if (!ac || !is_attribute_category(*ac)) return false;
        if (!nouns.insert(o.noun).second) return false;
    }
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& r : scene.relations) {
        auto rc = vocab.category_of(r.relation);
        if (!rc || !is_relation_category(*rc)) return false;
        if (!nouns.count(r.subject) || !nouns.count(r.object) || r.subject == r.object) return false;
        auto key = std::minmax(r.subject, r.object);
        if (!pairs.insert({key.first, key.second}).second) return false;
    }
    return !scene.objects.empty();
}

// Deterministic in `seed`: `complexity` objects with distinct nouns, one
// attribute each, and 0..complexity-1 relations over distinct object pairs.
inline Scene generate_scene(uint64_t seed, const Vocabulary& vocab, size_t complexity) {
    const auto& nouns = vocab.of(WordCategory::noun);
    if (complexity < 1 || complexity > nouns.size())
        throw Error("scene complexity must be in [1, " + std::to_string(nouns.size()) + "]");
    std::mt19937_64 rng(mix_seed(seed, "scene"));
    auto pick = [&](size_t n) { return std::uniform_int_distribution<size_t>(0, n - 1)(rng); };

    Scene scene;
    scene.scene_id = seed;
    scene.vocab_hash = vocab.hash();

    std::vector<size_t> order(nouns.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = 0; i < complexity; ++i) std::swap(order[i], order[i + pick(order.size() - i)]);

    const auto attributes = vocab.attributes();
    for (size_t i = 0; i < complexity; ++i)
        scene.objects.push_back({nouns[order[i]], attributes[pick(attributes.size())]});

    const auto relations = vocab.relations();
    const size_t n_rel = pick(complexity);
    std::vector<std::pair<size_t, size_t>> pairs;
    for (size_t a = 0; a < complexity; ++a)
        for (size_t b = a + 1; b < complexity; ++b) pairs.emplace_back(a, b);
    for (size_t r = 0; r < n_rel; ++r) {
        size_t k = r + pick(pairs.size() - r);
        std::swap(pairs[r], pairs[k]);
        auto [a, b] = pairs[r];
        if (pick(2)) std::swap(a, b);
        scene.relations.push_back({scene.objects[a].noun, relations[pick(relations.size())], scene.objects[b].noun});
    }
    return scene;
}

struct NounPhrase {
    std::string determiner;
    std::optional<std::string> attribute;
    std::string noun;
    bool operator==(const NounPhrase&) const = default;
};

struct Clause {
    NounPhrase subject;
    std::optional<std::string> relation;
    std::optional<NounPhrase> object;
    bool operator==(const Clause&) const = default;
};

class CaptionParseError : public Error {
public:
    using Error::Error;
};

inline std::vector<Clause> parse_caption(std::string_view caption, const Vocabulary& vocab) {
    const auto tokens = normalized_tokens(caption);
    if (tokens.empty()) throw CaptionParseError("empty caption");
    std::vector<Clause> clauses;
    size_t i = 0;
    auto fail = [&](const std::string& why) -> CaptionParseError {
        return CaptionParseError("cannot parse caption '" + std::string(caption) + "': " + why);
    };
    auto is_det = [](const std::string& t) { return t == "a" || t == "an" || t == "the"; };
    auto parse_np = [&]() {
        NounPhrase np;
        if (i >= tokens.size() || !is_det(tokens[i])) throw fail("expected determiner");
        np.determiner = tokens[i++];
        if (i >= tokens.size()) throw fail("expected noun");
        auto c = vocab.category_of(tokens[i]);
        if (c && is_attribute_category(*c)) {
            np.attribute = tokens[i++];
            if (i >= tokens.size()) throw fail("expected noun");
            c = vocab.category_of(tokens[i]);
        }
        if (c != WordCategory::noun) throw fail("expected noun at '" + tokens[i] + "'");
        np.noun = tokens[i++];
        return np;
    };
    while (true) {
        Clause clause;
        clause.subject = parse_np();
        if (i < tokens.size()) {
            auto c = vocab.category_of(tokens[i]);
            if (c && is_relation_category(*c)) {
                clause.relation = tokens[i++];
                clause.object = parse_np();
            }
        }
        clauses.push_back(std::move(clause));
        if (i == tokens.size()) break;
        if (tokens[i] != "and") throw fail("unexpected token '" + tokens[i] + "'");
        ++i;
    }
    return clauses;
}

inline std::string render_noun_phrase(const NounPhrase& np) {
    return np.determiner + " " + (np.attribute ? *np.attribute + " " : std::string()) + np.noun;
}

inline std::string render_clauses(const std::vector<Clause>& clauses) {
    std::vector<std::string> parts;
    for (const auto& c : clauses) {
        std::string s = render_noun_phrase(c.subject);
        if (c.relation) s += " " + *c.relation + " " + render_noun_phrase(*c.object);
        parts.push_back(std::move(s));
    }
    return join(parts, " and ");
}

enum class CaptionMode { full, partial, misaligned };

namespace detail {

inline std::vector<Clause> scene_clauses(const Scene& scene, const std::set<size_t>& hidden_attributes,
                                         const std::set<size_t>& hidden_relations) {
    auto np = [&](const std::string& noun) {
        for (size_t k = 0; k < scene.objects.size(); ++k) {
            if (scene.objects[k].noun != noun) continue;
            NounPhrase p{"a", std::nullopt, noun};
            if (!hidden_attributes.count(k)) p.attribute = scene.objects[k].attribute;
            return p;
        }
        throw Error("relation references an object missing from the scene");
    };
    std::vector<Clause> clauses;
    std::set<std::string> mentioned;
    for (size_t r = 0; r < scene.relations.size(); ++r) {
        if (hidden_relations.count(r)) continue;
        const auto& rel = scene.relations[r];
        clauses.push_back({np(rel.subject), rel.relation, np(rel.object)});
        mentioned.insert(rel.subject);
        mentioned.insert(rel.object);
    }
    for (const auto& o : scene.objects)
        if (!mentioned.count(o.noun)) clauses.push_back({np(o.noun), std::nullopt, std::nullopt});
    return clauses;
}

} // namespace detail

// Clauses of the full rendering: one per relation, then one per object not
// covered by a relation.
inline std::vector<Clause> scene_clauses(const Scene& scene) { return detail::scene_clauses(scene, {}, {}); }

inline std::string render_caption(const Scene& scene, const Vocabulary& vocab, CaptionMode mode, uint64_t seed) {
    switch (mode) {
    case CaptionMode::full: return render_clauses(scene_clauses(scene));
    case CaptionMode::partial: {
        // details are attributes (one per object) followed by relations
        const size_t n_attr = scene.objects.size();
        const size_t n_detail = n_attr + scene.relations.size();
        std::mt19937_64 rng(mix_seed(mix_seed(seed, scene.scene_id), "partial"));
        std::vector<bool> drop(n_detail);
        bool any = false;
        for (size_t k = 0; k < n_detail; ++k) any |= (drop[k] = (rng() & 1u) != 0);
        if (!any) drop[std::uniform_int_distribution<size_t>(0, n_detail - 1)(rng)] = true;
        std::set<size_t> attrs, rels;
        for (size_t k = 0; k < n_detail; ++k) {
            if (!drop[k]) continue;
            if (k < n_attr) attrs.insert(k);
            else rels.insert(k - n_attr);
        }
        return render_clauses(detail::scene_clauses(scene, attrs, rels));
    }
    case CaptionMode::misaligned: {
        auto other = generate_scene(mix_seed(seed, scene.scene_id) + 1, vocab, scene.objects.size());
        return render_clauses(scene_clauses(other));
    }
    }
    throw Error("unknown caption mode");
}

// True iff every noun phrase and relation stated by the caption holds in the scene.
inline bool caption_truth(const Scene& scene, std::string_view caption, const Vocabulary& vocab) {
    auto np_holds = [&](const NounPhrase& np) {
        const auto* obj = scene.find(np.noun);
        return obj && (!np.attribute || *np.attribute == obj->attribute);
    };
    for (const auto& clause : parse_caption(caption, vocab)) {
        if (!np_holds(clause.subject)) return false;
        if (clause.relation) {
            if (!np_holds(*clause.object)) return false;
            if (!scene.has_relation(clause.subject.noun, *clause.relation, clause.object->noun)) return false;
        }
    }
    return true;
}

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Relative weight of each factor family in the image embedding.
struct FeatureWeights {
    double object = 1.0;    // per noun
    double binding = 0.3;   // per (noun, attribute)
    double attribute = 0.3; // per attribute word
    double relation = 0.4;  // per relation word
    double triple = 0.3;    // per (subject, relation, object)
};

// Deterministic unit-norm random code for a named factor.
inline Vector factor_code(std::string_view key, size_t dim) {
    std::mt19937_64 rng(fnv1a(key));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
    return v / v.norm();
}

inline Vector embed_scene(const Scene& scene, const Vocabulary& vocab, size_t dim, double noise_sigma, uint64_t seed,
                          const FeatureWeights& w = {}) {
    if (dim < vocab.factor_count())
        throw Error("embedding dim " + std::to_string(dim) + " is below the vocabulary factor count " +
                    std::to_string(vocab.factor_count()));
    Vector v = Vector::Zero(static_cast<Eigen::Index>(dim));
    auto add = [&](double weight, const std::string& key) {
        if (weight != 0.0) v += weight * factor_code(key, dim);
    };
    for (const auto& o : scene.objects) {
        add(w.object, "obj:" + o.noun);
        add(w.binding, "bind:" + o.noun + "|" + o.attribute);
        add(w.attribute, "attr:" + o.attribute);
    }
    for (const auto& r : scene.relations) {
        add(w.relation, "rel:" + r.relation);
        add(w.triple, "triple:" + r.subject + "|" + r.relation + "|" + r.object);
    }
    if (noise_sigma > 0.0) {
        std::mt19937_64 rng(mix_seed(seed, "noise"));
        std::normal_distribution<double> normal(0.0, noise_sigma);
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += normal(rng);
    }
    return v;
}

// Image locators in the synthetic world: "scene:<seed>:<complexity>" for a whole
// scene and "scene:<seed>:<complexity>#<k>" for the segment holding object k.
inline std::string scene_ref(uint64_t seed, size_t complexity) {
    return "scene:" + std::to_string(seed) + ":" + std::to_string(complexity);
}

inline std::string segment_ref(std::string_view image_ref, size_t object_index) {
    return std::string(image_ref) + "#" + std::to_string(object_index);
}

struct SceneRef {
    uint64_t seed = 0;
    size_t complexity = 0;
    std::optional<size_t> segment;
};

inline SceneRef parse_scene_ref(std::string_view ref) {
    auto bad = [&] { return Error("not a scene locator: '" + std::string(ref) + "'"); };
    if (ref.substr(0, 6) != "scene:") throw bad();
    std::string rest(ref.substr(6));
    SceneRef out;
    auto hash = rest.find('#');
    if (hash != std::string::npos) {
        try {
            out.segment = std::stoull(rest.substr(hash + 1));
        } catch (const std::exception&) {
            throw bad();
        }
        rest = rest.substr(0, hash);
    }
    auto colon = rest.find(':');
    if (colon == std::string::npos) throw bad();
    try {
        size_t used = 0;
        out.seed = std::stoull(rest.substr(0, colon), &used);
        if (used != colon) throw bad();
        out.complexity = std::stoull(rest.substr(colon + 1), &used);
        if (used != rest.size() - colon - 1) throw bad();
    } catch (const std::exception&) {
        throw bad();
    }
    return out;
}

struct WorldConfig {
    size_t complexity = 3;
    size_t feature_dim = 128;
    double noise_sigma = 0.05;
    FeatureWeights weights;
};

// Vocabulary plus embedding settings; resolves scene locators.
struct World {
    Vocabulary vocab = Vocabulary::standard();
    WorldConfig config;

    Scene scene(std::string_view image_ref) const {
        auto ref = parse_scene_ref(image_ref);
        return generate_scene(ref.seed, vocab, ref.complexity);
    }

    Scene scene(uint64_t seed) const { return generate_scene(seed, vocab, config.complexity); }

    Vector features(const Scene& scene, uint64_t noise_seed) const {
        return embed_scene(scene, vocab, config.feature_dim, config.noise_sigma, noise_seed, config.weights);
    }

    Vector features(std::string_view image_ref, std::string_view image_id) const {
        return features(scene(image_ref), fnv1a(image_id));
    }
};

} // namespace dac
