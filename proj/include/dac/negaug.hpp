#pragma once

// Rule-based negative captions: single-word same-category substitution and
// subject/object reordering of relation clauses.

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dac/scene.hpp"
#include "dac/util.hpp"

namespace dac {

struct Lexicon {
    std::map<WordCategory, std::vector<std::string>> words;

    // Every non-noun category of the vocabulary.
    static Lexicon from_vocabulary(const Vocabulary& vocab) {
        Lexicon lex;
        for (auto& [c, ws] : vocab.words)
            if (c != WordCategory::noun) lex.words[c] = ws;
        lex.validate();
        return lex;
    }

    // Reads the shared vocabulary file format; the nouns key is accepted and ignored.
    static Lexicon from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw Error("lexicon must be a JSON object");
        Lexicon lex;
        for (auto it = j.begin(); it != j.end(); ++it) {
            auto key = std::find_if(vocabulary_keys().begin(), vocabulary_keys().end(),
                                    [&](auto& kv) { return kv.first == it.key(); });
            if (key == vocabulary_keys().end()) throw Error("unknown lexicon key '" + it.key() + "'");
            if (key->second == WordCategory::noun) continue;
            lex.words[key->second] = it.value().get<std::vector<std::string>>();
        }
        lex.validate();
        return lex;
    }

    void validate() const {
        if (words.empty()) throw Error("lexicon has no categories");
        for (auto& [c, ws] : words) {
            if (c == WordCategory::noun) throw Error("lexicon cannot hold a noun category");
            if (ws.size() < 2) throw Error("lexicon category '" + std::string(category_name(c)) + "' needs >= 2 words");
            std::set<std::string> distinct;
            for (const auto& w : ws)
                if (!distinct.insert(to_lower(w)).second)
                    throw Error("lexicon category '" + std::string(category_name(c)) + "' repeats '" + w + "'");
        }
    }

    std::optional<WordCategory> category_of(std::string_view lowered) const {
        for (auto& [c, ws] : words)
            for (const auto& w : ws)
                if (to_lower(w) == lowered) return c;
        return std::nullopt;
    }
};

struct NegativeCandidate {
    size_t token_index = 0;
    WordCategory category = WordCategory::color;
    std::string word;
    bool operator==(const NegativeCandidate&) const = default;
};

struct NegativeCaption {
    std::string text;
    std::string source_text;
    size_t changed_position = 0;
    WordCategory category = WordCategory::color;
};

class NoCandidateError : public Error {
public:
    using Error::Error;
};

inline std::vector<NegativeCandidate> detect_candidates(std::string_view caption, const Lexicon& lexicon) {
    std::vector<NegativeCandidate> out;
    const auto tokens = split_whitespace(caption);
    for (size_t i = 0; i < tokens.size(); ++i) {
        auto word = normalize_token(tokens[i]);
        if (auto c = lexicon.category_of(word)) out.push_back({i, *c, word});
    }
    return out;
}

// Replaces one seed-chosen lexicon word by a different word of its category.
// The output keeps the token count, the untouched tokens, and any trailing
// punctuation on the replaced token.
inline NegativeCaption make_negative(std::string_view caption, const Lexicon& lexicon, uint64_t seed,
                                     std::optional<WordCategory> category_filter = std::nullopt) {
    auto candidates = detect_candidates(caption, lexicon);
    if (category_filter)
        std::erase_if(candidates, [&](const NegativeCandidate& c) { return c.category != *category_filter; });
    if (candidates.empty()) throw NoCandidateError("no lexicon word in caption '" + std::string(caption) + "'");

    std::mt19937_64 rng(mix_seed(mix_seed(seed, caption), "negative"));
    const auto& cand = candidates[std::uniform_int_distribution<size_t>(0, candidates.size() - 1)(rng)];
    std::vector<std::string> options;
    for (const auto& w : lexicon.words.at(cand.category))
        if (to_lower(w) != cand.word) options.push_back(to_lower(w));
    const auto& replacement = options[std::uniform_int_distribution<size_t>(0, options.size() - 1)(rng)];

    auto tokens = split_whitespace(caption);
    auto& tok = tokens[cand.token_index];
    size_t stem = tok.size();
    while (stem > 0 && (is_terminator(tok[stem - 1]) || tok[stem - 1] == ',')) --stem;
    tok = replacement + tok.substr(stem);

    NegativeCaption neg;
    neg.text = join(tokens, " ");
    neg.source_text = std::string(caption);
    neg.changed_position = cand.token_index;
    neg.category = cand.category;
    return neg;
}

// Swaps the subject and object noun phrases of one seed-chosen relation clause.
inline std::string make_order_negative(std::string_view caption, const Lexicon& lexicon, uint64_t seed) {
    auto tokens = split_whitespace(caption);
    std::string terminal;
    if (!tokens.empty()) {
        auto& last = tokens.back();
        size_t stem = last.size();
        while (stem > 0 && is_terminator(last[stem - 1])) --stem;
        terminal = last.substr(stem);
        last.resize(stem);
        if (last.empty()) tokens.pop_back();
    }

    struct Span {
        size_t subj_begin, rel, obj_end;
    };
    std::vector<Span> clauses;
    size_t begin = 0;
    for (size_t i = 0; i <= tokens.size(); ++i) {
        if (i < tokens.size() && to_lower(tokens[i]) != "and") continue;
        for (size_t k = begin + 1; k + 1 < i; ++k) {
            auto c = lexicon.category_of(normalize_token(tokens[k]));
            if (c && is_relation_category(*c)) {
                clauses.push_back({begin, k, i});
                break;
            }
        }
        begin = i + 1;
    }
    if (clauses.empty()) throw Error("caption '" + std::string(caption) + "' has no relation clause");

    std::mt19937_64 rng(mix_seed(mix_seed(seed, caption), "order"));
    const auto& span = clauses[std::uniform_int_distribution<size_t>(0, clauses.size() - 1)(rng)];
    std::vector<std::string> out(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(span.subj_begin));
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(span.rel + 1),
               tokens.begin() + static_cast<std::ptrdiff_t>(span.obj_end));
    out.push_back(tokens[span.rel]);
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(span.subj_begin),
               tokens.begin() + static_cast<std::ptrdiff_t>(span.rel));
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(span.obj_end), tokens.end());
    if (out == tokens) throw Error("reordering leaves caption '" + std::string(caption) + "' unchanged");
    if (!terminal.empty()) out.back() += terminal;
    return join(out, " ");
}

} // namespace dac
