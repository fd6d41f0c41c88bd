#pragma once

// Caption records, the line-delimited manifest format, and MIL bag sampling.
//
// Manifest format: one JSON object per line, UTF-8, keys always in this order:
//   image_id, image_ref, original_caption, quality_caption (string or null),
//   expansions ([{text, source: "llm"|"segment"}]),
//   negatives ({caption: [{text, category}]}), failures ([stage])

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dac/util.hpp"

namespace dac {

enum class ExpansionSource { llm, segment };

inline std::string_view source_name(ExpansionSource s) { return s == ExpansionSource::llm ? "llm" : "segment"; }

inline ExpansionSource parse_source(std::string_view s) {
    if (s == "llm") return ExpansionSource::llm;
    if (s == "segment") return ExpansionSource::segment;
    throw Error("unknown expansion source '" + std::string(s) + "'");
}

struct Expansion {
    std::string text;
    ExpansionSource source = ExpansionSource::llm;
    bool operator==(const Expansion&) const = default;
};

struct NegativeText {
    std::string text;
    std::string category;
    bool operator==(const NegativeText&) const = default;
};

struct CaptionRecord {
    std::string image_id;
    std::string image_ref;
    std::string original_caption;
    std::optional<std::string> quality_caption{};
    std::vector<Expansion> expansions{};
    std::map<std::string, std::vector<NegativeText>> negatives{};
    std::vector<std::string> failures{}; // stages that failed for this record

    bool operator==(const CaptionRecord&) const = default;
};

class ManifestError : public Error {
public:
    ManifestError(const std::string& what, size_t line = 0) : Error(what), line_(line) {}
    // 1-based line number, 0 when not tied to a line
    size_t line() const { return line_; }

private:
    size_t line_;
};

class DuplicateIdError : public ManifestError {
public:
    using ManifestError::ManifestError;
};

// Throws ManifestError describing the first violated invariant.
inline void validate_record(const CaptionRecord& r) {
    if (trim(r.image_id).empty()) throw ManifestError("record has an empty image_id");
    for (const auto& e : r.expansions)
        if (trim(e.text).empty()) throw ManifestError("record '" + r.image_id + "' has an empty expansion");
    for (const auto& [source, negs] : r.negatives) {
        for (const auto& n : negs) {
            if (normalized_tokens(n.text) == normalized_tokens(source))
                throw ManifestError("record '" + r.image_id + "' has a negative identical to its source caption '" +
                                    source + "'");
        }
    }
}

inline nlohmann::ordered_json record_to_json(const CaptionRecord& r) {
    nlohmann::ordered_json j;
    j["image_id"] = r.image_id;
    j["image_ref"] = r.image_ref;
    j["original_caption"] = r.original_caption;
    j["quality_caption"] = r.quality_caption ? nlohmann::ordered_json(*r.quality_caption) : nlohmann::ordered_json();
    auto& exps = j["expansions"] = nlohmann::ordered_json::array();
    for (const auto& e : r.expansions) {
        nlohmann::ordered_json x;
        x["text"] = e.text;
        x["source"] = source_name(e.source);
        exps.push_back(std::move(x));
    }
    auto& negs = j["negatives"] = nlohmann::ordered_json::object();
    for (const auto& [source, list] : r.negatives) {
        auto& arr = negs[source] = nlohmann::ordered_json::array();
        for (const auto& n : list) {
            nlohmann::ordered_json x;
            x["text"] = n.text;
            x["category"] = n.category;
            arr.push_back(std::move(x));
        }
    }
    j["failures"] = r.failures;
    return j;
}

inline CaptionRecord record_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"image_id",  "image_ref", "original_caption", "quality_caption",
                                             "expansions", "negatives", "failures"};
    if (!j.is_object()) throw Error("record is not a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw Error("unknown key '" + it.key() + "'");
    CaptionRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.image_ref = j.at("image_ref").get<std::string>();
    r.original_caption = j.at("original_caption").get<std::string>();
    if (j.contains("quality_caption") && !j["quality_caption"].is_null())
        r.quality_caption = j["quality_caption"].get<std::string>();
    if (j.contains("expansions")) {
        for (const auto& x : j["expansions"])
            r.expansions.push_back({x.at("text").get<std::string>(), parse_source(x.at("source").get<std::string>())});
    }
    if (j.contains("negatives")) {
        for (auto it = j["negatives"].begin(); it != j["negatives"].end(); ++it) {
            auto& list = r.negatives[it.key()];
            for (const auto& x : it.value())
                list.push_back({x.at("text").get<std::string>(), x.at("category").get<std::string>()});
        }
    }
    if (j.contains("failures")) r.failures = j["failures"].get<std::vector<std::string>>();
    return r;
}

inline std::string serialize_record(const CaptionRecord& r) {
    validate_record(r);
    try {
        return record_to_json(r).dump();
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError("record '" + r.image_id + "' is not serializable: " + e.what());
    }
}

inline void write_manifest(std::ostream& out, const std::vector<CaptionRecord>& records) {
    std::set<std::string> ids;
    for (const auto& r : records) {
        if (!ids.insert(r.image_id).second) throw DuplicateIdError("duplicate image_id '" + r.image_id + "'");
        out << serialize_record(r) << '\n';
    }
}

// Writes to a sibling temp file and renames, so a failure leaves no partial manifest.
inline size_t write_manifest(const std::vector<CaptionRecord>& records, const std::filesystem::path& destination) {
    std::ostringstream buffer;
    write_manifest(buffer, records);
    auto tmp = destination;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ManifestError("cannot open '" + tmp.string() + "' for writing");
        out << buffer.str();
        if (!out.flush()) throw ManifestError("write to '" + tmp.string() + "' failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, destination, ec);
    if (ec) throw ManifestError("cannot move manifest into '" + destination.string() + "': " + ec.message());
    return records.size();
}

inline std::vector<CaptionRecord> read_manifest(std::istream& in) {
    std::vector<CaptionRecord> records;
    std::set<std::string> ids;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        CaptionRecord r;
        try {
            r = record_from_json(nlohmann::json::parse(line));
            validate_record(r);
        } catch (const std::exception& e) {
            throw ManifestError("manifest line " + std::to_string(line_no) + ": " + e.what(), line_no);
        }
        if (!ids.insert(r.image_id).second)
            throw DuplicateIdError("manifest line " + std::to_string(line_no) + ": duplicate image_id '" +
                                       r.image_id + "'",
                                   line_no);
        records.push_back(std::move(r));
    }
    return records;
}

inline std::vector<CaptionRecord> read_manifest(const std::filesystem::path& source) {
    std::ifstream in(source, std::ios::binary);
    if (!in) throw ManifestError("cannot open manifest '" + source.string() + "'");
    return read_manifest(in);
}

inline constexpr size_t kMaxBagSize = 64;

struct MilBag {
    std::string image_id;
    std::vector<std::string> captions;
    // Empty when the bag carries no negatives; otherwise parallel to `captions`,
    // with nullopt where no negative exists for that caption.
    std::vector<std::optional<std::string>> negatives;

    size_t size() const { return captions.size(); }
    bool operator==(const MilBag&) const = default;
};

inline bool bag_is_valid(const MilBag& bag, size_t max_size = kMaxBagSize) {
    if (bag.captions.empty() || bag.captions.size() > max_size) return false;
    std::set<std::string> distinct(bag.captions.begin(), bag.captions.end());
    if (distinct.size() != bag.captions.size()) return false;
    return bag.negatives.empty() || bag.negatives.size() == bag.captions.size();
}

// The quality caption (when present) plus a uniform sample without replacement
// of the remaining distinct expansions; no padding when candidates run short.
// Negatives are attached from the record's negatives map when any exist.
inline MilBag sample_bag(const CaptionRecord& record, size_t bag_size, uint64_t seed) {
    if (bag_size < 1 || bag_size > kMaxBagSize)
        throw Error("bag size must be in [1, " + std::to_string(kMaxBagSize) + "]");
    MilBag bag;
    bag.image_id = record.image_id;
    std::set<std::string> seen;
    if (record.quality_caption) {
        bag.captions.push_back(*record.quality_caption);
        seen.insert(*record.quality_caption);
    }
    std::vector<std::string> pool;
    for (const auto& e : record.expansions)
        if (seen.insert(e.text).second) pool.push_back(e.text);
    if (bag.captions.empty() && pool.empty())
        throw Error("record '" + record.image_id + "' has no candidate captions for a bag");

    const size_t want = std::min(bag_size - bag.captions.size(), pool.size());
    std::mt19937_64 rng(mix_seed(mix_seed(seed, record.image_id), "bag"));
    std::vector<size_t> idx(pool.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (size_t i = 0; i < want; ++i)
        std::swap(idx[i], idx[i + std::uniform_int_distribution<size_t>(0, idx.size() - i - 1)(rng)]);
    std::vector<size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(want));
    std::sort(chosen.begin(), chosen.end());
    for (size_t k : chosen) bag.captions.push_back(pool[k]);

    if (!record.negatives.empty()) {
        for (const auto& c : bag.captions) {
            auto it = record.negatives.find(c);
            if (it != record.negatives.end() && !it->second.empty()) bag.negatives.push_back(it->second.front().text);
            else bag.negatives.push_back(std::nullopt);
        }
    }
    return bag;
}

} // namespace dac
