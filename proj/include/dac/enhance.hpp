#pragma once

// Caption enhancement pipeline: quality captions, LLM expansions, segment
// captions and negative augmentation over pluggable backends, with a
// content-addressed cache so reruns make no backend calls.

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dac/corpus.hpp"
#include "dac/negaug.hpp"
#include "dac/scene.hpp"
#include "dac/util.hpp"

namespace dac {

class BackendError : public Error {
public:
    using Error::Error;
};

enum class BackendKind { captioner, expander, segmenter };
enum class BackendMode { mock, http };

inline std::string_view kind_name(BackendKind k) {
    switch (k) {
    case BackendKind::captioner: return "captioner";
    case BackendKind::expander: return "expander";
    case BackendKind::segmenter: return "segmenter";
    }
    return "?";
}

struct BackendSpec {
    BackendKind kind = BackendKind::captioner;
    BackendMode mode = BackendMode::mock;
    std::optional<std::string> endpoint{};
    double timeout = 30.0; // seconds
    int max_retries = 2;
    // mock expander output: true sentences taken from the caption, then
    // sentences describing an unrelated scene
    size_t mock_true = 3;
    size_t mock_hallucinated = 2;

    void validate() const {
        if (mode == BackendMode::http && (!endpoint || endpoint->empty()))
            throw Error(std::string(kind_name(kind)) + " backend in http mode needs an endpoint");
        if (!(timeout > 0.0)) throw Error("backend timeout must be positive");
        if (max_retries < 0) throw Error("max_retries must be non-negative");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"kind", kind_name(kind)},
                                 {"mode", mode == BackendMode::mock ? "mock" : "http"},
                                 {"endpoint", endpoint ? nlohmann::json(*endpoint) : nlohmann::json(nullptr)},
                                 {"timeout", timeout},
                                 {"max_retries", max_retries}};
        if (mode == BackendMode::mock && kind == BackendKind::expander) {
            j["mock_true"] = mock_true;
            j["mock_hallucinated"] = mock_hallucinated;
        }
        return j;
    }
};

inline constexpr std::string_view kDefaultPrompt = "what should I expect to see in an image of {caption}?";

struct PromptTemplate {
    std::string text{kDefaultPrompt};
    size_t max_expansions = 5;

    void validate() const {
        const auto first = text.find("{caption}");
        if (first == std::string::npos || text.find("{caption}", first + 1) != std::string::npos)
            throw Error("prompt template needs exactly one {caption} slot");
        if (max_expansions < 1) throw Error("max_expansions must be at least 1");
    }

    std::string instantiate(std::string_view caption) const {
        validate();
        std::string out = text;
        out.replace(out.find("{caption}"), 9, caption);
        return out;
    }

    // Inverse of instantiate, for backends that need the caption back.
    std::optional<std::string> extract(std::string_view prompt) const {
        const auto slot = text.find("{caption}");
        const std::string_view prefix(text.data(), slot);
        const std::string_view suffix(text.data() + slot + 9, text.size() - slot - 9);
        if (prompt.size() < prefix.size() + suffix.size()) return std::nullopt;
        if (prompt.substr(0, prefix.size()) != prefix) return std::nullopt;
        if (prompt.substr(prompt.size() - suffix.size()) != suffix) return std::nullopt;
        return std::string(prompt.substr(prefix.size(), prompt.size() - prefix.size() - suffix.size()));
    }
};

// One generation service. invoke() adds retries and call counting on top of
// the subclass's call().
class Backend {
public:
    explicit Backend(BackendSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
    virtual ~Backend() = default;

    std::vector<std::string> invoke(const std::string& input) {
        std::string last_error;
        for (int attempt = 0; attempt <= spec_.max_retries; ++attempt) {
            calls_.fetch_add(1);
            try {
                return call(input);
            } catch (const BackendError& e) {
                last_error = e.what();
            }
        }
        throw BackendError(std::string(kind_name(spec_.kind)) + " failed after " +
                           std::to_string(spec_.max_retries + 1) + " attempts: " + last_error);
    }

    const BackendSpec& spec() const { return spec_; }
    size_t calls() const { return calls_.load(); }

protected:
    virtual std::vector<std::string> call(const std::string& input) = 0;

private:
    BackendSpec spec_;
    std::atomic<size_t> calls_{0};
};

// Wraps any callable; used for tests and for embedding in other programs.
class CallbackBackend : public Backend {
public:
    using Fn = std::function<std::vector<std::string>(const std::string&)>;
    CallbackBackend(BackendSpec spec, Fn fn) : Backend(std::move(spec)), fn_(std::move(fn)) {}

protected:
    std::vector<std::string> call(const std::string& input) override { return fn_(input); }

private:
    Fn fn_;
};

// Captions a scene locator with its full render; a segment locator with the
// noun phrase of its object.
class MockCaptioner : public Backend {
public:
    MockCaptioner(BackendSpec spec, World world) : Backend(std::move(spec)), world_(std::move(world)) {}

protected:
    std::vector<std::string> call(const std::string& input) override {
        auto ref = parse_scene_ref(input);
        auto scene = generate_scene(ref.seed, world_.vocab, ref.complexity);
        if (!ref.segment) return {render_caption(scene, world_.vocab, CaptionMode::full, 0)};
        if (*ref.segment >= scene.objects.size()) throw Error("segment index out of range in '" + input + "'");
        const auto& o = scene.objects[*ref.segment];
        return {render_noun_phrase({"a", o.attribute, o.noun})};
    }

private:
    World world_;
};

// One segment per object.
class MockSegmenter : public Backend {
public:
    MockSegmenter(BackendSpec spec, World world) : Backend(std::move(spec)), world_(std::move(world)) {}

protected:
    std::vector<std::string> call(const std::string& input) override {
        auto ref = parse_scene_ref(input);
        if (ref.segment) throw Error("cannot segment a segment: '" + input + "'");
        auto scene = generate_scene(ref.seed, world_.vocab, ref.complexity);
        std::vector<std::string> out;
        for (size_t k = 0; k < scene.objects.size(); ++k) out.push_back(segment_ref(input, k));
        return out;
    }

private:
    World world_;
};

// Sentences entailed by the caption (each clause, then each noun phrase of a
// relation clause) followed by sentences about a caption-seeded unrelated
// scene, standing in for an LLM's mix of grounded and hallucinated detail.
class MockExpander : public Backend {
public:
    MockExpander(BackendSpec spec, Vocabulary vocab, PromptTemplate prompt)
        : Backend(std::move(spec)), vocab_(std::move(vocab)), prompt_(std::move(prompt)) {}

    static std::vector<std::string> true_sentences(const std::vector<Clause>& clauses) {
        std::vector<std::string> out;
        for (const auto& c : clauses) out.push_back(render_clauses({c}) + ".");
        for (const auto& c : clauses)
            if (c.relation) {
                out.push_back(render_noun_phrase(c.subject) + ".");
                out.push_back(render_noun_phrase(*c.object) + ".");
            }
        return out;
    }

protected:
    std::vector<std::string> call(const std::string& input) override {
        auto caption = prompt_.extract(input);
        if (!caption) throw Error("mock expander cannot read prompt '" + input + "'");
        auto truth = true_sentences(parse_caption(*caption, vocab_));
        truth.resize(std::min(truth.size(), spec().mock_true));
        auto other = generate_scene(fnv1a(*caption), vocab_, 3);
        auto fake = true_sentences(scene_clauses(other));
        fake.resize(std::min(fake.size(), spec().mock_hallucinated));
        std::string text;
        for (const auto& s : truth) text += s + " ";
        for (const auto& s : fake) text += s + " ";
        return {trim(text)};
    }

private:
    Vocabulary vocab_;
    PromptTemplate prompt_;
};

// Splits free text into sentences on . ! ?, trims, drops sentences under
// three tokens, dedups case-insensitively, keeps at most max_sentences.
inline std::vector<std::string> parse_sentences(std::string_view text, size_t max_sentences) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    std::string current;
    auto flush = [&] {
        auto s = trim(current);
        current.clear();
        if (s.empty() || split_whitespace(s).size() < 3) return;
        if (!seen.insert(to_lower(s)).second) return;
        if (out.size() < max_sentences) out.push_back(s);
    };
    for (char c : text) {
        current += c;
        if (is_terminator(c)) flush();
    }
    flush();
    return out;
}

// Content-addressed response cache: one JSON file per (stage, image_id,
// stage config). Writes go through a temporary file and a rename.
class Cache {
public:
    explicit Cache(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

    static uint64_t key(std::string_view stage, std::string_view image_id, std::string_view stage_config) {
        return fnv1a(stage_config, fnv1a(image_id, fnv1a(stage)));
    }

    std::filesystem::path path(uint64_t key) const { return dir_ / (hex64(key) + ".json"); }

    std::optional<std::vector<std::string>> get(uint64_t key) const {
        std::ifstream in(path(key), std::ios::binary);
        if (!in) return std::nullopt;
        try {
            return nlohmann::json::parse(in).at("outputs").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception&) {
            return std::nullopt; // torn or foreign file: treat as a miss
        }
    }

    void put(uint64_t key, const std::vector<std::string>& outputs) {
        std::lock_guard lock(lock_for(key));
        const auto final_path = path(key);
        auto tmp = final_path;
        tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw Error("cannot write cache file '" + tmp.string() + "'");
            out << nlohmann::json{{"outputs", outputs}}.dump();
        }
        std::filesystem::rename(tmp, final_path);
    }

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::mutex& lock_for(uint64_t key) {
        std::lock_guard guard(table_mutex_);
        return locks_[key];
    }

    std::filesystem::path dir_;
    std::mutex table_mutex_;
    std::map<uint64_t, std::mutex> locks_;
};

enum class LlmInput { quality, original, both };

inline std::string_view llm_input_name(LlmInput v) {
    switch (v) {
    case LlmInput::quality: return "quality";
    case LlmInput::original: return "original";
    case LlmInput::both: return "both";
    }
    return "?";
}

inline LlmInput parse_llm_input(std::string_view s) {
    if (s == "quality") return LlmInput::quality;
    if (s == "original") return LlmInput::original;
    if (s == "both") return LlmInput::both;
    throw Error("unknown llm input '" + std::string(s) + "'");
}

inline const std::vector<std::string>& pipeline_stage_names() {
    static const std::vector<std::string> names{"quality", "llm", "segments", "negatives"};
    return names;
}

struct PipelineConfig {
    std::set<std::string> stages{"quality", "llm", "segments", "negatives"};
    PromptTemplate prompt;
    LlmInput llm_input = LlmInput::quality;
    size_t workers = 1;
    std::optional<std::filesystem::path> cache_dir;
    uint64_t seed = 0;

    void validate() const {
        for (const auto& s : stages)
            if (std::find(pipeline_stage_names().begin(), pipeline_stage_names().end(), s) ==
                pipeline_stage_names().end())
                throw Error("unknown pipeline stage '" + s + "'");
        prompt.validate();
        if (workers < 1) throw Error("workers must be at least 1");
    }

    bool has(std::string_view stage) const { return stages.count(std::string(stage)) > 0; }
};

struct Backends {
    std::shared_ptr<Backend> captioner;
    std::shared_ptr<Backend> expander;
    std::shared_ptr<Backend> segmenter;

    size_t calls() const {
        return (captioner ? captioner->calls() : 0) + (expander ? expander->calls() : 0) +
               (segmenter ? segmenter->calls() : 0);
    }
};

inline Backends mock_backends(const World& world, const PromptTemplate& prompt = {}, size_t mock_true = 3,
                              size_t mock_hallucinated = 2) {
    BackendSpec expander{BackendKind::expander};
    expander.mock_true = mock_true;
    expander.mock_hallucinated = mock_hallucinated;
    return {std::make_shared<MockCaptioner>(BackendSpec{BackendKind::captioner}, world),
            std::make_shared<MockExpander>(expander, world.vocab, prompt),
            std::make_shared<MockSegmenter>(BackendSpec{BackendKind::segmenter}, world)};
}

struct StageCounts {
    size_t processed = 0; // records the stage ran on
    size_t produced = 0;  // captions / expansions / negatives produced
    size_t failures = 0;
    size_t cache_hits = 0;
};

struct PipelineReport {
    size_t records = 0;
    std::map<std::string, StageCounts> stages;
    size_t backend_calls = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["records"] = records;
        j["backend_calls"] = backend_calls;
        auto& s = j["stages"] = nlohmann::ordered_json::object();
        for (const auto& [name, c] : stages)
            s[name] = {{"processed", c.processed}, {"produced", c.produced}, {"failures", c.failures},
                       {"cache_hits", c.cache_hits}};
        return j;
    }

    size_t failures() const {
        size_t n = 0;
        for (const auto& [name, c] : stages) n += c.failures;
        return n;
    }
};

namespace detail {

// Backend call through the cache. Returns nullopt on backend failure.
inline std::optional<std::vector<std::string>> cached_call(Backend& backend, Cache* cache, std::string_view stage,
                                                           std::string_view image_id, const std::string& input,
                                                           const std::string& stage_config, StageCounts& counts,
                                                           std::mutex& counts_mutex) {
    const uint64_t key = Cache::key(stage, image_id, stage_config + "\n" + input);
    if (cache) {
        if (auto hit = cache->get(key)) {
            std::lock_guard lock(counts_mutex);
            ++counts.cache_hits;
            return hit;
        }
    }
    try {
        auto outputs = backend.invoke(input);
        if (cache) cache->put(key, outputs);
        return outputs;
    } catch (const Error&) {
        return std::nullopt;
    }
}

inline void add_failure(CaptionRecord& r, const std::string& stage) {
    if (std::find(r.failures.begin(), r.failures.end(), stage) == r.failures.end()) r.failures.push_back(stage);
}

} // namespace detail

struct StageContext {
    Cache* cache = nullptr;
    std::mutex counts_mutex;
    std::map<std::string, StageCounts> counts;
};

inline void enhance_quality(CaptionRecord& record, Backend& captioner, StageContext& ctx) {
    auto& counts = ctx.counts["quality"];
    auto out = detail::cached_call(captioner, ctx.cache, "quality", record.image_id, record.image_ref,
                                   captioner.spec().to_json().dump(), counts, ctx.counts_mutex);
    std::lock_guard lock(ctx.counts_mutex);
    ++counts.processed;
    if (!out || out->empty() || trim(out->front()).empty()) {
        record.quality_caption.reset();
        detail::add_failure(record, "quality");
        ++counts.failures;
        return;
    }
    record.quality_caption = trim(out->front());
    ++counts.produced;
}

inline CaptionRecord enhance_quality(CaptionRecord record, Backend& captioner) {
    StageContext ctx;
    enhance_quality(record, captioner, ctx);
    return record;
}

inline std::optional<std::vector<std::string>> expand_llm(const std::string& caption, Backend& expander,
                                                          const PromptTemplate& prompt, StageContext& ctx,
                                                          std::string_view image_id = "") {
    if (trim(caption).empty()) throw Error("cannot expand an empty caption");
    auto& counts = ctx.counts["llm"];
    auto out = detail::cached_call(expander, ctx.cache, "llm", image_id, prompt.instantiate(caption),
                                   expander.spec().to_json().dump() + prompt.text, counts, ctx.counts_mutex);
    if (!out) return std::nullopt;
    std::string joined;
    for (const auto& s : *out) joined += s + " ";
    return parse_sentences(joined, prompt.max_expansions);
}

inline std::vector<std::string> expand_llm(const std::string& caption, Backend& expander,
                                           const PromptTemplate& prompt = {}) {
    StageContext ctx;
    auto out = expand_llm(caption, expander, prompt, ctx);
    if (!out) throw BackendError("expander failed for '" + caption + "'");
    return *out;
}

struct SegmentResult {
    std::vector<std::string> captions;
    size_t skipped = 0;
    bool failed = false;
};

inline SegmentResult expand_segments(const std::string& image_ref, Backend& segmenter, Backend& captioner,
                                     StageContext& ctx, std::string_view image_id = "") {
    SegmentResult result;
    auto& counts = ctx.counts["segments"];
    auto refs = detail::cached_call(segmenter, ctx.cache, "segments", image_id, image_ref,
                                    segmenter.spec().to_json().dump(), counts, ctx.counts_mutex);
    if (!refs) {
        result.failed = true;
        return result;
    }
    std::set<std::string> seen;
    for (const auto& ref : *refs) {
        auto cap = detail::cached_call(captioner, ctx.cache, "segment-caption", image_id, ref,
                                       captioner.spec().to_json().dump(), counts, ctx.counts_mutex);
        if (!cap || cap->empty() || trim(cap->front()).empty()) {
            ++result.skipped;
            continue;
        }
        auto text = trim(cap->front());
        if (seen.insert(to_lower(text)).second) result.captions.push_back(text);
    }
    return result;
}

inline std::vector<std::string> expand_segments(const std::string& image_ref, Backend& segmenter, Backend& captioner) {
    StageContext ctx;
    auto r = expand_segments(image_ref, segmenter, captioner, ctx);
    if (r.failed) throw BackendError("segmenter failed for '" + image_ref + "'");
    return r.captions;
}

// Negatives for the quality caption and every expansion. Texts with no
// lexicon word get none.
inline size_t augment_record(CaptionRecord& record, const Lexicon& lexicon, uint64_t seed) {
    record.negatives.clear();
    std::vector<std::string> sources;
    if (record.quality_caption) sources.push_back(*record.quality_caption);
    for (const auto& e : record.expansions) sources.push_back(e.text);
    size_t produced = 0;
    for (const auto& s : sources) {
        if (record.negatives.count(s)) continue;
        try {
            auto neg = make_negative(s, lexicon, mix_seed(seed, record.image_id));
            record.negatives[s] = {{neg.text, std::string(category_name(neg.category))}};
            ++produced;
        } catch (const NoCandidateError&) {
        }
    }
    return produced;
}

inline void run_stages(CaptionRecord& r, const PipelineConfig& config, Backends& backends, const Lexicon& lexicon,
                       StageContext& ctx) {
    if (config.has("quality")) enhance_quality(r, *backends.captioner, ctx);

    const bool llm = config.has("llm"), seg = config.has("segments");
    if (llm || seg) std::erase_if(r.expansions, [&](const Expansion& e) {
            return (llm && e.source == ExpansionSource::llm) || (seg && e.source == ExpansionSource::segment);
        });

    if (llm) {
        std::vector<std::string> inputs;
        if (config.llm_input != LlmInput::original && r.quality_caption) inputs.push_back(*r.quality_caption);
        if (config.llm_input != LlmInput::quality || !r.quality_caption) inputs.push_back(r.original_caption);
        std::vector<std::string> sentences;
        bool failed = false;
        for (const auto& in : inputs) {
            if (trim(in).empty()) continue;
            auto out = expand_llm(in, *backends.expander, config.prompt, ctx, r.image_id);
            if (!out) {
                failed = true;
                continue;
            }
            sentences.insert(sentences.end(), out->begin(), out->end());
        }
        std::set<std::string> seen;
        size_t kept = 0;
        for (const auto& s : sentences) {
            if (kept == config.prompt.max_expansions || !seen.insert(to_lower(s)).second) continue;
            r.expansions.push_back({s, ExpansionSource::llm});
            ++kept;
        }
        std::lock_guard lock(ctx.counts_mutex);
        auto& c = ctx.counts["llm"];
        ++c.processed;
        c.produced += kept;
        if (failed) {
            ++c.failures;
            detail::add_failure(r, "llm");
        }
    }

    if (seg) {
        auto out = expand_segments(r.image_ref, *backends.segmenter, *backends.captioner, ctx, r.image_id);
        for (const auto& s : out.captions) r.expansions.push_back({s, ExpansionSource::segment});
        std::lock_guard lock(ctx.counts_mutex);
        auto& c = ctx.counts["segments"];
        ++c.processed;
        c.produced += out.captions.size();
        c.failures += out.skipped + (out.failed ? 1 : 0);
        if (out.failed || out.skipped) detail::add_failure(r, "segments");
    }

    if (config.has("negatives")) {
        const size_t n = augment_record(r, lexicon, config.seed);
        std::lock_guard lock(ctx.counts_mutex);
        auto& c = ctx.counts["negatives"];
        ++c.processed;
        c.produced += n;
    }
}

// Runs the enabled stages on every record; output order equals input order.
inline std::vector<CaptionRecord> run_pipeline(std::vector<CaptionRecord> records, const PipelineConfig& config,
                                               Backends& backends, const Lexicon& lexicon,
                                               PipelineReport* report = nullptr) {
    config.validate();
    if ((config.has("quality") || config.has("segments")) && !backends.captioner)
        throw Error("pipeline needs a captioner backend");
    if (config.has("llm") && !backends.expander) throw Error("pipeline needs an expander backend");
    if (config.has("segments") && !backends.segmenter) throw Error("pipeline needs a segmenter backend");

    std::optional<Cache> cache;
    if (config.cache_dir) cache.emplace(*config.cache_dir);
    StageContext ctx;
    ctx.cache = cache ? &*cache : nullptr;
    for (const auto& s : config.stages) ctx.counts[s];
    const size_t calls_before = backends.calls();

    std::atomic<size_t> next{0};
    std::exception_ptr fatal;
    std::mutex fatal_mutex;
    auto worker = [&] {
        for (size_t i = next.fetch_add(1); i < records.size(); i = next.fetch_add(1)) {
            try {
                run_stages(records[i], config, backends, lexicon, ctx);
            } catch (...) {
                std::lock_guard lock(fatal_mutex);
                if (!fatal) fatal = std::current_exception();
            }
        }
    };
    const size_t n_workers = std::min(config.workers, std::max<size_t>(records.size(), 1));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (fatal) std::rethrow_exception(fatal);

    for (auto& r : records) validate_record(r);
    if (report) {
        report->records = records.size();
        report->stages = ctx.counts;
        report->backend_calls = backends.calls() - calls_before;
    }
    return records;
}

inline PipelineReport run_pipeline(const std::filesystem::path& manifest_in, const PipelineConfig& config,
                                   const std::filesystem::path& manifest_out, Backends& backends,
                                   const Lexicon& lexicon) {
    auto records = read_manifest(manifest_in);
    PipelineReport report;
    auto out = run_pipeline(std::move(records), config, backends, lexicon, &report);
    write_manifest(out, manifest_out);
    return report;
}

// Scene-world records with deliberately weak original captions: a
// misaligned render with probability misaligned_fraction, otherwise a
// partial one.
struct SynthConfig {
    size_t count = 1000;
    double misaligned_fraction = 0.85;
    uint64_t seed = 0;
};

inline std::vector<CaptionRecord> synthesize_records(const World& world, const SynthConfig& config) {
    std::vector<CaptionRecord> out;
    out.reserve(config.count);
    for (size_t k = 0; k < config.count; ++k) {
        const uint64_t scene_seed = mix_seed(config.seed, k);
        CaptionRecord r;
        r.image_id = "img-" + std::to_string(config.seed) + "-" + std::to_string(k);
        r.image_ref = scene_ref(scene_seed, world.config.complexity);
        const auto scene = world.scene(r.image_ref);
        const double u = static_cast<double>(mix_seed(scene_seed, "original") >> 11) * 0x1.0p-53;
        const auto mode = u < config.misaligned_fraction ? CaptionMode::misaligned : CaptionMode::partial;
        r.original_caption = render_caption(scene, world.vocab, mode, scene_seed);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace dac
