#pragma once

// Run configuration shared by every CLI subcommand. A JSON file is merged
// onto the defaults; unknown keys are errors at every level. The effective
// config and its hash are echoed into each artifact.

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dac/enhance.hpp"
#include "dac/eval.hpp"
#include "dac/sweep.hpp"
#include "dac/train.hpp"

namespace dac {

class ConfigError : public Error {
public:
    using Error::Error;
};

namespace detail {

// Reads keys out of one JSON object and rejects whatever was not read.
class Fields {
public:
    Fields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        if (const auto* v = take(key)) {
            try {
                out = v->get<T>();
            } catch (const nlohmann::json::exception&) {
                throw ConfigError("'" + where(key) + "' has the wrong type");
            }
        }
    }

    template <class T>
    void read(const char* key, std::optional<T>& out) {
        if (const auto* v = take(key)) {
            if (v->is_null()) {
                out.reset();
                return;
            }
            T value{};
            try {
                value = v->get<T>();
            } catch (const nlohmann::json::exception&) {
                throw ConfigError("'" + where(key) + "' has the wrong type");
            }
            out = std::move(value);
        }
    }

    // Custom conversion; exceptions from f are reported against the key.
    template <class F>
    void read_with(const char* key, F&& f) {
        if (const auto* v = take(key)) {
            try {
                f(*v);
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw ConfigError("'" + where(key) + "': " + e.what());
            }
        }
    }

    const nlohmann::json* take(const char* key) {
        used_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string where(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw ConfigError("unknown config key '" + where(it.key()) + "'");
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline nlohmann::json opt_json(const std::optional<std::filesystem::path>& p) {
    return p ? nlohmann::json(p->string()) : nlohmann::json(nullptr);
}

} // namespace detail

struct EvalSettings {
    size_t scenes = 1000; // fresh held-out scenes for preference items
    size_t probe_train_per_class = 20;
    size_t probe_test_per_class = 20;
    double probe_noise = 0.1; // feature noise of probe images
    std::vector<size_t> shots{5, 10, 20, 0}; // 0 is "all"
    ProbeConfig probe;
};

struct SweepSettings {
    SweepAxis axis = SweepAxis::quality_ratio;
    std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
};

struct RunConfig {
    uint64_t seed = 0;
    std::optional<std::filesystem::path> vocabulary;
    std::optional<std::filesystem::path> lexicon;
    WorldConfig world;
    SynthConfig synth;
    PipelineConfig pipeline;
    std::array<BackendSpec, 3> backends{BackendSpec{BackendKind::captioner}, BackendSpec{BackendKind::expander},
                                        BackendSpec{BackendKind::segmenter}};
    double failure_threshold = 0.05; // enhance fails when failures / records exceeds this
    PretrainConfig pretrain;
    TrainConfig train;
    EvalSettings eval;
    SweepSettings sweep;

    BackendSpec& backend(BackendKind k) { return backends[static_cast<size_t>(k)]; }
    const BackendSpec& backend(BackendKind k) const { return backends[static_cast<size_t>(k)]; }

    void validate() const {
        try {
            pipeline.validate();
            for (const auto& b : backends) b.validate();
            train.validate();
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
        if (failure_threshold < 0.0 || failure_threshold > 1.0) throw ConfigError("failure_threshold must lie in [0, 1]");
        if (synth.misaligned_fraction < 0.0 || synth.misaligned_fraction > 1.0)
            throw ConfigError("synth.misaligned_fraction must lie in [0, 1]");
        if (!(eval.probe_noise >= 0.0)) throw ConfigError("eval.probe_noise must be non-negative");
        if (sweep.grid.empty()) throw ConfigError("sweep.grid is empty");
        if (!std::is_sorted(sweep.grid.begin(), sweep.grid.end())) throw ConfigError("sweep.grid must be sorted");
        for (size_t k : eval.shots)
            if (k > eval.probe_train_per_class)
                throw ConfigError("probe shot " + std::to_string(k) + " exceeds eval.probe_train_per_class");
    }

    // Sub-configs carry the run seed.
    SynthConfig synth_config() const {
        auto c = synth;
        c.seed = seed;
        return c;
    }
    PipelineConfig pipeline_config() const {
        auto c = pipeline;
        c.seed = seed;
        return c;
    }
    PretrainConfig pretrain_config() const {
        auto c = pretrain;
        c.seed = seed;
        c.encoder.feature_dim = world.feature_dim;
        return c;
    }
    TrainConfig train_config() const {
        auto c = train;
        c.seed = seed;
        return c;
    }

    World make_world() const {
        World w;
        if (vocabulary) w.vocab = Vocabulary::from_json(read_json(*vocabulary));
        w.config = world;
        return w;
    }

    Lexicon make_lexicon(const World& w) const {
        return lexicon ? Lexicon::from_json(read_json(*lexicon)) : Lexicon::from_vocabulary(w.vocab);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["seed"] = seed;
        j["vocabulary"] = detail::opt_json(vocabulary);
        j["lexicon"] = detail::opt_json(lexicon);
        const auto& fw = world.weights;
        j["world"] = {{"complexity", world.complexity},
                      {"feature_dim", world.feature_dim},
                      {"noise_sigma", world.noise_sigma},
                      {"weights",
                       {{"object", fw.object},
                        {"binding", fw.binding},
                        {"attribute", fw.attribute},
                        {"relation", fw.relation},
                        {"triple", fw.triple}}}};
        j["synth"] = {{"count", synth.count}, {"misaligned_fraction", synth.misaligned_fraction}};
        nlohmann::ordered_json backend_json;
        for (const auto& b : backends) {
            auto bj = b.to_json();
            bj.erase("kind");
            if (b.kind == BackendKind::expander) {
                bj["mock_true"] = b.mock_true;
                bj["mock_hallucinated"] = b.mock_hallucinated;
            }
            backend_json[std::string(kind_name(b.kind))] = bj;
        }
        j["pipeline"] = {{"stages", std::vector<std::string>(pipeline.stages.begin(), pipeline.stages.end())},
                         {"prompt", pipeline.prompt.text},
                         {"max_expansions", pipeline.prompt.max_expansions},
                         {"llm_input", llm_input_name(pipeline.llm_input)},
                         {"workers", pipeline.workers},
                         {"cache_dir", detail::opt_json(pipeline.cache_dir)},
                         {"failure_threshold", failure_threshold},
                         {"backends", backend_json}};
        j["pretrain"] = {{"encoder", pretrain.encoder.to_json()},
                         {"steps", pretrain.steps},
                         {"batch_size", pretrain.batch_size},
                         {"learning_rate", pretrain.learning_rate},
                         {"initial_temperature", pretrain.initial_temperature}};
        j["pretrain"]["encoder"].erase("feature_dim");
        auto t = train.to_json();
        t.erase("seed");
        t["eval_each_epoch"] = train.eval_each_epoch;
        t["dump_dir"] = detail::opt_json(train.dump_dir);
        j["train"] = t;
        j["eval"] = {{"scenes", eval.scenes},
                     {"probe_train_per_class", eval.probe_train_per_class},
                     {"probe_test_per_class", eval.probe_test_per_class},
                     {"probe_noise", eval.probe_noise},
                     {"shots", eval.shots},
                     {"probe", {{"l2", eval.probe.l2}, {"iterations", eval.probe.iterations}, {"learning_rate", eval.probe.learning_rate}}}};
        j["sweep"] = {{"axis", sweep_axis_name(sweep.axis)}, {"grid", sweep.grid}};
        return j;
    }

    uint64_t hash() const { return fnv1a(to_json().dump()); }

    // Header embedded in artifacts.
    nlohmann::ordered_json provenance() const {
        return {{"config_hash", hex64(hash())}, {"seed", seed}, {"config", to_json()}};
    }

    // Merges `j` onto `base`.
    static RunConfig from_json(const nlohmann::json& j) { return from_json(j, RunConfig{}); }
    static RunConfig from_json(const nlohmann::json& j, RunConfig base) {
        RunConfig c = std::move(base);
        detail::Fields top(j, "");
        top.read("seed", c.seed);
        top.read_with("vocabulary", [&](const nlohmann::json& v) { c.vocabulary = path_or_null(v); });
        top.read_with("lexicon", [&](const nlohmann::json& v) { c.lexicon = path_or_null(v); });
        if (const auto* w = top.take("world")) read_world(*w, c.world);
        if (const auto* s = top.take("synth")) {
            detail::Fields f(*s, "synth");
            f.read("count", c.synth.count);
            f.read("misaligned_fraction", c.synth.misaligned_fraction);
            f.finish();
        }
        if (const auto* p = top.take("pipeline")) read_pipeline(*p, c);
        if (const auto* p = top.take("pretrain")) read_pretrain(*p, c.pretrain);
        if (const auto* t = top.take("train")) read_train(*t, c.train);
        if (const auto* e = top.take("eval")) read_eval(*e, c.eval);
        if (const auto* s = top.take("sweep")) {
            detail::Fields f(*s, "sweep");
            f.read_with("axis", [&](const nlohmann::json& v) { c.sweep.axis = parse_sweep_axis(v.get<std::string>()); });
            f.read("grid", c.sweep.grid);
            f.finish();
        }
        top.finish();
        c.validate();
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) { return load(path, RunConfig{}); }
    static RunConfig load(const std::filesystem::path& path, RunConfig base) {
        return from_json(read_json(path), std::move(base));
    }

    static nlohmann::json read_json(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open " + path.string());
        try {
            return nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    }

private:
    static std::optional<std::filesystem::path> path_or_null(const nlohmann::json& v) {
        if (v.is_null()) return std::nullopt;
        return std::filesystem::path(v.get<std::string>());
    }

    static void read_world(const nlohmann::json& j, WorldConfig& w) {
        detail::Fields f(j, "world");
        f.read("complexity", w.complexity);
        f.read("feature_dim", w.feature_dim);
        f.read("noise_sigma", w.noise_sigma);
        if (const auto* ws = f.take("weights")) {
            detail::Fields g(*ws, "world.weights");
            g.read("object", w.weights.object);
            g.read("binding", w.weights.binding);
            g.read("attribute", w.weights.attribute);
            g.read("relation", w.weights.relation);
            g.read("triple", w.weights.triple);
            g.finish();
        }
        f.finish();
    }

    static void read_pipeline(const nlohmann::json& j, RunConfig& c) {
        detail::Fields f(j, "pipeline");
        f.read_with("stages", [&](const nlohmann::json& v) {
            const auto names = v.get<std::vector<std::string>>();
            c.pipeline.stages = std::set<std::string>(names.begin(), names.end());
        });
        f.read("prompt", c.pipeline.prompt.text);
        f.read("max_expansions", c.pipeline.prompt.max_expansions);
        f.read_with("llm_input", [&](const nlohmann::json& v) { c.pipeline.llm_input = parse_llm_input(v.get<std::string>()); });
        f.read("workers", c.pipeline.workers);
        f.read_with("cache_dir", [&](const nlohmann::json& v) { c.pipeline.cache_dir = path_or_null(v); });
        f.read("failure_threshold", c.failure_threshold);
        if (const auto* bs = f.take("backends")) {
            detail::Fields g(*bs, "pipeline.backends");
            for (auto kind : {BackendKind::captioner, BackendKind::expander, BackendKind::segmenter}) {
                const std::string name(kind_name(kind));
                if (const auto* b = g.take(name.c_str())) read_backend(*b, "pipeline.backends." + name, c.backend(kind));
            }
            g.finish();
        }
        f.finish();
    }

    static void read_backend(const nlohmann::json& j, const std::string& path, BackendSpec& b) {
        detail::Fields f(j, path);
        f.read_with("mode", [&](const nlohmann::json& v) {
            const auto m = v.get<std::string>();
            if (m == "mock") b.mode = BackendMode::mock;
            else if (m == "http") b.mode = BackendMode::http;
            else throw ConfigError("'" + path + ".mode' must be mock or http");
        });
        f.read("endpoint", b.endpoint);
        f.read("timeout", b.timeout);
        f.read("max_retries", b.max_retries);
        if (b.kind == BackendKind::expander) {
            f.read("mock_true", b.mock_true);
            f.read("mock_hallucinated", b.mock_hallucinated);
        }
        f.finish();
    }

    static void read_encoder(const nlohmann::json& j, EncoderConfig& e) {
        detail::Fields f(j, "pretrain.encoder");
        f.read("text_width", e.text_width);
        f.read("image_width", e.image_width);
        f.read("embed_dim", e.embed_dim);
        f.read("attention", e.attention);
        f.read("lora_rank", e.lora_rank);
        f.read("lora_alpha", e.lora_alpha);
        f.finish();
    }

    static void read_pretrain(const nlohmann::json& j, PretrainConfig& p) {
        detail::Fields f(j, "pretrain");
        if (const auto* e = f.take("encoder")) read_encoder(*e, p.encoder);
        f.read("steps", p.steps);
        f.read("batch_size", p.batch_size);
        f.read("learning_rate", p.learning_rate);
        f.read("initial_temperature", p.initial_temperature);
        f.finish();
    }

    static void read_train(const nlohmann::json& j, TrainConfig& t) {
        detail::Fields f(j, "train");
        f.read("learning_rate", t.learning_rate);
        f.read("weight_decay", t.weight_decay);
        f.read("epochs", t.epochs);
        f.read("batch_size", t.batch_size);
        f.read("bag_size", t.bag_size);
        f.read_with("mil_mode", [&](const nlohmann::json& v) { t.mil_mode = parse_mil_mode(v.get<std::string>()); });
        if (const auto* w = f.take("loss_weights")) {
            detail::Fields g(*w, "train.loss_weights");
            g.read("contrastive", t.weights.contrastive);
            g.read("negatives", t.weights.negatives);
            g.read("mil", t.weights.mil);
            g.finish();
        }
        f.read("use_negatives", t.use_negatives);
        f.read("use_mil", t.use_mil);
        f.read("use_quality", t.use_quality);
        f.read("use_density", t.use_density);
        f.read("fresh_negatives", t.fresh_negatives);
        f.read("quality_ratio", t.quality_ratio);
        f.read("holdout_fraction", t.holdout_fraction);
        f.read("batch_mean", t.batch_mean);
        f.read("lora_rank", t.lora_rank);
        f.read("lora_alpha", t.lora_alpha);
        f.read("train_temperature", t.train_temperature);
        f.read("eval_each_epoch", t.eval_each_epoch);
        f.read_with("dump_dir", [&](const nlohmann::json& v) { t.dump_dir = path_or_null(v); });
        f.finish();
    }

    static void read_eval(const nlohmann::json& j, EvalSettings& e) {
        detail::Fields f(j, "eval");
        f.read("scenes", e.scenes);
        f.read("probe_train_per_class", e.probe_train_per_class);
        f.read("probe_test_per_class", e.probe_test_per_class);
        f.read("probe_noise", e.probe_noise);
        f.read("shots", e.shots);
        if (const auto* p = f.take("probe")) {
            detail::Fields g(*p, "eval.probe");
            g.read("l2", e.probe.l2);
            g.read("iterations", e.probe.iterations);
            g.read("learning_rate", e.probe.learning_rate);
            g.finish();
        }
        f.finish();
    }
};

} // namespace dac
