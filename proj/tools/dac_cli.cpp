// dac: batch entry points. Every subcommand reads the same RunConfig
// (defaults < --config file < flags) and writes its artifacts under --out.
//
// Exit codes: 0 ok, 1 runtime error, 2 usage/config error, 3 enhance failure
// rate above failure_threshold.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dac/config.hpp"
#include "dac/http_backend.hpp"

namespace fs = std::filesystem;
using dac::RunConfig;
using Json = nlohmann::ordered_json;

namespace {

struct Globals {
    std::optional<fs::path> config;
    std::optional<uint64_t> seed;
    fs::path out = "out";
    std::optional<size_t> workers;
    std::optional<fs::path> cache;
};

struct UsageError : dac::Error {
    using Error::Error;
};

RunConfig load_config(const Globals& g) {
    RunConfig c = g.config ? RunConfig::load(*g.config) : RunConfig{};
    if (g.seed) c.seed = *g.seed;
    if (g.workers) c.pipeline.workers = *g.workers;
    if (g.cache) c.pipeline.cache_dir = *g.cache;
    return c;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw dac::Error("cannot write '" + path.string() + "'");
    out << text;
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

// Report skeleton: provenance first, command payload appended by the caller.
Json artifact(const RunConfig& c, const std::string& command) {
    Json j = c.provenance();
    j["command"] = command;
    return j;
}

dac::Backends backends_for(const RunConfig& c, const dac::World& world) {
    using dac::BackendKind;
    return {dac::make_backend(c.backend(BackendKind::captioner), world, c.pipeline.prompt),
            dac::make_backend(c.backend(BackendKind::expander), world, c.pipeline.prompt),
            dac::make_backend(c.backend(BackendKind::segmenter), world, c.pipeline.prompt)};
}

dac::DualEncoder base_model(const std::optional<fs::path>& path, const RunConfig& c, const dac::World& world) {
    return path ? dac::load_checkpoint(*path) : dac::pretrain_base(world, c.pretrain_config());
}

std::vector<dac::EvalItem> heldout_items(const RunConfig& c, const dac::World& world, const dac::Lexicon& lexicon) {
    return dac::build_eval_items(world, dac::eval_scene_refs(world, c.eval.scenes, c.seed), lexicon, c.seed).items;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    return parts;
}

// ---- generate ---------------------------------------------------------------

struct GenerateArgs {
    std::optional<size_t> count;
    std::optional<double> misaligned;
};

int cmd_generate(const Globals& g, const GenerateArgs& a) {
    auto c = load_config(g);
    if (a.count) c.synth.count = *a.count;
    if (a.misaligned) c.synth.misaligned_fraction = *a.misaligned;
    c.validate();
    const auto world = c.make_world();
    const auto records = dac::synthesize_records(world, c.synth_config());
    fs::create_directories(g.out);
    dac::write_manifest(records, g.out / "manifest.jsonl");
    auto j = artifact(c, "generate");
    j["records"] = records.size();
    write_json(g.out / "generate_report.json", j);
    std::printf("wrote %zu records to %s\n", records.size(), (g.out / "manifest.jsonl").c_str());
    return 0;
}

// ---- enhance / augment -------------------------------------------------------

struct EnhanceArgs {
    fs::path input;
    std::optional<std::string> stages;
    std::optional<std::string> backend;
    std::optional<std::string> endpoint;
    std::optional<double> threshold;
};

int run_enhance(const Globals& g, RunConfig c, const fs::path& input, const std::string& command) {
    c.validate();
    const auto world = c.make_world();
    const auto lexicon = c.make_lexicon(world);
    auto records = dac::read_manifest(input);
    auto backends = backends_for(c, world);
    dac::PipelineReport report;
    const auto out = dac::run_pipeline(std::move(records), c.pipeline_config(), backends, lexicon, &report);

    fs::create_directories(g.out);
    dac::write_manifest(out, g.out / "manifest.jsonl");
    const double rate = report.records == 0 ? 0.0 : static_cast<double>(report.failures()) / static_cast<double>(report.records);
    auto j = artifact(c, command);
    j["input"] = input.string();
    j["report"] = report.to_json();
    j["failure_rate"] = rate;
    write_json(g.out / (command + "_report.json"), j);
    std::printf("%s: %zu records, %zu failures, %zu backend calls\n", command.c_str(), report.records,
                report.failures(), report.backend_calls);
    if (rate > c.failure_threshold) {
        std::fprintf(stderr, "failure rate %.4f exceeds threshold %.4f\n", rate, c.failure_threshold);
        return 3;
    }
    return 0;
}

int cmd_enhance(const Globals& g, const EnhanceArgs& a) {
    auto c = load_config(g);
    if (a.stages) {
        const auto names = split(*a.stages, ',');
        c.pipeline.stages = std::set<std::string>(names.begin(), names.end());
    }
    if (a.backend) {
        if (*a.backend != "mock" && *a.backend != "http") throw UsageError("--backend must be mock or http");
        for (auto& b : c.backends) b.mode = *a.backend == "mock" ? dac::BackendMode::mock : dac::BackendMode::http;
    }
    if (a.endpoint)
        for (auto& b : c.backends) b.endpoint = *a.endpoint;
    if (a.threshold) c.failure_threshold = *a.threshold;
    return run_enhance(g, c, a.input, "enhance");
}

int cmd_augment(const Globals& g, const fs::path& input) {
    auto c = load_config(g);
    c.pipeline.stages = {"negatives"};
    return run_enhance(g, c, input, "augment");
}

// ---- pretrain ---------------------------------------------------------------

int cmd_pretrain(const Globals& g, std::optional<size_t> steps) {
    auto c = load_config(g);
    if (steps) c.pretrain.steps = *steps;
    c.validate();
    const auto world = c.make_world();
    const auto model = dac::pretrain_base(world, c.pretrain_config());
    fs::create_directories(g.out);
    dac::save_checkpoint(model, g.out / "base.ckpt.json", c.provenance());
    std::printf("wrote %s\n", (g.out / "base.ckpt.json").c_str());
    return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    fs::path manifest;
    std::optional<fs::path> base;
    std::optional<size_t> epochs;
    std::optional<double> lr;
    std::optional<size_t> bag_size;
    std::optional<double> quality_ratio;
    std::optional<std::string> mil_mode;
    bool no_negatives = false;
    bool no_mil = false;
    bool no_quality = false;
    bool no_density = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
    auto c = load_config(g);
    if (a.epochs) c.train.epochs = *a.epochs;
    if (a.lr) c.train.learning_rate = *a.lr;
    if (a.bag_size) c.train.bag_size = *a.bag_size;
    if (a.quality_ratio) c.train.quality_ratio = *a.quality_ratio;
    if (a.mil_mode) c.train.mil_mode = dac::parse_mil_mode(*a.mil_mode);
    if (a.no_negatives) c.train.use_negatives = false;
    if (a.no_mil) c.train.use_mil = false;
    if (a.no_quality) c.train.use_quality = false;
    if (a.no_density) c.train.use_density = false;
    c.validate();

    const auto world = c.make_world();
    const auto lexicon = c.make_lexicon(world);
    const auto records = dac::read_manifest(a.manifest);
    const auto base = base_model(a.base, c, world);
    const auto result = dac::train(records, world, base, c.train_config(), lexicon);

    fs::create_directories(g.out);
    const auto prov = c.provenance();
    dac::save_checkpoint(result.model, g.out / "checkpoint.json", prov);
    {
        std::string lines;
        for (const auto& m : result.metrics) {
            auto row = m.to_json();
            row["config_hash"] = prov["config_hash"];
            row["seed"] = c.seed;
            lines += row.dump() + "\n";
        }
        write_text(g.out / "metrics.jsonl", lines);
    }
    auto j = artifact(c, "train");
    j["manifest"] = a.manifest.string();
    j["base"] = a.base ? Json(a.base->string()) : Json("pretrained in-process");
    j["base_hash"] = dac::hex64(result.model.base_hash());
    j["steps"] = result.metrics.size();
    j["skipped_records"] = result.skipped;
    j["holdout_records"] = result.holdout_refs.size();
    auto& epochs = j["epochs"] = Json::array();
    for (const auto& e : result.epochs) epochs.push_back({{"epoch", e.epoch}, {"report", e.report.to_json()}});
    write_json(g.out / "train_report.json", j);
    std::printf("trained %zu steps; checkpoint %s\n", result.metrics.size(), (g.out / "checkpoint.json").c_str());
    return 0;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval(const Globals& g, const fs::path& checkpoint) {
    auto c = load_config(g);
    c.validate();
    const auto world = c.make_world();
    const auto lexicon = c.make_lexicon(world);
    const auto model = dac::load_checkpoint(checkpoint);
    const dac::EncoderView view(model);
    const auto items = heldout_items(c, world, lexicon);
    const auto preference = dac::preference_eval(view, items);
    const auto order = dac::order_eval(view, items);
    const auto probe_data = dac::probe_dataset(world, c.eval.probe_train_per_class, c.eval.probe_test_per_class,
                                                 c.seed, c.eval.probe_noise);
    const auto probe = dac::probe_accuracies(view, probe_data, c.eval.shots, c.seed, c.eval.probe);

    auto j = artifact(c, "eval");
    j["checkpoint"] = checkpoint.string();
    j["base_hash"] = dac::hex64(model.base_hash());
    j["items"] = items.size();
    j["preference"] = preference.to_json();
    j["order"] = {{"correct", order.correct}, {"total", order.total}, {"accuracy", order.accuracy()}};
    j["probe"] = dac::probe_to_json(probe);
    fs::create_directories(g.out);
    write_json(g.out / "eval_report.json", j);
    std::printf("mean preference accuracy %.4f over %zu items\n", preference.mean_accuracy(), items.size());
    return 0;
}

// ---- sweep ------------------------------------------------------------------

struct SweepArgs {
    fs::path manifest;
    std::optional<fs::path> base;
    std::optional<std::string> axis;
    std::optional<std::string> grid;
};

int cmd_sweep(const Globals& g, const SweepArgs& a) {
    auto c = load_config(g);
    if (a.axis) c.sweep.axis = dac::parse_sweep_axis(*a.axis);
    if (a.grid) {
        c.sweep.grid.clear();
        for (const auto& s : split(*a.grid, ',')) {
            try {
                size_t used = 0;
                c.sweep.grid.push_back(std::stod(s, &used));
                if (used != s.size()) throw std::invalid_argument(s);
            } catch (const std::exception&) {
                throw UsageError("--grid: '" + s + "' is not a number");
            }
        }
    }
    c.validate();
    const auto world = c.make_world();
    const auto lexicon = c.make_lexicon(world);
    const auto records = dac::read_manifest(a.manifest);
    const auto base = base_model(a.base, c, world);
    const auto items = heldout_items(c, world, lexicon);
    const auto result = dac::sweep(c.sweep.axis, c.sweep.grid, records, world, base, c.train_config(), lexicon, items);

    fs::create_directories(g.out);
    const auto prov = c.provenance();
    write_text(g.out / "sweep.tsv", "# config_hash " + prov["config_hash"].get<std::string>() + " seed " +
                                        std::to_string(c.seed) + "\n" + result.table());
    auto j = artifact(c, "sweep");
    j["manifest"] = a.manifest.string();
    j["result"] = result.to_json();
    write_json(g.out / "sweep.json", j);
    std::fputs(result.table().c_str(), stdout);
    for (const auto& p : result.points)
        if (p.error) std::fprintf(stderr, "point %g failed: %s\n", p.value, p.error->c_str());
    return 0;
}

// ---- analyze ----------------------------------------------------------------

int cmd_analyze(const Globals& g, const fs::path& checkpoint, const fs::path& manifest) {
    auto c = load_config(g);
    c.validate();
    const auto world = c.make_world();
    const auto model = dac::load_checkpoint(checkpoint);
    const auto records = dac::read_manifest(manifest);
    const auto report = dac::clipscore_analysis(dac::EncoderView(model), records, world);
    auto j = artifact(c, "analyze");
    j["checkpoint"] = checkpoint.string();
    j["manifest"] = manifest.string();
    j["clipscore"] = report.to_json();
    fs::create_directories(g.out);
    write_json(g.out / "clipscore.json", j);
    std::printf("mean score: original %.4f, quality %.4f\n", report.original.mean(), report.quality.mean());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dac: caption enhancement, negatives, fine-tuning and evaluation on a synthetic scene world"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config, "JSON run config merged onto the defaults")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "run seed");
    app.add_option("--out", g.out, "output directory")->capture_default_str();
    app.add_option("--workers", g.workers, "pipeline worker threads");
    app.add_option("--cache", g.cache, "backend response cache directory");

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "synthesize scene records with weak captions");
    generate->add_option("--count", gen.count, "number of records");
    generate->add_option("--misaligned-fraction", gen.misaligned, "share of misaligned original captions");

    EnhanceArgs enh;
    auto* enhance = app.add_subcommand("enhance", "run pipeline stages over a manifest");
    enhance->add_option("--input", enh.input, "input manifest")->required();
    enhance->add_option("--stages", enh.stages, "comma list of quality,llm,segments,negatives");
    enhance->add_option("--backend", enh.backend, "mock or http, applied to every backend");
    enhance->add_option("--endpoint", enh.endpoint, "endpoint for http backends");
    enhance->add_option("--failure-threshold", enh.threshold, "max failures / records for exit 0");

    fs::path augment_input;
    auto* augment = app.add_subcommand("augment", "add negative captions to a manifest");
    augment->add_option("--input", augment_input, "input manifest")->required();

    std::optional<size_t> pre_steps;
    auto* pretrain = app.add_subcommand("pretrain", "train a base dual encoder on the scene world");
    pretrain->add_option("--steps", pre_steps, "optimizer steps");

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "fine-tune LoRA adapters on a manifest");
    train->add_option("--manifest", tr.manifest, "training manifest")->required();
    train->add_option("--base", tr.base, "base checkpoint (pretrained in-process when absent)");
    train->add_option("--epochs", tr.epochs);
    train->add_option("--lr", tr.lr);
    train->add_option("--bag-size", tr.bag_size);
    train->add_option("--quality-ratio", tr.quality_ratio);
    train->add_option("--mil-mode", tr.mil_mode, "nce, max, avg or rand");
    train->add_flag("--no-negatives", tr.no_negatives);
    train->add_flag("--no-mil", tr.no_mil);
    train->add_flag("--no-quality", tr.no_quality);
    train->add_flag("--no-density", tr.no_density);

    fs::path eval_ckpt;
    auto* eval = app.add_subcommand("eval", "preference, order and probe evaluation of a checkpoint");
    eval->add_option("--checkpoint", eval_ckpt)->required();

    SweepArgs sw;
    auto* sweep = app.add_subcommand("sweep", "train and evaluate over a grid of one axis");
    sweep->add_option("--manifest", sw.manifest, "training manifest")->required();
    sweep->add_option("--base", sw.base, "base checkpoint (pretrained in-process when absent)");
    sweep->add_option("--axis", sw.axis, "quality_ratio or bag_size");
    sweep->add_option("--grid", sw.grid, "comma-separated values, ascending");

    fs::path an_ckpt, an_manifest;
    auto* analyze = app.add_subcommand("analyze", "score histograms of original vs quality captions");
    analyze->add_option("--checkpoint", an_ckpt)->required();
    analyze->add_option("--manifest", an_manifest)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*generate) return cmd_generate(g, gen);
        if (*enhance) return cmd_enhance(g, enh);
        if (*augment) return cmd_augment(g, augment_input);
        if (*pretrain) return cmd_pretrain(g, pre_steps);
        if (*train) return cmd_train(g, tr);
        if (*eval) return cmd_eval(g, eval_ckpt);
        if (*sweep) return cmd_sweep(g, sw);
        if (*analyze) return cmd_analyze(g, an_ckpt, an_manifest);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const dac::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
