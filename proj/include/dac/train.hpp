#pragma once

// LoRA fine-tuning on the combined contrastive / negatives / MIL objective,
// plus the brief contrastive pretraining that produces the frozen base.

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dac/corpus.hpp"
#include "dac/encoder.hpp"
#include "dac/eval.hpp"
#include "dac/losses.hpp"
#include "dac/negaug.hpp"
#include "dac/optim.hpp"
#include "dac/scene.hpp"

namespace dac {

class TrainError : public Error {
public:
    using Error::Error;
};

struct TrainConfig {
    double learning_rate = 5.0e-4;
    double weight_decay = 0.01;
    size_t epochs = 5;
    size_t batch_size = 0; // 0 picks 32 with density, 128 without
    size_t bag_size = 5;
    MilMode mil_mode = MilMode::nce;
    LossWeights weights;
    uint64_t seed = 0;
    bool use_negatives = true; // L_neg, and negatives inside the MIL denominator
    bool use_mil = true;
    bool use_quality = true;
    bool use_density = true;
    bool fresh_negatives = false; // regenerate negatives every epoch
    double quality_ratio = 1.0;   // fraction of records whose positive is the quality caption
    double holdout_fraction = 0.1;
    bool batch_mean = true; // divide the per-item-summed terms by the batch size
    size_t lora_rank = 16;
    double lora_alpha = 32.0;
    bool train_temperature = true;
    bool eval_each_epoch = true;
    std::optional<std::filesystem::path> dump_dir;

    size_t effective_batch_size() const { return batch_size > 0 ? batch_size : (use_density ? 32 : 128); }

    void validate() const {
        if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
        if (weight_decay < 0.0) throw Error("weight decay must be non-negative");
        if (bag_size < 1 || bag_size > kMaxBagSize) throw Error("bag size out of range");
        if (quality_ratio < 0.0 || quality_ratio > 1.0) throw Error("quality_ratio must lie in [0, 1]");
        if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) throw Error("holdout_fraction must lie in [0, 1)");
        if (lora_rank < 1) throw Error("LoRA rank must be at least 1");
    }

    nlohmann::ordered_json to_json() const {
        return {{"learning_rate", learning_rate},
                {"weight_decay", weight_decay},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"bag_size", bag_size},
                {"mil_mode", mil_mode_name(mil_mode)},
                {"loss_weights", {{"contrastive", weights.contrastive}, {"negatives", weights.negatives}, {"mil", weights.mil}}},
                {"seed", seed},
                {"use_negatives", use_negatives},
                {"use_mil", use_mil},
                {"use_quality", use_quality},
                {"use_density", use_density},
                {"fresh_negatives", fresh_negatives},
                {"quality_ratio", quality_ratio},
                {"holdout_fraction", holdout_fraction},
                {"batch_mean", batch_mean},
                {"lora_rank", lora_rank},
                {"lora_alpha", lora_alpha},
                {"train_temperature", train_temperature}};
    }
};

// Uniform in [0, 1) from a string; used for stable record selection.
inline double unit_hash(std::string_view key, uint64_t salt) {
    return static_cast<double>(mix_seed(salt, key) >> 11) * 0x1.0p-53;
}

// Held-out membership depends only on the image id.
inline bool is_holdout(const CaptionRecord& r, double fraction) { return unit_hash(r.image_id, 0x401d) < fraction; }

// Nested selection: a record replaced at ratio p stays replaced at any p' > p.
inline bool uses_quality_caption(const CaptionRecord& r, const TrainConfig& c) {
    return c.use_quality && unit_hash(r.image_id, 0x9a11) < c.quality_ratio;
}

// Texts and image features for one batch, before encoding.
struct BatchPlan {
    std::vector<std::string> image_ids;
    std::vector<Vector> features;
    std::vector<std::string> positives;
    std::vector<std::optional<std::string>> negatives;
    size_t bag_size = 0; // 0: no bags
    std::vector<std::optional<std::string>> bags;          // item-major, B * bag_size
    std::vector<std::optional<std::string>> bag_negatives; // parallel to bags
    size_t skipped = 0;

    size_t size() const { return positives.size(); }
};

namespace detail {

inline std::optional<std::string> negative_for(const CaptionRecord& r, const std::string& text, const Lexicon& lexicon,
                                               const TrainConfig& config, size_t epoch) {
    if (!config.fresh_negatives) {
        auto it = r.negatives.find(text);
        if (it != r.negatives.end() && !it->second.empty()) return it->second.front().text;
    }
    try {
        uint64_t seed = mix_seed(config.seed, r.image_id);
        if (config.fresh_negatives) seed = mix_seed(seed, epoch);
        return make_negative(text, lexicon, seed).text;
    } catch (const NoCandidateError&) {
        return std::nullopt;
    }
}

inline bool tokenizable(const Tokenizer& tok, const std::string& text) {
    try {
        tok.encode(text);
        return true;
    } catch (const UnknownTokenError&) {
        return false;
    }
}

} // namespace detail

inline BatchPlan plan_batch(const std::vector<const CaptionRecord*>& records, const World& world,
                            const Tokenizer& tokenizer, const Lexicon& lexicon, const TrainConfig& config,
                            size_t epoch) {
    BatchPlan plan;
    plan.bag_size = config.use_mil ? config.bag_size : 0;
    for (const auto* r : records) {
        const bool quality = uses_quality_caption(*r, config);
        if (quality && !r->quality_caption) {
            ++plan.skipped;
            continue;
        }
        const std::string positive = quality ? *r->quality_caption : r->original_caption;
        if (trim(positive).empty() || !detail::tokenizable(tokenizer, positive)) {
            ++plan.skipped;
            continue;
        }
        std::optional<MilBag> bag;
        if (config.use_mil) {
            CaptionRecord source;
            source.image_id = r->image_id;
            source.quality_caption = positive;
            if (config.use_density)
                for (const auto& e : r->expansions)
                    if (detail::tokenizable(tokenizer, e.text)) source.expansions.push_back(e);
            bag = sample_bag(source, config.bag_size, mix_seed(config.seed, epoch));
        }
        plan.image_ids.push_back(r->image_id);
        plan.features.push_back(world.features(r->image_ref, r->image_id));
        plan.positives.push_back(positive);
        plan.negatives.push_back(config.use_negatives ? detail::negative_for(*r, positive, lexicon, config, epoch)
                                                      : std::nullopt);
        if (bag) {
            for (size_t m = 0; m < config.bag_size; ++m) {
                if (m < bag->captions.size()) {
                    plan.bags.push_back(bag->captions[m]);
                    plan.bag_negatives.push_back(config.use_negatives
                                                     ? detail::negative_for(*r, bag->captions[m], lexicon, config, epoch)
                                                     : std::nullopt);
                } else {
                    plan.bags.push_back(std::nullopt);
                    plan.bag_negatives.push_back(std::nullopt);
                }
            }
        }
    }
    return plan;
}

// Encoded batch with the forward caches needed for backprop.
struct EncodedBatch {
    LossBatch batch;
    std::vector<ImageCache> images;
    std::vector<std::optional<TextCache>> texts, negatives, bags, bag_negatives;
};

inline EncodedBatch encode_plan(const BatchPlan& plan, const EncoderWeights& w, const Tokenizer& tok) {
    EncodedBatch out;
    const auto B = static_cast<Eigen::Index>(plan.size());
    const auto d = w.image_projection.rows();
    auto& b = out.batch;
    b.images.resize(B, d);
    b.texts.resize(B, d);
    auto encode_rows = [&](const std::vector<std::optional<std::string>>& texts, Matrix& m, Mask& mask,
                           std::vector<std::optional<TextCache>>& caches) {
        m = Matrix::Zero(static_cast<Eigen::Index>(texts.size()), d);
        mask.assign(texts.size(), 0);
        caches.assign(texts.size(), std::nullopt);
        for (size_t i = 0; i < texts.size(); ++i) {
            if (!texts[i]) continue;
            caches[i] = text_forward(w, tok.encode(*texts[i]));
            m.row(static_cast<Eigen::Index>(i)) = caches[i]->e.transpose();
            mask[i] = 1;
        }
    };
    for (Eigen::Index i = 0; i < B; ++i) {
        out.images.push_back(image_forward(w, plan.features[static_cast<size_t>(i)]));
        b.images.row(i) = out.images.back().e.transpose();
        out.texts.push_back(text_forward(w, tok.encode(plan.positives[static_cast<size_t>(i)])));
        b.texts.row(i) = out.texts.back()->e.transpose();
    }
    const bool any_negative = std::any_of(plan.negatives.begin(), plan.negatives.end(), [](auto& n) { return n.has_value(); });
    if (any_negative) encode_rows(plan.negatives, b.text_negatives, b.text_negative_mask, out.negatives);
    if (plan.bag_size > 0) {
        b.bag_size = plan.bag_size;
        encode_rows(plan.bags, b.bags, b.bag_mask, out.bags);
        const bool any_bag_neg =
            std::any_of(plan.bag_negatives.begin(), plan.bag_negatives.end(), [](auto& n) { return n.has_value(); });
        if (any_bag_neg) encode_rows(plan.bag_negatives, b.bag_negatives, b.bag_negative_mask, out.bag_negatives);
    }
    return out;
}

// Encoded LossBatch for a set of records.
inline LossBatch build_batch(const std::vector<const CaptionRecord*>& records, const World& world,
                             const DualEncoder& model, const Lexicon& lexicon, const TrainConfig& config,
                             size_t epoch = 0) {
    auto plan = plan_batch(records, world, model.tokenizer, lexicon, config, epoch);
    return encode_plan(plan, model.merge_lora(), model.tokenizer).batch;
}

inline LossWeights effective_weights(const TrainConfig& c, size_t batch) {
    LossWeights w = c.weights;
    if (!c.use_negatives) w.negatives = 0.0;
    if (!c.use_mil) w.mil = 0.0;
    if (c.batch_mean && batch > 0) {
        w.contrastive /= static_cast<double>(batch);
        w.negatives /= static_cast<double>(batch);
    }
    return w;
}

// Loss, effective-weight gradient and temperature gradient for one batch.
struct StepResult {
    LossBreakdown loss; // components as optimized (after batch-mean scaling)
    EncoderWeights grad;
    double log_temperature_grad = 0.0;
};

inline StepResult forward_backward(const EncodedBatch& enc, const EncoderWeights& w, const SimilarityParams& params,
                                   const LossWeights& weights, MilMode mode, uint64_t seed) {
    StepResult r;
    auto g = LossGrad::zeros_like(enc.batch);
    const auto raw = dac_loss(enc.batch, params, weights, mode, seed, &g);
    r.loss.contrastive = weights.contrastive * raw.contrastive;
    r.loss.negatives = weights.negatives * raw.negatives;
    r.loss.mil = weights.mil * raw.mil;
    r.loss.total = raw.total;
    r.log_temperature_grad = g.log_temperature;
    r.grad = w.zeros_like();
    if (!std::isfinite(raw.total)) return r;
    for (size_t i = 0; i < enc.images.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        image_backward(w, enc.images[i], g.images.row(row).transpose(), r.grad);
        text_backward(w, *enc.texts[i], g.texts.row(row).transpose(), r.grad);
    }
    auto back = [&](const std::vector<std::optional<TextCache>>& caches, const Matrix& grads) {
        for (size_t i = 0; i < caches.size(); ++i)
            if (caches[i]) text_backward(w, *caches[i], grads.row(static_cast<Eigen::Index>(i)).transpose(), r.grad);
    };
    back(enc.negatives, g.text_negatives);
    back(enc.bags, g.bags);
    back(enc.bag_negatives, g.bag_negatives);
    return r;
}

struct StepMetrics {
    size_t step = 0;
    size_t epoch = 0;
    double contrastive = 0.0;
    double negatives = 0.0;
    double mil = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double tau = 0.0;

    nlohmann::ordered_json to_json() const {
        return {{"step", step}, {"L_cont", contrastive}, {"L_neg", negatives}, {"L_MIL", mil},
                {"total", total}, {"lr", lr},           {"tau", tau},         {"epoch", epoch}};
    }
};

struct EpochEval {
    size_t epoch = 0; // 0 is the model before any update
    PreferenceReport report;
};

struct TrainResult {
    DualEncoder model;
    std::vector<StepMetrics> metrics;
    std::vector<EpochEval> epochs;
    std::vector<std::string> holdout_refs;
    size_t skipped = 0;
};

namespace detail {

inline void dump_batch(const TrainConfig& config, const BatchPlan& plan, size_t step, const LossBreakdown& loss) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss"] = {{"L_cont", loss.contrastive}, {"L_neg", loss.negatives}, {"L_MIL", loss.mil}, {"total", loss.total}};
    j["image_ids"] = plan.image_ids;
    j["positives"] = plan.positives;
    auto opt = [](const std::vector<std::optional<std::string>>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& x : v) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
        return a;
    };
    j["negatives"] = opt(plan.negatives);
    j["bags"] = opt(plan.bags);
    j["bag_negatives"] = opt(plan.bag_negatives);
    std::filesystem::create_directories(*config.dump_dir);
    std::ofstream(*config.dump_dir / ("nonfinite-step-" + std::to_string(step) + ".json")) << j.dump(2) << '\n';
}

inline std::vector<ParamBlock> adapter_blocks(DualEncoder& model, const ParameterGrad& g, double& log_t,
                                              const double* log_t_grad, bool train_temperature) {
    std::vector<ParamBlock> blocks;
    for (size_t k = 0; k < model.layers.size(); ++k) {
        auto& l = model.layers[k];
        if (l.rank() == 0 || l.empty()) continue;
        blocks.push_back({l.a.data(), g.lora[k].a.data(), l.a.size(), true});
        blocks.push_back({l.b.data(), g.lora[k].b.data(), l.b.size(), true});
    }
    if (train_temperature) blocks.push_back({&log_t, log_t_grad, 1, false});
    return blocks;
}

inline void clamp_log_temperature(SimilarityParams& p) {
    p.log_temperature = std::clamp(p.log_temperature, std::log(p.min_temperature), std::log(p.max_temperature));
}

} // namespace detail

// Fine-tunes LoRA adapters and log_temperature; the base weights stay frozen.
// Held-out records are excluded from training and scored each epoch.
inline TrainResult train(const std::vector<CaptionRecord>& records, const World& world, const DualEncoder& base,
                         const TrainConfig& config, const Lexicon& lexicon) {
    config.validate();
    TrainResult result;
    result.model = base;
    auto& model = result.model;
    if (!model.has_adapters()) model.attach_adapters(config.lora_rank, config.lora_alpha, mix_seed(config.seed, "lora"));
    const uint64_t base_hash = model.base_hash();

    std::vector<const CaptionRecord*> pool;
    for (const auto& r : records) {
        if (is_holdout(r, config.holdout_fraction)) result.holdout_refs.push_back(r.image_ref);
        else pool.push_back(&r);
    }
    const auto holdout_items = config.eval_each_epoch && !result.holdout_refs.empty()
                                   ? build_eval_items(world, result.holdout_refs, lexicon, mix_seed(config.seed, "holdout")).items
                                   : std::vector<EvalItem>{};
    auto evaluate = [&](size_t epoch) {
        if (!holdout_items.empty()) result.epochs.push_back({epoch, preference_eval(EncoderView(model), holdout_items)});
    };
    evaluate(0);

    AdamW optimizer({config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
    const size_t B = config.effective_batch_size();
    size_t step = 0;
    for (size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        auto order = pool;
        std::mt19937_64 rng(mix_seed(mix_seed(config.seed, "shuffle"), epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t start = 0; start < order.size(); start += B) {
            std::vector<const CaptionRecord*> slice(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + B)));
            auto plan = plan_batch(slice, world, model.tokenizer, lexicon, config, epoch);
            result.skipped += plan.skipped;
            if (plan.size() == 0) continue;
            const auto w = model.merge_lora();
            const auto enc = encode_plan(plan, w, model.tokenizer);
            auto weights = effective_weights(config, plan.size());
            if (!enc.batch.has_text_negatives()) weights.negatives = 0.0;
            auto sr = forward_backward(enc, w, model.similarity, weights, config.mil_mode, mix_seed(config.seed, step));
            ++step;
            if (!std::isfinite(sr.loss.total)) {
                if (config.dump_dir) detail::dump_batch(config, plan, step, sr.loss);
                std::string ids;
                for (size_t i = 0; i < std::min<size_t>(plan.image_ids.size(), 8); ++i) ids += " " + plan.image_ids[i];
                throw TrainError("non-finite loss at step " + std::to_string(step) + " (L_cont " +
                                 std::to_string(sr.loss.contrastive) + ", L_neg " + std::to_string(sr.loss.negatives) +
                                 ", L_MIL " + std::to_string(sr.loss.mil) + "); batch:" + ids);
            }
            result.metrics.push_back({step, epoch, sr.loss.contrastive, sr.loss.negatives, sr.loss.mil, sr.loss.total,
                                      config.learning_rate, model.similarity.temperature()});
            const auto pg = parameter_gradient(model, sr.grad, false);
            optimizer.step(detail::adapter_blocks(model, pg, model.similarity.log_temperature, &sr.log_temperature_grad,
                                                  config.train_temperature));
            detail::clamp_log_temperature(model.similarity);
        }
        evaluate(epoch);
    }
    if (model.base_hash() != base_hash) throw TrainError("frozen base weights changed during training");
    return result;
}

// ---- base pretraining ---------------------------------------------------------

struct PretrainConfig {
    EncoderConfig encoder;
    size_t steps = 20;
    size_t batch_size = 64;
    double learning_rate = 3e-3;
    double initial_temperature = 30.0;
    uint64_t seed = 0;

    nlohmann::ordered_json to_json() const {
        return {{"encoder", encoder.to_json()}, {"steps", steps}, {"batch_size", batch_size},
                {"learning_rate", learning_rate}, {"initial_temperature", initial_temperature}, {"seed", seed}};
    }
};

// Plain contrastive training of every base weight on full-mode captions of
// freshly generated scenes.
inline DualEncoder pretrain_base(const World& world, const PretrainConfig& config) {
    auto enc_config = config.encoder;
    enc_config.feature_dim = world.config.feature_dim;
    auto model = DualEncoder::initialize(enc_config, Tokenizer(world.vocab), config.seed);
    model.similarity.log_temperature = std::log(config.initial_temperature);
    detail::clamp_log_temperature(model.similarity);
    AdamW optimizer({config.learning_rate, 0.9, 0.999, 1e-8, 0.0});
    LossWeights weights{1.0 / static_cast<double>(config.batch_size), 0.0, 0.0};
    for (size_t step = 0; step < config.steps; ++step) {
        BatchPlan plan;
        for (size_t i = 0; i < config.batch_size; ++i) {
            const uint64_t s = mix_seed(mix_seed(mix_seed(config.seed, "pretrain"), step), i);
            const auto scene = world.scene(s);
            plan.features.push_back(world.features(scene, s));
            plan.positives.push_back(render_caption(scene, world.vocab, CaptionMode::full, 0));
            plan.negatives.push_back(std::nullopt);
        }
        const auto w = model.merge_lora();
        const auto enc = encode_plan(plan, w, model.tokenizer);
        auto sr = forward_backward(enc, w, model.similarity, weights, MilMode::nce, 0);
        if (!std::isfinite(sr.loss.total)) throw TrainError("non-finite loss during pretraining");
        auto pg = parameter_gradient(model, sr.grad, true);
        std::vector<ParamBlock> blocks;
        for (size_t k = 0; k < model.layers.size(); ++k)
            if (!model.layers[k].empty())
                blocks.push_back({model.layers[k].base.data(), pg.base[k].data(), model.layers[k].base.size(), false});
        blocks.push_back({&model.similarity.log_temperature, &sr.log_temperature_grad, 1, false});
        optimizer.step(blocks);
        detail::clamp_log_temperature(model.similarity);
    }
    return model;
}

} // namespace dac
