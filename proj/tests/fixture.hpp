#pragma once

// Small enhanced corpus and pretrained base shared by the train/eval tests.

#include "dac/enhance.hpp"
#include "dac/train.hpp"

namespace fixture {

struct Setup {
    dac::World world;
    dac::Lexicon lexicon;
    dac::DualEncoder base;
    std::vector<dac::CaptionRecord> records;
};

inline dac::PretrainConfig small_pretrain(bool attention = false, uint64_t seed = 0) {
    dac::PretrainConfig pc;
    pc.encoder.text_width = 16;
    pc.encoder.image_width = 16;
    pc.encoder.embed_dim = 16;
    pc.encoder.attention = attention;
    pc.steps = 10;
    pc.batch_size = 32;
    pc.seed = seed;
    return pc;
}

inline dac::TrainConfig small_train(uint64_t seed = 0) {
    dac::TrainConfig c;
    c.seed = seed;
    c.eval_each_epoch = false;
    c.epochs = 1;
    c.lora_rank = 4;
    c.lora_alpha = 8.0;
    c.learning_rate = 2e-3;
    return c;
}

inline Setup make(size_t records, bool attention = false) {
    Setup s;
    s.lexicon = dac::Lexicon::from_vocabulary(s.world.vocab);
    s.base = dac::pretrain_base(s.world, small_pretrain(attention));
    auto backends = dac::mock_backends(s.world);
    s.records = dac::run_pipeline(dac::synthesize_records(s.world, {records, 0.85, 1}), dac::PipelineConfig{}, backends,
                                  s.lexicon);
    return s;
}

// Built once per test binary.
inline const Setup& shared() {
    static const Setup s = make(400);
    return s;
}

} // namespace fixture
