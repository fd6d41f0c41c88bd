#pragma once

// AdamW with decoupled weight decay over a flat list of parameter blocks.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "dac/util.hpp"

namespace dac {

struct AdamWConfig {
    double learning_rate = 5.0e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

struct ParamBlock {
    double* value;
    const double* grad;
    Eigen::Index size;
    bool decay;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    // Blocks must be passed in the same order and with the same sizes on
    // every call.
    void step(const std::vector<ParamBlock>& blocks) {
        if (m_.empty()) {
            for (const auto& b : blocks) {
                m_.emplace_back(Eigen::VectorXd::Zero(b.size));
                v_.emplace_back(Eigen::VectorXd::Zero(b.size));
            }
        }
        if (m_.size() != blocks.size()) throw Error("optimizer parameter layout changed");
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        const double lr = config_.learning_rate;
        for (size_t k = 0; k < blocks.size(); ++k) {
            const auto& b = blocks[k];
            if (m_[k].size() != b.size) throw Error("optimizer parameter layout changed");
            Eigen::Map<Eigen::VectorXd> x(b.value, b.size);
            Eigen::Map<const Eigen::VectorXd> g(b.grad, b.size);
            m_[k] = config_.beta1 * m_[k] + (1.0 - config_.beta1) * g;
            v_[k] = config_.beta2 * v_[k] + (1.0 - config_.beta2) * g.cwiseProduct(g);
            if (b.decay && config_.weight_decay > 0.0) x *= 1.0 - lr * config_.weight_decay;
            x.array() -= lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + config_.epsilon);
        }
    }

    const AdamWConfig& config() const { return config_; }
    size_t steps() const { return t_; }

private:
    AdamWConfig config_;
    std::vector<Eigen::VectorXd> m_, v_;
    size_t t_ = 0;
};

} // namespace dac
