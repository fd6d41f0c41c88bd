#pragma once

// Image-text objectives over unit-norm embeddings with a learned temperature:
//
//   S(T, I)   = exp(tau * <e_T, e_I>),  tau = exp(log_temperature)
//   contrast  = sum_i -log S_ii / sum_j S(T_i, I_j) - log S_ii / sum_k S(T_k, I_i)
//   negatives = sum_i -log S(T_i, I_i) / (S(T_i, I_i) + S(T_i^neg, I_i))
//   mil_base  = -1/B sum_i log sum_m S(T_im, I_i) / sum_j sum_m S(T_jm, I_i)
//   mil_neg   = as mil_base with item i's own bag negatives added to its denominator
//
// Every loss is evaluated with log-sum-exp and can accumulate analytic
// gradients with respect to each embedding row and to log_temperature.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dac/util.hpp"

namespace dac {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Mask = std::vector<char>;

struct SimilarityParams {
    double log_temperature = std::log(10.0);
    double min_temperature = 1.0;
    double max_temperature = 100.0;

    double temperature() const { return std::exp(log_temperature); }

    void clamp() {
        log_temperature = std::clamp(log_temperature, std::log(min_temperature), std::log(max_temperature));
    }
};

class LossError : public Error {
public:
    using Error::Error;
};

inline double similarity(const Vector& text, const Vector& image, const SimilarityParams& params) {
    if (text.size() != image.size()) throw LossError("similarity: dimension mismatch");
    if (!text.allFinite() || !image.allFinite() || !std::isfinite(params.log_temperature))
        throw LossError("similarity: non-finite input");
    return std::exp(params.temperature() * text.dot(image));
}

// Embeddings for one optimization step. Bag rows are laid out item-major:
// row i * bag_size + m holds T_{i,m}.
struct LossBatch {
    Matrix images;
    Matrix texts;
    Matrix text_negatives; // empty or B x d
    Mask text_negative_mask;
    size_t bag_size = 0; // 0 when the batch carries no bags
    Matrix bags;
    Mask bag_mask;
    Matrix bag_negatives; // empty or (B * bag_size) x d
    Mask bag_negative_mask;

    Eigen::Index batch_size() const { return images.rows(); }
    bool has_text_negatives() const { return text_negatives.rows() > 0; }
    bool has_bags() const { return bag_size > 0; }
    bool has_bag_negatives() const { return bag_negatives.rows() > 0; }
};

struct LossGrad {
    Matrix images;
    Matrix texts;
    Matrix text_negatives;
    Matrix bags;
    Matrix bag_negatives;
    double log_temperature = 0.0;

    static LossGrad zeros_like(const LossBatch& b) {
        LossGrad g;
        g.images = Matrix::Zero(b.images.rows(), b.images.cols());
        g.texts = Matrix::Zero(b.texts.rows(), b.texts.cols());
        g.text_negatives = Matrix::Zero(b.text_negatives.rows(), b.text_negatives.cols());
        g.bags = Matrix::Zero(b.bags.rows(), b.bags.cols());
        g.bag_negatives = Matrix::Zero(b.bag_negatives.rows(), b.bag_negatives.cols());
        return g;
    }
};

namespace detail {

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw LossError(std::string("non-finite values in ") + what);
}

inline void check_batch(const LossBatch& b, const SimilarityParams& params) {
    const auto B = b.batch_size();
    const auto d = b.images.cols();
    if (B < 1) throw LossError("batch is empty");
    if (b.texts.rows() != B || b.texts.cols() != d) throw LossError("texts do not match images");
    if (!std::isfinite(params.log_temperature)) throw LossError("non-finite log temperature");
    require_finite(b.images, "images");
    require_finite(b.texts, "texts");
    if (b.has_text_negatives()) {
        if (b.text_negatives.rows() != B || b.text_negatives.cols() != d ||
            b.text_negative_mask.size() != static_cast<size_t>(B))
            throw LossError("text negatives do not match the batch");
        require_finite(b.text_negatives, "text negatives");
    }
    if (b.has_bags()) {
        const auto rows = B * static_cast<Eigen::Index>(b.bag_size);
        if (b.bags.rows() != rows || b.bags.cols() != d || b.bag_mask.size() != static_cast<size_t>(rows))
            throw LossError("bags do not match the batch");
        require_finite(b.bags, "bags");
        if (b.has_bag_negatives()) {
            if (b.bag_negatives.rows() != rows || b.bag_negatives.cols() != d ||
                b.bag_negative_mask.size() != static_cast<size_t>(rows))
                throw LossError("bag negatives do not match the bags");
            require_finite(b.bag_negatives, "bag negatives");
        }
    }
}

inline double log_sum_exp(const std::vector<double>& xs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

enum class Rows { bags, bag_negatives };

struct Term {
    Rows rows;
    Eigen::Index row;
    bool in_numerator;
};

// -scale * (LSE over numerator terms - LSE over all terms) for one image row.
inline double lse_ratio(const LossBatch& b, const SimilarityParams& params, Eigen::Index image,
                        const std::vector<Term>& terms, double scale, LossGrad* grad) {
    const double tau = params.temperature();
    auto row_of = [&](const Term& t) {
        return t.rows == Rows::bags ? b.bags.row(t.row) : b.bag_negatives.row(t.row);
    };
    std::vector<double> logits(terms.size()), numer;
    for (size_t k = 0; k < terms.size(); ++k) {
        logits[k] = tau * row_of(terms[k]).dot(b.images.row(image));
        if (terms[k].in_numerator) numer.push_back(logits[k]);
    }
    const double lse_num = log_sum_exp(numer);
    const double lse_den = log_sum_exp(logits);
    if (grad) {
        for (size_t k = 0; k < terms.size(); ++k) {
            double w_den = std::exp(logits[k] - lse_den);
            double w_num = terms[k].in_numerator ? std::exp(logits[k] - lse_num) : 0.0;
            double dl = scale * (w_den - w_num);
            if (dl == 0.0) continue;
            auto& target = terms[k].rows == Rows::bags ? grad->bags : grad->bag_negatives;
            target.row(terms[k].row) += dl * tau * b.images.row(image);
            grad->images.row(image) += dl * tau * row_of(terms[k]);
            grad->log_temperature += dl * logits[k];
        }
    }
    return -scale * (lse_num - lse_den);
}

inline double mil_nce(const LossBatch& b, const SimilarityParams& params, bool with_negatives, LossGrad* grad) {
    check_batch(b, params);
    if (!b.has_bags()) throw LossError("MIL loss needs bag embeddings");
    if (with_negatives && !b.has_bag_negatives()) throw LossError("MIL negatives loss needs bag negatives");
    const auto B = b.batch_size();
    const auto M = static_cast<Eigen::Index>(b.bag_size);
    for (Eigen::Index i = 0; i < B; ++i) {
        bool any = false;
        for (Eigen::Index m = 0; m < M; ++m) any |= b.bag_mask[i * M + m] != 0;
        if (!any) throw LossError("bag " + std::to_string(i) + " has no valid captions");
    }
    double loss = 0.0;
    std::vector<Term> terms;
    for (Eigen::Index i = 0; i < B; ++i) {
        terms.clear();
        for (Eigen::Index j = 0; j < B; ++j)
            for (Eigen::Index m = 0; m < M; ++m)
                if (b.bag_mask[j * M + m]) terms.push_back({Rows::bags, j * M + m, j == i});
        if (with_negatives)
            for (Eigen::Index m = 0; m < M; ++m)
                if (b.bag_negative_mask[i * M + m]) terms.push_back({Rows::bag_negatives, i * M + m, false});
        loss += lse_ratio(b, params, i, terms, 1.0 / static_cast<double>(B), grad);
    }
    return loss;
}

} // namespace detail

struct ContrastiveTerms {
    double text_to_image = 0.0; // sum_i -log S_ii / sum_j S(T_i, I_j)
    double image_to_text = 0.0; // sum_i -log S_ii / sum_k S(T_k, I_i)
    double total() const { return text_to_image + image_to_text; }
};

inline ContrastiveTerms contrastive_terms(const LossBatch& b, const SimilarityParams& params,
                                          LossGrad* grad = nullptr, double weight = 1.0) {
    detail::check_batch(b, params);
    const double tau = params.temperature();
    const Matrix logits = tau * b.texts * b.images.transpose(); // (i, j) = tau <T_i, I_j>
    const auto B = logits.rows();
    ContrastiveTerms out;
    Matrix g = Matrix::Zero(B, B);
    for (Eigen::Index i = 0; i < B; ++i) {
        const double row_max = logits.row(i).maxCoeff();
        const double lse_row = row_max + std::log((logits.row(i).array() - row_max).exp().sum());
        const double col_max = logits.col(i).maxCoeff();
        const double lse_col = col_max + std::log((logits.col(i).array() - col_max).exp().sum());
        out.text_to_image += lse_row - logits(i, i);
        out.image_to_text += lse_col - logits(i, i);
        g.row(i) += (logits.row(i).array() - lse_row).exp().matrix();
        g.col(i) += (logits.col(i).array() - lse_col).exp().matrix();
        g(i, i) -= 2.0;
    }
    if (grad) {
        g *= weight;
        grad->texts += tau * g * b.images;
        grad->images += tau * g.transpose() * b.texts;
        grad->log_temperature += (g.array() * logits.array()).sum();
    }
    return out;
}

inline double contrastive_loss(const LossBatch& b, const SimilarityParams& params, LossGrad* grad = nullptr,
                               double weight = 1.0) {
    return contrastive_terms(b, params, grad, weight).total();
}

inline double negatives_loss(const LossBatch& b, const SimilarityParams& params, LossGrad* grad = nullptr,
                             double weight = 1.0) {
    detail::check_batch(b, params);
    if (!b.has_text_negatives()) throw LossError("negatives loss needs caption negatives");
    const double tau = params.temperature();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < b.batch_size(); ++i) {
        if (!b.text_negative_mask[i]) continue;
        const double x = tau * (b.text_negatives.row(i).dot(b.images.row(i)) - b.texts.row(i).dot(b.images.row(i)));
        loss += detail::softplus(x);
        if (grad) {
            const double s = weight * detail::sigmoid(x);
            grad->texts.row(i) -= s * tau * b.images.row(i);
            grad->text_negatives.row(i) += s * tau * b.images.row(i);
            grad->images.row(i) += s * tau * (b.text_negatives.row(i) - b.texts.row(i));
            grad->log_temperature += s * x;
        }
    }
    return loss;
}

namespace detail {

// Runs `fn` with a gradient sink scaled by `weight`, then folds it into `grad`.
template <class Fn>
double weighted(const LossBatch& b, LossGrad* grad, double weight, Fn&& fn) {
    if (!grad || weight == 1.0) return fn(grad);
    LossGrad local = LossGrad::zeros_like(b);
    double v = fn(&local);
    grad->images += weight * local.images;
    grad->texts += weight * local.texts;
    grad->text_negatives += weight * local.text_negatives;
    grad->bags += weight * local.bags;
    grad->bag_negatives += weight * local.bag_negatives;
    grad->log_temperature += weight * local.log_temperature;
    return v;
}

} // namespace detail

inline double mil_base_loss(const LossBatch& b, const SimilarityParams& params, LossGrad* grad = nullptr,
                            double weight = 1.0) {
    return detail::weighted(b, grad, weight, [&](LossGrad* g) { return detail::mil_nce(b, params, false, g); });
}

inline double mil_neg_loss(const LossBatch& b, const SimilarityParams& params, LossGrad* grad = nullptr,
                           double weight = 1.0) {
    return detail::weighted(b, grad, weight, [&](LossGrad* g) { return detail::mil_nce(b, params, true, g); });
}

enum class MilVariant { max, avg, rand };

inline std::string_view variant_name(MilVariant v) {
    switch (v) {
    case MilVariant::max: return "max";
    case MilVariant::avg: return "avg";
    case MilVariant::rand: return "rand";
    }
    return "?";
}

// Collapses every bag to one caption (best match, renormalized mean, or a
// seeded pick) and applies the single-caption MIL loss.
inline double mil_variant_loss(const LossBatch& b, const SimilarityParams& params, MilVariant variant, uint64_t seed,
                               LossGrad* grad = nullptr, double weight = 1.0) {
    detail::check_batch(b, params);
    if (!b.has_bags()) throw LossError("MIL loss needs bag embeddings");
    const auto B = b.batch_size();
    const auto M = static_cast<Eigen::Index>(b.bag_size);
    const auto d = b.images.cols();

    LossBatch reduced;
    reduced.images = b.images;
    reduced.texts = b.texts;
    reduced.bag_size = 1;
    reduced.bags = Matrix::Zero(B, d);
    reduced.bag_mask.assign(static_cast<size_t>(B), 1);

    std::vector<std::vector<Eigen::Index>> valid(static_cast<size_t>(B));
    for (Eigen::Index i = 0; i < B; ++i) {
        for (Eigen::Index m = 0; m < M; ++m)
            if (b.bag_mask[i * M + m]) valid[i].push_back(i * M + m);
        if (valid[i].empty()) throw LossError("bag " + std::to_string(i) + " has no valid captions");
    }

    std::vector<Eigen::Index> picked(static_cast<size_t>(B), -1);
    std::vector<Vector> means(static_cast<size_t>(B));
    std::mt19937_64 rng(mix_seed(seed, "mil-rand"));
    for (Eigen::Index i = 0; i < B; ++i) {
        const auto& rows = valid[i];
        switch (variant) {
        case MilVariant::max: {
            Eigen::Index best = rows.front();
            for (auto r : rows)
                if (b.bags.row(r).dot(b.images.row(i)) > b.bags.row(best).dot(b.images.row(i))) best = r;
            picked[i] = best;
            reduced.bags.row(i) = b.bags.row(best);
            break;
        }
        case MilVariant::rand: {
            picked[i] = rows[std::uniform_int_distribution<size_t>(0, rows.size() - 1)(rng)];
            reduced.bags.row(i) = b.bags.row(picked[i]);
            break;
        }
        case MilVariant::avg: {
            Vector mean = Vector::Zero(d);
            for (auto r : rows) mean += b.bags.row(r).transpose();
            mean /= static_cast<double>(rows.size());
            if (mean.norm() == 0.0) throw LossError("bag " + std::to_string(i) + " averages to zero");
            means[i] = mean;
            reduced.bags.row(i) = mean.transpose() / mean.norm();
            break;
        }
        }
    }

    if (!grad) return mil_base_loss(reduced, params);
    LossGrad local = LossGrad::zeros_like(reduced);
    const double loss = mil_base_loss(reduced, params, &local);
    grad->images += weight * local.images;
    grad->log_temperature += weight * local.log_temperature;
    for (Eigen::Index i = 0; i < B; ++i) {
        if (variant == MilVariant::avg) {
            const Vector& u = means[i];
            const double n = u.norm();
            const Vector v = u / n;
            const Vector dv = local.bags.row(i).transpose();
            const Vector du = (dv - v * v.dot(dv)) / n;
            for (auto r : valid[i]) grad->bags.row(r) += weight * du.transpose() / static_cast<double>(valid[i].size());
        } else {
            grad->bags.row(picked[i]) += weight * local.bags.row(i);
        }
    }
    return loss;
}

enum class MilMode { nce, max, avg, rand };

inline std::string_view mil_mode_name(MilMode m) {
    switch (m) {
    case MilMode::nce: return "nce";
    case MilMode::max: return "max";
    case MilMode::avg: return "avg";
    case MilMode::rand: return "rand";
    }
    return "?";
}

inline MilMode parse_mil_mode(std::string_view s) {
    for (auto m : {MilMode::nce, MilMode::max, MilMode::avg, MilMode::rand})
        if (mil_mode_name(m) == s) return m;
    throw Error("unknown MIL mode '" + std::string(s) + "'");
}

struct LossWeights {
    double contrastive = 1.0;
    double negatives = 1.0;
    double mil = 1.0;
};

struct LossBreakdown {
    double contrastive = 0.0;
    double negatives = 0.0;
    double mil = 0.0;
    double total = 0.0;
};

// Weighted sum of the three objectives. A zero weight skips its component and
// reports it as exactly 0. With MilMode::nce the MIL term includes bag
// negatives whenever the batch carries them.
inline LossBreakdown dac_loss(const LossBatch& b, const SimilarityParams& params, const LossWeights& w = {},
                              MilMode mil_mode = MilMode::nce, uint64_t seed = 0, LossGrad* grad = nullptr) {
    LossBreakdown out;
    if (w.contrastive != 0.0) out.contrastive = contrastive_loss(b, params, grad, w.contrastive);
    if (w.negatives != 0.0) out.negatives = negatives_loss(b, params, grad, w.negatives);
    if (w.mil != 0.0) {
        switch (mil_mode) {
        case MilMode::nce:
            out.mil = b.has_bag_negatives() ? mil_neg_loss(b, params, grad, w.mil) : mil_base_loss(b, params, grad, w.mil);
            break;
        case MilMode::max: out.mil = mil_variant_loss(b, params, MilVariant::max, seed, grad, w.mil); break;
        case MilMode::avg: out.mil = mil_variant_loss(b, params, MilVariant::avg, seed, grad, w.mil); break;
        case MilMode::rand: out.mil = mil_variant_loss(b, params, MilVariant::rand, seed, grad, w.mil); break;
        }
    }
    out.total = w.contrastive * out.contrastive + w.negatives * out.negatives + w.mil * out.mil;
    return out;
}

} // namespace dac
