#pragma once

// Toy dual encoder. Text tower: token embeddings, an optional single-head
// self-attention block with residual connection and sinusoidal positions, mean
// pooling and a linear projection. Image tower: tanh MLP. Both towers emit
// L2-normalized embeddings. Every weight matrix carries a LoRA adapter
// W = W0 + (alpha / r) * B * A with B zero-initialized.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "dac/losses.hpp"
#include "dac/scene.hpp"
#include "dac/util.hpp"

namespace dac {

class UnknownTokenError : public Error {
public:
    using Error::Error;
};

// Closed vocabulary over grammar words plus every vocabulary word.
class Tokenizer {
public:
    Tokenizer() = default;

    explicit Tokenizer(const Vocabulary& vocab) {
        for (const auto& w : function_words()) add(w);
        for (auto& [key, c] : vocabulary_keys())
            for (const auto& w : vocab.of(c)) add(w);
    }

    explicit Tokenizer(std::vector<std::string> tokens) {
        for (auto& t : tokens) add(t);
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        for (const auto& tok : normalized_tokens(text)) {
            auto it = index_.find(tok);
            if (it == index_.end()) throw UnknownTokenError("unknown token '" + tok + "' in '" + std::string(text) + "'");
            ids.push_back(it->second);
        }
        if (ids.empty()) throw UnknownTokenError("text '" + std::string(text) + "' has no tokens");
        return ids;
    }

    size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    uint64_t hash() const {
        uint64_t h = fnv1a("tokenizer");
        for (const auto& t : tokens_) h = fnv1a(t + ";", h);
        return h;
    }

private:
    void add(const std::string& t) {
        if (index_.emplace(t, static_cast<int>(tokens_.size())).second) tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

struct EncoderConfig {
    size_t feature_dim = 128;
    size_t text_width = 64;
    size_t image_width = 64;
    size_t embed_dim = 64;
    bool attention = false;
    size_t lora_rank = 16;
    double lora_alpha = 32.0;

    nlohmann::ordered_json to_json() const {
        return {{"feature_dim", feature_dim}, {"text_width", text_width}, {"image_width", image_width},
                {"embed_dim", embed_dim},     {"attention", attention},   {"lora_rank", lora_rank},
                {"lora_alpha", lora_alpha}};
    }

    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig c;
        c.feature_dim = j.at("feature_dim").get<size_t>();
        c.text_width = j.at("text_width").get<size_t>();
        c.image_width = j.at("image_width").get<size_t>();
        c.embed_dim = j.at("embed_dim").get<size_t>();
        c.attention = j.at("attention").get<bool>();
        c.lora_rank = j.at("lora_rank").get<size_t>();
        c.lora_alpha = j.at("lora_alpha").get<double>();
        return c;
    }
};

// Plain (already merged) weights of both towers. Attention matrices are empty
// when the block is disabled.
struct EncoderWeights {
    Matrix token_embedding;  // vocab x text_width
    Matrix query;            // text_width x text_width
    Matrix key;
    Matrix value;
    Matrix output;
    Matrix text_projection;  // embed_dim x text_width
    Matrix image_hidden;     // image_width x feature_dim
    Matrix image_projection; // embed_dim x image_width

    static constexpr std::array<const char*, 8> names{"token_embedding", "query",           "key",
                                                      "value",           "output",          "text_projection",
                                                      "image_hidden",    "image_projection"};

    std::array<Matrix*, 8> all() {
        return {&token_embedding, &query, &key, &value, &output, &text_projection, &image_hidden, &image_projection};
    }
    std::array<const Matrix*, 8> all() const {
        return {&token_embedding, &query, &key, &value, &output, &text_projection, &image_hidden, &image_projection};
    }

    EncoderWeights zeros_like() const {
        EncoderWeights z;
        auto dst = z.all();
        auto src = all();
        for (size_t k = 0; k < dst.size(); ++k) *dst[k] = Matrix::Zero(src[k]->rows(), src[k]->cols());
        return z;
    }
};

struct LoraLayer {
    Matrix base; // frozen W0
    Matrix a;    // rank x cols
    Matrix b;    // rows x rank, zero at init
    double alpha = 0.0;

    size_t rank() const { return static_cast<size_t>(a.rows()); }
    double scale() const { return rank() == 0 ? 0.0 : alpha / static_cast<double>(rank()); }
    bool empty() const { return base.size() == 0; }

    Matrix merged() const {
        if (rank() == 0 || empty()) return base;
        return base + scale() * b * a;
    }
};

struct LoraGrad {
    Matrix a;
    Matrix b;
};

// d(loss)/dA and d(loss)/dB from the gradient of the effective weight.
inline LoraGrad lora_gradient(const LoraLayer& layer, const Matrix& effective_grad) {
    LoraGrad g;
    if (layer.rank() == 0 || layer.empty()) {
        g.a = Matrix::Zero(layer.a.rows(), layer.a.cols());
        g.b = Matrix::Zero(layer.b.rows(), layer.b.cols());
        return g;
    }
    g.a = layer.scale() * layer.b.transpose() * effective_grad;
    g.b = layer.scale() * effective_grad * layer.a.transpose();
    return g;
}

// Gradients of every stored parameter. Base gradients stay exactly zero unless
// the base is being trained (pretraining).
struct ParameterGrad {
    std::array<Matrix, 8> base;
    std::array<LoraGrad, 8> lora;
};

inline Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index width) {
    Matrix p(length, width);
    for (Eigen::Index pos = 0; pos < length; ++pos)
        for (Eigen::Index k = 0; k < width; ++k) {
            const double freq = std::pow(10000.0, -static_cast<double>(k - k % 2) / static_cast<double>(width));
            p(pos, k) = k % 2 == 0 ? std::sin(static_cast<double>(pos) * freq) : std::cos(static_cast<double>(pos) * freq);
        }
    return p;
}

struct TextCache {
    std::vector<int> tokens;
    Matrix x;      // n x h, embeddings (+ positions when attending)
    Matrix q, k, v;
    Matrix attn;   // n x n row-softmax
    Matrix mixed;  // attn * v
    Vector pooled; // h
    Vector z;      // pre-normalization output
    Vector e;      // unit output
};

struct ImageCache {
    Vector x;
    Vector hidden; // tanh activations
    Vector z;
    Vector e;
};

inline Vector normalize_checked(const Vector& z) {
    const double n = z.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw Error("encoder output has zero or non-finite norm");
    return z / n;
}

// Backprop through e = z / |z|.
inline Vector normalize_backward(const Vector& z, const Vector& e, const Vector& de) {
    return (de - e * e.dot(de)) / z.norm();
}

inline TextCache text_forward(const EncoderWeights& w, const std::vector<int>& tokens) {
    TextCache c;
    c.tokens = tokens;
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const auto h = w.token_embedding.cols();
    if (n == 0) throw Error("cannot encode an empty token sequence");
    c.x.resize(n, h);
    for (Eigen::Index t = 0; t < n; ++t) {
        const int id = tokens[static_cast<size_t>(t)];
        if (id < 0 || id >= w.token_embedding.rows()) throw UnknownTokenError("token id out of range");
        c.x.row(t) = w.token_embedding.row(id);
    }
    if (w.query.size() > 0) {
        c.x += sinusoidal_positions(n, h);
        c.q = c.x * w.query.transpose();
        c.k = c.x * w.key.transpose();
        c.v = c.x * w.value.transpose();
        Matrix scores = c.q * c.k.transpose() / std::sqrt(static_cast<double>(h));
        c.attn.resize(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
            const double mx = scores.row(r).maxCoeff();
            Eigen::RowVectorXd ex = (scores.row(r).array() - mx).exp().matrix();
            c.attn.row(r) = ex / ex.sum();
        }
        c.mixed = c.attn * c.v;
        Matrix y = c.x + c.mixed * w.output.transpose();
        c.pooled = y.colwise().mean().transpose();
    } else {
        // sorted summation keeps the pooled vector bitwise permutation-invariant
        std::vector<int> sorted = tokens;
        std::sort(sorted.begin(), sorted.end());
        c.pooled = Vector::Zero(h);
        for (int id : sorted) c.pooled += w.token_embedding.row(id).transpose();
        c.pooled /= static_cast<double>(n);
    }
    c.z = w.text_projection * c.pooled;
    c.e = normalize_checked(c.z);
    return c;
}

inline void text_backward(const EncoderWeights& w, const TextCache& c, const Vector& de, EncoderWeights& g) {
    const Vector dz = normalize_backward(c.z, c.e, de);
    g.text_projection += dz * c.pooled.transpose();
    const Vector dpooled = w.text_projection.transpose() * dz;
    const auto n = c.x.rows();
    const auto h = c.x.cols();
    // every row of the pooled input receives dpooled / n
    Matrix dy = (dpooled / static_cast<double>(n)).transpose().replicate(n, 1);
    Matrix dx = dy;
    if (w.query.size() > 0) {
        g.output += dy.transpose() * c.mixed;
        const Matrix dmixed = dy * w.output;
        const Matrix dattn = dmixed * c.v.transpose();
        const Matrix dv = c.attn.transpose() * dmixed;
        Matrix dscores(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
            const double inner = dattn.row(r).dot(c.attn.row(r));
            dscores.row(r) = c.attn.row(r).array() * (dattn.row(r).array() - inner);
        }
        dscores /= std::sqrt(static_cast<double>(h));
        const Matrix dq = dscores * c.k;
        const Matrix dk = dscores.transpose() * c.q;
        g.query += dq.transpose() * c.x;
        g.key += dk.transpose() * c.x;
        g.value += dv.transpose() * c.x;
        dx += dq * w.query + dk * w.key + dv * w.value;
    }
    for (Eigen::Index t = 0; t < n; ++t) g.token_embedding.row(c.tokens[static_cast<size_t>(t)]) += dx.row(t);
}

inline ImageCache image_forward(const EncoderWeights& w, const Vector& features) {
    if (features.size() != w.image_hidden.cols())
        throw Error("image features have dimension " + std::to_string(features.size()) + ", expected " +
                    std::to_string(w.image_hidden.cols()));
    ImageCache c;
    c.x = features;
    c.hidden = (w.image_hidden * features).array().tanh().matrix();
    c.z = w.image_projection * c.hidden;
    c.e = normalize_checked(c.z);
    return c;
}

inline void image_backward(const EncoderWeights& w, const ImageCache& c, const Vector& de, EncoderWeights& g) {
    const Vector dz = normalize_backward(c.z, c.e, de);
    g.image_projection += dz * c.hidden.transpose();
    const Vector dhidden = (w.image_projection.transpose() * dz).array() * (1.0 - c.hidden.array().square());
    g.image_hidden += dhidden * c.x.transpose();
}

// Frozen base weights, their adapters, the tokenizer and the temperature.
struct DualEncoder {
    EncoderConfig config;
    Tokenizer tokenizer;
    std::array<LoraLayer, 8> layers; // ordered as EncoderWeights::names
    SimilarityParams similarity;

    static DualEncoder initialize(const EncoderConfig& config, const Tokenizer& tokenizer, uint64_t seed) {
        DualEncoder m;
        m.config = config;
        m.tokenizer = tokenizer;
        std::mt19937_64 rng(mix_seed(seed, "encoder-init"));
        std::normal_distribution<double> normal;
        auto gaussian = [&](size_t rows, size_t cols, double stddev) {
            Matrix x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = stddev * normal(rng);
            return x;
        };
        const size_t h = config.text_width;
        EncoderWeights w;
        w.token_embedding = gaussian(tokenizer.size(), h, 1.0);
        if (config.attention) {
            w.query = gaussian(h, h, 1.0 / std::sqrt(double(h)));
            w.key = gaussian(h, h, 1.0 / std::sqrt(double(h)));
            w.value = gaussian(h, h, 1.0 / std::sqrt(double(h)));
            w.output = gaussian(h, h, 1.0 / std::sqrt(double(h)));
        }
        w.text_projection = gaussian(config.embed_dim, h, 1.0 / std::sqrt(double(h)));
        w.image_hidden = gaussian(config.image_width, config.feature_dim, 1.0 / std::sqrt(2.0));
        w.image_projection = gaussian(config.embed_dim, config.image_width, 1.0 / std::sqrt(double(config.image_width)));
        m.set_base(w);
        return m;
    }

    void set_base(const EncoderWeights& w) {
        auto src = w.all();
        for (size_t k = 0; k < layers.size(); ++k) {
            layers[k].base = *src[k];
            layers[k].a.resize(0, layers[k].base.cols());
            layers[k].b.resize(layers[k].base.rows(), 0);
            layers[k].alpha = 0.0;
        }
    }

    // Attaches fresh adapters (B = 0) to every non-empty weight matrix.
    void attach_adapters(size_t rank, double alpha, uint64_t seed) {
        std::mt19937_64 rng(mix_seed(seed, "lora-init"));
        std::normal_distribution<double> normal;
        for (auto& l : layers) {
            if (l.empty()) continue;
            const double stddev = 1.0 / std::sqrt(static_cast<double>(l.base.cols()));
            l.a.resize(static_cast<Eigen::Index>(rank), l.base.cols());
            for (Eigen::Index i = 0; i < l.a.size(); ++i) l.a.data()[i] = stddev * normal(rng);
            l.b = Matrix::Zero(l.base.rows(), static_cast<Eigen::Index>(rank));
            l.alpha = alpha;
        }
    }

    bool has_adapters() const {
        return std::any_of(layers.begin(), layers.end(), [](const LoraLayer& l) { return l.rank() > 0; });
    }

    EncoderWeights base_weights() const {
        EncoderWeights w;
        auto dst = w.all();
        for (size_t k = 0; k < layers.size(); ++k) *dst[k] = layers[k].base;
        return w;
    }

    // Effective weights W0 + (alpha / r) B A for every layer.
    EncoderWeights merge_lora() const {
        EncoderWeights w;
        auto dst = w.all();
        for (size_t k = 0; k < layers.size(); ++k) *dst[k] = layers[k].merged();
        return w;
    }

    uint64_t base_hash() const {
        uint64_t h = fnv1a("base");
        for (const auto& l : layers) {
            h = fnv1a(std::to_string(l.base.rows()) + "x" + std::to_string(l.base.cols()), h);
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(l.base.data()), sizeof(double) * l.base.size()), h);
        }
        return h;
    }

    uint64_t state_hash() const {
        uint64_t h = base_hash();
        for (const auto& l : layers) {
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(l.a.data()), sizeof(double) * l.a.size()), h);
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(l.b.data()), sizeof(double) * l.b.size()), h);
            h = fnv1a(std::to_string(l.alpha), h);
        }
        return fnv1a(std::to_string(similarity.log_temperature), h);
    }
};

inline ParameterGrad parameter_gradient(const DualEncoder& model, const EncoderWeights& effective_grad,
                                        bool train_base) {
    ParameterGrad g;
    auto eff = effective_grad.all();
    for (size_t k = 0; k < model.layers.size(); ++k) {
        const auto& l = model.layers[k];
        g.base[k] = train_base ? Matrix(*eff[k]) : Matrix::Zero(l.base.rows(), l.base.cols());
        g.lora[k] = lora_gradient(l, *eff[k]);
    }
    return g;
}

// Inference view over merged weights.
class EncoderView {
public:
    explicit EncoderView(const DualEncoder& model) : tokenizer_(&model.tokenizer), weights_(model.merge_lora()),
                                                     similarity_(model.similarity) {}

    Vector encode_text(std::string_view text) const { return text_forward(weights_, tokenizer_->encode(text)).e; }
    Vector encode_tokens(const std::vector<int>& tokens) const { return text_forward(weights_, tokens).e; }
    Vector encode_image(const Vector& features) const { return image_forward(weights_, features).e; }
    const SimilarityParams& similarity() const { return similarity_; }
    const EncoderWeights& weights() const { return weights_; }
    const Tokenizer& tokenizer() const { return *tokenizer_; }

    double score(std::string_view text, const Vector& features) const {
        return dac::similarity(encode_text(text), encode_image(features), similarity_);
    }

private:
    const Tokenizer* tokenizer_;
    EncoderWeights weights_;
    SimilarityParams similarity_;
};

inline Vector encode_text(const DualEncoder& model, std::string_view text) { return EncoderView(model).encode_text(text); }

inline Vector encode_image(const DualEncoder& model, const Vector& features) {
    return EncoderView(model).encode_image(features);
}

// ---- checkpoint file ------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json matrix_to_json(const Matrix& m) {
    std::vector<double> data(static_cast<size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) data[static_cast<size_t>(i * m.cols() + j)] = m(i, j);
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw Error("matrix data has the wrong size");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = data[static_cast<size_t>(i * cols + k)];
    return m;
}

inline nlohmann::ordered_json checkpoint_to_json(const DualEncoder& model, const nlohmann::json& run_config = {}) {
    nlohmann::ordered_json j;
    j["format"] = "dac-checkpoint";
    j["version"] = kCheckpointVersion;
    j["encoder"] = model.config.to_json();
    j["vocabulary_hash"] = hex64(model.tokenizer.hash());
    j["tokens"] = model.tokenizer.tokens();
    j["log_temperature"] = model.similarity.log_temperature;
    j["temperature_bounds"] = {model.similarity.min_temperature, model.similarity.max_temperature};
    auto& layers = j["layers"] = nlohmann::ordered_json::object();
    for (size_t k = 0; k < model.layers.size(); ++k) {
        const auto& l = model.layers[k];
        layers[EncoderWeights::names[k]] = {{"base", matrix_to_json(l.base)},
                                            {"lora_a", matrix_to_json(l.a)},
                                            {"lora_b", matrix_to_json(l.b)},
                                            {"alpha", l.alpha}};
    }
    j["base_hash"] = hex64(model.base_hash());
    j["config"] = run_config;
    return j;
}

inline DualEncoder checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "dac-checkpoint") throw Error("not a checkpoint file");
    if (j.at("version").get<int>() != kCheckpointVersion)
        throw Error("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
    DualEncoder m;
    m.config = EncoderConfig::from_json(j.at("encoder"));
    m.tokenizer = Tokenizer(j.at("tokens").get<std::vector<std::string>>());
    if (hex64(m.tokenizer.hash()) != j.at("vocabulary_hash").get<std::string>())
        throw Error("checkpoint vocabulary hash mismatch");
    m.similarity.log_temperature = j.at("log_temperature").get<double>();
    m.similarity.min_temperature = j.at("temperature_bounds")[0].get<double>();
    m.similarity.max_temperature = j.at("temperature_bounds")[1].get<double>();
    for (size_t k = 0; k < m.layers.size(); ++k) {
        const auto& l = j.at("layers").at(EncoderWeights::names[k]);
        m.layers[k].base = matrix_from_json(l.at("base"));
        m.layers[k].a = matrix_from_json(l.at("lora_a"));
        m.layers[k].b = matrix_from_json(l.at("lora_b"));
        m.layers[k].alpha = l.at("alpha").get<double>();
    }
    if (hex64(m.base_hash()) != j.at("base_hash").get<std::string>()) throw Error("checkpoint base weights corrupted");
    return m;
}

inline void save_checkpoint(const DualEncoder& model, const std::filesystem::path& path,
                            const nlohmann::json& run_config = {}) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
    out << checkpoint_to_json(model, run_config).dump() << '\n';
}

inline DualEncoder load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read checkpoint '" + path.string() + "'");
    try {
        return checkpoint_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed checkpoint '" + path.string() + "': " + e.what());
    }
}

} // namespace dac
