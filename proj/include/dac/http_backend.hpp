#pragma once

// HTTP generation backend: POST {"kind", "input"} to the endpoint and read
// {"outputs": [...]}. Non-200 responses, transport errors and malformed
// bodies are retryable failures.

#include "dac/enhance.hpp"

#include <httplib.h>
// <resolv.h> (pulled in by httplib) defines _res, which collides with Eigen
#ifdef _res
#undef _res
#endif

#include <memory>
#include <string>
#include <vector>

namespace dac {

class HttpBackend : public Backend {
public:
    explicit HttpBackend(BackendSpec spec) : Backend(std::move(spec)) {
        const auto& url = *this->spec().endpoint;
        const auto scheme_end = url.find("://");
        const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
        const auto path_start = url.find('/', host_start);
        base_ = url.substr(0, path_start);
        path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
    }

protected:
    std::vector<std::string> call(const std::string& input) override {
        httplib::Client client(base_);
        const auto seconds = static_cast<time_t>(spec().timeout);
        const auto micros = static_cast<time_t>((spec().timeout - static_cast<double>(seconds)) * 1e6);
        client.set_connection_timeout(seconds, micros);
        client.set_read_timeout(seconds, micros);
        client.set_write_timeout(seconds, micros);
        const nlohmann::json body{{"kind", kind_name(spec().kind)}, {"input", input}};
        auto res = client.Post(path_, body.dump(), "application/json");
        if (!res) throw BackendError("request to " + base_ + path_ + " failed: " + httplib::to_string(res.error()));
        if (res->status != 200) throw BackendError("endpoint returned status " + std::to_string(res->status));
        try {
            return nlohmann::json::parse(res->body).at("outputs").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw BackendError(std::string("malformed response: ") + e.what());
        }
    }

private:
    std::string base_;
    std::string path_;
};

inline std::shared_ptr<Backend> make_backend(const BackendSpec& spec, const World& world,
                                             const PromptTemplate& prompt) {
    if (spec.mode == BackendMode::http) return std::make_shared<HttpBackend>(spec);
    switch (spec.kind) {
    case BackendKind::captioner: return std::make_shared<MockCaptioner>(spec, world);
    case BackendKind::expander: return std::make_shared<MockExpander>(spec, world.vocab, prompt);
    case BackendKind::segmenter: return std::make_shared<MockSegmenter>(spec, world);
    }
    throw Error("unknown backend kind");
}

} // namespace dac
