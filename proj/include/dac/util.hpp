#pragma once

// Small shared helpers: errors, hashing, seed mixing and whitespace text handling.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dac {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a. Used for cache keys, config hashes and factor codes, so it
// must stay stable across releases.
inline uint64_t fnv1a(std::string_view text, uint64_t hash = 14695981039346656037ull) {
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 1099511628211ull;
    }
    return hash;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a tag.
inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
    return splitmix64(seed ^ fnv1a(tag));
}

inline uint64_t mix_seed(uint64_t seed, uint64_t value) {
    return splitmix64(seed ^ splitmix64(value + 0x632be59bd9b4e019ull));
}

inline std::string hex64(uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

inline std::string trim(std::string_view text) {
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    size_t begin = 0;
    size_t end = text.size();
    while (begin < end && is_space(text[begin])) ++begin;
    while (end > begin && is_space(text[end - 1])) --end;
    return std::string(text.substr(begin, end - begin));
}

inline std::string to_lower(std::string_view text) {
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> tokens;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) tokens.emplace_back(text.substr(start, i - start));
    }
    return tokens;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

// Lower-cased token with trailing sentence punctuation removed.
inline std::string normalize_token(std::string_view token) {
    size_t end = token.size();
    while (end > 0 && (is_terminator(token[end - 1]) || token[end - 1] == ',')) --end;
    return to_lower(token.substr(0, end));
}

inline std::vector<std::string> normalized_tokens(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& tok : split_whitespace(text)) {
        auto norm = normalize_token(tok);
        if (!norm.empty()) out.push_back(std::move(norm));
    }
    return out;
}

} // namespace dac
