#pragma once

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace lipsync {

// Error taxonomy: ValidationError = bad data/arguments at runtime (exit 1),
// ConfigError = unusable configuration or missing prerequisites (exit 2),
// IoError = filesystem failures, always carrying the offending path (exit 1).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string strf(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    char buf[1024];
    vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    return std::string(buf);
}

#define LS_CHECK(cond, ...)                                      \
    do {                                                         \
        if (!(cond)) throw ::lipsync::ValidationError(::lipsync::strf(__VA_ARGS__)); \
    } while (0)

#define LS_CHECK_CFG(cond, ...)                                  \
    do {                                                         \
        if (!(cond)) throw ::lipsync::ConfigError(::lipsync::strf(__VA_ARGS__)); \
    } while (0)

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); i++) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// FNV-1a 64-bit, used for manifest checksums.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace lipsync
