#pragma once

// Shared utilities: error types, 64-bit hashing, logging.

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace debias {

// Error raised when tensor shapes do not line up. Message names the
// offending dimension.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Error raised when a computation produces NaN/Inf or is numerically
// invalid (non-scalar loss, degenerate batch, ...).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value; message names the field.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File / dataset I/O failures; message names the file or CSV row.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a, used for config hashes and derived seeds.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// splitmix64 finalizer; good avalanche for combining seeds.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Derived stream seed: hash(global_seed, label) so independent consumers
// (preprocess lanes, eval trials) get decorrelated deterministic streams.
inline uint64_t derive_seed(uint64_t global_seed, const std::string& label) {
    return mix64(global_seed ^ fnv1a64(label));
}
inline uint64_t derive_seed(uint64_t global_seed, uint64_t index) {
    return mix64(global_seed ^ mix64(index + 0x51ed2701ull));
}

// Log levels selected via DEBIAS_LOG env var: error, info (default), debug.
enum class LogLevel : int { Error = 0, Info = 1, Debug = 2 };

inline LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* e = std::getenv("DEBIAS_LOG");
        if (!e) return LogLevel::Info;
        std::string s(e);
        if (s == "error") return LogLevel::Error;
        if (s == "debug") return LogLevel::Debug;
        return LogLevel::Info;
    }();
    return lvl;
}

inline void logf(LogLevel lvl, const char* fmt, ...) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    va_list args;
    va_start(args, fmt);
    std::vfprintf(stderr, fmt, args);
    std::fputc('\n', stderr);
    va_end(args);
}

#define DEBIAS_INFO(...) ::debias::logf(::debias::LogLevel::Info, __VA_ARGS__)
#define DEBIAS_DEBUG(...) ::debias::logf(::debias::LogLevel::Debug, __VA_ARGS__)
#define DEBIAS_ERROR(...) ::debias::logf(::debias::LogLevel::Error, __VA_ARGS__)

}  // namespace debias
