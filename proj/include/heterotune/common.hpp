#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>

namespace heterotune {

// Error categories map to CLI exit codes: config=2, data=3, numeric=4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violations of the client/server wire contract (wrong group, foreign branch).
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

// 64-bit FNV-1a over an arbitrary byte stream.
class Fnv1a64 {
public:
    void update(const void* bytes, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < len; ++i) {
            state_ ^= static_cast<std::uint64_t>(p[i]);
            state_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    Fnv1a64 h;
    h.update(s.data(), s.size());
    return h.digest();
}

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from HETEROTUNE_LOG (error|info|debug); unset means error.
inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("HETEROTUNE_LOG");
        if (env == nullptr || std::string_view(env) == "error") return LogLevel::error;
        if (std::string_view(env) == "info") return LogLevel::info;
        if (std::string_view(env) == "debug") return LogLevel::debug;
        throw ConfigError("HETEROTUNE_LOG must be one of error|info|debug, got '" +
                          std::string(env) + "'");
    }();
    return level;
}

inline void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::info) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::debug) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

}  // namespace heterotune
