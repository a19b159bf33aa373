#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace asymtok {

// Error taxonomy used across the library. Config errors are construction-time
// mistakes, input errors are bad per-call arguments, state errors are calls
// out of sequence (e.g. decoding into an empty cache).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : std::runtime_error {
    explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InfeasibleError : std::runtime_error {
    explicit InfeasibleError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Modality : uint8_t { Vision = 0, Text = 1 };

enum class Phase : uint8_t { Prefill = 0, Generated = 1 };

// Additive logit value standing in for -inf on hard-masked positions.
// Large enough to saturate softmax below 1e-6 while keeping arithmetic finite.
inline constexpr float kHardMaskPenalty = -1.0e9f;

}  // namespace asymtok
