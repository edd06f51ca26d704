#pragma once

#include <stdexcept>
#include <string>

namespace lbgen {

// Domain-contract violation: maps to CLI exit code 1. The message names the
// violated contract or config key.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad invocation (unknown flag, missing command): maps to CLI exit code 2.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError(msg);
}

}  // namespace lbgen
