// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clora {

enum class ErrorKind {
    SpanNotFound,
    PromptTooLong,
    InvalidSpec,
    AdapterMismatch,
    UnsupportedFormat,
    NumericalFailure,
    ContractViolation,
    ScheduleExhausted,
    ResolutionUnavailable,
    ZeroVector,
    EmptyGroup,
    DegenerateMap,
    ExtractorUnavailable,
    BackendUnavailable,
    IoError,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Throws Error(kind, message) when cond is false.
inline void require(bool cond, ErrorKind kind, const std::string& message) {
    if (!cond) {
        throw Error(kind, message);
    }
}

}  // namespace clora
