// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/errors.hpp"

namespace clora {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::SpanNotFound: return "SpanNotFound";
    case ErrorKind::PromptTooLong: return "PromptTooLong";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::AdapterMismatch: return "AdapterMismatch";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::ContractViolation: return "ContractViolation";
    case ErrorKind::ScheduleExhausted: return "ScheduleExhausted";
    case ErrorKind::ResolutionUnavailable: return "ResolutionUnavailable";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::EmptyGroup: return "EmptyGroup";
    case ErrorKind::DegenerateMap: return "DegenerateMap";
    case ErrorKind::ExtractorUnavailable: return "ExtractorUnavailable";
    case ErrorKind::BackendUnavailable: return "BackendUnavailable";
    case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace clora
