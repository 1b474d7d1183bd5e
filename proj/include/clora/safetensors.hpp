// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace clora::safetensors {

enum class DType { F16, BF16, F32, F64 };

struct TensorData {
    DType dtype = DType::F64;
    std::vector<std::int64_t> shape;
    // Values widened to double; row-major.
    std::vector<double> values;
};

struct File {
    std::map<std::string, TensorData> tensors;
    std::map<std::string, std::string> metadata;
};

File read(const std::filesystem::path& path);
File parse(const std::vector<std::uint8_t>& bytes);

// Tensors are written in their declared dtype (F32 or F64).
void write(const File& file, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize(const File& file);

double half_to_double(std::uint16_t bits);
double bfloat16_to_double(std::uint16_t bits);

}  // namespace clora::safetensors
