// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/safetensors.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "clora/errors.hpp"

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes little-endian");

namespace clora::safetensors {

using nlohmann::json;

namespace {

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
    case DType::F16:
    case DType::BF16: return 2;
    case DType::F32: return 4;
    case DType::F64: return 8;
    }
    return 0;
}

DType parse_dtype(const std::string& name) {
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    if (name == "F32") return DType::F32;
    if (name == "F64") return DType::F64;
    throw Error(ErrorKind::UnsupportedFormat, "unsupported tensor dtype " + name);
}

const char* dtype_name(DType dtype) {
    switch (dtype) {
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F32: return "F32";
    case DType::F64: return "F64";
    }
    return "?";
}

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        require(d >= 0, ErrorKind::UnsupportedFormat, "negative tensor dimension");
        n *= d;
    }
    return n;
}

}  // namespace

double half_to_double(std::uint16_t bits) {
    const int sign = (bits >> 15) & 0x1;
    const int exponent = (bits >> 10) & 0x1f;
    const int mantissa = bits & 0x3ff;
    double value;
    if (exponent == 0) {
        value = std::ldexp(static_cast<double>(mantissa), -24);
    } else if (exponent == 31) {
        value = mantissa == 0 ? INFINITY : NAN;
    } else {
        value = std::ldexp(static_cast<double>(mantissa | 0x400), exponent - 25);
    }
    return sign ? -value : value;
}

double bfloat16_to_double(std::uint16_t bits) {
    const std::uint32_t wide = static_cast<std::uint32_t>(bits) << 16;
    return static_cast<double>(std::bit_cast<float>(wide));
}

File parse(const std::vector<std::uint8_t>& bytes) {
    require(bytes.size() >= 8, ErrorKind::UnsupportedFormat, "file shorter than header length");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    require(header_len <= bytes.size() - 8, ErrorKind::UnsupportedFormat, "header length exceeds file");

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::UnsupportedFormat, std::string("bad header: ") + e.what());
    }
    require(header.is_object(), ErrorKind::UnsupportedFormat, "header is not an object");

    const std::size_t data_start = 8 + header_len;
    const std::size_t data_len = bytes.size() - data_start;
    File file;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : entry.items()) {
                require(v.is_string(), ErrorKind::UnsupportedFormat, "metadata values must be strings");
                file.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        try {
            TensorData t;
            t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
            require(offsets.size() == 2 && offsets[0] <= offsets[1] && offsets[1] <= data_len,
                    ErrorKind::UnsupportedFormat, "bad data_offsets for " + name);
            const auto count = static_cast<std::size_t>(element_count(t.shape));
            const std::size_t width = dtype_size(t.dtype);
            require(offsets[1] - offsets[0] == count * width, ErrorKind::UnsupportedFormat,
                    "byte length mismatch for " + name);
            const std::uint8_t* src = bytes.data() + data_start + offsets[0];
            t.values.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                const std::uint8_t* p = src + i * width;
                switch (t.dtype) {
                case DType::F16: {
                    std::uint16_t b;
                    std::memcpy(&b, p, 2);
                    t.values[i] = half_to_double(b);
                    break;
                }
                case DType::BF16: {
                    std::uint16_t b;
                    std::memcpy(&b, p, 2);
                    t.values[i] = bfloat16_to_double(b);
                    break;
                }
                case DType::F32: {
                    float f;
                    std::memcpy(&f, p, 4);
                    t.values[i] = f;
                    break;
                }
                case DType::F64: {
                    double d;
                    std::memcpy(&d, p, 8);
                    t.values[i] = d;
                    break;
                }
                }
            }
            file.tensors.emplace(name, std::move(t));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::UnsupportedFormat, "bad entry " + name + ": " + e.what());
        }
    }
    return file;
}

File read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(bytes);
}

std::vector<std::uint8_t> serialize(const File& file) {
    json header = json::object();
    if (!file.metadata.empty()) {
        header["__metadata__"] = file.metadata;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : file.tensors) {
        require(t.dtype == DType::F32 || t.dtype == DType::F64, ErrorKind::UnsupportedFormat,
                "only F32/F64 tensors can be written");
        const auto count = static_cast<std::uint64_t>(element_count(t.shape));
        require(count == t.values.size(), ErrorKind::ContractViolation, "shape/value count mismatch for " + name);
        const std::uint64_t len = count * dtype_size(t.dtype);
        header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
        offset += len;
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0) {
        text.push_back(' ');
    }

    std::vector<std::uint8_t> out(8 + text.size() + offset);
    const std::uint64_t header_len = text.size();
    std::memcpy(out.data(), &header_len, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    std::uint8_t* dst = out.data() + 8 + text.size();
    for (const auto& [name, t] : file.tensors) {
        for (double v : t.values) {
            if (t.dtype == DType::F32) {
                const float f = static_cast<float>(v);
                std::memcpy(dst, &f, 4);
                dst += 4;
            } else {
                std::memcpy(dst, &v, 8);
                dst += 8;
            }
        }
    }
    return out;
}

void write(const File& file, const std::filesystem::path& path) {
    const auto bytes = serialize(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::IoError, "short write to " + path.string());
}

}  // namespace clora::safetensors
