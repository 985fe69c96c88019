#pragma once

// Checkpoint container: the 8-byte header `KDCT0001`, a u32 record count,
// then per record a u32 name length, the UTF-8 name, a u32 rank, rank u32
// dimensions and the f64 values. All integers and floats little-endian.
//
// A model checkpoint holds one `meta` record with the architecture numbers,
// followed by every weight and batch-norm buffer tensor by name.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdc/network.hpp"

namespace kdc {

struct TensorRecord {
    std::string name;
    std::vector<std::uint32_t> shape;
    std::vector<double> values;

    friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

void write_records(const std::filesystem::path& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_records(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace kdc
