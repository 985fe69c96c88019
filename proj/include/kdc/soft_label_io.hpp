#pragma once

// Soft-label files: a header line `# C=<int> N=<int> source=<id>` followed by
// N records of C comma-separated decimal probabilities, one per line.
// Values are written in shortest round-trip form so reloading is bit-exact.
//
// Raw teacher logits use the same layout with `kind=logits` appended to the
// header; those rows are not validated as probabilities.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "kdc/labelspace.hpp"

namespace kdc {

struct SoftLabelFile {
    std::string source;
    std::vector<Label> labels;
};

struct LogitsFile {
    std::string source;
    std::size_t num_classes = 0;
    std::vector<std::vector<double>> rows;
};

void write_soft_labels(const std::filesystem::path& path, const std::vector<Label>& labels,
                       const std::string& source);
SoftLabelFile read_soft_labels(const std::filesystem::path& path);

void write_logits(const std::filesystem::path& path, const std::vector<std::vector<double>>& rows,
                  const std::string& source);
LogitsFile read_logits(const std::filesystem::path& path);

/// Shortest decimal form that parses back to exactly `v`.
std::string format_double(double v);
/// Parses a whole token as a double; throws std::invalid_argument otherwise.
double parse_double(std::string_view token);

}  // namespace kdc
