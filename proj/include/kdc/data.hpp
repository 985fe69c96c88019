#pragma once

// UCR archive ingestion. A split file holds one series per line: the class
// label, then the values, separated by tabs (commas are also accepted).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdc/rng.hpp"
#include "kdc/tensor.hpp"

namespace kdc {

enum class Split { Train, Test };

struct SeriesDataset {
    std::string name;
    Split split = Split::Train;
    std::size_t length = 0;
    std::size_t num_classes = 0;
    std::vector<double> series;              ///< N x length, row-major
    std::vector<std::size_t> classes;        ///< 0-based
    std::vector<std::string> class_labels;   ///< original label text by encoded class

    std::size_t size() const noexcept { return classes.size(); }
    std::span<const double> row(std::size_t i) const { return {series.data() + i * length, length}; }
    /// (N, 1, length) view copy for the network.
    FeatureMap as_batch() const;
    /// Throws std::invalid_argument when an invariant is broken.
    void validate() const;
};

struct DatasetPair {
    SeriesDataset train;
    SeriesDataset test;
};

/// Loads one split. Labels are encoded by sorted original value (numeric
/// order when every label parses as a number). When `labels` is given, that
/// encoding is used instead and unknown labels are an error.
SeriesDataset load_ucr_tsv(const std::filesystem::path& path,
                           const std::vector<std::string>* labels = nullptr);

/// `<root>/<name>/<name>_TRAIN.tsv` and `_TEST.tsv`, sharing one encoding
/// built from the labels of both splits.
DatasetPair load_ucr_dataset(const std::filesystem::path& root, const std::string& name);

void write_ucr_tsv(const std::filesystem::path& path, const SeriesDataset& data);

/// Root from `flag` when non-empty, else $KDC_UCR_ROOT.
std::optional<std::filesystem::path> resolve_ucr_root(const std::string& flag);

const std::vector<std::string>& ucr_archive_names();
const std::vector<std::string>& problematic_datasets();
std::vector<std::string> exclude_problematic(const std::vector<std::string>& names);

/// Per-series standardization to mean 0, population std 1; series with std
/// below 1e-8 become zeros.
SeriesDataset znormalize(const SeriesDataset& data);
void znormalize_series(std::span<double> series);

/// Shuffled index batches covering 0..n-1 once; the last batch may be short.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, Rng& rng);
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t seed);

}  // namespace kdc
