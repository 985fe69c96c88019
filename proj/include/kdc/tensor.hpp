#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace kdc {

/// Dense (batch, channels, length) activation tensor, row-major: sample b,
/// channel c, time t lives at (b * channels + c) * length + t.
class FeatureMap {
public:
    FeatureMap() = default;
    FeatureMap(std::size_t batch, std::size_t channels, std::size_t length)
        : batch_(batch), channels_(channels), length_(length), data_(batch * channels * length) {
        if (batch == 0 || channels == 0 || length == 0) {
            throw std::invalid_argument("FeatureMap: all dimensions must be >= 1");
        }
    }
    FeatureMap(std::size_t batch, std::size_t channels, std::size_t length, std::vector<double> data)
        : FeatureMap(batch, channels, length) {
        if (data.size() != data_.size()) throw std::invalid_argument("FeatureMap: data size mismatch");
        data_ = std::move(data);
    }

    std::size_t batch() const noexcept { return batch_; }
    std::size_t channels() const noexcept { return channels_; }
    std::size_t length() const noexcept { return length_; }
    bool empty() const noexcept { return data_.empty(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    /// Pointer to the (channels x length) block of sample b.
    double* sample(std::size_t b) noexcept { return data_.data() + b * channels_ * length_; }
    const double* sample(std::size_t b) const noexcept {
        return data_.data() + b * channels_ * length_;
    }

    double& at(std::size_t b, std::size_t c, std::size_t t) {
        return data_[(b * channels_ + c) * length_ + t];
    }
    double at(std::size_t b, std::size_t c, std::size_t t) const {
        return data_[(b * channels_ + c) * length_ + t];
    }

private:
    std::size_t batch_ = 0, channels_ = 0, length_ = 0;
    std::vector<double> data_;
};

}  // namespace kdc
