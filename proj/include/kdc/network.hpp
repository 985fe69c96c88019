#pragma once

// InceptionTime-style 1-D convolutional classifier.
//
// Each Inception module: 1x1 bottleneck conv, three parallel convs (kernel
// sizes 40/20/10 by default) on the bottleneck output, and a max-pool(3) +
// 1x1 conv branch on the module input. The four branch outputs are
// concatenated, batch-normalized and ReLU-activated. After every third module
// a shortcut (1x1 projection + batch norm) from the previous shortcut point
// is added and passed through ReLU. The head is global average pooling and a
// single linear layer. Convolutions carry no bias; batch norm supplies the
// per-channel shift.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdc/tensor.hpp"

namespace kdc {

enum class Mode { Train, Eval };

struct NetworkConfig {
    std::size_t depth = 3;
    std::size_t in_channels = 1;
    std::size_t filters = 32;     ///< output channels of each branch
    std::size_t bottleneck = 32;  ///< bottleneck channels
    std::array<std::size_t, 3> kernel_sizes{40, 20, 10};
    std::size_t residual_every = 3;
    std::size_t num_classes = 2;

    std::size_t width() const noexcept { return 4 * filters; }
    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// A named tensor inside a ParamStore.
struct TensorSlot {
    std::string name;
    std::vector<std::uint32_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    friend bool operator==(const TensorSlot&, const TensorSlot&) = default;
};

/// Flat storage of named tensors. Layout (names, shapes, order) is fixed by
/// the network configuration.
class ParamStore {
public:
    std::size_t add(std::string name, std::vector<std::uint32_t> shape);

    std::span<double> operator[](std::size_t slot) {
        const auto& s = slots_[slot];
        return {data_.data() + s.offset, s.size};
    }
    std::span<const double> operator[](std::size_t slot) const {
        const auto& s = slots_[slot];
        return {data_.data() + s.offset, s.size};
    }

    const std::vector<TensorSlot>& slots() const noexcept { return slots_; }
    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::size_t size() const noexcept { return data_.size(); }

    /// Index of the slot called `name`, or slots().size() when absent.
    std::size_t find(const std::string& name) const;

    /// Same layout, all values zero.
    ParamStore zeros_like() const;

    bool same_layout(const ParamStore& other) const;
    friend bool operator==(const ParamStore&, const ParamStore&) = default;

private:
    std::vector<TensorSlot> slots_;
    std::vector<double> data_;
};

struct ConvRef {
    std::size_t slot = 0;  ///< weights, shape (out, in, kernel)
    std::size_t in = 0, out = 0, kernel = 1;
};

struct BatchNormRef {
    std::size_t gamma = 0, beta = 0;  ///< slots in weights
    std::size_t mean = 0, var = 0;    ///< slots in buffers
    std::size_t channels = 0;
};

struct InceptionModuleRef {
    std::size_t in_channels = 0;
    ConvRef bottleneck;
    std::array<ConvRef, 3> branches;
    ConvRef pool_conv;
    BatchNormRef bn;
};

struct ShortcutRef {
    std::size_t after_module = 0;  ///< applied to the output of this module
    std::size_t source = 0;        ///< stage index of the shortcut input (0 = network input)
    ConvRef proj;
    BatchNormRef bn;
};

struct HeadRef {
    std::size_t weight = 0;  ///< shape (C, width)
    std::size_t bias = 0;    ///< shape (C)
};

/// All weights (trainable) and batch-norm running statistics (buffers) of one
/// network, plus the layer map into them.
struct ModelParams {
    NetworkConfig config;
    ParamStore weights;
    ParamStore buffers;
    std::vector<InceptionModuleRef> modules;
    std::vector<ShortcutRef> shortcuts;
    HeadRef head;

    /// Zero-filled parameters with the layout implied by `config`, except
    /// batch-norm scales and running variances which start at 1.
    static ModelParams build(const NetworkConfig& config);

    friend bool operator==(const ModelParams& a, const ModelParams& b) {
        return a.config == b.config && a.weights == b.weights && a.buffers == b.buffers;
    }
};

/// dLoss/dWeights, congruent with ModelParams::weights.
struct GradientSet {
    ParamStore values;

    static GradientSet zeros_like(const ModelParams& params) {
        return GradientSet{params.weights.zeros_like()};
    }
};

/// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); batch
/// norm scale 1, shift 0, running statistics (0, 1). Deterministic in seed.
ModelParams init_params(const NetworkConfig& config, std::uint64_t seed);
/// Student (depth 3) or teacher (depth 6) with default module settings.
ModelParams init_params(std::size_t depth, std::size_t num_classes, std::uint64_t seed);

// ---- building blocks -------------------------------------------------------

/// "Same"-padded stride-1 cross-correlation: left pad floor((k-1)/2), right
/// pad ceil((k-1)/2), zero fill. Weights are (out, in, kernel), row-major.
FeatureMap conv1d_forward(const FeatureMap& x, std::span<const double> weights,
                          std::size_t out_channels, std::size_t kernel);

struct BatchNormCache {
    std::vector<double> xhat;
    std::vector<double> inv_std;     ///< per channel
    std::vector<double> batch_mean;  ///< per channel (train mode)
    std::vector<double> batch_var;   ///< per channel, unbiased (train mode)
};

struct ModuleCache {
    FeatureMap bottleneck_out;
    FeatureMap pooled;
    std::vector<std::uint8_t> pool_offset;  ///< 0..2: which tap won the max
    BatchNormCache bn;
    FeatureMap out;  ///< after batch norm + ReLU
};

struct ShortcutCache {
    BatchNormCache bn;
};

/// Activations kept by a forward pass for the backward pass and for
/// batch-norm running-statistic updates.
struct ForwardCache {
    Mode mode = Mode::Eval;
    std::vector<FeatureMap> stages;  ///< stages[0] = input, stages[i+1] = stage i output
    std::vector<ModuleCache> modules;
    std::vector<ShortcutCache> shortcuts;
    std::vector<double> pooled;  ///< batch x width
    std::size_t batch = 0;

    bool populated() const noexcept { return !stages.empty(); }
};

/// One Inception module in isolation (no shortcut). Exposed for tests.
FeatureMap inception_module_forward(const ModelParams& params, std::size_t module,
                                    const FeatureMap& x, Mode mode, ModuleCache* cache = nullptr);

/// Logits, row-major batch x C. Train mode normalizes with batch statistics
/// and records them in `cache` (when given); `params` is never modified.
/// Throws on shape mismatch or non-finite logits.
std::vector<double> model_forward(const ModelParams& params, const FeatureMap& batch, Mode mode,
                                  ForwardCache* cache = nullptr);

/// Reverse-mode gradients of sum_b <upstream_b, logits_b> with respect to all
/// trainable weights, using the activations recorded by model_forward.
GradientSet model_backward(const ModelParams& params, const ForwardCache& cache,
                           std::span<const double> upstream);

/// Folds the batch statistics recorded in a train-mode cache into the
/// running statistics (momentum kBatchNormMomentum).
void update_running_stats(ModelParams& params, const ForwardCache& cache);

/// Eval-mode logits for a whole dataset, processed in chunks of `chunk` rows.
std::vector<double> predict_logits(const ModelParams& params, const FeatureMap& data,
                                   std::size_t chunk = 64);

/// Rows [begin, begin + count) of a FeatureMap.
FeatureMap slice_batch(const FeatureMap& data, std::size_t begin, std::size_t count);
FeatureMap gather_batch(const FeatureMap& data, std::span<const std::size_t> rows);

}  // namespace kdc
