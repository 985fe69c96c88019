#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdc/data.hpp"
#include "kdc/losses.hpp"
#include "kdc/network.hpp"

namespace kdc {

struct TrainConfig {
    std::size_t batch_size = 64;
    std::size_t max_epochs = 512;
    double base_lr = 0.01;
    std::size_t decay_step = 35;
    double decay_gamma = 0.5;
    std::size_t patience = 80;
    LossKind loss = CrossEntropy{};
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument unless all sizes and rates are positive
    /// and patience <= max_epochs.
    void validate() const;
};

/// Applies one `key=value` setting; returns false for keys TrainConfig does
/// not own. Throws std::invalid_argument on a malformed value.
bool apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);
/// `key=value` lines for every field, in a fixed order.
std::string to_text(const TrainConfig& cfg);

/// base_lr * decay_gamma^floor(epoch / decay_step)
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

struct AdamState {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    ParamStore m;
    ParamStore v;
    std::uint64_t step = 0;

    static AdamState for_params(const ParamStore& params) {
        return AdamState{params.zeros_like(), params.zeros_like(), 0};
    }
};

/// One bias-corrected Adam update in place. Throws std::invalid_argument on
/// layout mismatch and std::runtime_error on a non-finite gradient.
void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state, double lr);

enum class StopDecision { Continue, Stop };

/// Tracks the monitored metric (lower is better). An improvement is a
/// decrease of more than kMinDelta.
struct EarlyStopState {
    static constexpr double kMinDelta = 1e-6;

    std::size_t patience = 80;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t since_improvement = 0;
    bool has_snapshot = false;
    ModelParams snapshot;
};

StopDecision early_stop_update(EarlyStopState& state, double metric, std::size_t epoch,
                               const ModelParams& params);

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;      ///< mean training loss over the epoch's batches
    double accuracy = 0.0;  ///< training accuracy of the in-epoch predictions
    double lr = 0.0;
};

struct FitResult {
    ModelParams params;  ///< best-epoch snapshot
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_loss = 0.0;
    bool stopped_early = false;
    double seconds = 0.0;
};

/// Raised when a loss or gradient turns non-finite during training.
class TrainingAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch training of `model` on `data` with one target per sample.
/// Batches are reshuffled every epoch from a stream derived from cfg.seed.
FitResult fit(ModelParams model, const SeriesDataset& data, std::span<const SampleTarget> targets,
              const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace kdc
