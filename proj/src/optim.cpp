#include "kdc/optim.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <sstream>

#include "kdc/rng.hpp"
#include "kdc/soft_label_io.hpp"

namespace kdc {

namespace {

template <class T>
T parse_unsigned(const std::string& key, const std::string& value) {
    T out{};
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc{} || ptr != end) {
        throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + value + "'");
    }
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        const double v = parse_double(value);
        if (std::isfinite(v)) return v;
    } catch (const std::invalid_argument&) {
    }
    throw std::invalid_argument("config: " + key + " expects a finite number, got '" + value + "'");
}

std::size_t argmax_row(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k) {
        if (row[k] > row[best]) best = k;
    }
    return best;
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (max_epochs == 0) throw std::invalid_argument("max_epochs must be >= 1");
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw std::invalid_argument("base_lr must be > 0");
    if (decay_step == 0) throw std::invalid_argument("decay_step must be >= 1");
    if (!(decay_gamma > 0.0) || !std::isfinite(decay_gamma)) {
        throw std::invalid_argument("decay_gamma must be > 0");
    }
    if (patience == 0 || patience > max_epochs) {
        throw std::invalid_argument("patience must be in [1, max_epochs]");
    }
    kdc::validate(loss);
}

bool apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "batch_size") {
        cfg.batch_size = parse_unsigned<std::size_t>(key, value);
    } else if (key == "max_epochs") {
        cfg.max_epochs = parse_unsigned<std::size_t>(key, value);
    } else if (key == "base_lr") {
        cfg.base_lr = parse_real(key, value);
    } else if (key == "decay_step") {
        cfg.decay_step = parse_unsigned<std::size_t>(key, value);
    } else if (key == "decay_gamma") {
        cfg.decay_gamma = parse_real(key, value);
    } else if (key == "patience") {
        cfg.patience = parse_unsigned<std::size_t>(key, value);
    } else if (key == "loss") {
        cfg.loss = parse_loss_kind(value);
    } else if (key == "seed") {
        cfg.seed = parse_unsigned<std::uint64_t>(key, value);
    } else {
        return false;
    }
    return true;
}

std::string to_text(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "batch_size=" << cfg.batch_size << '\n'
        << "max_epochs=" << cfg.max_epochs << '\n'
        << "base_lr=" << format_double(cfg.base_lr) << '\n'
        << "decay_step=" << cfg.decay_step << '\n'
        << "decay_gamma=" << format_double(cfg.decay_gamma) << '\n'
        << "patience=" << cfg.patience << '\n'
        << "loss=" << to_string(cfg.loss) << '\n'
        << "seed=" << cfg.seed << '\n';
    return out.str();
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
    const auto steps = static_cast<double>(epoch / cfg.decay_step);
    return cfg.base_lr * std::pow(cfg.decay_gamma, steps);
}

void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state, double lr) {
    if (!grads.same_layout(params) || !state.m.same_layout(params) || !state.v.same_layout(params)) {
        throw std::invalid_argument("adam_step: gradient/state layout does not match parameters");
    }
    const auto g = grads.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) {
            std::string name = "?";
            for (const auto& s : grads.slots()) {
                if (i >= s.offset && i < s.offset + s.size) name = s.name;
            }
            throw std::runtime_error("adam_step: non-finite gradient in " + name);
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(AdamState::kBeta1, t);
    const double c2 = 1.0 - std::pow(AdamState::kBeta2, t);
    auto w = params.data();
    auto m = state.m.data();
    auto v = state.v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = AdamState::kBeta1 * m[i] + (1.0 - AdamState::kBeta1) * g[i];
        v[i] = AdamState::kBeta2 * v[i] + (1.0 - AdamState::kBeta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + AdamState::kEps);
    }
}

StopDecision early_stop_update(EarlyStopState& state, double metric, std::size_t epoch,
                               const ModelParams& params) {
    if (!std::isfinite(metric)) throw std::invalid_argument("early_stop_update: metric must be finite");
    if (metric < state.best - EarlyStopState::kMinDelta) {
        state.best = metric;
        state.best_epoch = epoch;
        state.since_improvement = 0;
        state.snapshot = params;
        state.has_snapshot = true;
        return StopDecision::Continue;
    }
    ++state.since_improvement;
    return state.since_improvement > state.patience ? StopDecision::Stop : StopDecision::Continue;
}

FitResult fit(ModelParams model, const SeriesDataset& data, std::span<const SampleTarget> targets,
              const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (data.size() == 0) throw std::invalid_argument("fit: empty dataset");
    if (targets.size() != data.size()) throw std::invalid_argument("fit: one target per sample required");
    const std::size_t C = model.config.num_classes;
    const bool soft = needs_soft_target(cfg.loss);
    for (const auto& t : targets) {
        if (t.cls >= C) throw std::invalid_argument("fit: target class out of range");
        if (soft && t.soft.size() != C) throw std::invalid_argument("fit: soft target width must equal C");
    }
    const auto start = std::chrono::steady_clock::now();
    const FeatureMap all = data.as_batch();
    const std::size_t N = data.size();

    AdamState adam = AdamState::for_params(model.weights);
    EarlyStopState stop;
    stop.patience = cfg.patience;
    Rng shuffle(mix_seed(cfg.seed, 1));
    FitResult result;

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        const auto batches = batch_iter(N, cfg.batch_size, shuffle);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& idx = batches[bi];
            const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi);
            const FeatureMap x = gather_batch(all, idx);
            std::vector<SampleTarget> batch_targets;
            batch_targets.reserve(idx.size());
            for (auto i : idx) batch_targets.push_back(targets[i]);
            try {
                ForwardCache cache;
                const auto z = model_forward(model, x, Mode::Train, &cache);
                const BatchLoss loss = batch_loss(cfg.loss, z, idx.size(), batch_targets);
                if (!std::isfinite(loss.mean)) {
                    throw TrainingAborted(where + ": non-finite loss (lr " + format_double(lr) + ")");
                }
                for (std::size_t r = 0; r < idx.size(); ++r) {
                    const std::span<const double> row(z.data() + r * C, C);
                    if (argmax_row(row) == batch_targets[r].cls) ++correct;
                }
                loss_sum += loss.mean * static_cast<double>(idx.size());
                const GradientSet g = model_backward(model, cache, loss.grad);
                adam_step(model.weights, g.values, adam, lr);
                update_running_stats(model, cache);
            } catch (const TrainingAborted&) {
                throw;
            } catch (const std::runtime_error& e) {
                throw TrainingAborted(where + ": " + e.what());
            } catch (const std::domain_error& e) {
                throw TrainingAborted(where + ": " + e.what());
            }
        }
        EpochRecord rec{epoch, loss_sum / static_cast<double>(N),
                        static_cast<double>(correct) / static_cast<double>(N), lr};
        if (!std::isfinite(rec.loss)) throw TrainingAborted("epoch " + std::to_string(epoch) + ": non-finite loss");
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (early_stop_update(stop, rec.loss, epoch, model) == StopDecision::Stop) {
            result.stopped_early = true;
            break;
        }
    }
    result.params = std::move(stop.snapshot);
    result.best_epoch = stop.best_epoch;
    result.best_loss = stop.best;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace kdc
