#include "kdc/network.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "kdc/rng.hpp"

namespace kdc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

std::ptrdiff_t pad_left(std::size_t kernel) { return static_cast<std::ptrdiff_t>((kernel - 1) / 2); }

// Valid output range [lo, hi) for a tap with input offset `shift`.
void tap_range(std::ptrdiff_t shift, std::size_t length, std::size_t& lo, std::size_t& hi) {
    const auto len = static_cast<std::ptrdiff_t>(length);
    lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, len));
    hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(len - shift, 0, len));
}

void im2col(const double* x, std::size_t cin, std::size_t length, std::size_t kernel, RowMat& cols) {
    cols.resize(static_cast<Eigen::Index>(cin * kernel), static_cast<Eigen::Index>(length));
    const std::ptrdiff_t pl = pad_left(kernel);
    for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = x + ci * length;
        for (std::size_t j = 0; j < kernel; ++j) {
            double* row = cols.data() + (ci * kernel + j) * length;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pl;
            std::size_t lo, hi;
            tap_range(shift, length, lo, hi);
            std::fill(row, row + lo, 0.0);
            if (hi > lo) std::memcpy(row + lo, src + lo + shift, (hi - lo) * sizeof(double));
            std::fill(row + std::max(hi, lo), row + length, 0.0);
        }
    }
}

void col2im_add(const RowMat& dcols, std::size_t cin, std::size_t length, std::size_t kernel,
                double* dx) {
    const std::ptrdiff_t pl = pad_left(kernel);
    for (std::size_t ci = 0; ci < cin; ++ci) {
        double* dst = dx + ci * length;
        for (std::size_t j = 0; j < kernel; ++j) {
            const double* row = dcols.data() + (ci * kernel + j) * length;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pl;
            std::size_t lo, hi;
            tap_range(shift, length, lo, hi);
            for (std::size_t t = lo; t < hi; ++t) dst[t + shift] += row[t];
        }
    }
}

// y (out x L) = conv(x (cin x L), w (out x cin*k)), one sample.
void conv_sample(const double* x, std::size_t cin, std::size_t length, const double* w,
                 std::size_t out, std::size_t kernel, double* y, RowMat& scratch) {
    const auto L = static_cast<Eigen::Index>(length);
    MatMap Y(y, static_cast<Eigen::Index>(out), L);
    CMatMap W(w, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(cin * kernel));
    if (kernel == 1) {
        Y.noalias() = W * CMatMap(x, static_cast<Eigen::Index>(cin), L);
    } else {
        im2col(x, cin, length, kernel, scratch);
        Y.noalias() = W * scratch;
    }
}

// Accumulates dW and (when dx is non-null) dx for one sample.
void conv_sample_backward(const double* x, std::size_t cin, std::size_t length, const double* w,
                          std::size_t out, std::size_t kernel, const double* dy, double* dw,
                          double* dx, RowMat& scratch, RowMat& dcols) {
    const auto L = static_cast<Eigen::Index>(length);
    const auto rows = static_cast<Eigen::Index>(cin * kernel);
    CMatMap dY(dy, static_cast<Eigen::Index>(out), L);
    CMatMap W(w, static_cast<Eigen::Index>(out), rows);
    MatMap dW(dw, static_cast<Eigen::Index>(out), rows);
    if (kernel == 1) {
        CMatMap X(x, static_cast<Eigen::Index>(cin), L);
        dW.noalias() += dY * X.transpose();
        if (dx) MatMap(dx, static_cast<Eigen::Index>(cin), L).noalias() += W.transpose() * dY;
        return;
    }
    im2col(x, cin, length, kernel, scratch);
    dW.noalias() += dY * scratch.transpose();
    if (dx) {
        dcols.noalias() = W.transpose() * dY;
        col2im_add(dcols, cin, length, kernel, dx);
    }
}

void check_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw std::runtime_error(std::string(what) + ": non-finite activation");
    }
}

// In place: x <- gamma * xhat + beta.
void batch_norm_forward(const ModelParams& p, const BatchNormRef& ref, FeatureMap& x, Mode mode,
                        BatchNormCache* cache) {
    const std::size_t B = x.batch(), C = x.channels(), L = x.length();
    if (C != ref.channels) throw std::invalid_argument("batch norm: channel mismatch");
    const auto gamma = p.weights[ref.gamma];
    const auto beta = p.weights[ref.beta];
    const auto rmean = p.buffers[ref.mean];
    const auto rvar = p.buffers[ref.var];
    const double n = static_cast<double>(B * L);
    if (cache) {
        cache->xhat.resize(B * C * L);
        cache->inv_std.resize(C);
        if (mode == Mode::Train) {
            cache->batch_mean.resize(C);
            cache->batch_var.resize(C);
        }
    }
    for (std::size_t c = 0; c < C; ++c) {
        double mean, inv_std;
        if (mode == Mode::Train) {
            double sum = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* row = x.sample(b) + c * L;
                for (std::size_t t = 0; t < L; ++t) sum += row[t];
            }
            mean = sum / n;
            double sq = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* row = x.sample(b) + c * L;
                for (std::size_t t = 0; t < L; ++t) {
                    const double d = row[t] - mean;
                    sq += d * d;
                }
            }
            const double var = sq / n;
            inv_std = 1.0 / std::sqrt(var + kBatchNormEps);
            if (cache) {
                cache->batch_mean[c] = mean;
                cache->batch_var[c] = n > 1.0 ? sq / (n - 1.0) : var;
            }
        } else {
            mean = rmean[c];
            inv_std = 1.0 / std::sqrt(rvar[c] + kBatchNormEps);
        }
        if (cache) cache->inv_std[c] = inv_std;
        for (std::size_t b = 0; b < B; ++b) {
            double* row = x.sample(b) + c * L;
            double* xh = cache ? cache->xhat.data() + (b * C + c) * L : nullptr;
            for (std::size_t t = 0; t < L; ++t) {
                const double v = (row[t] - mean) * inv_std;
                if (xh) xh[t] = v;
                row[t] = gamma[c] * v + beta[c];
            }
        }
    }
}

// In place: d <- dL/dx from d = dL/dy. Accumulates dgamma, dbeta.
void batch_norm_backward(const ModelParams& p, const BatchNormRef& ref, Mode mode,
                         const BatchNormCache& cache, FeatureMap& d, GradientSet& g) {
    const std::size_t B = d.batch(), C = d.channels(), L = d.length();
    const auto gamma = p.weights[ref.gamma];
    auto dgamma = g.values[ref.gamma];
    auto dbeta = g.values[ref.beta];
    const double n = static_cast<double>(B * L);
    for (std::size_t c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const double* dy = d.sample(b) + c * L;
            const double* xh = cache.xhat.data() + (b * C + c) * L;
            for (std::size_t t = 0; t < L; ++t) {
                sum_dy += dy[t];
                sum_dy_xhat += dy[t] * xh[t];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        const double scale = gamma[c] * cache.inv_std[c];
        for (std::size_t b = 0; b < B; ++b) {
            double* dy = d.sample(b) + c * L;
            const double* xh = cache.xhat.data() + (b * C + c) * L;
            if (mode == Mode::Train) {
                const double mean_dy = sum_dy / n, mean_dy_xhat = sum_dy_xhat / n;
                for (std::size_t t = 0; t < L; ++t) {
                    dy[t] = scale * (dy[t] - mean_dy - xh[t] * mean_dy_xhat);
                }
            } else {
                for (std::size_t t = 0; t < L; ++t) dy[t] *= scale;
            }
        }
    }
}

void relu_inplace(FeatureMap& x) {
    for (double& v : x.values()) v = v < 0.0 ? 0.0 : v;
}

// d *= (activated > 0)
void relu_backward_inplace(FeatureMap& d, const FeatureMap& activated) {
    auto dv = d.values();
    const auto av = activated.values();
    for (std::size_t i = 0; i < dv.size(); ++i) {
        if (!(av[i] > 0.0)) dv[i] = 0.0;
    }
}

void add_into(FeatureMap& dst, const FeatureMap& src) {
    auto d = dst.values();
    const auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void accumulate(FeatureMap& slot, FeatureMap&& contribution) {
    if (slot.empty()) {
        slot = std::move(contribution);
    } else {
        add_into(slot, contribution);
    }
}

FeatureMap conv_forward_batch(const FeatureMap& x, std::span<const double> w, std::size_t out,
                              std::size_t kernel) {
    FeatureMap y(x.batch(), out, x.length());
    RowMat scratch;
    for (std::size_t b = 0; b < x.batch(); ++b) {
        conv_sample(x.sample(b), x.channels(), x.length(), w.data(), out, kernel, y.sample(b), scratch);
    }
    return y;
}

ConvRef add_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                 std::size_t kernel) {
    ConvRef ref;
    ref.in = in;
    ref.out = out;
    ref.kernel = kernel;
    ref.slot = store.add(name + ".weight", {static_cast<std::uint32_t>(out),
                                            static_cast<std::uint32_t>(in),
                                            static_cast<std::uint32_t>(kernel)});
    return ref;
}

BatchNormRef add_batch_norm(ModelParams& p, const std::string& name, std::size_t channels) {
    BatchNormRef ref;
    ref.channels = channels;
    const std::vector<std::uint32_t> shape{static_cast<std::uint32_t>(channels)};
    ref.gamma = p.weights.add(name + ".gamma", shape);
    ref.beta = p.weights.add(name + ".beta", shape);
    ref.mean = p.buffers.add(name + ".running_mean", shape);
    ref.var = p.buffers.add(name + ".running_var", shape);
    for (double& v : p.weights[ref.gamma]) v = 1.0;
    for (double& v : p.buffers[ref.var]) v = 1.0;
    return ref;
}

}  // namespace

// ---- ParamStore --------------------------------------------------------------

std::size_t ParamStore::add(std::string name, std::vector<std::uint32_t> shape) {
    if (find(name) != slots_.size()) throw std::logic_error("ParamStore: duplicate tensor " + name);
    std::size_t size = 1;
    for (auto d : shape) size *= d;
    TensorSlot slot{std::move(name), std::move(shape), data_.size(), size};
    slots_.push_back(std::move(slot));
    data_.resize(data_.size() + size, 0.0);
    return slots_.size() - 1;
}

std::size_t ParamStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
        if (slots_[i].name == name) return i;
    }
    return slots_.size();
}

ParamStore ParamStore::zeros_like() const {
    ParamStore out;
    out.slots_ = slots_;
    out.data_.assign(data_.size(), 0.0);
    return out;
}

bool ParamStore::same_layout(const ParamStore& other) const {
    if (slots_.size() != other.slots_.size() || data_.size() != other.data_.size()) return false;
    for (std::size_t i = 0; i < slots_.size(); ++i) {
        if (slots_[i].name != other.slots_[i].name || slots_[i].shape != other.slots_[i].shape) {
            return false;
        }
    }
    return true;
}

// ---- construction --------------------------------------------------------------

ModelParams ModelParams::build(const NetworkConfig& cfg) {
    if (cfg.depth == 0) throw std::invalid_argument("network depth must be >= 1");
    if (cfg.in_channels == 0 || cfg.filters == 0 || cfg.bottleneck == 0) {
        throw std::invalid_argument("network channel counts must be >= 1");
    }
    if (cfg.num_classes < 2) throw std::invalid_argument("network needs at least 2 classes");
    for (auto k : cfg.kernel_sizes) {
        if (k == 0) throw std::invalid_argument("kernel sizes must be >= 1");
    }
    ModelParams p;
    p.config = cfg;
    const std::size_t width = cfg.width();
    std::size_t in = cfg.in_channels;
    std::size_t source = 0;
    std::size_t source_channels = cfg.in_channels;
    for (std::size_t m = 0; m < cfg.depth; ++m) {
        const std::string prefix = "module" + std::to_string(m);
        InceptionModuleRef mod;
        mod.in_channels = in;
        mod.bottleneck = add_conv(p.weights, prefix + ".bottleneck", in, cfg.bottleneck, 1);
        for (std::size_t j = 0; j < 3; ++j) {
            mod.branches[j] = add_conv(p.weights, prefix + ".branch" + std::to_string(j),
                                       cfg.bottleneck, cfg.filters, cfg.kernel_sizes[j]);
        }
        mod.pool_conv = add_conv(p.weights, prefix + ".pool_conv", in, cfg.filters, 1);
        mod.bn = add_batch_norm(p, prefix + ".bn", width);
        p.modules.push_back(mod);

        if (cfg.residual_every != 0 && (m + 1) % cfg.residual_every == 0) {
            const std::string sp = "shortcut" + std::to_string(p.shortcuts.size());
            ShortcutRef sc;
            sc.after_module = m;
            sc.source = source;
            sc.proj = add_conv(p.weights, sp + ".proj", source_channels, width, 1);
            sc.bn = add_batch_norm(p, sp + ".bn", width);
            p.shortcuts.push_back(sc);
            source = m + 1;
            source_channels = width;
        }
        in = width;
    }
    p.head.weight = p.weights.add("head.weight", {static_cast<std::uint32_t>(cfg.num_classes),
                                                  static_cast<std::uint32_t>(width)});
    p.head.bias = p.weights.add("head.bias", {static_cast<std::uint32_t>(cfg.num_classes)});
    return p;
}

ModelParams init_params(const NetworkConfig& config, std::uint64_t seed) {
    ModelParams p = ModelParams::build(config);
    Rng rng(seed);
    auto fill = [&rng](std::span<double> w, double bound) {
        for (double& v : w) v = rng.uniform(-bound, bound);
    };
    auto fill_conv = [&](const ConvRef& c) {
        fill(p.weights[c.slot], 1.0 / std::sqrt(static_cast<double>(c.in * c.kernel)));
    };
    for (std::size_t m = 0; m < p.modules.size(); ++m) {
        const auto& mod = p.modules[m];
        fill_conv(mod.bottleneck);
        for (const auto& br : mod.branches) fill_conv(br);
        fill_conv(mod.pool_conv);
        for (const auto& sc : p.shortcuts) {
            if (sc.after_module == m) fill_conv(sc.proj);
        }
    }
    const double head_bound = 1.0 / std::sqrt(static_cast<double>(config.width()));
    fill(p.weights[p.head.weight], head_bound);
    fill(p.weights[p.head.bias], head_bound);
    return p;
}

ModelParams init_params(std::size_t depth, std::size_t num_classes, std::uint64_t seed) {
    NetworkConfig cfg;
    cfg.depth = depth;
    cfg.num_classes = num_classes;
    return init_params(cfg, seed);
}

// ---- forward ---------------------------------------------------------------------

FeatureMap conv1d_forward(const FeatureMap& x, std::span<const double> weights,
                          std::size_t out_channels, std::size_t kernel) {
    if (out_channels == 0 || kernel == 0 || weights.size() != out_channels * x.channels() * kernel) {
        throw std::invalid_argument("conv1d_forward: weight shape does not match input channels");
    }
    return conv_forward_batch(x, weights, out_channels, kernel);
}

FeatureMap inception_module_forward(const ModelParams& params, std::size_t module,
                                    const FeatureMap& x, Mode mode, ModuleCache* cache) {
    if (module >= params.modules.size()) throw std::out_of_range("inception module index");
    const auto& ref = params.modules[module];
    if (x.channels() != ref.in_channels) {
        throw std::invalid_argument("inception module " + std::to_string(module) + ": expected " +
                                    std::to_string(ref.in_channels) + " input channels, got " +
                                    std::to_string(x.channels()));
    }
    const std::size_t B = x.batch(), L = x.length(), cin = x.channels();
    const std::size_t F = params.config.filters;

    FeatureMap bott = conv_forward_batch(x, params.weights[ref.bottleneck.slot], ref.bottleneck.out, 1);

    FeatureMap pooled(B, cin, L);
    std::vector<std::uint8_t> offsets(B * cin * L);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < cin; ++c) {
            const double* src = x.sample(b) + c * L;
            double* dst = pooled.sample(b) + c * L;
            std::uint8_t* off = offsets.data() + (b * cin + c) * L;
            for (std::size_t t = 0; t < L; ++t) {
                std::uint8_t best = 1;
                double v = src[t];
                if (t > 0 && src[t - 1] > v) {
                    v = src[t - 1];
                    best = 0;
                }
                if (t + 1 < L && src[t + 1] > v) {
                    v = src[t + 1];
                    best = 2;
                }
                dst[t] = v;
                off[t] = best;
            }
        }
    }

    FeatureMap out(B, params.config.width(), L);
    RowMat scratch;
    for (std::size_t b = 0; b < B; ++b) {
        double* block = out.sample(b);
        for (std::size_t j = 0; j < 3; ++j) {
            const auto& br = ref.branches[j];
            conv_sample(bott.sample(b), br.in, L, params.weights[br.slot].data(), F, br.kernel,
                        block + j * F * L, scratch);
        }
        conv_sample(pooled.sample(b), cin, L, params.weights[ref.pool_conv.slot].data(), F, 1,
                    block + 3 * F * L, scratch);
    }
    batch_norm_forward(params, ref.bn, out, mode, cache ? &cache->bn : nullptr);
    relu_inplace(out);
    if (cache) {
        cache->bottleneck_out = std::move(bott);
        cache->pooled = std::move(pooled);
        cache->pool_offset = std::move(offsets);
    }
    return out;
}

std::vector<double> model_forward(const ModelParams& params, const FeatureMap& batch, Mode mode,
                                  ForwardCache* cache) {
    const auto& cfg = params.config;
    if (batch.empty()) throw std::invalid_argument("model_forward: empty batch");
    if (batch.channels() != cfg.in_channels) {
        throw std::invalid_argument("model_forward: expected " + std::to_string(cfg.in_channels) +
                                    " input channel(s), got " + std::to_string(batch.channels()));
    }
    check_finite(batch.values(), "model_forward input");
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c = ForwardCache{};
    c.mode = mode;
    c.batch = batch.batch();
    c.stages.reserve(cfg.depth + 1);
    c.stages.push_back(batch);
    if (cache) {
        c.modules.resize(cfg.depth);
        c.shortcuts.resize(params.shortcuts.size());
    }

    std::size_t next_shortcut = 0;
    for (std::size_t m = 0; m < cfg.depth; ++m) {
        FeatureMap y = inception_module_forward(params, m, c.stages[m], mode,
                                                cache ? &c.modules[m] : nullptr);
        if (next_shortcut < params.shortcuts.size() &&
            params.shortcuts[next_shortcut].after_module == m) {
            const auto& sc = params.shortcuts[next_shortcut];
            FeatureMap proj = conv_forward_batch(c.stages[sc.source], params.weights[sc.proj.slot],
                                                 sc.proj.out, 1);
            batch_norm_forward(params, sc.bn, proj, mode,
                               cache ? &c.shortcuts[next_shortcut].bn : nullptr);
            if (cache) c.modules[m].out = y;
            add_into(y, proj);
            relu_inplace(y);
            ++next_shortcut;
        }
        c.stages.push_back(std::move(y));
    }

    const FeatureMap& top = c.stages.back();
    const std::size_t B = top.batch(), F = top.channels(), L = top.length();
    const std::size_t C = cfg.num_classes;
    c.pooled.assign(B * F, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t f = 0; f < F; ++f) {
            const double* row = top.sample(b) + f * L;
            double s = 0.0;
            for (std::size_t t = 0; t < L; ++t) s += row[t];
            c.pooled[b * F + f] = s / static_cast<double>(L);
        }
    }
    std::vector<double> logits(B * C);
    MatMap Z(logits.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(C));
    CMatMap P(c.pooled.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(F));
    CMatMap W(params.weights[params.head.weight].data(), static_cast<Eigen::Index>(C),
              static_cast<Eigen::Index>(F));
    Eigen::Map<const Eigen::RowVectorXd> bias(params.weights[params.head.bias].data(),
                                              static_cast<Eigen::Index>(C));
    Z.noalias() = P * W.transpose();
    Z.rowwise() += bias;
    check_finite(logits, "model_forward");
    return logits;
}

// ---- backward --------------------------------------------------------------------

namespace {

FeatureMap module_backward(const ModelParams& params, std::size_t m, const FeatureMap& x,
                           const FeatureMap& activated, ModuleCache const& mc, Mode mode,
                           FeatureMap d, GradientSet& g) {
    const auto& ref = params.modules[m];
    const std::size_t B = x.batch(), L = x.length(), cin = x.channels();
    const std::size_t F = params.config.filters;
    relu_backward_inplace(d, activated);
    batch_norm_backward(params, ref.bn, mode, mc.bn, d, g);

    FeatureMap dbott(B, ref.bottleneck.out, L);
    FeatureMap dpooled(B, cin, L);
    FeatureMap dx(B, cin, L);
    RowMat scratch, dcols;
    for (std::size_t b = 0; b < B; ++b) {
        const double* block = d.sample(b);
        for (std::size_t j = 0; j < 3; ++j) {
            const auto& br = ref.branches[j];
            conv_sample_backward(mc.bottleneck_out.sample(b), br.in, L, params.weights[br.slot].data(),
                                 F, br.kernel, block + j * F * L, g.values[br.slot].data(),
                                 dbott.sample(b), scratch, dcols);
        }
        conv_sample_backward(mc.pooled.sample(b), cin, L, params.weights[ref.pool_conv.slot].data(),
                             F, 1, block + 3 * F * L, g.values[ref.pool_conv.slot].data(),
                             dpooled.sample(b), scratch, dcols);
        for (std::size_t c = 0; c < cin; ++c) {
            const double* dp = dpooled.sample(b) + c * L;
            const std::uint8_t* off = mc.pool_offset.data() + (b * cin + c) * L;
            double* dst = dx.sample(b) + c * L;
            for (std::size_t t = 0; t < L; ++t) dst[t + off[t] - 1] += dp[t];
        }
        conv_sample_backward(x.sample(b), cin, L, params.weights[ref.bottleneck.slot].data(),
                             ref.bottleneck.out, 1, dbott.sample(b),
                             g.values[ref.bottleneck.slot].data(), dx.sample(b), scratch, dcols);
    }
    return dx;
}

}  // namespace

GradientSet model_backward(const ModelParams& params, const ForwardCache& cache,
                           std::span<const double> upstream) {
    if (!cache.populated() || cache.modules.size() != params.config.depth) {
        throw std::logic_error("model_backward: no forward cache recorded");
    }
    const auto& cfg = params.config;
    const FeatureMap& top = cache.stages.back();
    const std::size_t B = top.batch(), F = top.channels(), L = top.length();
    const std::size_t C = cfg.num_classes;
    if (upstream.size() != B * C) throw std::invalid_argument("model_backward: upstream shape mismatch");

    GradientSet g = GradientSet::zeros_like(params);
    CMatMap U(upstream.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(C));
    CMatMap P(cache.pooled.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(F));
    CMatMap W(params.weights[params.head.weight].data(), static_cast<Eigen::Index>(C),
              static_cast<Eigen::Index>(F));
    MatMap dW(g.values[params.head.weight].data(), static_cast<Eigen::Index>(C),
              static_cast<Eigen::Index>(F));
    dW.noalias() = U.transpose() * P;
    Eigen::Map<Eigen::RowVectorXd> db(g.values[params.head.bias].data(), static_cast<Eigen::Index>(C));
    db = U.colwise().sum();
    RowMat dpooled = U * W;

    std::vector<FeatureMap> dstages(cfg.depth + 1);
    FeatureMap dtop(B, F, L);
    const double invL = 1.0 / static_cast<double>(L);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t f = 0; f < F; ++f) {
            double* row = dtop.sample(b) + f * L;
            std::fill(row, row + L, dpooled(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(f)) * invL);
        }
    }
    dstages[cfg.depth] = std::move(dtop);

    RowMat scratch, dcols;
    std::ptrdiff_t sc_index = static_cast<std::ptrdiff_t>(params.shortcuts.size()) - 1;
    for (std::size_t mi = cfg.depth; mi-- > 0;) {
        FeatureMap d = std::move(dstages[mi + 1]);
        const FeatureMap* activated = &cache.stages[mi + 1];
        if (sc_index >= 0 && params.shortcuts[static_cast<std::size_t>(sc_index)].after_module == mi) {
            const auto& sc = params.shortcuts[static_cast<std::size_t>(sc_index)];
            relu_backward_inplace(d, cache.stages[mi + 1]);
            FeatureMap dproj = d;
            batch_norm_backward(params, sc.bn, cache.mode,
                                cache.shortcuts[static_cast<std::size_t>(sc_index)].bn, dproj, g);
            const FeatureMap& src = cache.stages[sc.source];
            FeatureMap dsrc(src.batch(), src.channels(), src.length());
            for (std::size_t b = 0; b < B; ++b) {
                conv_sample_backward(src.sample(b), src.channels(), L,
                                     params.weights[sc.proj.slot].data(), sc.proj.out, 1,
                                     dproj.sample(b), g.values[sc.proj.slot].data(), dsrc.sample(b),
                                     scratch, dcols);
            }
            accumulate(dstages[sc.source], std::move(dsrc));
            activated = &cache.modules[mi].out;
            --sc_index;
        }
        FeatureMap dx = module_backward(params, mi, cache.stages[mi], *activated, cache.modules[mi],
                                        cache.mode, std::move(d), g);
        accumulate(dstages[mi], std::move(dx));
    }
    return g;
}

void update_running_stats(ModelParams& params, const ForwardCache& cache) {
    if (!cache.populated() || cache.mode != Mode::Train || cache.modules.size() != params.modules.size()) {
        throw std::logic_error("update_running_stats: needs a train-mode forward cache");
    }
    auto fold = [&params](const BatchNormRef& ref, const BatchNormCache& bc) {
        auto mean = params.buffers[ref.mean];
        auto var = params.buffers[ref.var];
        for (std::size_t c = 0; c < ref.channels; ++c) {
            mean[c] = (1.0 - kBatchNormMomentum) * mean[c] + kBatchNormMomentum * bc.batch_mean[c];
            var[c] = (1.0 - kBatchNormMomentum) * var[c] + kBatchNormMomentum * bc.batch_var[c];
        }
    };
    for (std::size_t m = 0; m < params.modules.size(); ++m) fold(params.modules[m].bn, cache.modules[m].bn);
    for (std::size_t s = 0; s < params.shortcuts.size(); ++s) fold(params.shortcuts[s].bn, cache.shortcuts[s].bn);
}

std::vector<double> predict_logits(const ModelParams& params, const FeatureMap& data, std::size_t chunk) {
    if (chunk == 0) throw std::invalid_argument("predict_logits: chunk must be >= 1");
    std::vector<double> out;
    out.reserve(data.batch() * params.config.num_classes);
    for (std::size_t begin = 0; begin < data.batch(); begin += chunk) {
        const std::size_t count = std::min(chunk, data.batch() - begin);
        const auto logits = model_forward(params, slice_batch(data, begin, count), Mode::Eval);
        out.insert(out.end(), logits.begin(), logits.end());
    }
    return out;
}

FeatureMap slice_batch(const FeatureMap& data, std::size_t begin, std::size_t count) {
    if (count == 0 || begin + count > data.batch()) throw std::out_of_range("slice_batch: bad range");
    const std::size_t block = data.channels() * data.length();
    std::vector<double> values(data.sample(begin), data.sample(begin) + count * block);
    return FeatureMap(count, data.channels(), data.length(), std::move(values));
}

FeatureMap gather_batch(const FeatureMap& data, std::span<const std::size_t> rows) {
    const std::size_t block = data.channels() * data.length();
    FeatureMap out(rows.size(), data.channels(), data.length());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= data.batch()) throw std::out_of_range("gather_batch: row out of range");
        std::memcpy(out.sample(i), data.sample(rows[i]), block * sizeof(double));
    }
    return out;
}

}  // namespace kdc
