#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kdc/losses.hpp"
#include "kdc/network.hpp"
#include "kdc/rng.hpp"

using namespace kdc;

namespace {

FeatureMap random_batch(std::size_t b, std::size_t c, std::size_t l, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    FeatureMap x(b, c, l);
    for (double& v : x.values()) v = scale * rng.normal();
    return x;
}

NetworkConfig tiny_config(std::size_t depth, std::size_t classes) {
    NetworkConfig cfg;
    cfg.depth = depth;
    cfg.filters = 8;
    cfg.bottleneck = 8;
    cfg.kernel_sizes = {9, 5, 2};
    cfg.num_classes = classes;
    return cfg;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double mean_ce(const ModelParams& p, const FeatureMap& x, const std::vector<SampleTarget>& targets,
               Mode mode) {
    const auto z = model_forward(p, x, mode);
    return batch_loss(CrossEntropy{}, z, x.batch(), targets).mean;
}

// Central differences on sampled entries of every weight tensor.
void check_gradients(ModelParams p, const FeatureMap& x, const std::vector<SampleTarget>& targets,
                     Mode mode, double h = 1e-4) {
    ForwardCache cache;
    const auto z = model_forward(p, x, mode, &cache);
    const auto loss = batch_loss(CrossEntropy{}, z, x.batch(), targets);
    const GradientSet g = model_backward(p, cache, loss.grad);
    REQUIRE(g.values.same_layout(p.weights));

    Rng pick(99);
    for (std::size_t s = 0; s < p.weights.slots().size(); ++s) {
        const auto& slot = p.weights.slots()[s];
        const std::size_t samples = std::min<std::size_t>(slot.size, 6);
        for (std::size_t k = 0; k < samples; ++k) {
            const std::size_t i = static_cast<std::size_t>(pick.below(slot.size));
            double& w = p.weights[s][i];
            const double saved = w;
            w = saved + h;
            const double up = mean_ce(p, x, targets, mode);
            w = saved - h;
            const double down = mean_ce(p, x, targets, mode);
            w = saved;
            const double numeric = (up - down) / (2 * h);
            const double analytic = g.values[s][i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            INFO(slot.name << "[" << i << "] analytic " << analytic << " numeric " << numeric);
            CHECK(std::abs(numeric - analytic) / denom < 1e-3);
        }
    }
}

}  // namespace

TEST_CASE("conv1d same padding") {
    SUBCASE("1x1 identity kernel") {
        FeatureMap x(1, 1, 4, {1.0, -2.0, 3.5, 0.25});
        const std::vector<double> w{1.0};
        const auto y = conv1d_forward(x, w, 1, 1);
        CHECK(max_abs_diff(y.values(), x.values()) == 0.0);
    }
    SUBCASE("centered delta") {
        FeatureMap x(1, 1, 5, {1.0, 2.0, 3.0, 4.0, 5.0});
        const std::vector<double> w{0.0, 1.0, 0.0};
        const auto y = conv1d_forward(x, w, 1, 3);
        CHECK(max_abs_diff(y.values(), x.values()) == 0.0);
    }
    SUBCASE("box filter with zero padding") {
        FeatureMap x(1, 1, 3, {1.0, 2.0, 3.0});
        const std::vector<double> w{1.0, 1.0, 1.0};
        const auto y = conv1d_forward(x, w, 1, 3);
        const std::vector<double> expected{3.0, 6.0, 5.0};
        CHECK(max_abs_diff(y.values(), expected) == 0.0);
    }
    SUBCASE("even kernel pads one more on the right") {
        // k=4: left pad 1, right pad 2; y[t] = sum_j w[j] x[t + j - 1]
        FeatureMap x(1, 1, 4, {1.0, 2.0, 3.0, 4.0});
        const std::vector<double> w{1.0, 10.0, 100.0, 1000.0};
        const auto y = conv1d_forward(x, w, 1, 4);
        const std::vector<double> expected{0 + 10 + 200 + 3000, 1 + 20 + 300 + 4000, 2 + 30 + 400,
                                           3 + 40};
        CHECK(max_abs_diff(y.values(), expected) == 0.0);
    }
    SUBCASE("output length equals input length for long kernels") {
        for (std::size_t l : {1, 3, 7, 39, 41}) {
            FeatureMap x = random_batch(2, 3, l, l);
            std::vector<double> w(4 * 3 * 40, 0.5);
            const auto y = conv1d_forward(x, w, 4, 40);
            CHECK(y.length() == l);
            CHECK(y.channels() == 4);
        }
    }
    SUBCASE("matches direct loop") {
        const FeatureMap x = random_batch(2, 3, 11, 4);
        Rng rng(5);
        std::vector<double> w(2 * 3 * 6);
        for (double& v : w) v = rng.normal();
        const auto y = conv1d_forward(x, w, 2, 6);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t o = 0; o < 2; ++o)
                for (std::size_t t = 0; t < 11; ++t) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < 3; ++c)
                        for (std::size_t j = 0; j < 6; ++j) {
                            const long src = static_cast<long>(t + j) - 2;
                            if (src >= 0 && src < 11) s += w[(o * 3 + c) * 6 + j] * x.at(b, c, src);
                        }
                    CHECK(y.at(b, o, t) == doctest::Approx(s).epsilon(1e-12));
                }
    }
    SUBCASE("linear in x and w") {
        const FeatureMap a = random_batch(1, 2, 9, 1), b = random_batch(1, 2, 9, 2);
        std::vector<double> w(3 * 2 * 4);
        Rng rng(3);
        for (double& v : w) v = rng.normal();
        FeatureMap sum(1, 2, 9);
        for (std::size_t i = 0; i < sum.values().size(); ++i) sum.values()[i] = 2.0 * a.values()[i] + b.values()[i];
        const auto ya = conv1d_forward(a, w, 3, 4), yb = conv1d_forward(b, w, 3, 4),
                   ys = conv1d_forward(sum, w, 3, 4);
        for (std::size_t i = 0; i < ys.values().size(); ++i) {
            CHECK(ys.values()[i] == doctest::Approx(2.0 * ya.values()[i] + yb.values()[i]).epsilon(1e-12));
        }
        std::vector<double> w2(w);
        for (double& v : w2) v *= -3.0;
        const auto yw = conv1d_forward(a, w2, 3, 4);
        for (std::size_t i = 0; i < yw.values().size(); ++i) {
            CHECK(yw.values()[i] == doctest::Approx(-3.0 * ya.values()[i]).epsilon(1e-12));
        }
    }
    SUBCASE("shape mismatch") {
        FeatureMap x(1, 2, 5);
        const std::vector<double> w(3, 1.0);
        CHECK_THROWS_AS(conv1d_forward(x, w, 1, 3), std::invalid_argument);
    }
}

TEST_CASE("init_params structure and determinism") {
    const auto s = init_params(3, 4, 7);
    CHECK(s.modules.size() == 3);
    CHECK(s.shortcuts.size() == 1);
    CHECK(s.shortcuts[0].source == 0);
    CHECK(s.weights.find("head.weight") < s.weights.slots().size());
    const auto t = init_params(6, 4, 7);
    CHECK(t.modules.size() == 6);
    CHECK(t.shortcuts.size() == 2);
    CHECK(t.shortcuts[1].source == 3);
    CHECK(t.modules[1].in_channels == 128);
    CHECK(t.modules[0].in_channels == 1);

    CHECK(init_params(3, 4, 7) == s);
    CHECK_FALSE(init_params(3, 4, 8) == s);

    const auto& w = s.weights;
    const auto branch = w[s.modules[0].branches[0].slot];
    const double bound = 1.0 / std::sqrt(32.0 * 40.0);
    CHECK(std::all_of(branch.begin(), branch.end(), [&](double v) { return std::abs(v) <= bound; }));
    CHECK(*std::max_element(branch.begin(), branch.end()) > 0.9 * bound);
    const auto gamma = w[s.modules[2].bn.gamma];
    const auto beta = w[s.modules[2].bn.beta];
    CHECK(std::all_of(gamma.begin(), gamma.end(), [](double v) { return v == 1.0; }));
    CHECK(std::all_of(beta.begin(), beta.end(), [](double v) { return v == 0.0; }));
    const auto mean = s.buffers[s.shortcuts[0].bn.mean];
    const auto var = s.buffers[s.shortcuts[0].bn.var];
    CHECK(std::all_of(mean.begin(), mean.end(), [](double v) { return v == 0.0; }));
    CHECK(std::all_of(var.begin(), var.end(), [](double v) { return v == 1.0; }));
    CHECK(w[s.modules[0].bottleneck.slot].size() == 32);
    CHECK(w[s.modules[1].bottleneck.slot].size() == 32 * 128);
    CHECK(w[s.head.weight].size() == 4 * 128);
}

TEST_CASE("inception module forward") {
    const auto p = init_params(3, 2, 1);
    SUBCASE("zero input gives zeros") {
        FeatureMap x(3, 1, 20);
        for (Mode mode : {Mode::Train, Mode::Eval}) {
            const auto y = inception_module_forward(p, 0, x, mode);
            CHECK(y.channels() == 128);
            CHECK(std::all_of(y.values().begin(), y.values().end(), [](double v) { return v == 0.0; }));
        }
    }
    SUBCASE("length preserved") {
        for (std::size_t l : {3, 4, 17, 64}) {
            const auto y = inception_module_forward(p, 0, random_batch(2, 1, l, l), Mode::Train);
            CHECK(y.length() == l);
        }
    }
    SUBCASE("identical rows give identical outputs") {
        FeatureMap one = random_batch(1, 1, 30, 3);
        std::vector<double> twice(one.values().begin(), one.values().end());
        twice.insert(twice.end(), one.values().begin(), one.values().end());
        FeatureMap x(2, 1, 30, twice);
        for (Mode mode : {Mode::Train, Mode::Eval}) {
            const auto y = inception_module_forward(p, 0, x, mode);
            const std::size_t block = 128 * 30;
            CHECK(std::equal(y.sample(0), y.sample(0) + block, y.sample(1)));
        }
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(inception_module_forward(p, 1, random_batch(1, 1, 10, 1), Mode::Eval),
                        std::invalid_argument);
    }
    SUBCASE("train-mode batch norm standardizes") {
        ModuleCache mc;
        const FeatureMap x = random_batch(8, 1, 50, 11, 100.0);
        inception_module_forward(p, 0, x, Mode::Train, &mc);
        const std::size_t n = 8 * 50;
        for (std::size_t c = 0; c < 128; ++c) {
            double s = 0.0, sq = 0.0;
            for (std::size_t b = 0; b < 8; ++b)
                for (std::size_t t = 0; t < 50; ++t) s += mc.bn.xhat[(b * 128 + c) * 50 + t];
            const double mean = s / n;
            for (std::size_t b = 0; b < 8; ++b)
                for (std::size_t t = 0; t < 50; ++t) {
                    const double d = mc.bn.xhat[(b * 128 + c) * 50 + t] - mean;
                    sq += d * d;
                }
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(sq / n - 1.0) < 1e-4);
        }
    }
}

TEST_CASE("model forward") {
    const auto p = init_params(3, 3, 2);
    const FeatureMap x = random_batch(5, 1, 40, 8);
    SUBCASE("eval is deterministic") {
        const auto a = model_forward(p, x, Mode::Eval);
        const auto b = model_forward(p, x, Mode::Eval);
        CHECK(a.size() == 15);
        CHECK(a == b);
    }
    SUBCASE("batch equals single-sample eval passes") {
        ModelParams q = p;
        ForwardCache cache;
        model_forward(q, x, Mode::Train, &cache);
        update_running_stats(q, cache);
        const auto batch = model_forward(q, x, Mode::Eval);
        for (std::size_t b = 0; b < 5; ++b) {
            const auto single = model_forward(q, slice_batch(x, b, 1), Mode::Eval);
            for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(single[k] - batch[b * 3 + k]) < 1e-6);
        }
        CHECK(max_abs_diff(predict_logits(q, x, 2), batch) < 1e-12);
    }
    SUBCASE("doubling head weights doubles logits (zero bias)") {
        ModelParams q = p;
        for (double& v : q.weights[q.head.bias]) v = 0.0;
        const auto a = model_forward(q, x, Mode::Eval);
        for (double& v : q.weights[q.head.weight]) v *= 2.0;
        const auto b = model_forward(q, x, Mode::Eval);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2.0 * a[i]).epsilon(1e-12));
    }
    SUBCASE("zero input logits independent of length") {
        const auto a = model_forward(p, FeatureMap(2, 1, 16), Mode::Eval);
        const auto b = model_forward(p, FeatureMap(2, 1, 97), Mode::Eval);
        CHECK(max_abs_diff(a, b) < 1e-12);
    }
    SUBCASE("rejects multivariate input") {
        CHECK_THROWS_AS(model_forward(p, FeatureMap(1, 2, 16), Mode::Eval), std::invalid_argument);
    }
    SUBCASE("rejects non-finite activations") {
        FeatureMap bad = x;
        bad.at(0, 0, 3) = std::nan("");
        CHECK_THROWS(model_forward(p, bad, Mode::Eval));
    }
    SUBCASE("train mode does not touch params") {
        ForwardCache cache;
        model_forward(p, x, Mode::Train, &cache);
        CHECK(p == init_params(3, 3, 2));
    }
}

TEST_CASE("running statistics update") {
    ModelParams p = init_params(3, 2, 4);
    ForwardCache cache;
    const FeatureMap x = random_batch(4, 1, 25, 6);
    model_forward(p, x, Mode::Train, &cache);
    update_running_stats(p, cache);
    const auto& bc = cache.modules[0].bn;
    const auto mean = p.buffers[p.modules[0].bn.mean];
    const auto var = p.buffers[p.modules[0].bn.var];
    for (std::size_t c = 0; c < 128; ++c) {
        CHECK(mean[c] == doctest::Approx(0.1 * bc.batch_mean[c]));
        CHECK(var[c] == doctest::Approx(0.9 + 0.1 * bc.batch_var[c]));
    }
    ForwardCache eval_cache;
    model_forward(p, x, Mode::Eval, &eval_cache);
    CHECK_THROWS_AS(update_running_stats(p, eval_cache), std::logic_error);
}

TEST_CASE("model backward") {
    SUBCASE("zero upstream gives zero gradients") {
        const auto p = init_params(3, 2, 3);
        ForwardCache cache;
        const auto z = model_forward(p, random_batch(3, 1, 20, 1), Mode::Train, &cache);
        const std::vector<double> zero(z.size(), 0.0);
        const auto g = model_backward(p, cache, zero);
        CHECK(std::all_of(g.values.data().begin(), g.values.data().end(), [](double v) { return v == 0.0; }));
    }
    SUBCASE("missing cache") {
        const auto p = init_params(3, 2, 3);
        ForwardCache empty;
        const std::vector<double> up(2, 1.0);
        CHECK_THROWS_AS(model_backward(p, empty, up), std::logic_error);
    }
    SUBCASE("finite differences, depth 1, length 8, C=2") {
        NetworkConfig cfg = tiny_config(1, 2);
        cfg.filters = 32;
        cfg.bottleneck = 32;
        cfg.kernel_sizes = {40, 20, 10};
        const auto p = init_params(cfg, 5);
        const FeatureMap x = random_batch(4, 1, 8, 12);
        const std::vector<SampleTarget> t{{0, {}}, {1, {}}, {1, {}}, {0, {}}};
        check_gradients(p, x, t, Mode::Train);
        check_gradients(p, x, t, Mode::Eval);
    }
    SUBCASE("finite differences, depth 1, 8 filters, length 16, C=3") {
        const auto p = init_params(tiny_config(1, 3), 9);
        const FeatureMap x = random_batch(5, 1, 16, 13);
        const std::vector<SampleTarget> t{{0, {}}, {1, {}}, {2, {}}, {2, {}}, {0, {}}};
        check_gradients(p, x, t, Mode::Train);
    }
    SUBCASE("finite differences through shortcuts, depth 6") {
        const auto p = init_params(tiny_config(6, 3), 21);
        const FeatureMap x = random_batch(3, 1, 12, 14);
        const std::vector<SampleTarget> t{{2, {}}, {1, {}}, {0, {}}};
        check_gradients(p, x, t, Mode::Train, 1e-6);
        check_gradients(p, x, t, Mode::Eval, 1e-6);
    }
    SUBCASE("duplicated sample doubles the gradient") {
        const auto p = init_params(tiny_config(3, 2), 17);
        const FeatureMap one = random_batch(1, 1, 14, 3);
        std::vector<double> twice(one.values().begin(), one.values().end());
        twice.insert(twice.end(), one.values().begin(), one.values().end());
        const FeatureMap two(2, 1, 14, twice);
        const std::vector<double> up1{0.3, -0.7}, up2{0.3, -0.7, 0.3, -0.7};
        for (Mode mode : {Mode::Train, Mode::Eval}) {
            ForwardCache c1, c2;
            model_forward(p, one, mode, &c1);
            model_forward(p, two, mode, &c2);
            const auto g1 = model_backward(p, c1, up1);
            const auto g2 = model_backward(p, c2, up2);
            const auto a = g1.values.data(), b = g2.values.data();
            for (std::size_t i = 0; i < a.size(); ++i) {
                CHECK(b[i] == doctest::Approx(2.0 * a[i]).epsilon(1e-9).scale(1e-12));
            }
        }
    }
}
