#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kdc/optim.hpp"
#include "support/synthetic.hpp"

using namespace kdc;

namespace {

ParamStore scalar_store(double value) {
    ParamStore s;
    s.add("w", {1});
    s.data()[0] = value;
    return s;
}

std::vector<SampleTarget> hard_targets(const SeriesDataset& d) {
    std::vector<SampleTarget> t;
    for (auto c : d.classes) t.push_back(SampleTarget{c, {}});
    return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("lr_at_epoch") {
    TrainConfig cfg;
    CHECK(lr_at_epoch(cfg, 0) == 0.01);
    CHECK(lr_at_epoch(cfg, 34) == 0.01);
    CHECK(lr_at_epoch(cfg, 35) == 0.005);
    CHECK(lr_at_epoch(cfg, 70) == 0.0025);
    CHECK(lr_at_epoch(cfg, 511) == doctest::Approx(0.01 * std::pow(0.5, 14)));
}

TEST_CASE("TrainConfig validation and text form") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto bad = cfg;
    bad.patience = 600;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.base_lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    TrainConfig other;
    other.loss = KnowledgeDistillation{0.3, 4.0};
    other.seed = 99;
    other.base_lr = 0.001;
    TrainConfig back;
    const auto text = to_text(other);
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        const auto line = text.substr(pos, nl - pos);
        const auto eq = line.find('=');
        CHECK(apply_setting(back, line.substr(0, eq), line.substr(eq + 1)));
        pos = nl + 1;
    }
    CHECK(to_text(back) == text);
    CHECK(std::get<KnowledgeDistillation>(back.loss) == KnowledgeDistillation{0.3, 4.0});
    CHECK_FALSE(apply_setting(back, "colour", "red"));
    CHECK_THROWS_AS(apply_setting(back, "batch_size", "-3"), std::invalid_argument);
    CHECK_THROWS_AS(apply_setting(back, "base_lr", "fast"), std::invalid_argument);
}

TEST_CASE("adam_step") {
    SUBCASE("zero gradient leaves params unchanged") {
        auto p = scalar_store(0.7);
        auto st = AdamState::for_params(p);
        adam_step(p, scalar_store(0.0), st, 0.1);
        CHECK(p.data()[0] == 0.7);
        CHECK(st.step == 1);
    }
    SUBCASE("first step is a sign step of size lr") {
        auto p = scalar_store(0.0);
        auto st = AdamState::for_params(p);
        adam_step(p, scalar_store(1.0), st, 0.1);
        CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-7));
    }
    SUBCASE("matches a hand-rolled update over several steps") {
        auto p = scalar_store(0.5);
        auto st = AdamState::for_params(p);
        double w = 0.5, m = 0.0, v = 0.0;
        const double grads[] = {1.0, 2.0, -0.5, 0.25, 3.0};
        for (int t = 1; t <= 5; ++t) {
            const double g = grads[t - 1];
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            const double mh = m / (1 - std::pow(0.9, t));
            const double vh = v / (1 - std::pow(0.999, t));
            w -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
            adam_step(p, scalar_store(g), st, 0.01);
            CHECK(p.data()[0] == doctest::Approx(w).epsilon(1e-12));
        }
    }
    SUBCASE("deterministic") {
        auto p1 = scalar_store(0.3), p2 = scalar_store(0.3);
        auto s1 = AdamState::for_params(p1), s2 = AdamState::for_params(p2);
        adam_step(p1, scalar_store(-0.4), s1, 0.05);
        adam_step(p2, scalar_store(-0.4), s2, 0.05);
        CHECK(p1 == p2);
    }
    SUBCASE("errors") {
        auto p = scalar_store(0.0);
        auto st = AdamState::for_params(p);
        ParamStore wide;
        wide.add("w", {2});
        CHECK_THROWS_AS(adam_step(p, wide, st, 0.1), std::invalid_argument);
        CHECK_THROWS_AS(adam_step(p, scalar_store(std::nan("")), st, 0.1), std::runtime_error);
        CHECK_THROWS_AS(adam_step(p, scalar_store(INFINITY), st, 0.1), std::runtime_error);
    }
}

TEST_CASE("early stopping") {
    NetworkConfig small;
    small.filters = 2;
    small.bottleneck = 2;
    small.kernel_sizes = {3, 3, 3};
    const auto params = init_params(small, 1);

    SUBCASE("constant metric stops patience + 1 epochs after the best") {
        EarlyStopState st;
        st.patience = 80;
        std::size_t stopped = 0;
        for (std::size_t e = 0; e < 500; ++e) {
            CHECK(st.since_improvement <= st.patience);
            if (early_stop_update(st, 1.0, e, params) == StopDecision::Stop) {
                stopped = e;
                break;
            }
        }
        CHECK(st.best_epoch == 0);
        CHECK(stopped == 81);
    }
    SUBCASE("monotone improvement never stops") {
        EarlyStopState st;
        st.patience = 3;
        for (std::size_t e = 0; e < 200; ++e) {
            CHECK(early_stop_update(st, 100.0 - static_cast<double>(e), e, params) == StopDecision::Continue);
        }
        CHECK(st.best_epoch == 199);
    }
    SUBCASE("improvements below the threshold do not count") {
        EarlyStopState st;
        st.patience = 2;
        early_stop_update(st, 1.0, 0, params);
        early_stop_update(st, 1.0 - 5e-7, 1, params);
        CHECK(st.best_epoch == 0);
        CHECK(st.since_improvement == 1);
    }
    SUBCASE("snapshot is the best epoch's params") {
        EarlyStopState st;
        st.patience = 2;
        auto p = params;
        const double metrics[] = {5.0, 3.0, 4.0, 4.0, 4.0};
        ModelParams at_best;
        for (std::size_t e = 0; e < 5; ++e) {
            p.weights.data()[0] = static_cast<double>(e);
            if (e == 1) at_best = p;
            const auto d = early_stop_update(st, metrics[e], e, p);
            CHECK((d == StopDecision::Stop) == (e == 4));
        }
        CHECK(st.snapshot == at_best);
        CHECK(st.best == 3.0);
    }
}

TEST_CASE("fit reaches full accuracy on separable data") {
    const auto data = testing::sine_vs_square(20, 32, 5);
    const auto targets = hard_targets(data);
    for (LossKind loss : {LossKind{CrossEntropy{}}, LossKind{LabelSmoothing{0.5}}}) {
        TrainConfig cfg;
        cfg.max_epochs = 100;
        cfg.patience = 80;
        cfg.loss = loss;
        cfg.seed = 3;
        const auto r = fit(init_params(3, 2, 3), data, targets, cfg);
        INFO(to_string(loss));
        const bool reached = std::any_of(r.history.begin(), r.history.end(),
                                         [](const EpochRecord& e) { return e.accuracy == 1.0; });
        CHECK(reached);
        for (const auto& e : r.history) CHECK(std::isfinite(e.loss));
        const auto z = predict_logits(r.params, data.as_batch());
        std::size_t correct = 0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            correct += (z[i * 2 + 1] > z[i * 2]) == (data.classes[i] == 1);
        }
        CHECK(correct == data.size());
        CHECK(r.history.front().lr == 0.01);
        CHECK(r.history.at(35).lr == 0.005);
    }
}

TEST_CASE("fit is deterministic and honors the snapshot") {
    const auto data = testing::sine_vs_square(12, 24, 9);
    const auto targets = hard_targets(data);
    NetworkConfig small;
    small.filters = 4;
    small.bottleneck = 4;
    small.kernel_sizes = {9, 5, 3};
    TrainConfig cfg;
    cfg.max_epochs = 12;
    cfg.patience = 5;
    cfg.batch_size = 5;
    cfg.seed = 21;
    std::vector<EpochRecord> seen;
    const auto a = fit(init_params(small, 2), data, targets, cfg, [&](const EpochRecord& e) { seen.push_back(e); });
    const auto b = fit(init_params(small, 2), data, targets, cfg);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].loss == b.history[i].loss);
        CHECK(a.history[i].accuracy == b.history[i].accuracy);
    }
    CHECK(a.params == b.params);
    CHECK(seen.size() == a.history.size());
    const double min_loss =
        std::min_element(a.history.begin(), a.history.end(), [](auto& x, auto& y) { return x.loss < y.loss; })->loss;
    CHECK(a.best_loss == min_loss);
    CHECK(a.history[a.best_epoch].loss == a.best_loss);
}

TEST_CASE("vanishing learning rate leaves weights in place") {
    const auto data = testing::sine_vs_square(10, 20, 1);
    const auto targets = hard_targets(data);
    TrainConfig cfg;
    cfg.max_epochs = 1;
    cfg.patience = 1;
    cfg.base_lr = 1e-12;
    const auto init = init_params(3, 2, 8);
    const auto r = fit(init, data, targets, cfg);
    CHECK(max_abs_diff(r.params.weights.data(), init.weights.data()) < 1e-6);
}

TEST_CASE("fit errors") {
    const auto data = testing::sine_vs_square(6, 16, 1);
    auto targets = hard_targets(data);
    NetworkConfig small;
    small.filters = 2;
    small.bottleneck = 2;
    small.kernel_sizes = {3, 3, 3};
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.patience = 2;
    const auto init = init_params(small, 1);
    SeriesDataset empty = data;
    empty.series.clear();
    empty.classes.clear();
    CHECK_THROWS_AS(fit(init, empty, {}, cfg), std::invalid_argument);
    CHECK_THROWS_AS(fit(init, data, std::span(targets).first(3), cfg), std::invalid_argument);
    cfg.loss = CalibratedDistillation{};
    CHECK_THROWS_AS(fit(init, data, targets, cfg), std::invalid_argument);
    cfg.loss = CrossEntropy{};
    SUBCASE("blow-up aborts with a diagnostic") {
        cfg.base_lr = 1e300;
        cfg.max_epochs = 20;
        cfg.patience = 20;
        cfg.batch_size = 2;
        std::string what;
        try {
            fit(init, data, targets, cfg);
        } catch (const TrainingAborted& e) {
            what = e.what();
        }
        CHECK(what.find("epoch") != std::string::npos);
    }
}
