#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kdc/evalstats.hpp"
#include "support/oracles.hpp"

using namespace kdc;

namespace {

ResultMatrix matrix(std::size_t D, std::size_t K, std::vector<double> values) {
    ResultMatrix m;
    for (std::size_t k = 0; k < K; ++k) m.methods.push_back("m" + std::to_string(k));
    for (std::size_t d = 0; d < D; ++d) m.datasets.push_back("d" + std::to_string(d));
    m.values = std::move(values);
    return m;
}

// Hand computation: sum of squared rank-sum deviations.
double friedman_oracle(const std::vector<std::vector<double>>& ranks) {
    const double D = static_cast<double>(ranks.size());
    const double K = static_cast<double>(ranks[0].size());
    double stat = 0.0;
    for (std::size_t k = 0; k < ranks[0].size(); ++k) {
        double sum = 0.0;
        for (const auto& row : ranks) sum += row[k];
        stat += sum * sum;
    }
    return 12.0 / (D * K * (K + 1)) * stat - 3.0 * D * (K + 1);
}

}  // namespace

TEST_CASE("accuracy") {
    const std::vector<std::size_t> truth{0, 1, 2, 1};
    CHECK(accuracy(truth, truth) == 1.0);
    CHECK(accuracy(std::vector<std::size_t>{1, 0, 0, 0}, truth) == 0.0);
    CHECK(accuracy(std::vector<std::size_t>{0, 1, 2, 0}, truth) == 0.75);
    CHECK_THROWS_AS(accuracy(std::vector<std::size_t>{0}, truth), std::invalid_argument);
    CHECK_THROWS_AS(accuracy(std::vector<std::size_t>{}, std::vector<std::size_t>{}), std::invalid_argument);
}

TEST_CASE("ResultMatrix validation") {
    CHECK_NOTHROW(matrix(2, 2, {0.5, 0.6, 1.0, 0.0}).validate());
    CHECK_THROWS_AS(matrix(2, 2, {0.5, 0.6, 1.0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(matrix(2, 2, {0.5, 0.6, 1.1, 0.0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(matrix(2, 2, {0.5, 0.6, std::nan(""), 0.0}).validate(), std::invalid_argument);
}

TEST_CASE("rank_rows") {
    const auto r = rank_rows(matrix(2, 4, {0.9, 0.8, 0.8, 0.1, 0.5, 0.5, 0.5, 0.5}));
    CHECK(r == std::vector<double>{1, 2.5, 2.5, 4, 2.5, 2.5, 2.5, 2.5});
}

TEST_CASE("friedman_test") {
    SUBCASE("hand example K=3 D=4") {
        const auto m = matrix(4, 3, {0.9, 0.8, 0.7, 0.95, 0.6, 0.5, 0.99, 0.98, 0.1, 0.7, 0.6, 0.55});
        const auto f = friedman_test(m);
        CHECK(f.statistic == 8.0);
        CHECK(f.dof == 2);
        CHECK(f.p_value == doctest::Approx(std::exp(-4.0)).epsilon(1e-12));
        CHECK(f.average_ranks == std::vector<double>{1, 2, 3});
    }
    SUBCASE("all tied") {
        const auto f = friedman_test(matrix(3, 4, std::vector<double>(12, 0.7)));
        CHECK(f.statistic == 0.0);
        CHECK(f.p_value == 1.0);
    }
    SUBCASE("matches the textbook formula, invariant to permutation and monotone maps") {
        Rng rng(10);
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t D = 2 + rng.below(10), K = 2 + rng.below(5);
            std::vector<double> v(D * K);
            for (double& x : v) x = std::round(rng.uniform() * 20.0) / 20.0;
            const auto m = matrix(D, K, v);
            const auto f = friedman_test(m);
            const auto ranks = rank_rows(m);
            std::vector<std::vector<double>> rr(D, std::vector<double>(K));
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t k = 0; k < K; ++k) {
                    rr[d][k] = ranks[d * K + k];
                }
            }
            CHECK(f.statistic == doctest::Approx(friedman_oracle(rr)).epsilon(1e-9).scale(1.0));
            CHECK(f.p_value >= 0.0);
            CHECK(f.p_value <= 1.0);
            const double total = std::accumulate(f.average_ranks.begin(), f.average_ranks.end(), 0.0);
            CHECK(total == doctest::Approx(static_cast<double>(K * (K + 1)) / 2.0));

            auto perm = rng.permutation(K);
            auto pm = m;
            auto mono = m;
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t k = 0; k < K; ++k) {
                    pm.values[d * K + k] = m.at(d, perm[k]);
                    mono.values[d * K + k] = std::pow(m.at(d, k), 3.0);
                }
            }
            const auto fp = friedman_test(pm);
            CHECK(fp.statistic == doctest::Approx(f.statistic).epsilon(1e-12).scale(1.0));
            for (std::size_t k = 0; k < K; ++k) CHECK(fp.average_ranks[k] == doctest::Approx(f.average_ranks[perm[k]]));
            CHECK(friedman_test(mono).statistic == doctest::Approx(f.statistic).epsilon(1e-12).scale(1.0));
        }
    }
    CHECK_THROWS_AS(friedman_test(matrix(1, 3, {0.1, 0.2, 0.3})), std::invalid_argument);
    CHECK_THROWS_AS(friedman_test(matrix(3, 1, {0.1, 0.2, 0.3})), std::invalid_argument);
}

TEST_CASE("wilcoxon_signed_rank examples") {
    std::vector<double> b(10);
    std::iota(b.begin(), b.end(), 0.0);
    std::vector<double> a = b;
    CHECK_THROWS_AS(wilcoxon_signed_rank(a, b), std::invalid_argument);
    for (double& x : a) x += 1.0;
    const auto w = wilcoxon_signed_rank(a, b);
    CHECK(w.statistic == 0.0);
    CHECK(w.w_plus == 55.0);
    CHECK(w.n == 10);
    CHECK(w.p_value < 0.01);
    const auto swapped = wilcoxon_signed_rank(b, a);
    CHECK(swapped.p_value == w.p_value);
    CHECK(swapped.w_minus == 55.0);

    // Any other sign pattern at n = 10 gives a larger p.
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> c(10);
        for (std::size_t i = 0; i < 10; ++i) c[i] = b[i] + (rng.below(2) ? 1.0 : -1.0) * (1.0 + i);
        if (std::all_of(c.begin(), c.end(), [&, i = 0](double x) mutable { return x > b[i++]; })) continue;
        CHECK(wilcoxon_signed_rank(c, b).p_value >= w.p_value);
    }

    SUBCASE("zeros are discarded and counted") {
        std::vector<double> x{1, 2, 3, 4, 5, 6, 7}, y{1, 2, 2.5, 3, 4.5, 7, 8};
        const auto r = wilcoxon_signed_rank(x, y);
        CHECK(r.zeros == 2);
        CHECK(r.n == 5);
    }
    CHECK_THROWS_AS(wilcoxon_signed_rank(std::vector<double>{1, 2, 3, 4}, std::vector<double>{0, 0, 0, 0}),
                    std::invalid_argument);
    CHECK_THROWS_AS(wilcoxon_signed_rank(std::vector<double>{1, 2}, std::vector<double>{0}), std::invalid_argument);
}

TEST_CASE("wilcoxon bounds and symmetry") {
    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 5 + rng.below(40);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = std::round(rng.uniform() * 50) / 50;
            b[i] = std::round(rng.uniform() * 50) / 50;
        }
        WilcoxonResult r;
        try {
            r = wilcoxon_signed_rank(a, b);
        } catch (const std::invalid_argument&) {
            continue;
        }
        CHECK(r.p_value >= 0.0);
        CHECK(r.p_value <= 1.0);
        CHECK(r.statistic <= r.n * (r.n + 1) / 2.0);
        CHECK(r.w_plus + r.w_minus == doctest::Approx(r.n * (r.n + 1) / 2.0));
        CHECK(r.n + r.zeros == n);
        CHECK(wilcoxon_signed_rank(b, a).p_value == doctest::Approx(r.p_value).epsilon(1e-14));
    }
}

TEST_CASE("exact signed-rank p against the subset-sum oracle") {
    Rng rng(5);
    for (std::size_t n = 1; n <= 12; ++n) {
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<double> a(n), b(n, 0.0);
            auto perm = rng.permutation(n);
            for (std::size_t i = 0; i < n; ++i) a[i] = (rng.below(2) ? 1.0 : -1.0) * static_cast<double>(perm[i] + 1);
            double wp = 0, wm = 0;
            for (double d : a) (d > 0 ? wp : wm) += std::abs(d);
            const auto w = static_cast<std::size_t>(std::min(wp, wm));
            CHECK(wilcoxon_exact_p(a, b) == doctest::Approx(oracle::wilcoxon_exact_untied(n, w)).epsilon(1e-12));
        }
    }
    std::vector<double> big(21, 1.0), zero(21, 0.0);
    CHECK_THROWS_AS(wilcoxon_exact_p(big, zero), std::invalid_argument);
}

TEST_CASE("normal approximation tracks exact enumeration for n <= 12") {
    Rng rng(8);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 5 + rng.below(8);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            b[i] = rng.uniform();
            a[i] = b[i] + rng.uniform(-0.1, 0.2);
        }
        worst = std::max(worst, std::abs(wilcoxon_signed_rank(a, b).p_value - wilcoxon_exact_p(a, b)));
    }
    INFO("worst |approx - exact| = " << worst);
    CHECK(worst <= 0.02);
}

TEST_CASE("heavily tied differences stay within a looser bound") {
    // Five distinct magnitudes make the exact null distribution lumpy.
    Rng rng(8);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 5 + rng.below(8);
        std::vector<double> a(n), b(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double step = static_cast<double>(1 + rng.below(5));
            a[i] = rng.below(3) == 0 ? -step : step;
        }
        worst = std::max(worst, std::abs(wilcoxon_signed_rank(a, b).p_value - wilcoxon_exact_p(a, b)));
    }
    INFO("worst |approx - exact| = " << worst);
    CHECK(worst <= 0.08);
}

TEST_CASE("holm_correct") {
    CHECK(holm_correct(std::vector<double>{0.001}) == std::vector<bool>{true});
    CHECK(holm_correct(std::vector<double>{0.01, 0.04}) == std::vector<bool>{true, true});
    CHECK(holm_correct(std::vector<double>{0.04, 0.01}) == std::vector<bool>{true, true});
    CHECK(holm_correct(std::vector<double>{0.6, 0.7}) == std::vector<bool>{false, false});
    CHECK(holm_correct(std::vector<double>{0.01, 0.03, 0.04}) == std::vector<bool>{true, false, false});
    CHECK(holm_correct(std::vector<double>{0.02, 0.001}, 0.01) == std::vector<bool>{false, true});
    CHECK_THROWS_AS(holm_correct(std::vector<double>{}), std::invalid_argument);
    CHECK_THROWS_AS(holm_correct(std::vector<double>{1.2}), std::invalid_argument);
    CHECK_THROWS_AS(holm_correct(std::vector<double>{-0.1}), std::invalid_argument);

    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> p(1 + rng.below(10));
        for (double& x : p) x = std::pow(rng.uniform(), 4.0);
        const auto flags = holm_correct(p);
        for (std::size_t i = 0; i < p.size(); ++i) {
            for (std::size_t j = 0; j < p.size(); ++j) {
                if (p[i] < p[j] && flags[j]) CHECK(flags[i]);
            }
        }
    }
}

TEST_CASE("maximal_cliques") {
    auto graph = [](std::size_t n, std::vector<std::pair<std::size_t, std::size_t>> edges) {
        std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
        for (auto [a, b] : edges) adj[a][b] = adj[b][a] = true;
        return adj;
    };
    using Cliques = std::vector<std::vector<std::size_t>>;
    CHECK(maximal_cliques(graph(3, {{0, 1}, {1, 2}})) == Cliques{{0, 1}, {1, 2}});
    CHECK(maximal_cliques(graph(3, {})) == Cliques{{0}, {1}, {2}});
    CHECK(maximal_cliques(graph(4, {{0, 1}, {0, 2}, {1, 2}, {2, 3}})) == Cliques{{0, 1, 2}, {2, 3}});
    CHECK(maximal_cliques(graph(5, {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}, {3, 4}})) ==
          Cliques{{0, 1, 2, 3}, {3, 4}});
}

TEST_CASE("cd_diagram_data") {
    SUBCASE("identical methods form one clique") {
        const auto cd = cd_diagram_data(matrix(10, 3, std::vector<double>(30, 0.8)));
        CHECK(cd.cliques == std::vector<std::vector<std::size_t>>{{0, 1, 2}});
        CHECK(cd.pairs.size() == 3);
        for (const auto& p : cd.pairs) {
            CHECK(p.degenerate);
            CHECK(p.p_value == 1.0);
            CHECK_FALSE(p.reject);
        }
    }
    SUBCASE("a hugely different method is separated") {
        Rng rng(1);
        std::vector<double> v;
        for (int d = 0; d < 20; ++d) {
            const double base = rng.uniform(0.3, 0.5);
            v.push_back(base);
            v.push_back(base + 0.4 + 0.01 * rng.uniform());
        }
        const auto cd = cd_diagram_data(matrix(20, 2, v));
        CHECK(cd.pairs.at(0).reject);
        CHECK(cd.cliques == std::vector<std::vector<std::size_t>>{{0}, {1}});
        CHECK(cd.average_ranks == std::vector<double>{2.0, 1.0});
    }
    SUBCASE("cliques cover every method, ranks sum to K(K+1)/2") {
        Rng rng(12);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t D = 6 + rng.below(20), K = 2 + rng.below(5);
            std::vector<double> v(D * K);
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t k = 0; k < K; ++k) v[d * K + k] = std::min(1.0, 0.5 + 0.08 * k * rng.uniform() + 0.1 * rng.uniform());
            }
            const auto cd = cd_diagram_data(matrix(D, K, v));
            std::vector<bool> covered(K, false);
            for (const auto& c : cd.cliques) {
                for (auto k : c) covered[k] = true;
                for (auto a : c) {
                    for (auto b : c) {
                        if (a >= b) continue;
                        for (const auto& p : cd.pairs) {
                            if (p.a == a && p.b == b) CHECK_FALSE(p.reject);
                        }
                    }
                }
            }
            CHECK(std::all_of(covered.begin(), covered.end(), [](bool x) { return x; }));
            CHECK(cd.pairs.size() == K * (K - 1) / 2);
            const double total = std::accumulate(cd.average_ranks.begin(), cd.average_ranks.end(), 0.0);
            CHECK(total == doctest::Approx(K * (K + 1) / 2.0));
        }
    }
}
