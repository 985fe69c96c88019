#include "kdc/evalstats.hpp"

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace kdc {

namespace {

// Average ranks (1-based) of `values` sorted ascending.
std::vector<double> average_ranks_ascending(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

struct SignedRanks {
    std::vector<double> ranks;
    std::vector<bool> positive;
    std::size_t zeros = 0;
};

SignedRanks signed_ranks(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples differ in length");
    std::vector<double> mags;
    SignedRanks out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (!std::isfinite(d)) throw std::invalid_argument("wilcoxon: non-finite value");
        if (d == 0.0) {
            ++out.zeros;
            continue;
        }
        mags.push_back(std::abs(d));
        out.positive.push_back(d > 0.0);
    }
    out.ranks = average_ranks_ascending(mags);
    return out;
}

}  // namespace

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> truth) {
    if (predictions.size() != truth.size()) throw std::invalid_argument("accuracy: length mismatch");
    if (truth.empty()) throw std::invalid_argument("accuracy: empty input");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) correct += predictions[i] == truth[i];
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

void ResultMatrix::validate() const {
    if (methods.size() < 2 || datasets.size() < 2) {
        throw std::invalid_argument("result matrix needs at least 2 datasets and 2 methods");
    }
    if (values.size() != methods.size() * datasets.size()) {
        throw std::invalid_argument("result matrix has missing cells");
    }
    for (double v : values) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("result matrix entries must lie in [0, 1]");
    }
}

std::vector<double> rank_rows(const ResultMatrix& m) {
    m.validate();
    const std::size_t K = m.num_methods();
    std::vector<double> out;
    out.reserve(m.values.size());
    std::vector<double> neg(K);
    for (std::size_t d = 0; d < m.num_datasets(); ++d) {
        for (std::size_t k = 0; k < K; ++k) neg[k] = -m.at(d, k);
        const auto r = average_ranks_ascending(neg);
        out.insert(out.end(), r.begin(), r.end());
    }
    return out;
}

FriedmanResult friedman_test(const ResultMatrix& m) {
    const auto ranks = rank_rows(m);
    const std::size_t D = m.num_datasets(), K = m.num_methods();
    FriedmanResult res;
    res.dof = K - 1;
    res.average_ranks.assign(K, 0.0);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t k = 0; k < K; ++k) res.average_ranks[k] += ranks[d * K + k];
    for (double& r : res.average_ranks) r /= static_cast<double>(D);
    const double center = 0.5 * static_cast<double>(K + 1);
    double dev = 0.0;
    for (double r : res.average_ranks) dev += (r - center) * (r - center);
    const double Kd = static_cast<double>(K), Dd = static_cast<double>(D);
    res.statistic = 12.0 * Dd / (Kd * (Kd + 1.0)) * dev;
    if (res.statistic <= 0.0) {
        res.statistic = 0.0;
        res.p_value = 1.0;
    } else {
        const boost::math::chi_squared_distribution<double> chi2(static_cast<double>(res.dof));
        res.p_value = boost::math::cdf(boost::math::complement(chi2, res.statistic));
    }
    return res;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
    const SignedRanks sr = signed_ranks(a, b);
    WilcoxonResult res;
    res.n = sr.ranks.size();
    res.zeros = sr.zeros;
    if (res.n == 0) throw std::invalid_argument("wilcoxon: all differences are zero");
    if (res.n < 5) {
        throw std::invalid_argument("wilcoxon: needs at least 5 nonzero differences, got " + std::to_string(res.n));
    }
    double s2 = 0.0, s4 = 0.0;
    for (std::size_t i = 0; i < res.n; ++i) {
        const double r = sr.ranks[i];
        (sr.positive[i] ? res.w_plus : res.w_minus) += r;
        s2 += r * r;
        s4 += r * r * r * r;
    }
    res.statistic = std::min(res.w_plus, res.w_minus);
    const double mean = 0.25 * static_cast<double>(res.n * (res.n + 1));
    const double sd = std::sqrt(s2 / 4.0);
    // Excess kurtosis of sum_i r_i B_i with B_i ~ Bernoulli(1/2).
    const double gamma2 = -(s4 / 8.0) / (sd * sd * sd * sd);
    const double z = (res.statistic - mean + 0.5) / sd;
    const boost::math::normal_distribution<double> normal;
    double tail = boost::math::cdf(normal, z) - boost::math::pdf(normal, z) * (gamma2 / 24.0) * (z * z * z - 3.0 * z);
    res.p_value = std::clamp(2.0 * tail, 0.0, 1.0);
    return res;
}

double wilcoxon_exact_p(std::span<const double> a, std::span<const double> b) {
    const SignedRanks sr = signed_ranks(a, b);
    const std::size_t n = sr.ranks.size();
    if (n == 0) throw std::invalid_argument("wilcoxon: all differences are zero");
    if (n > 20) throw std::invalid_argument("wilcoxon_exact_p: n > 20");
    double w_plus = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += sr.ranks[i];
        if (sr.positive[i]) w_plus += sr.ranks[i];
    }
    const double observed = std::min(w_plus, total - w_plus);
    const double tol = 1e-9;
    std::size_t at_or_below = 0;
    const std::size_t patterns = std::size_t{1} << n;
    for (std::size_t mask = 0; mask < patterns; ++mask) {
        double w = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (mask >> i & 1u) w += sr.ranks[i];
        }
        if (w <= observed + tol) ++at_or_below;
    }
    return std::min(1.0, 2.0 * static_cast<double>(at_or_below) / static_cast<double>(patterns));
}

std::vector<bool> holm_correct(std::span<const double> pvalues, double alpha) {
    if (pvalues.empty()) throw std::invalid_argument("holm_correct: no p-values");
    for (double p : pvalues) {
        if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("holm_correct: p-value outside [0, 1]");
    }
    const std::size_t m = pvalues.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
    std::vector<bool> reject(m, false);
    for (std::size_t i = 0; i < m; ++i) {
        if (pvalues[order[i]] > alpha / static_cast<double>(m - i)) break;
        reject[order[i]] = true;
    }
    return reject;
}

std::vector<std::vector<std::size_t>> maximal_cliques(const std::vector<std::vector<bool>>& adj) {
    const std::size_t n = adj.size();
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> r;
    std::function<void(std::vector<std::size_t>, std::vector<std::size_t>)> expand =
        [&](std::vector<std::size_t> p, std::vector<std::size_t> x) {
            if (p.empty() && x.empty()) {
                auto c = r;
                std::sort(c.begin(), c.end());
                out.push_back(std::move(c));
                return;
            }
            // Pivot: vertex of p or x with most neighbours in p.
            std::size_t pivot = p.empty() ? x.front() : p.front();
            std::size_t best = 0;
            for (const auto* set : {&p, &x}) {
                for (auto u : *set) {
                    std::size_t cnt = 0;
                    for (auto v : p) cnt += adj[u][v];
                    if (cnt > best) {
                        best = cnt;
                        pivot = u;
                    }
                }
            }
            const auto candidates = p;
            for (auto v : candidates) {
                if (adj[pivot][v]) continue;
                std::vector<std::size_t> np, nx;
                for (auto u : p) if (adj[v][u]) np.push_back(u);
                for (auto u : x) if (adj[v][u]) nx.push_back(u);
                r.push_back(v);
                expand(np, nx);
                r.pop_back();
                p.erase(std::find(p.begin(), p.end(), v));
                x.push_back(v);
            }
        };
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    if (n > 0) expand(all, {});
    std::sort(out.begin(), out.end());
    return out;
}

CdDiagramData cd_diagram_data(const ResultMatrix& m, double alpha) {
    CdDiagramData out;
    out.alpha = alpha;
    out.methods = m.methods;
    out.friedman = friedman_test(m);
    out.average_ranks = out.friedman.average_ranks;
    const std::size_t K = m.num_methods(), D = m.num_datasets();
    std::vector<double> pvals;
    for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = i + 1; j < K; ++j) {
            std::vector<double> a(D), b(D);
            for (std::size_t d = 0; d < D; ++d) {
                a[d] = m.at(d, i);
                b[d] = m.at(d, j);
            }
            PairwiseComparison pc;
            pc.a = i;
            pc.b = j;
            try {
                pc.p_value = wilcoxon_signed_rank(a, b).p_value;
            } catch (const std::invalid_argument&) {
                pc.p_value = 1.0;
                pc.degenerate = true;
            }
            pvals.push_back(pc.p_value);
            out.pairs.push_back(pc);
        }
    }
    const auto flags = holm_correct(pvals, alpha);
    std::vector<std::vector<bool>> adj(K, std::vector<bool>(K, false));
    for (std::size_t k = 0; k < out.pairs.size(); ++k) {
        auto& pc = out.pairs[k];
        pc.reject = flags[k];
        if (!pc.reject) adj[pc.a][pc.b] = adj[pc.b][pc.a] = true;
    }
    out.cliques = maximal_cliques(adj);
    return out;
}

}  // namespace kdc
