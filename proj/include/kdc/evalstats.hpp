#pragma once

// Accuracy and the nonparametric comparison stack behind critical-difference
// reports: Friedman test over methods, pairwise Wilcoxon signed-rank tests
// with Holm's step-down correction, and the resulting clique structure.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace kdc {

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> truth);

/// D x K accuracies, row-major by dataset.
struct ResultMatrix {
    std::vector<std::string> methods;
    std::vector<std::string> datasets;
    std::vector<double> values;

    std::size_t num_methods() const noexcept { return methods.size(); }
    std::size_t num_datasets() const noexcept { return datasets.size(); }
    double at(std::size_t d, std::size_t k) const { return values[d * methods.size() + k]; }
    void validate() const;
};

/// Per-dataset ranks, 1 = highest accuracy, ties share the average rank.
std::vector<double> rank_rows(const ResultMatrix& m);

struct FriedmanResult {
    double statistic = 0.0;
    double p_value = 1.0;
    std::size_t dof = 0;
    std::vector<double> average_ranks;
};

FriedmanResult friedman_test(const ResultMatrix& m);

struct WilcoxonResult {
    double statistic = 0.0;  ///< min(W+, W-)
    double w_plus = 0.0;
    double w_minus = 0.0;
    double p_value = 1.0;    ///< two-sided
    std::size_t n = 0;       ///< pairs with nonzero difference
    std::size_t zeros = 0;   ///< discarded zero differences
};

/// Paired two-sided signed-rank test. Zero differences are dropped and
/// tied magnitudes get average ranks. p uses the normal approximation with
/// continuity correction, rank-based variance and a fourth-cumulant
/// Edgeworth term. Throws std::invalid_argument when fewer than 5 nonzero
/// differences remain.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

/// Two-sided p by enumerating all 2^n sign assignments (n <= 20).
double wilcoxon_exact_p(std::span<const double> a, std::span<const double> b);

/// Holm step-down; flags in input order.
std::vector<bool> holm_correct(std::span<const double> pvalues, double alpha = 0.05);

struct PairwiseComparison {
    std::size_t a = 0, b = 0;
    double p_value = 1.0;
    bool reject = false;
    bool degenerate = false;  ///< test undefined (too few nonzero differences); p taken as 1
};

struct CdDiagramData {
    std::vector<std::string> methods;
    std::vector<double> average_ranks;
    FriedmanResult friedman;
    std::vector<PairwiseComparison> pairs;
    /// Maximal sets of methods with no significant pairwise difference.
    std::vector<std::vector<std::size_t>> cliques;
    double alpha = 0.05;
};

CdDiagramData cd_diagram_data(const ResultMatrix& m, double alpha = 0.05);

/// Maximal cliques of an undirected graph, each sorted, listed in
/// lexicographic order.
std::vector<std::vector<std::size_t>> maximal_cliques(const std::vector<std::vector<bool>>& adjacency);

}  // namespace kdc
