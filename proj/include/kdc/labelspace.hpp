#pragma once

// Probability-simplex label types and the label transformations used by the
// training regimes: softmax (plain and tempered), label smoothing, and the
// two calibration strategies for wrongly predicted teacher labels.

#include <cstddef>
#include <span>
#include <vector>

namespace kdc {

/// Zero-based class index.
struct ClassIndex {
    std::size_t value = 0;

    friend bool operator==(ClassIndex, ClassIndex) = default;
};

/// A probability vector on the (C-1)-simplex: C >= 2 entries, all >= 0,
/// summing to one within `kSumTolerance`.
class Label {
public:
    static constexpr double kSumTolerance = 1e-9;

    /// Validates and wraps `probs`. Throws std::invalid_argument on any
    /// simplex violation.
    explicit Label(std::vector<double> probs);

    std::size_t size() const noexcept { return probs_.size(); }
    double operator[](std::size_t i) const { return probs_[i]; }
    std::span<const double> probs() const noexcept { return probs_; }
    const std::vector<double>& values() const noexcept { return probs_; }

    /// Index of the largest entry; lowest index wins ties.
    std::size_t argmax() const noexcept;

    /// Index of the largest entry, with ties resolved toward `preferred`.
    std::size_t argmax_toward(std::size_t preferred) const;

    /// True when exactly one entry is 1 and the rest are 0.
    bool is_one_hot() const noexcept;

    friend bool operator==(const Label&, const Label&) = default;

private:
    std::vector<double> probs_;
};

/// Raw pre-softmax scores. Entries must be finite.
class Logits {
public:
    explicit Logits(std::vector<double> scores);

    std::size_t size() const noexcept { return scores_.size(); }
    double operator[](std::size_t i) const { return scores_[i]; }
    std::span<const double> scores() const noexcept { return scores_; }

private:
    std::vector<double> scores_;
};

enum class CalibrationStrategy { Translate, Reorder };

Label hard_label(ClassIndex c, std::size_t num_classes);

Label softmax(const Logits& z);

/// softmax(z / tau). tau == 1 takes the same code path as softmax().
Label softmax_tempered(const Logits& z, double tau);

/// Mixes a one-hot label with the uniform distribution: (1-eps) y + eps/C.
Label smooth_hard_label(const Label& hard, double eps);

/// Euclidean distance between two labels of equal dimension.
double label_distance(const Label& a, const Label& b);

/// Minimum distance between a hard label and any simplex point whose argmax
/// is a different class: 1/sqrt(2), for every C >= 2.
constexpr double min_wrong_distance() noexcept { return 0.70710678118654752440; }

/// True when the teacher label's argmax (lowest-index tie-break) differs from
/// the hard label's class.
bool needs_calibration(const Label& teacher, const Label& hard);

/// Moves a wrong teacher label straight toward its hard label by exactly
/// min_wrong_distance(). Requires needs_calibration(teacher, hard).
Label calibrate_translate(const Label& teacher, const Label& hard);

/// Gives class `c` the largest value and shifts every value ranked above c's
/// former rank one rank down. The output is a permutation of the input.
/// Requires argmax(teacher) != c.
Label calibrate_reorder(const Label& teacher, ClassIndex c);

/// Calibrates every wrongly predicted label in the set; correctly predicted
/// labels are returned unchanged.
std::vector<Label> calibrate_set(std::span<const Label> teacher, std::span<const Label> hard,
                                 CalibrationStrategy strategy);

}  // namespace kdc
