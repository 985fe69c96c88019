#include "kdc/labelspace.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace kdc {

namespace {

// Entries below this after translation are floating-point drift.
constexpr double kClampFloor = 1e-12;

void require_same_size(const Label& a, const Label& b, const char* what) {
    if (a.size() != b.size()) {
        throw std::invalid_argument(std::string(what) + ": dimension mismatch (" +
                                    std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
}

Label softmax_scaled(std::span<const double> z, double inv_tau) {
    const double zmax = *std::max_element(z.begin(), z.end());
    std::vector<double> out(z.size());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp((z[i] - zmax) * inv_tau);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return Label(std::move(out));
}

}  // namespace

Label::Label(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.size() < 2) {
        throw std::invalid_argument("Label: need at least 2 classes, got " +
                                    std::to_string(probs_.size()));
    }
    double total = 0.0;
    for (double p : probs_) {
        if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
            throw std::invalid_argument("Label: entry outside [0, 1]: " + std::to_string(p));
        }
        total += p;
    }
    if (std::abs(total - 1.0) > kSumTolerance) {
        throw std::invalid_argument("Label: entries sum to " + std::to_string(total) +
                                    ", expected 1");
    }
}

std::size_t Label::argmax() const noexcept {
    return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) -
                                    probs_.begin());
}

std::size_t Label::argmax_toward(std::size_t preferred) const {
    if (preferred >= probs_.size()) throw std::out_of_range("Label::argmax_toward: bad index");
    const std::size_t best = argmax();
    return probs_[preferred] >= probs_[best] ? preferred : best;
}

bool Label::is_one_hot() const noexcept {
    std::size_t ones = 0;
    for (double p : probs_) {
        if (p == 1.0) {
            ++ones;
        } else if (p != 0.0) {
            return false;
        }
    }
    return ones == 1;
}

Logits::Logits(std::vector<double> scores) : scores_(std::move(scores)) {
    if (scores_.empty()) throw std::invalid_argument("Logits: empty score vector");
    for (double s : scores_) {
        if (!std::isfinite(s)) throw std::invalid_argument("Logits: non-finite score");
    }
}

Label hard_label(ClassIndex c, std::size_t num_classes) {
    if (c.value >= num_classes) {
        throw std::out_of_range("hard_label: class " + std::to_string(c.value) +
                                " out of range for C=" + std::to_string(num_classes));
    }
    std::vector<double> probs(num_classes, 0.0);
    probs[c.value] = 1.0;
    return Label(std::move(probs));
}

Label softmax(const Logits& z) { return softmax_tempered(z, 1.0); }

Label softmax_tempered(const Logits& z, double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw std::invalid_argument("softmax_tempered: tau must be positive and finite");
    }
    return softmax_scaled(z.scores(), 1.0 / tau);
}

Label smooth_hard_label(const Label& hard, double eps) {
    if (!(eps >= 0.0 && eps <= 1.0)) {
        throw std::invalid_argument("smooth_hard_label: eps outside [0, 1]");
    }
    if (!hard.is_one_hot()) throw std::invalid_argument("smooth_hard_label: label is not one-hot");
    const double uniform = eps / static_cast<double>(hard.size());
    std::vector<double> out(hard.size());
    for (std::size_t i = 0; i < hard.size(); ++i) {
        out[i] = (1.0 - eps) * hard[i] + uniform;
    }
    return Label(std::move(out));
}

double label_distance(const Label& a, const Label& b) {
    require_same_size(a, b, "label_distance");
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sq += d * d;
    }
    return std::sqrt(sq);
}

bool needs_calibration(const Label& teacher, const Label& hard) {
    require_same_size(teacher, hard, "needs_calibration");
    if (!hard.is_one_hot()) throw std::invalid_argument("needs_calibration: hard label not one-hot");
    return teacher.argmax() != hard.argmax();
}

Label calibrate_translate(const Label& teacher, const Label& hard) {
    if (!needs_calibration(teacher, hard)) {
        throw std::invalid_argument("calibrate_translate: label is already correctly classified");
    }
    const double omega = min_wrong_distance() / label_distance(hard, teacher);
    std::vector<double> out(teacher.size());
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = teacher[i] + omega * (hard[i] - teacher[i]);
        if (v < kClampFloor) v = 0.0;
        out[i] = v;
        total += v;
    }
    if (total != 1.0) {
        for (double& v : out) v /= total;
    }
    return Label(std::move(out));
}

Label calibrate_reorder(const Label& teacher, ClassIndex c) {
    const std::size_t n = teacher.size();
    if (c.value >= n) throw std::out_of_range("calibrate_reorder: class out of range");
    if (teacher.argmax() == c.value) {
        throw std::invalid_argument("calibrate_reorder: label is already correctly classified");
    }
    // Ranked indices, descending by value; equal values keep index order.
    std::vector<std::size_t> ranked(n);
    std::iota(ranked.begin(), ranked.end(), std::size_t{0});
    std::stable_sort(ranked.begin(), ranked.end(),
                     [&](std::size_t a, std::size_t b) { return teacher[a] > teacher[b]; });
    const auto c_rank = static_cast<std::size_t>(
        std::find(ranked.begin(), ranked.end(), c.value) - ranked.begin());

    std::vector<double> out(teacher.values());
    const double top = teacher[ranked[0]];
    for (std::size_t r = 0; r < c_rank; ++r) {
        out[ranked[r]] = teacher[ranked[r + 1]];
    }
    out[c.value] = top;
    return Label(std::move(out));
}

std::vector<Label> calibrate_set(std::span<const Label> teacher, std::span<const Label> hard,
                                 CalibrationStrategy strategy) {
    if (teacher.size() != hard.size()) {
        throw std::invalid_argument("calibrate_set: " + std::to_string(teacher.size()) +
                                    " teacher labels vs " + std::to_string(hard.size()) +
                                    " hard labels");
    }
    std::vector<Label> out;
    out.reserve(teacher.size());
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        if (!needs_calibration(teacher[i], hard[i])) {
            out.push_back(teacher[i]);
        } else if (strategy == CalibrationStrategy::Translate) {
            out.push_back(calibrate_translate(teacher[i], hard[i]));
        } else {
            out.push_back(calibrate_reorder(teacher[i], ClassIndex{hard[i].argmax()}));
        }
    }
    return out;
}

}  // namespace kdc
