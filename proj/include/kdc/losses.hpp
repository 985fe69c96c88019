#pragma once

// Loss values and gradients with respect to logits for the four training
// regimes. Every gradient assumes the predicted label is softmax(logits), so
// the softmax Jacobian is folded in and no division by a probability occurs.
//
// Two call styles exist:
//  - probability form (ce_loss, ls_loss, ...): takes labels, used for
//    evaluation and checks; a zero probability under a log is an error.
//  - fused logits form (loss_from_logits, batch_loss): used by training,
//    computes log-softmax directly from the logits.

#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kdc/labelspace.hpp"

namespace kdc {

struct CrossEntropy {
    friend bool operator==(const CrossEntropy&, const CrossEntropy&) = default;
};
struct LabelSmoothing {
    double eps = 0.5;
    friend bool operator==(const LabelSmoothing&, const LabelSmoothing&) = default;
};
struct KnowledgeDistillation {
    double eps = 0.5;
    double tau = 8.0;
    friend bool operator==(const KnowledgeDistillation&, const KnowledgeDistillation&) = default;
};
struct CalibratedDistillation {
    friend bool operator==(const CalibratedDistillation&, const CalibratedDistillation&) = default;
};

using LossKind = std::variant<CrossEntropy, LabelSmoothing, KnowledgeDistillation, CalibratedDistillation>;

/// Throws std::invalid_argument when eps or tau are out of range.
void validate(const LossKind& kind);

/// "ce", "ls:<eps>", "kd:<eps>:<tau>", "kdc".
std::string to_string(const LossKind& kind);
LossKind parse_loss_kind(const std::string& text);

/// True for kinds that need a soft target (teacher tempered label or
/// calibrated label) besides the hard class.
bool needs_soft_target(const LossKind& kind);

struct LossValue {
    double value = 0.0;
    std::vector<double> grad_logits;
};

/// -log(y_hat[c]). Throws std::domain_error when y_hat[c] == 0.
LossValue ce_loss(const Label& hard, const Label& predicted);

/// (1-eps) CE + eps * (-(1/C) sum log y_hat_i). Throws std::domain_error when
/// any y_hat_i == 0.
LossValue ls_loss(const Label& hard, const Label& predicted, double eps);

/// sum p_i log(p_i/q_i) with 0 log 0 := 0. Gradient is w.r.t. the logits of q.
/// Throws std::domain_error when q_i == 0 where p_i > 0.
LossValue kl_div(const Label& p, const Label& q);

/// (1-eps) CE(hard, y_hat) + eps tau^2 KL(teacher_tau, y_hat_tau). The two
/// predicted labels must come from the same student logits (y_hat_tau at
/// temperature tau); the gradient accounts for both paths.
LossValue kd_loss(const Label& hard, const Label& predicted, const Label& teacher_tau,
                  const Label& predicted_tau, double eps, double tau);

/// KL(calibrated teacher, y_hat); no temperature and no hard-label term.
LossValue kdc_loss(const Label& calibrated, const Label& predicted);

/// Per-sample training target. `soft` is the teacher's tempered label for
/// KnowledgeDistillation, the calibrated label for CalibratedDistillation,
/// and empty otherwise.
struct SampleTarget {
    std::size_t cls = 0;
    std::vector<double> soft;
};

/// Fused logits-form loss for one sample.
LossValue loss_from_logits(const LossKind& kind, std::span<const double> logits,
                           const SampleTarget& target);

struct BatchLoss {
    double mean = 0.0;
    std::vector<double> grad;  ///< rows x C, already divided by the batch size
};

/// Mean loss over `rows` samples of a row-major rows x C logit matrix.
BatchLoss batch_loss(const LossKind& kind, std::span<const double> logits, std::size_t rows,
                     std::span<const SampleTarget> targets);

}  // namespace kdc
