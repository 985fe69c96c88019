#include "kdc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kdc/soft_label_io.hpp"

namespace kdc {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void check_eps(double eps) {
    if (!(eps >= 0.0 && eps <= 1.0)) throw std::invalid_argument("loss: eps outside [0, 1]");
}

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("loss: tau must be > 0");
}

void require_same_size(const Label& a, const Label& b, const char* what) {
    if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": dimension mismatch");
}

std::size_t hard_class(const Label& hard, const char* what) {
    if (!hard.is_one_hot()) throw std::invalid_argument(std::string(what) + ": hard label not one-hot");
    return hard.argmax();
}

// out = log softmax(z / tau)
void log_softmax(std::span<const double> z, double inv_tau, std::vector<double>& out) {
    const double zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    out.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = (z[i] - zmax) * inv_tau;
        total += std::exp(out[i]);
    }
    const double log_total = std::log(total);
    for (double& v : out) v -= log_total;
}

}  // namespace

void validate(const LossKind& kind) {
    std::visit(Overloaded{
                   [](const CrossEntropy&) {},
                   [](const LabelSmoothing& k) { check_eps(k.eps); },
                   [](const KnowledgeDistillation& k) {
                       check_eps(k.eps);
                       check_tau(k.tau);
                   },
                   [](const CalibratedDistillation&) {},
               },
               kind);
}

std::string to_string(const LossKind& kind) {
    return std::visit(Overloaded{
                          [](const CrossEntropy&) { return std::string("ce"); },
                          [](const LabelSmoothing& k) { return "ls:" + format_double(k.eps); },
                          [](const KnowledgeDistillation& k) {
                              return "kd:" + format_double(k.eps) + ":" + format_double(k.tau);
                          },
                          [](const CalibratedDistillation&) { return std::string("kdc"); },
                      },
                      kind);
}

LossKind parse_loss_kind(const std::string& text) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto colon = text.find(':', start);
        parts.push_back(text.substr(start, colon == std::string::npos ? std::string::npos
                                                                       : colon - start));
        if (colon == std::string::npos) break;
        start = colon + 1;
    }
    LossKind kind;
    if (parts[0] == "ce" && parts.size() == 1) {
        kind = CrossEntropy{};
    } else if (parts[0] == "ls" && parts.size() <= 2) {
        kind = LabelSmoothing{parts.size() == 2 ? parse_double(parts[1]) : 0.5};
    } else if (parts[0] == "kd" && parts.size() <= 3) {
        KnowledgeDistillation k;
        if (parts.size() >= 2) k.eps = parse_double(parts[1]);
        if (parts.size() == 3) k.tau = parse_double(parts[2]);
        kind = k;
    } else if (parts[0] == "kdc" && parts.size() == 1) {
        kind = CalibratedDistillation{};
    } else {
        throw std::invalid_argument("unknown loss kind '" + text + "'");
    }
    validate(kind);
    return kind;
}

bool needs_soft_target(const LossKind& kind) {
    return std::holds_alternative<KnowledgeDistillation>(kind) ||
           std::holds_alternative<CalibratedDistillation>(kind);
}

LossValue ce_loss(const Label& hard, const Label& predicted) {
    require_same_size(hard, predicted, "ce_loss");
    const std::size_t c = hard_class(hard, "ce_loss");
    if (predicted[c] == 0.0) throw std::domain_error("ce_loss: predicted probability of true class is 0");
    LossValue out;
    out.value = -std::log(predicted[c]);
    out.grad_logits.assign(predicted.values().begin(), predicted.values().end());
    out.grad_logits[c] -= 1.0;
    return out;
}

LossValue ls_loss(const Label& hard, const Label& predicted, double eps) {
    check_eps(eps);
    require_same_size(hard, predicted, "ls_loss");
    const std::size_t c = hard_class(hard, "ls_loss");
    const double n = static_cast<double>(predicted.size());
    double mean_log = 0.0;
    for (double p : predicted.probs()) {
        if (p == 0.0) throw std::domain_error("ls_loss: a predicted probability is 0");
        mean_log += std::log(p);
    }
    mean_log /= n;
    LossValue out;
    out.value = (1.0 - eps) * -std::log(predicted[c]) + eps * -mean_log;
    // d/dz of CE against the smoothed target (1-eps) y_h + eps/C.
    out.grad_logits.resize(predicted.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        out.grad_logits[i] = predicted[i] - (eps / n + (i == c ? 1.0 - eps : 0.0));
    }
    return out;
}

LossValue kl_div(const Label& p, const Label& q) {
    require_same_size(p, q, "kl_div");
    LossValue out;
    double value = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) throw std::domain_error("kl_div: q_i == 0 where p_i > 0");
        value += p[i] * std::log(p[i] / q[i]);
    }
    out.value = std::max(value, 0.0);
    out.grad_logits.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) out.grad_logits[i] = q[i] - p[i];
    return out;
}

LossValue kd_loss(const Label& hard, const Label& predicted, const Label& teacher_tau,
                  const Label& predicted_tau, double eps, double tau) {
    check_eps(eps);
    check_tau(tau);
    require_same_size(teacher_tau, predicted_tau, "kd_loss");
    const LossValue ce = ce_loss(hard, predicted);
    const LossValue kl = kl_div(teacher_tau, predicted_tau);
    LossValue out;
    out.value = (1.0 - eps) * ce.value + eps * tau * tau * kl.value;
    // KL's logit gradient arrives at z/tau, so the chain rule contributes 1/tau.
    out.grad_logits.resize(ce.grad_logits.size());
    for (std::size_t i = 0; i < out.grad_logits.size(); ++i) {
        out.grad_logits[i] = (1.0 - eps) * ce.grad_logits[i] + eps * tau * kl.grad_logits[i];
    }
    return out;
}

LossValue kdc_loss(const Label& calibrated, const Label& predicted) {
    return kl_div(calibrated, predicted);
}

LossValue loss_from_logits(const LossKind& kind, std::span<const double> logits,
                           const SampleTarget& target) {
    const std::size_t n = logits.size();
    if (target.cls >= n) throw std::out_of_range("loss_from_logits: class out of range");
    if (needs_soft_target(kind) && target.soft.size() != n) {
        throw std::invalid_argument("loss_from_logits: soft target missing or wrong size");
    }
    std::vector<double> logp;
    log_softmax(logits, 1.0, logp);
    LossValue out;
    out.grad_logits.resize(n);

    auto soft_ce_against = [&](auto&& target_prob) {
        // CE against an arbitrary target distribution t: value -sum t log p,
        // gradient p - t.
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double t = target_prob(i);
            if (t != 0.0) v -= t * logp[i];
            out.grad_logits[i] = std::exp(logp[i]) - t;
        }
        return v;
    };

    std::visit(
        Overloaded{
            [&](const CrossEntropy&) {
                out.value = soft_ce_against([&](std::size_t i) { return i == target.cls ? 1.0 : 0.0; });
            },
            [&](const LabelSmoothing& k) {
                const double u = k.eps / static_cast<double>(n);
                out.value = soft_ce_against(
                    [&](std::size_t i) { return u + (i == target.cls ? 1.0 - k.eps : 0.0); });
            },
            [&](const KnowledgeDistillation& k) {
                const double ce = -logp[target.cls];
                std::vector<double> logp_tau;
                log_softmax(logits, 1.0 / k.tau, logp_tau);
                double kl = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double t = target.soft[i];
                    if (t > 0.0) kl += t * (std::log(t) - logp_tau[i]);
                }
                kl = std::max(kl, 0.0);
                out.value = (1.0 - k.eps) * ce + k.eps * k.tau * k.tau * kl;
                for (std::size_t i = 0; i < n; ++i) {
                    const double ce_g = std::exp(logp[i]) - (i == target.cls ? 1.0 : 0.0);
                    const double kl_g = std::exp(logp_tau[i]) - target.soft[i];
                    out.grad_logits[i] = (1.0 - k.eps) * ce_g + k.eps * k.tau * kl_g;
                }
            },
            [&](const CalibratedDistillation&) {
                double kl = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double t = target.soft[i];
                    if (t > 0.0) kl += t * (std::log(t) - logp[i]);
                    out.grad_logits[i] = std::exp(logp[i]) - t;
                }
                out.value = std::max(kl, 0.0);
            },
        },
        kind);
    return out;
}

BatchLoss batch_loss(const LossKind& kind, std::span<const double> logits, std::size_t rows,
                     std::span<const SampleTarget> targets) {
    if (rows == 0) throw std::invalid_argument("batch_loss: empty batch");
    if (targets.size() != rows || logits.size() % rows != 0) {
        throw std::invalid_argument("batch_loss: logits/targets shape mismatch");
    }
    const std::size_t c = logits.size() / rows;
    BatchLoss out;
    out.grad.resize(logits.size());
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const LossValue lv = loss_from_logits(kind, logits.subspan(r * c, c), targets[r]);
        out.mean += lv.value;
        for (std::size_t j = 0; j < c; ++j) out.grad[r * c + j] = lv.grad_logits[j] * inv;
    }
    out.mean *= inv;
    return out;
}

}  // namespace kdc
