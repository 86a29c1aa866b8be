#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace marginforge {

enum class EpsVariant { Const, Linear, Curious };

/// Global epsilon schedule for the PGD budget upper bound, updated once per
/// epoch before its batches. Epochs are 1-based, so Linear already yields a
/// strictly positive budget at epoch 1.
struct ScheduleSpec {
    EpsVariant variant = EpsVariant::Const;
    double eps_base = 8.0 / 255.0;  // the budget reached (and held) after the ramp
    std::size_t t_epochs = 1;       // ramp length for Linear/Curious
    double gamma = 1.25;            // Curious overshoot factor; 1 degenerates to Linear
    std::size_t total_epochs = 1;

    void validate() const {
        // eps_base == 0 is the degenerate non-adversarial configuration.
        if (eps_base < 0.0) throw std::invalid_argument("ScheduleSpec: eps_base must be >= 0");
        if (total_epochs < 1) throw std::invalid_argument("ScheduleSpec: total_epochs must be >= 1");
        if (variant != EpsVariant::Const) {
            if (t_epochs < 1 || t_epochs > total_epochs) {
                throw std::invalid_argument("ScheduleSpec: t must be in [1, total_epochs]");
            }
        }
        if (variant == EpsVariant::Curious && gamma < 1.0) {
            throw std::invalid_argument("ScheduleSpec: gamma must be >= 1 for Curious");
        }
    }
};

/// Budget at a 1-based epoch:
///   Const          -> eps_base
///   Linear(t)      -> eps_base * min(epoch/t, 1)
///   Curious(g,t)   -> g * eps_base * (epoch/t) while epoch <= t, eps_base after
/// Curious(1,t) coincides with Linear(t) exactly: both return the same ramp
/// expression below, and multiplying it by 1.0 is exact.
inline double eps_at(const ScheduleSpec& spec, std::size_t epoch) {
    spec.validate();
    if (epoch < 1 || epoch > spec.total_epochs) {
        throw std::invalid_argument("eps_at: epoch " + std::to_string(epoch) +
                                    " out of range [1, " + std::to_string(spec.total_epochs) + "]");
    }
    switch (spec.variant) {
        case EpsVariant::Const:
            return spec.eps_base;
        case EpsVariant::Linear: {
            if (epoch >= spec.t_epochs) return spec.eps_base;
            return spec.eps_base *
                   (static_cast<double>(epoch) / static_cast<double>(spec.t_epochs));
        }
        case EpsVariant::Curious: {
            if (epoch > spec.t_epochs) return spec.eps_base;
            return spec.gamma * (spec.eps_base * (static_cast<double>(epoch) /
                                                  static_cast<double>(spec.t_epochs)));
        }
    }
    throw std::invalid_argument("eps_at: unknown variant");
}

/// Margin-threshold step schedule: rho_initial until the doubling epoch,
/// 2 * rho_initial from it onward; never doubles when unset (0).
struct RhoSchedule {
    double rho_initial = 0.05;
    std::size_t double_at_epoch = 0;  // 0 = never

    void validate() const {
        if (rho_initial <= 0.0) throw std::invalid_argument("RhoSchedule: rho_initial must be > 0");
    }
};

inline double rho_at(const RhoSchedule& sched, std::size_t epoch) {
    sched.validate();
    if (epoch < 1) throw std::invalid_argument("rho_at: epoch must be >= 1");
    if (sched.double_at_epoch != 0 && epoch >= sched.double_at_epoch) {
        return 2.0 * sched.rho_initial;
    }
    return sched.rho_initial;
}

}  // namespace marginforge
