#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

#include "marginforge/model.hpp"
#include "marginforge/rng.hpp"
#include "marginforge/tensor.hpp"

namespace marginforge {

/// Inner-maximization objective. CeHard hardens the supplied target rows to
/// argmax one-hot before the cross-entropy; CeSoft uses them as given; Kl
/// maximizes KL(p(x) || p(x')) against the clean-input distribution, computed
/// once from x and frozen for all steps.
enum class InnerObjective { CeHard, CeSoft, Kl };

struct AttackConfig {
    double epsilon = 8.0 / 255.0;   // l-inf budget, >= 0
    std::size_t steps = 10;         // T
    double step_size = 0.0;         // eta; 0 means the default epsilon/4
    InnerObjective objective = InnerObjective::CeHard;
    std::optional<std::pair<double, double>> domain_bounds;  // per-coordinate clamp
    std::size_t restarts = 1;
    bool random_start = true;       // delta^(0) uniform in the full epsilon box

    double resolved_step_size() const { return step_size > 0.0 ? step_size : epsilon / 4.0; }

    void validate() const {
        if (epsilon < 0.0) throw std::invalid_argument("AttackConfig: epsilon must be >= 0");
        if (step_size < 0.0) throw std::invalid_argument("AttackConfig: step_size must be > 0 (or 0 for the default)");
        if (restarts < 1) throw std::invalid_argument("AttackConfig: restarts must be >= 1");
        if (domain_bounds && domain_bounds->first > domain_bounds->second) {
            throw std::invalid_argument("AttackConfig: domain bounds are inverted");
        }
    }
};

/// Coordinatewise clamp of a perturbation to [-epsilon, epsilon]; idempotent.
inline Tensor project_linf(const Tensor& delta, double epsilon) {
    if (epsilon < 0.0) throw std::invalid_argument("project_linf: epsilon must be >= 0");
    std::vector<double> out(delta.data().begin(), delta.data().end());
    for (double& v : out) v = std::clamp(v, -epsilon, epsilon);
    return Tensor(delta.shape(), std::move(out));
}

namespace detail {

inline double sign0(double v) { return v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0; }

// Per-row objective used both for the ascent direction and for picking the
// best restart. `clean_probs` is only consulted for the Kl objective.
inline Tensor attack_objective_rows(const Model& model, const Tensor& input,
                                    const Tensor& targets, const Tensor& clean_probs,
                                    InnerObjective objective) {
    Tensor logits = model.forward(input, Model::Params::Frozen);
    switch (objective) {
        case InnerObjective::CeHard:
        case InnerObjective::CeSoft:
            return cross_entropy_rows(logits, targets);
        case InnerObjective::Kl:
            return kl_rows_const_ref(clean_probs, logits);
    }
    throw std::invalid_argument("attack: unknown objective");
}

inline Tensor harden_rows(const Tensor& targets) {
    const std::size_t B = targets.shape()[0], C = targets.shape()[1];
    std::vector<double> out(B * C, 0.0);
    auto t = targets.data();
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (t[b * C + c] > t[b * C + best]) best = c;
        }
        out[b * C + best] = 1.0;
    }
    return Tensor({B, C}, std::move(out));
}

}  // namespace detail

/// PGD-T on a batch: x_pgd = x + delta^(T) with
/// delta^(t+1) = Pi[delta^(t) + eta * sign(grad objective)], the projection
/// being the epsilon box intersected with the domain bounds. Rows are
/// attacked independently (per-example noise streams derived from
/// (seed, row, restart)); with restarts > 1 the restart with the highest
/// final objective value wins, per row. Deterministic for a fixed seed.
inline Tensor pgd_batch(const Model& model, const Tensor& x_batch, const Tensor& targets,
                        const AttackConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (x_batch.shape().size() != 2) {
        throw std::invalid_argument("pgd: expects [B,d] inputs, got " +
                                    detail::shape_str(x_batch.shape()));
    }
    const std::size_t B = x_batch.shape()[0], d = x_batch.shape()[1];
    if (cfg.objective != InnerObjective::Kl) {
        if (targets.shape().size() != 2 || targets.shape()[0] != B ||
            targets.shape()[1] != model.class_count()) {
            throw std::invalid_argument("pgd: target rows must be [B,C]");
        }
    }
    const auto xv = x_batch.data();
    if (cfg.domain_bounds) {
        for (double v : xv) {
            if (v < cfg.domain_bounds->first - 1e-12 || v > cfg.domain_bounds->second + 1e-12) {
                throw std::invalid_argument("pgd: input lies outside the domain bounds");
            }
        }
    }
    if (cfg.epsilon == 0.0) return x_batch.detach();  // zero ball: identity, bit-exact

    const double eta = cfg.resolved_step_size();
    const Tensor x_const = x_batch.detach();
    Tensor targets_eff;
    Tensor clean_probs;
    if (cfg.objective == InnerObjective::Kl) {
        clean_probs = softmax_rows(model.forward(x_const, Model::Params::Frozen)).detach();
    } else {
        targets_eff = cfg.objective == InnerObjective::CeHard ? detail::harden_rows(targets)
                                                              : targets.detach();
    }

    auto clamp_to_feasible = [&](std::vector<double>& delta) {
        for (std::size_t i = 0; i < delta.size(); ++i) {
            double v = std::clamp(delta[i], -cfg.epsilon, cfg.epsilon);
            if (cfg.domain_bounds) {
                v = std::clamp(v, cfg.domain_bounds->first - xv[i],
                               cfg.domain_bounds->second - xv[i]);
            }
            delta[i] = v;
        }
    };

    std::vector<double> best_delta(B * d, 0.0);
    std::vector<double> best_value(B, -std::numeric_limits<double>::infinity());

    for (std::size_t r = 0; r < cfg.restarts; ++r) {
        std::vector<double> delta(B * d, 0.0);
        if (cfg.random_start) {
            for (std::size_t b = 0; b < B; ++b) {
                Rng rng = Rng::derive(seed, b, r);
                for (std::size_t j = 0; j < d; ++j) {
                    delta[b * d + j] = rng.uniform(-cfg.epsilon, cfg.epsilon);
                }
            }
        }
        clamp_to_feasible(delta);

        for (std::size_t t = 0; t < cfg.steps; ++t) {
            Tensor delta_t({B, d}, delta, /*requires_grad=*/true);
            Tensor input = add(x_const, delta_t);
            Tensor rows = detail::attack_objective_rows(model, input, targets_eff, clean_probs,
                                                        cfg.objective);
            Tensor total = sum_axis(rows, 0);
            GradientMap grads = backward(total);
            auto g = grads.at(delta_t).data();
            for (double gv : g) {
                if (!std::isfinite(gv)) {
                    std::ostringstream os;
                    os << "pgd: non-finite gradient at step " << t
                       << "; the model appears to have diverged";
                    throw std::runtime_error(os.str());
                }
            }
            for (std::size_t i = 0; i < delta.size(); ++i) {
                delta[i] += eta * detail::sign0(g[i]);
            }
            clamp_to_feasible(delta);
        }

        if (cfg.restarts == 1) {
            best_delta = std::move(delta);
        } else {
            Tensor input = add(x_const, Tensor({B, d}, delta));
            Tensor rows = detail::attack_objective_rows(model, input, targets_eff, clean_probs,
                                                        cfg.objective);
            auto vals = rows.data();
            for (std::size_t b = 0; b < B; ++b) {
                if (vals[b] > best_value[b]) {
                    best_value[b] = vals[b];
                    for (std::size_t j = 0; j < d; ++j) {
                        best_delta[b * d + j] = delta[b * d + j];
                    }
                }
            }
        }
    }

    std::vector<double> out(B * d);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + best_delta[i];
#ifndef NDEBUG
    for (std::size_t i = 0; i < out.size(); ++i) {
        assert(std::abs(out[i] - xv[i]) <= cfg.epsilon + 1e-12);
        if (cfg.domain_bounds) {
            assert(out[i] >= cfg.domain_bounds->first - 1e-12 &&
                   out[i] <= cfg.domain_bounds->second + 1e-12);
        }
    }
#endif
    return Tensor({B, d}, std::move(out));
}

/// Single-example PGD; `target` is ignored for the Kl objective.
inline Tensor pgd(const Model& model, const Tensor& x, const SoftLabel& target,
                  const AttackConfig& cfg, std::uint64_t seed) {
    if (x.shape().size() != 1) {
        throw std::invalid_argument("pgd: single-example input must be rank 1");
    }
    Tensor xb({1, x.size()}, std::vector<double>(x.data().begin(), x.data().end()));
    Tensor tb;
    if (cfg.objective != InnerObjective::Kl) {
        target.validate();
        tb = Tensor({1, target.probs.size()}, target.probs);
    }
    Tensor out = pgd_batch(model, xb, tb, cfg, seed);
    return Tensor({x.size()}, std::vector<double>(out.data().begin(), out.data().end()));
}

}  // namespace marginforge
