#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "marginforge/attack.hpp"
#include "marginforge/data.hpp"
#include "marginforge/evalx.hpp"
#include "marginforge/interpolate.hpp"
#include "marginforge/model.hpp"
#include "marginforge/rng.hpp"
#include "marginforge/schedule.hpp"
#include "marginforge/tensor.hpp"

namespace marginforge {

// ---------------------------------------------------------------------------
// Outer-minimization objectives
// ---------------------------------------------------------------------------

enum class LossVariant { Rst, Uatpp, SsatMbi, SrstAwr, SsatMbiAwr };

struct AwrConfig {
    double gamma_prime = 20.0;  // teacher-KL weight
    double lambda_prime = 20.0; // robust-consistency weight
    double tau_prime = 1.0;     // distillation temperature on the teacher-KL term
    double alpha_prime = 0.1;   // label smoothing on the supervised term
};

struct LossConfig {
    LossVariant variant = LossVariant::SsatMbi;
    double lambda = 8.0;  // consistency weight
    double beta = 0.4;    // interpolated-vs-pgd mix
    std::optional<AwrConfig> awr;

    bool is_awr() const {
        return variant == LossVariant::SrstAwr || variant == LossVariant::SsatMbiAwr;
    }
    bool uses_interpolated() const {
        return variant == LossVariant::SsatMbi || variant == LossVariant::SsatMbiAwr;
    }

    void validate() const {
        if (lambda <= 0.0) throw std::invalid_argument("LossConfig: lambda must be > 0");
        if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("LossConfig: beta must be in [0,1]");
        if (is_awr() != awr.has_value()) {
            throw std::invalid_argument(
                "LossConfig: awr parameters are required exactly for the AWR variants");
        }
        if (awr && (awr->tau_prime <= 0.0 || awr->alpha_prime < 0.0 || awr->alpha_prime >= 1.0)) {
            throw std::invalid_argument("LossConfig: invalid awr parameters");
        }
    }
};

/// Consistency-loss weight of SRST-AWR:
///   w = 1/2 sum_c y_c p_clean(c) + 1/2 sum_c y_c (1 - p_attacked(c)),
/// always in [0,1]; larger when the clean prediction agrees with the label
/// and the attacked one does not.
inline double awr_weight(const SoftLabel& p_clean, const SoftLabel& p_attacked,
                         const SoftLabel& label) {
    p_clean.validate();
    p_attacked.validate();
    label.validate();
    if (p_clean.probs.size() != label.probs.size() ||
        p_attacked.probs.size() != label.probs.size()) {
        throw std::invalid_argument("awr_weight: dimension mismatch");
    }
    double agree = 0.0, fail = 0.0;
    for (std::size_t c = 0; c < label.probs.size(); ++c) {
        agree += label.probs[c] * p_clean.probs[c];
        fail += label.probs[c] * (1.0 - p_attacked.probs[c]);
    }
    return 0.5 * agree + 0.5 * fail;
}

/// One training batch as seen by the outer loss. `x_adv` may be left
/// undefined for variants that do not use interpolated examples; is_labeled
/// may be empty when every row is labeled.
struct LossBatch {
    Tensor x;       // [B,d]
    Tensor x_adv;   // [B,d] interpolated adversarial examples
    Tensor x_pgd;   // [B,d] full-budget PGD examples
    Tensor labels;  // [B,C] one-hot or soft pseudo-label rows
    std::vector<unsigned char> is_labeled;
};

struct OuterLossResult {
    Tensor total;                  // scalar, differentiable w.r.t. parameters
    double fit_value = 0.0;        // value of the fit (cross-entropy) term
    double consistency_value = 0.0;  // value of the weighted KL terms
    Tensor logits_x, logits_adv, logits_pgd;  // forwards the variant computed
};

namespace detail {

inline Tensor mean_rows(const Tensor& rows) {
    return scale(sum_axis(rows, 0), 1.0 / static_cast<double>(rows.shape()[0]));
}

// Sum of rows[i] * weight[i] / divisor as a scalar tensor; weights are
// gradient constants.
inline Tensor weighted_row_mean(const Tensor& rows, const std::vector<double>& weights,
                                double divisor) {
    Tensor w({weights.size(), 1}, weights);
    return scale(sum_axis(multiply(rows, w), 0), 1.0 / divisor);
}

inline SoftLabel row_as_label(std::span<const double> data, std::size_t row, std::size_t C) {
    SoftLabel s;
    s.probs.assign(data.begin() + static_cast<std::ptrdiff_t>(row * C),
                   data.begin() + static_cast<std::ptrdiff_t>((row + 1) * C));
    return s;
}

}  // namespace detail

/// The five outer objectives, averaged over the batch. The UAT++ reference
/// distribution is a detached snapshot of the current parameters, refreshed
/// per call; AWR weights are gradient constants; the AWR per-term averages
/// run over the labeled and unlabeled subsets of the batch respectively
/// (empty subsets contribute zero).
inline OuterLossResult outer_loss(const LossConfig& cfg, const Model& model,
                                  const Model* teacher, const LossBatch& batch) {
    cfg.validate();
    if (!batch.x.defined() || !batch.labels.defined()) {
        throw std::invalid_argument("outer_loss: x and labels are required");
    }
    const std::size_t B = batch.x.shape()[0];
    const std::size_t C = batch.labels.shape()[1];
    const bool needs_adv = cfg.uses_interpolated() && cfg.beta > 0.0;
    const bool needs_pgd = !cfg.uses_interpolated() || cfg.beta < 1.0;
    if (needs_adv && !batch.x_adv.defined()) {
        throw std::invalid_argument("outer_loss: this variant requires x_adv");
    }
    if (needs_pgd && !batch.x_pgd.defined()) {
        throw std::invalid_argument("outer_loss: this variant requires x_pgd");
    }
    if (cfg.is_awr() && teacher == nullptr) {
        throw std::invalid_argument("outer_loss: AWR variants require the teacher model");
    }
    if (!batch.is_labeled.empty() && batch.is_labeled.size() != B) {
        throw std::invalid_argument("outer_loss: is_labeled size mismatch");
    }

    OuterLossResult out;
    switch (cfg.variant) {
        case LossVariant::Rst: {
            out.logits_x = model.forward(batch.x);
            out.logits_pgd = model.forward(batch.x_pgd);
            Tensor fit = detail::mean_rows(cross_entropy_rows(out.logits_x, batch.labels));
            Tensor cons = detail::mean_rows(kl_rows_between_logits(out.logits_x, out.logits_pgd));
            out.fit_value = fit.value();
            out.consistency_value = cfg.lambda * cons.value();
            out.total = add(fit, scale(cons, cfg.lambda));
            return out;
        }
        case LossVariant::Uatpp: {
            Tensor ref = softmax_rows(model.forward(batch.x, Model::Params::Frozen)).detach();
            out.logits_pgd = model.forward(batch.x_pgd);
            Tensor fit = detail::mean_rows(cross_entropy_rows(out.logits_pgd, batch.labels));
            Tensor cons = detail::mean_rows(kl_rows_const_ref(ref, out.logits_pgd));
            out.fit_value = fit.value();
            out.consistency_value = cfg.lambda * cons.value();
            out.total = add(fit, scale(cons, cfg.lambda));
            return out;
        }
        case LossVariant::SsatMbi: {
            out.logits_x = model.forward(batch.x);
            Tensor fit = detail::mean_rows(cross_entropy_rows(out.logits_x, batch.labels));
            Tensor cons;
            if (cfg.beta > 0.0) {
                out.logits_adv = model.forward(batch.x_adv);
                cons = scale(detail::mean_rows(kl_rows_between_logits(out.logits_x, out.logits_adv)),
                             cfg.beta);
            }
            if (cfg.beta < 1.0) {
                out.logits_pgd = model.forward(batch.x_pgd);
                Tensor pgd_term =
                    scale(detail::mean_rows(kl_rows_between_logits(out.logits_x, out.logits_pgd)),
                          1.0 - cfg.beta);
                cons = cons.defined() ? add(cons, pgd_term) : pgd_term;
            }
            out.fit_value = fit.value();
            out.consistency_value = cfg.lambda * cons.value();
            out.total = add(fit, scale(cons, cfg.lambda));
            return out;
        }
        case LossVariant::SrstAwr:
        case LossVariant::SsatMbiAwr: {
            const AwrConfig& awr = *cfg.awr;
            std::vector<unsigned char> labeled = batch.is_labeled;
            if (labeled.empty()) labeled.assign(B, 1);
            double n_b = 0.0, m_b = 0.0;
            for (unsigned char f : labeled) (f ? n_b : m_b) += 1.0;

            out.logits_x = model.forward(batch.x);
            Tensor total;
            double fit_value = 0.0;

            if (n_b > 0.0) {
                std::vector<double> mask(B, 0.0);
                for (std::size_t i = 0; i < B; ++i) mask[i] = labeled[i] ? 1.0 : 0.0;
                Tensor fit = detail::weighted_row_mean(
                    cross_entropy_rows(out.logits_x, batch.labels, awr.alpha_prime), mask, n_b);
                fit_value = fit.value();
                total = fit;
            }

            double consistency = 0.0;
            if (m_b > 0.0) {
                std::vector<double> umask(B, 0.0);
                for (std::size_t i = 0; i < B; ++i) umask[i] = labeled[i] ? 0.0 : 1.0;

                Tensor teacher_probs =
                    softmax_rows(teacher->forward(batch.x, Model::Params::Frozen), awr.tau_prime)
                        .detach();
                Tensor distill = scale(
                    detail::weighted_row_mean(
                        kl_rows_const_ref(teacher_probs, out.logits_x, awr.tau_prime), umask, m_b),
                    awr.gamma_prime);
                consistency += distill.value();
                total = total.defined() ? add(total, distill) : distill;

                Tensor p_clean = softmax_rows(out.logits_x).detach();
                auto weights_against = [&](const Tensor& attacked_logits) {
                    Tensor p_att = softmax_rows(attacked_logits).detach();
                    std::vector<double> w(B, 0.0);
                    auto lv = batch.labels.data();
                    for (std::size_t i = 0; i < B; ++i) {
                        if (labeled[i]) continue;
                        w[i] = awr_weight(detail::row_as_label(p_clean.data(), i, C),
                                          detail::row_as_label(p_att.data(), i, C),
                                          detail::row_as_label(lv, i, C));
                    }
                    return w;
                };

                Tensor robust;
                if (cfg.variant == LossVariant::SrstAwr) {
                    out.logits_pgd = model.forward(batch.x_pgd);
                    robust = scale(detail::weighted_row_mean(
                                       kl_rows_between_logits(out.logits_x, out.logits_pgd),
                                       weights_against(out.logits_pgd), m_b),
                                   awr.lambda_prime);
                } else {
                    if (cfg.beta > 0.0) {
                        out.logits_adv = model.forward(batch.x_adv);
                        robust = scale(detail::weighted_row_mean(
                                           kl_rows_between_logits(out.logits_x, out.logits_adv),
                                           weights_against(out.logits_adv), m_b),
                                       awr.lambda_prime * cfg.beta);
                    }
                    if (cfg.beta < 1.0) {
                        out.logits_pgd = model.forward(batch.x_pgd);
                        Tensor pgd_term = scale(
                            detail::weighted_row_mean(
                                kl_rows_between_logits(out.logits_x, out.logits_pgd),
                                weights_against(out.logits_pgd), m_b),
                            awr.lambda_prime * (1.0 - cfg.beta));
                        robust = robust.defined() ? add(robust, pgd_term) : pgd_term;
                    }
                }
                consistency += robust.value();
                total = total.defined() ? add(total, robust) : robust;
            }

            if (!total.defined()) total = Tensor::scalar(0.0);
            out.fit_value = fit_value;
            out.consistency_value = consistency;
            out.total = total;
            return out;
        }
    }
    throw std::invalid_argument("outer_loss: unknown variant");
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay
// ---------------------------------------------------------------------------

struct SgdConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 2e-4;
    // Piecewise-constant decay: once epoch >= round(frac * total), the
    // learning rate is lr * factor (absolute multipliers, not cumulative).
    std::vector<double> decay_fracs{0.6, 0.7, 0.9};
    std::vector<double> decay_factors{0.1, 0.01, 0.005};

    void validate() const {
        if (lr <= 0.0) throw std::invalid_argument("SgdConfig: lr must be > 0");
        if (momentum < 0.0 || momentum >= 1.0) {
            throw std::invalid_argument("SgdConfig: momentum must be in [0,1)");
        }
        if (weight_decay < 0.0) throw std::invalid_argument("SgdConfig: weight_decay must be >= 0");
        if (decay_fracs.size() != decay_factors.size()) {
            throw std::invalid_argument("SgdConfig: decay table lengths differ");
        }
    }
};

inline double lr_at(const SgdConfig& cfg, std::size_t epoch, std::size_t total_epochs) {
    double mult = 1.0;
    for (std::size_t i = 0; i < cfg.decay_fracs.size(); ++i) {
        const auto threshold = static_cast<std::size_t>(
            std::llround(cfg.decay_fracs[i] * static_cast<double>(total_epochs)));
        if (threshold >= 1 && epoch >= threshold) mult = cfg.decay_factors[i];
    }
    return cfg.lr * mult;
}

/// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
/// Parameters absent from the map step with zero gradient (decay still
/// applies). `velocity` persists across calls and is sized on first use.
inline void sgd_step(Model& model, const GradientMap& grads,
                     std::vector<std::vector<double>>& velocity, double lr, double momentum,
                     double weight_decay) {
    std::vector<Tensor> params = model.parameters();
    if (velocity.empty()) velocity.resize(params.size());
    if (velocity.size() != params.size()) {
        throw std::invalid_argument("sgd_step: velocity/parameter count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        auto& v = velocity[i];
        if (v.empty()) v.assign(p.size(), 0.0);
        if (v.size() != p.size()) throw std::invalid_argument("sgd_step: velocity shape mismatch");
        std::span<const double> g;
        if (grads.contains(p)) {
            const Tensor& gt = grads.at(p);
            if (gt.size() != p.size()) {
                throw std::invalid_argument("sgd_step: gradient shape mismatch");
            }
            g = gt.data();
        }
        auto& vals = p.values_mut();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double gj = (g.empty() ? 0.0 : g[j]) + weight_decay * vals[j];
            v[j] = momentum * v[j] + gj;
            vals[j] -= lr * v[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Teacher (confidence-thresholded pseudo-labeling, jitter augmentations)
// ---------------------------------------------------------------------------

struct TeacherConfig {
    double confidence_threshold = 0.95;  // t in (0,1)
    double unsup_weight = 1.0;           // lambda_u
    std::size_t epochs = 80;
    double weak_sigma = 0.01;   // additive jitter scale for pseudo-labeling inputs
    double strong_sigma = 0.08; // additive jitter scale for the consistency branch
    std::size_t batch_labeled = 64;
    std::size_t batch_unlabeled = 128;
    SgdConfig optimizer{0.05, 0.9, 5e-4, {}, {}};
    std::vector<std::size_t> hidden{64, 64};

    void validate() const {
        if (!(confidence_threshold > 0.0) || !(confidence_threshold < 1.0)) {
            throw std::invalid_argument("TeacherConfig: confidence threshold must be in (0,1)");
        }
        if (unsup_weight < 0.0) throw std::invalid_argument("TeacherConfig: unsup_weight must be >= 0");
        if (epochs < 1) throw std::invalid_argument("TeacherConfig: epochs must be >= 1");
        if (weak_sigma < 0.0 || strong_sigma < weak_sigma) {
            throw std::invalid_argument("TeacherConfig: need 0 <= weak_sigma <= strong_sigma");
        }
        if (batch_labeled < 1 || batch_unlabeled < 1) {
            throw std::invalid_argument("TeacherConfig: batch sizes must be >= 1");
        }
        optimizer.validate();
    }
};

/// FixMatch-style confidence mask: 1 for rows whose top probability reaches
/// the threshold, 0 otherwise.
inline std::vector<double> confidence_mask(const Tensor& probs, double threshold) {
    const std::size_t B = probs.shape()[0], C = probs.shape()[1];
    std::vector<double> mask(B, 0.0);
    auto pv = probs.data();
    for (std::size_t i = 0; i < B; ++i) {
        if (pv[i * C + detail::argmax_row(pv.subspan(i * C, C))] >= threshold) mask[i] = 1.0;
    }
    return mask;
}

namespace detail {

// Additive Gaussian jitter; images additionally get a random integer
// translation (zero fill) of up to max_shift pixels per axis.
inline Tensor jitter_batch(const Tensor& x, double sigma, std::size_t max_shift,
                           const std::optional<std::pair<std::size_t, std::size_t>>& image_dims,
                           const std::optional<std::pair<double, double>>& bounds, Rng& rng) {
    const std::size_t B = x.shape()[0], d = x.shape()[1];
    std::vector<double> out(x.data().begin(), x.data().end());
    if (image_dims && max_shift > 0) {
        const std::size_t rows = image_dims->first, cols = image_dims->second;
        if (rows * cols == d) {
            std::vector<double> shifted(d);
            for (std::size_t b = 0; b < B; ++b) {
                const long dy = static_cast<long>(rng.index(2 * max_shift + 1)) -
                                static_cast<long>(max_shift);
                const long dx = static_cast<long>(rng.index(2 * max_shift + 1)) -
                                static_cast<long>(max_shift);
                std::fill(shifted.begin(), shifted.end(), 0.0);
                for (std::size_t r = 0; r < rows; ++r) {
                    const long sr = static_cast<long>(r) - dy;
                    if (sr < 0 || sr >= static_cast<long>(rows)) continue;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const long sc = static_cast<long>(c) - dx;
                        if (sc < 0 || sc >= static_cast<long>(cols)) continue;
                        shifted[r * cols + c] =
                            out[b * d + static_cast<std::size_t>(sr) * cols +
                                static_cast<std::size_t>(sc)];
                    }
                }
                std::copy(shifted.begin(), shifted.end(),
                          out.begin() + static_cast<std::ptrdiff_t>(b * d));
            }
        }
    }
    for (double& v : out) {
        v += sigma * rng.normal();
        if (bounds) v = std::clamp(v, bounds->first, bounds->second);
    }
    return Tensor({B, d}, std::move(out));
}

inline Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
    const std::size_t d = m.shape()[1];
    std::vector<double> out;
    out.reserve(rows.size() * d);
    auto src = m.data();
    for (std::size_t r : rows) {
        out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(r * d),
                   src.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
    return Tensor({rows.size(), d}, std::move(out));
}

}  // namespace detail

/// Non-robust semi-supervised teacher: minimizes l_s + lambda_u * l_u where
/// l_s is cross-entropy on jittered labeled data and l_u applies
/// confidence-masked hardened pseudo-label cross-entropy to strongly
/// jittered unlabeled inputs. With no unlabeled data this reduces to plain
/// supervised training.
inline Model train_teacher(const Dataset& labeled, const Dataset& unlabeled,
                           const TeacherConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (labeled.empty() || !labeled.fully_labeled()) {
        throw std::invalid_argument("train_teacher: labeled set must be non-empty and labeled");
    }
    const std::size_t n = labeled.size(), m = unlabeled.size();
    const std::size_t d = labeled.dim(), C = labeled.class_count;

    std::vector<std::size_t> arch{d};
    for (std::size_t h : cfg.hidden) arch.push_back(h);
    arch.push_back(C);
    Model teacher = mlp_init(arch, Rng::stream_seed(seed, 0x7469u));
    std::vector<std::vector<double>> velocity;

    Tensor y_l = detail::one_hot_rows(labeled.labels, C);
    Rng rng = Rng::derive(seed, 0x746Au);

    std::vector<std::size_t> idx_l(n), idx_u(m);
    std::iota(idx_l.begin(), idx_l.end(), 0);
    std::iota(idx_u.begin(), idx_u.end(), 0);

    // Iteration count follows the larger of the two streams, as in
    // unlabeled-heavy semi-supervised training.
    const std::size_t steps_per_epoch =
        std::max<std::size_t>({1, (n + cfg.batch_labeled - 1) / cfg.batch_labeled,
                               m > 0 ? (m + cfg.batch_unlabeled - 1) / cfg.batch_unlabeled : 0});

    std::size_t cur_l = 0, cur_u = 0;
    rng.shuffle(idx_l);
    if (m > 0) rng.shuffle(idx_u);

    auto next_batch = [&rng](std::vector<std::size_t>& idx, std::size_t& cursor,
                             std::size_t want) {
        std::vector<std::size_t> out;
        out.reserve(want);
        for (std::size_t i = 0; i < want; ++i) {
            if (cursor >= idx.size()) {
                rng.shuffle(idx);
                cursor = 0;
            }
            out.push_back(idx[cursor++]);
        }
        return out;
    };

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            auto bl = next_batch(idx_l, cur_l, std::min(cfg.batch_labeled, n));
            Tensor xb = detail::gather_rows(labeled.inputs, bl);
            Tensor yb = detail::gather_rows(y_l, bl);
            Tensor x_weak = detail::jitter_batch(xb, cfg.weak_sigma, labeled.image_dims ? 1 : 0,
                                                 labeled.image_dims, labeled.domain_bounds, rng);
            Tensor loss = cross_entropy_mean(teacher.forward(x_weak), yb);

            if (m > 0 && cfg.unsup_weight > 0.0) {
                auto bu = next_batch(idx_u, cur_u, std::min(cfg.batch_unlabeled, m));
                Tensor xu = detail::gather_rows(unlabeled.inputs, bu);
                Tensor xu_weak =
                    detail::jitter_batch(xu, cfg.weak_sigma, unlabeled.image_dims ? 1 : 0,
                                         unlabeled.image_dims, unlabeled.domain_bounds, rng);
                Tensor probs =
                    softmax_rows(teacher.forward(xu_weak, Model::Params::Frozen)).detach();
                auto pv = probs.data();
                const std::size_t bu_n = bu.size();
                std::vector<double> mask = confidence_mask(probs, cfg.confidence_threshold);
                std::vector<double> hard(bu_n * C, 0.0);
                for (std::size_t i = 0; i < bu_n; ++i) {
                    hard[i * C + detail::argmax_row(pv.subspan(i * C, C))] = 1.0;
                }
                Tensor xu_strong =
                    detail::jitter_batch(xu, cfg.strong_sigma, unlabeled.image_dims ? 2 : 0,
                                         unlabeled.image_dims, unlabeled.domain_bounds, rng);
                Tensor ce_u = cross_entropy_rows(teacher.forward(xu_strong),
                                                 Tensor({bu_n, C}, hard));
                Tensor l_u = detail::weighted_row_mean(ce_u, mask, static_cast<double>(bu_n));
                loss = add(loss, scale(l_u, cfg.unsup_weight));
            }

            GradientMap grads = backward(loss);
            sgd_step(teacher, grads, velocity, cfg.optimizer.lr, cfg.optimizer.momentum,
                     cfg.optimizer.weight_decay);
        }
    }
    return teacher;
}

/// Pseudo-labels for the unlabeled set: full soft softmax rows at temperature
/// 1, never argmax-hardened. Returns an undefined tensor for an empty set.
inline Tensor assign_pseudo_labels(const Model& teacher, const Dataset& unlabeled) {
    if (unlabeled.empty()) return Tensor();
    return softmax_rows(teacher.forward(unlabeled.inputs, Model::Params::Frozen)).detach();
}

/// The fully labeled training view of Alg. 1 line 3: labeled rows first with
/// one-hot ground truth (regardless of the teacher), then unlabeled rows with
/// their soft pseudo-labels.
struct TrainingView {
    Tensor inputs;                          // [n+m, d]
    Tensor labels;                          // [n+m, C]
    std::vector<unsigned char> is_labeled;  // 1 for the labeled prefix
};

inline TrainingView build_training_view(const Dataset& labeled, const Dataset& unlabeled,
                                        const Tensor& pseudo_labels) {
    const std::size_t n = labeled.size(), m = unlabeled.size();
    const std::size_t d = labeled.dim(), C = labeled.class_count;
    if (m > 0 && (!pseudo_labels.defined() || pseudo_labels.shape()[0] != m ||
                  pseudo_labels.shape()[1] != C)) {
        throw std::invalid_argument("build_training_view: pseudo-label rows must be [m,C]");
    }
    std::vector<double> xs;
    xs.reserve((n + m) * d);
    xs.insert(xs.end(), labeled.inputs.data().begin(), labeled.inputs.data().end());
    std::vector<double> ys((n + m) * C, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        ys[i * C + static_cast<std::size_t>(labeled.labels[i])] = 1.0;
    }
    if (m > 0) {
        xs.insert(xs.end(), unlabeled.inputs.data().begin(), unlabeled.inputs.data().end());
        auto pl = pseudo_labels.data();
        std::copy(pl.begin(), pl.end(), ys.begin() + static_cast<std::ptrdiff_t>(n * C));
    }
    TrainingView view;
    view.inputs = Tensor({n + m, d}, std::move(xs));
    view.labels = Tensor({n + m, C}, std::move(ys));
    view.is_labeled.assign(n + m, 0);
    for (std::size_t i = 0; i < n; ++i) view.is_labeled[i] = 1;
    return view;
}

// ---------------------------------------------------------------------------
// Full training loop (pseudo-label once, per-epoch schedules, PGD +
// margin-based interpolation per batch, outer minimization)
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    std::vector<std::size_t> hidden{64, 64};
    SgdConfig optimizer;
    AttackConfig attack;        // epsilon is overridden per epoch by the schedule
    ScheduleSpec schedule;
    RhoSchedule rho_schedule;
    InterpolationConfig interp; // rho is overridden per epoch by rho_schedule
    LossConfig loss;
    std::size_t eval_attack_steps = 20;  // per-epoch robust-accuracy column
    std::uint64_t seed = 1;
    bool record_wall_seconds = false;  // off by default so metrics are reproducible

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        optimizer.validate();
        attack.validate();
        ScheduleSpec sched = schedule;
        sched.total_epochs = epochs;
        sched.validate();
        rho_schedule.validate();
        interp.validate();
        loss.validate();
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double eps_max = 0.0;
    double rho = 0.0;
    double mean_alpha_hat = 0.0;
    double mean_eff_eps = 0.0;
    double mean_margin = 0.0;   // margin of the adversarial input the loss consumed
    double train_loss = 0.0;
    double fit_loss = 0.0;
    double consistency_loss = 0.0;
    double nat_acc = 0.0;
    double robust_acc_pgd20 = 0.0;
    double wall_seconds = 0.0;
};

struct MetricsLog {
    std::vector<EpochMetrics> epochs;

    /// Fixed persisted schema (one row per epoch).
    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,eps_max,rho,mean_alpha_hat,mean_eff_eps,train_loss,nat_acc,"
              "robust_acc_pgd20,wall_seconds\n";
        for (const auto& e : epochs) {
            os << e.epoch << "," << e.eps_max << "," << e.rho << "," << e.mean_alpha_hat << ","
               << e.mean_eff_eps << "," << e.train_loss << "," << e.nat_acc << ","
               << e.robust_acc_pgd20 << "," << e.wall_seconds << "\n";
        }
        return os.str();
    }
};

struct TrainData {
    Dataset labeled;
    Dataset unlabeled;
    Dataset test;
};

struct TrainResult {
    Model model;
    Model teacher;
    MetricsLog log;
    Tensor pseudo_labels;  // [m,C] rows assigned before epoch 1
};

inline TrainResult train(const TrainConfig& cfg, const TrainData& data,
                         const Model* teacher_in = nullptr,
                         const TeacherConfig* teacher_cfg = nullptr) {
    cfg.validate();
    if (data.labeled.empty() || !data.labeled.fully_labeled()) {
        throw std::invalid_argument("train: labeled set must be non-empty and labeled");
    }
    if (data.test.empty()) throw std::invalid_argument("train: test set must be non-empty");

    const std::size_t n = data.labeled.size(), m = data.unlabeled.size();
    const std::size_t N = n + m;
    const std::size_t d = data.labeled.dim(), C = data.labeled.class_count;

    TrainResult result;

    // Teacher and pseudo-labels, once, before epoch 1.
    if (teacher_in != nullptr) {
        result.teacher = *teacher_in;
    } else {
        TeacherConfig tc = teacher_cfg != nullptr ? *teacher_cfg : TeacherConfig{};
        result.teacher = train_teacher(data.labeled, data.unlabeled, tc,
                                       Rng::stream_seed(cfg.seed, 0x7463u));
    }
    result.pseudo_labels = assign_pseudo_labels(result.teacher, data.unlabeled);
    TrainingView view = build_training_view(data.labeled, data.unlabeled, result.pseudo_labels);
    const Tensor& x_all = view.inputs;
    const Tensor& y_all = view.labels;

    std::vector<std::size_t> arch{d};
    for (std::size_t h : cfg.hidden) arch.push_back(h);
    arch.push_back(C);
    Model model = mlp_init(arch, Rng::stream_seed(cfg.seed, 0x696Eu));
    std::vector<std::vector<double>> velocity;

    ScheduleSpec schedule = cfg.schedule;
    schedule.total_epochs = cfg.epochs;

    AttackConfig eval_cfg = cfg.attack;
    eval_cfg.steps = cfg.eval_attack_steps;
    eval_cfg.epsilon = cfg.schedule.eps_base;
    eval_cfg.step_size = 0.0;
    eval_cfg.objective = InnerObjective::CeHard;
    eval_cfg.restarts = 1;
    eval_cfg.domain_bounds = data.test.domain_bounds;

    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const double eps_max = eps_at(schedule, epoch);
        const double rho = rho_at(cfg.rho_schedule, epoch);
        const double lr = lr_at(cfg.optimizer, epoch, cfg.epochs);

        Rng::derive(cfg.seed, 0x7368u, epoch).shuffle(order);

        AttackConfig attack_cfg = cfg.attack;
        attack_cfg.epsilon = eps_max;
        if (!attack_cfg.domain_bounds) attack_cfg.domain_bounds = data.labeled.domain_bounds;

        InterpolationConfig interp_cfg = cfg.interp;
        interp_cfg.rho = rho;

        double sum_alpha = 0.0, sum_eff = 0.0, sum_margin = 0.0;
        double sum_loss = 0.0, sum_fit = 0.0, sum_cons = 0.0;
        std::size_t rows_seen = 0, batches = 0;

        for (std::size_t start = 0; start < N; start += cfg.batch_size, ++batches) {
            const std::size_t stop = std::min(N, start + cfg.batch_size);
            std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(stop));
            const std::size_t B = rows.size();
            LossBatch batch;
            batch.x = detail::gather_rows(x_all, rows);
            batch.labels = detail::gather_rows(y_all, rows);
            batch.is_labeled.resize(B);
            for (std::size_t i = 0; i < B; ++i) batch.is_labeled[i] = rows[i] < n ? 1 : 0;

            InterpolationResult interp;
            OuterLossResult loss;
            try {
                batch.x_pgd = pgd_batch(model, batch.x, batch.labels, attack_cfg,
                                        Rng::stream_seed(cfg.seed, 0x6174u + epoch, batches));
                interp = binary_search_alpha_batch(model, batch.x, batch.x_pgd, batch.labels,
                                                   interp_cfg);
                batch.x_adv = interp.x_adv;
                loss = outer_loss(cfg.loss, model, &result.teacher, batch);
                if (!std::isfinite(loss.total.value())) {
                    throw std::runtime_error("non-finite loss value");
                }
            } catch (const std::runtime_error& e) {
                std::ostringstream os;
                os << "train: aborted at epoch " << epoch << ", batch " << batches << ": "
                   << e.what();
                throw std::runtime_error(os.str());
            }
            GradientMap grads = backward(loss.total);
            sgd_step(model, grads, velocity, lr, cfg.optimizer.momentum,
                     cfg.optimizer.weight_decay);

            const double loss_value = loss.total.value();
            for (double a : interp.alpha_hat) sum_alpha += a;
            auto xv = batch.x.data();
            auto av = batch.x_adv.data();
            for (std::size_t i = 0; i < B; ++i) {
                double eff = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    eff = std::max(eff, std::abs(av[i * d + j] - xv[i * d + j]));
                }
                sum_eff += eff;
            }
            const Tensor& margin_logits =
                loss.logits_adv.defined() ? loss.logits_adv : loss.logits_pgd;
            if (margin_logits.defined()) {
                Tensor scores = softmax_rows(margin_logits.detach(), interp_cfg.tau);
                auto lv = batch.labels.data();
                for (std::size_t i = 0; i < B; ++i) {
                    sum_margin += margin(detail::row_as_label(scores.data(), i, C),
                                         detail::row_as_label(lv, i, C));
                }
            }
            sum_loss += loss_value * static_cast<double>(B);
            sum_fit += loss.fit_value * static_cast<double>(B);
            sum_cons += loss.consistency_value * static_cast<double>(B);
            rows_seen += B;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.eps_max = eps_max;
        em.rho = rho;
        em.mean_alpha_hat = sum_alpha / static_cast<double>(rows_seen);
        em.mean_eff_eps = sum_eff / static_cast<double>(rows_seen);
        em.mean_margin = sum_margin / static_cast<double>(rows_seen);
        em.train_loss = sum_loss / static_cast<double>(rows_seen);
        em.fit_loss = sum_fit / static_cast<double>(rows_seen);
        em.consistency_loss = sum_cons / static_cast<double>(rows_seen);
        try {
            em.nat_acc = natural_accuracy(model, data.test);
            em.robust_acc_pgd20 = robust_accuracy(model, data.test, eval_cfg,
                                                  Rng::stream_seed(cfg.seed, 0x6576u, epoch));
        } catch (const std::runtime_error& e) {
            std::ostringstream os;
            os << "train: aborted at epoch " << epoch << " during evaluation: " << e.what();
            throw std::runtime_error(os.str());
        }
        if (cfg.record_wall_seconds) {
            em.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                    .count();
        }
        result.log.epochs.push_back(em);
    }

    result.model = model;
    return result;
}

}  // namespace marginforge
