#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "marginforge/model.hpp"
#include "marginforge/tensor.hpp"

namespace marginforge {

struct InterpolationConfig {
    double rho = 0.05;        // margin threshold, > 0
    double tau = 2.0;         // score temperature, > 0
    std::size_t steps_k = 3;  // bisection probes, in [1, 32]

    void validate() const {
        if (rho <= 0.0) throw std::invalid_argument("InterpolationConfig: rho must be > 0");
        if (tau <= 0.0) throw std::invalid_argument("InterpolationConfig: tau must be > 0");
        if (steps_k < 1 || steps_k > 32) {
            throw std::invalid_argument("InterpolationConfig: steps_k must be in [1, 32]");
        }
    }
};

/// Margin d = max_k s_k - sum_j label_j s_j. With a one-hot label this is the
/// gap between the top score and the labeled class's score; in general it is
/// the gap to the label-weighted score mass, always in [0, 1).
inline double margin(const SoftLabel& scores, const SoftLabel& label) {
    scores.validate();
    label.validate();
    if (scores.probs.size() != label.probs.size()) {
        throw std::invalid_argument("margin: dimension mismatch");
    }
    double top = scores.probs[0], mass = 0.0;
    for (std::size_t j = 0; j < scores.probs.size(); ++j) {
        top = std::max(top, scores.probs[j]);
        mass += label.probs[j] * scores.probs[j];
    }
    return top - mass;
}

/// x' = alpha * x_pgd + (1 - alpha) * x.
inline Tensor interpolate(const Tensor& x, const Tensor& x_pgd, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::invalid_argument("interpolate: alpha must be in [0,1]");
    }
    detail::check_same_shape("interpolate", x, x_pgd);
    std::vector<double> out(x.size());
    auto xa = x.data(), xb = x_pgd.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = alpha * xb[i] + (1.0 - alpha) * xa[i];
    }
    return Tensor(x.shape(), std::move(out));
}

/// l-inf distance between a clean point and its adversarial example.
inline double effective_epsilon(const Tensor& x, const Tensor& x_adv) {
    detail::check_same_shape("effective_epsilon", x, x_adv);
    double m = 0.0;
    auto a = x.data(), b = x_adv.data();
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(b[i] - a[i]));
    return m;
}

/// Bisection for the largest alpha whose margin stays below rho. Exactly K
/// probes of d at successive midpoints; d < rho moves the left bracket, d >=
/// rho (ties included) moves the right one; the answer is the final right
/// bracket. If d never reaches rho the right bracket never moves and the
/// result is 1; if d >= rho everywhere the result is 2^-K.
inline double binary_search_threshold(const std::function<double(double)>& d_of_alpha,
                                      double rho, std::size_t steps_k) {
    double alpha_l = 0.0, alpha_r = 1.0;
    for (std::size_t step = 0; step < steps_k; ++step) {
        const double alpha = 0.5 * (alpha_l + alpha_r);
        if (d_of_alpha(alpha) < rho) {
            alpha_l = alpha;
        } else {
            alpha_r = alpha;
        }
    }
    return alpha_r;
}

struct InterpolationResult {
    std::vector<double> alpha_hat;  // per row
    Tensor x_adv;                   // [B,d]
};

/// Batched margin-threshold search: one frozen model evaluation per bisection
/// step for the whole batch (K forward passes total), each probing every
/// row's current midpoint.
inline InterpolationResult binary_search_alpha_batch(const Model& model, const Tensor& x_batch,
                                                     const Tensor& x_pgd_batch,
                                                     const Tensor& labels,
                                                     const InterpolationConfig& cfg) {
    cfg.validate();
    detail::check_same_shape("binary_search_alpha", x_batch, x_pgd_batch);
    if (x_batch.shape().size() != 2) {
        throw std::invalid_argument("binary_search_alpha: expects [B,d] inputs");
    }
    const std::size_t B = x_batch.shape()[0], d = x_batch.shape()[1];
    const std::size_t C = model.class_count();
    if (labels.shape().size() != 2 || labels.shape()[0] != B || labels.shape()[1] != C) {
        throw std::invalid_argument("binary_search_alpha: labels must be [B,C]");
    }

    auto xv = x_batch.data();
    auto pv = x_pgd_batch.data();
    auto lv = labels.data();
    std::vector<double> alpha_l(B, 0.0), alpha_r(B, 1.0);
    std::vector<double> probe(B * d);

    for (std::size_t step = 0; step < cfg.steps_k; ++step) {
        for (std::size_t b = 0; b < B; ++b) {
            const double alpha = 0.5 * (alpha_l[b] + alpha_r[b]);
            for (std::size_t j = 0; j < d; ++j) {
                probe[b * d + j] = alpha * pv[b * d + j] + (1.0 - alpha) * xv[b * d + j];
            }
        }
        Tensor logits = model.forward(Tensor({B, d}, probe), Model::Params::Frozen);
        Tensor scores = softmax_rows(logits, cfg.tau);
        auto sv = scores.data();
        for (std::size_t b = 0; b < B; ++b) {
            double top = sv[b * C], mass = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                top = std::max(top, sv[b * C + c]);
                mass += lv[b * C + c] * sv[b * C + c];
            }
            const double margin_b = top - mass;
            const double alpha = 0.5 * (alpha_l[b] + alpha_r[b]);
            if (margin_b < cfg.rho) {
                alpha_l[b] = alpha;
            } else {
                alpha_r[b] = alpha;
            }
        }
    }

    std::vector<double> adv(B * d);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < d; ++j) {
            adv[b * d + j] = alpha_r[b] * pv[b * d + j] + (1.0 - alpha_r[b]) * xv[b * d + j];
        }
    }
    return InterpolationResult{std::move(alpha_r), Tensor({B, d}, std::move(adv))};
}

/// Single-example wrapper: returns (alpha_hat, x_adv).
inline std::pair<double, Tensor> binary_search_alpha(const Model& model, const Tensor& x,
                                                     const Tensor& x_pgd, const SoftLabel& label,
                                                     const InterpolationConfig& cfg) {
    if (x.shape().size() != 1) {
        throw std::invalid_argument("binary_search_alpha: single-example input must be rank 1");
    }
    label.validate();
    Tensor xb({1, x.size()}, std::vector<double>(x.data().begin(), x.data().end()));
    Tensor pb({1, x_pgd.size()}, std::vector<double>(x_pgd.data().begin(), x_pgd.data().end()));
    Tensor lb({1, label.probs.size()}, label.probs);
    InterpolationResult res = binary_search_alpha_batch(model, xb, pb, lb, cfg);
    Tensor adv({x.size()},
               std::vector<double>(res.x_adv.data().begin(), res.x_adv.data().end()));
    return {res.alpha_hat[0], std::move(adv)};
}

}  // namespace marginforge
