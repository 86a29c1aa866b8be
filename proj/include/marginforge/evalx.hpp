#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "marginforge/attack.hpp"
#include "marginforge/data.hpp"
#include "marginforge/interpolate.hpp"
#include "marginforge/model.hpp"
#include "marginforge/rng.hpp"

namespace marginforge {

namespace detail {

inline Tensor one_hot_rows(const std::vector<int>& labels, std::size_t class_count) {
    std::vector<double> rows(labels.size() * class_count, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
            throw std::invalid_argument("one_hot_rows: label out of range");
        }
        rows[i * class_count + static_cast<std::size_t>(y)] = 1.0;
    }
    return Tensor({labels.size(), class_count}, std::move(rows));
}

inline std::vector<int> ground_truth(const Dataset& ds) {
    std::vector<int> truth(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) truth[i] = ds.truth_for_eval(i);
    return truth;
}

inline std::size_t argmax_row(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
        if (row[c] > row[best]) best = c;  // ties keep the lowest index
    }
    return best;
}

}  // namespace detail

/// Fraction of examples whose argmax logit (ties to the lowest index)
/// matches the ground truth.
inline double natural_accuracy(const Model& model, const Dataset& test) {
    if (test.empty()) throw std::invalid_argument("natural_accuracy: empty test set");
    const std::vector<int> truth = detail::ground_truth(test);
    Tensor logits = model.forward(test.inputs, Model::Params::Frozen);
    const std::size_t C = model.class_count();
    auto lv = logits.data();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (detail::argmax_row(lv.subspan(i * C, C)) == static_cast<std::size_t>(truth[i])) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

/// Robust accuracy under multi-restart PGD: an example counts as correct only
/// if it is classified correctly for every restart. Restart r runs with the
/// derived seed stream (seed, r), so the restart-1 result is the first
/// restart of any larger budget and accuracy is non-increasing in restarts.
inline double robust_accuracy(const Model& model, const Dataset& test,
                              const AttackConfig& attack_cfg, std::uint64_t seed = 0) {
    attack_cfg.validate();
    if (test.empty()) throw std::invalid_argument("robust_accuracy: empty test set");
    const std::vector<int> truth = detail::ground_truth(test);
    Tensor targets = detail::one_hot_rows(truth, model.class_count());
    const std::size_t C = model.class_count();

    std::vector<unsigned char> correct(test.size(), 1);
    AttackConfig single = attack_cfg;
    single.restarts = 1;
    for (std::size_t r = 0; r < attack_cfg.restarts; ++r) {
        Tensor x_pgd = pgd_batch(model, test.inputs, targets, single,
                                 Rng::stream_seed(seed, 0x7265u, r));
        Tensor logits = model.forward(x_pgd, Model::Params::Frozen);
        auto lv = logits.data();
        for (std::size_t i = 0; i < test.size(); ++i) {
            if (detail::argmax_row(lv.subspan(i * C, C)) !=
                static_cast<std::size_t>(truth[i])) {
                correct[i] = 0;
            }
        }
    }
    std::size_t hits = 0;
    for (unsigned char c : correct) hits += c;
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

struct LossRatioStats {
    double mean = 0.0;
    double median = 0.0;
    double fraction_in_band = 0.0;  // share within [0.8, 1.25]
};

struct MarginCurve {
    std::size_t row = 0;                // dataset row the curve belongs to
    std::vector<double> alphas;
    std::vector<double> margins;
};

struct AssumptionDiagnostics {
    std::size_t eligible = 0;           // points with x correct and x_pgd misclassified
    double monotone_fraction = 0.0;     // share of non-decreasing margin curves (tol 1e-3)
    std::vector<double> loss_ratios;    // ce(x_adv(alpha_hat)) / ce(fresh pgd at eff eps)
    LossRatioStats ratio_stats;
    std::vector<MarginCurve> curves;
};

struct RobustAccEntry {
    std::size_t steps = 0;
    double epsilon = 0.0;
    std::size_t restarts = 1;
    double accuracy = 0.0;
};

struct EvalReport {
    double natural_acc = 0.0;
    std::vector<RobustAccEntry> robust;
    AssumptionDiagnostics diagnostics;
};

/// Margin-monotonicity and effective-epsilon loss-ratio diagnostics over up
/// to `count` sampled points that the model classifies correctly clean and
/// incorrectly after PGD. Read-only: model parameters are untouched. The
/// extra PGD run per point reuses the training step-size policy at the
/// effective budget.
inline AssumptionDiagnostics assumption_diagnostics(const Model& model, const Dataset& sample,
                                                    std::size_t count, std::size_t grid_size,
                                                    const InterpolationConfig& interp_cfg,
                                                    const AttackConfig& attack_cfg,
                                                    std::uint64_t seed = 0) {
    interp_cfg.validate();
    attack_cfg.validate();
    if (grid_size < 2) throw std::invalid_argument("assumption_diagnostics: grid_size must be >= 2");
    if (sample.empty()) throw std::invalid_argument("assumption_diagnostics: empty sample set");

    const std::size_t C = model.class_count();
    const std::size_t d = sample.dim();
    const std::vector<int> truth = detail::ground_truth(sample);
    Tensor targets = detail::one_hot_rows(truth, C);

    Tensor x_pgd_all = pgd_batch(model, sample.inputs, targets, attack_cfg,
                                 Rng::stream_seed(seed, 0x6469u));
    Tensor clean_logits = model.forward(sample.inputs, Model::Params::Frozen);
    Tensor pgd_logits = model.forward(x_pgd_all, Model::Params::Frozen);

    std::vector<std::size_t> order(sample.size());
    std::iota(order.begin(), order.end(), 0);
    Rng::derive(seed, 0x7368u).shuffle(order);

    AssumptionDiagnostics diag;
    std::size_t monotone = 0;
    auto cl = clean_logits.data();
    auto pl = pgd_logits.data();
    auto xv = sample.inputs.data();
    auto pv = x_pgd_all.data();

    for (std::size_t row : order) {
        if (diag.eligible >= count) break;
        const auto y = static_cast<std::size_t>(truth[row]);
        if (detail::argmax_row(cl.subspan(row * C, C)) != y) continue;
        if (detail::argmax_row(pl.subspan(row * C, C)) == y) continue;
        ++diag.eligible;

        std::vector<double> x_row(xv.begin() + static_cast<std::ptrdiff_t>(row * d),
                                  xv.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
        std::vector<double> p_row(pv.begin() + static_cast<std::ptrdiff_t>(row * d),
                                  pv.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
        SoftLabel label = SoftLabel::one_hot(y, C);

        // Margin along the interpolation grid, one batched forward per point.
        MarginCurve curve;
        curve.row = row;
        std::vector<double> grid(grid_size * d);
        for (std::size_t g = 0; g < grid_size; ++g) {
            const double alpha =
                static_cast<double>(g) / static_cast<double>(grid_size - 1);
            curve.alphas.push_back(alpha);
            for (std::size_t j = 0; j < d; ++j) {
                grid[g * d + j] = alpha * p_row[j] + (1.0 - alpha) * x_row[j];
            }
        }
        Tensor grid_logits = model.forward(Tensor({grid_size, d}, grid), Model::Params::Frozen);
        Tensor grid_scores = softmax_rows(grid_logits, interp_cfg.tau);
        auto sv = grid_scores.data();
        bool non_decreasing = true;
        for (std::size_t g = 0; g < grid_size; ++g) {
            SoftLabel s;
            s.probs.assign(sv.begin() + static_cast<std::ptrdiff_t>(g * C),
                           sv.begin() + static_cast<std::ptrdiff_t>((g + 1) * C));
            curve.margins.push_back(margin(s, label));
            if (g > 0 && curve.margins[g] < curve.margins[g - 1] - 1e-3) {
                non_decreasing = false;
            }
        }
        if (non_decreasing) ++monotone;
        diag.curves.push_back(curve);

        // Loss ratio against a fresh PGD run at the effective budget.
        Tensor x_t({d}, x_row);
        Tensor p_t({d}, p_row);
        auto [alpha_hat, x_adv] = binary_search_alpha(model, x_t, p_t, label, interp_cfg);
        (void)alpha_hat;
        const double eff_eps = effective_epsilon(x_t, x_adv);
        AttackConfig fresh = attack_cfg;
        fresh.epsilon = eff_eps;
        fresh.step_size = 0.0;  // same eta policy as training: budget / 4
        fresh.restarts = 1;
        Tensor x_hat = pgd(model, x_t, label, fresh, Rng::stream_seed(seed, 0x6672u, row));

        auto ce_of = [&](const Tensor& point) {
            Tensor xb({1, d}, std::vector<double>(point.data().begin(), point.data().end()));
            Tensor logits = model.forward(xb, Model::Params::Frozen);
            return cross_entropy(std::vector<double>(logits.data().begin(), logits.data().end()),
                                 label);
        };
        const double denom = ce_of(x_hat);
        const double numer = ce_of(x_adv);
        if (denom > 0.0 && numer > 0.0) {  // ratios are strictly positive by contract
            diag.loss_ratios.push_back(numer / denom);
        }
    }

    if (diag.eligible > 0) {
        diag.monotone_fraction =
            static_cast<double>(monotone) / static_cast<double>(diag.eligible);
    }
    if (!diag.loss_ratios.empty()) {
        std::vector<double> sorted = diag.loss_ratios;
        std::sort(sorted.begin(), sorted.end());
        double sum = 0.0, in_band = 0.0;
        for (double r : sorted) {
            sum += r;
            if (r >= 0.8 && r <= 1.25) in_band += 1.0;
        }
        diag.ratio_stats.mean = sum / static_cast<double>(sorted.size());
        diag.ratio_stats.median = sorted.size() % 2 == 1
                                      ? sorted[sorted.size() / 2]
                                      : 0.5 * (sorted[sorted.size() / 2 - 1] +
                                               sorted[sorted.size() / 2]);
        diag.ratio_stats.fraction_in_band = in_band / static_cast<double>(sorted.size());
    }
    return diag;
}

// ---------------------------------------------------------------------------
// Serialization: a small CSV of scalar metrics plus a line-delimited record
// stream with the margin curves and loss ratios for plotting.
// ---------------------------------------------------------------------------

inline std::string eval_report_csv(const EvalReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "metric,steps,epsilon,restarts,value\n";
    os << "natural_acc,,,," << r.natural_acc << "\n";
    for (const auto& e : r.robust) {
        os << "robust_acc," << e.steps << "," << e.epsilon << "," << e.restarts << ","
           << e.accuracy << "\n";
    }
    os << "monotone_fraction,,,," << r.diagnostics.monotone_fraction << "\n";
    os << "loss_ratio_mean,,,," << r.diagnostics.ratio_stats.mean << "\n";
    os << "loss_ratio_median,,,," << r.diagnostics.ratio_stats.median << "\n";
    os << "loss_ratio_in_band,,,," << r.diagnostics.ratio_stats.fraction_in_band << "\n";
    return os.str();
}

inline std::string eval_report_records(const EvalReport& r) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& c : r.diagnostics.curves) {
        for (std::size_t i = 0; i < c.alphas.size(); ++i) {
            os << "curve row=" << c.row << " alpha=" << c.alphas[i]
               << " margin=" << c.margins[i] << "\n";
        }
    }
    for (double ratio : r.diagnostics.loss_ratios) {
        os << "loss_ratio value=" << ratio << "\n";
    }
    return os.str();
}

}  // namespace marginforge
