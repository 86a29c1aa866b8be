#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "marginforge/config.hpp"
#include "marginforge/evalx.hpp"
#include "marginforge/semisup.hpp"

namespace marginforge {

/// Write-to-temp-then-rename so a killed run never leaves a truncated
/// artifact readable as valid.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Dataset assembly from a config
// ---------------------------------------------------------------------------

struct ExperimentData {
    Dataset labeled, unlabeled, test;
};

inline Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
    const auto image_bytes = read_file_bytes(images_path);
    const auto label_bytes = read_file_bytes(labels_path);
    Tensor images = parse_idx(image_bytes);
    Tensor labels = parse_idx(label_bytes);
    if (images.shape().size() != 2 || labels.shape().size() != 1 ||
        images.shape()[0] != labels.shape()[0]) {
        throw std::runtime_error("idx dataset: images/labels extents do not agree");
    }
    Dataset ds;
    ds.inputs = images;
    int max_label = 0;
    for (double v : labels.data()) {
        // label files are u8 payloads parsed as k/255
        const int y = static_cast<int>(std::llround(v * 255.0));
        ds.labels.push_back(y);
        max_label = std::max(max_label, y);
    }
    ds.class_count = static_cast<std::size_t>(max_label) + 1;
    ds.domain_bounds = {0.0, 1.0};
    const auto extents = idx_extents(image_bytes);
    if (extents.size() == 3) ds.image_dims = {extents[1], extents[2]};
    return ds;
}

inline ExperimentData build_data(const ExperimentConfig& cfg) {
    ExperimentData data;
    Dataset train_full;
    if (cfg.dataset_kind == "idx") {
        if (cfg.dataset_idx_images.empty() || cfg.dataset_idx_labels.empty()) {
            throw std::invalid_argument("dataset.idx_images/idx_labels are required for kind=idx");
        }
        train_full = load_idx_dataset(cfg.dataset_idx_images, cfg.dataset_idx_labels);
        if (!cfg.dataset_idx_test_images.empty()) {
            data.test = load_idx_dataset(cfg.dataset_idx_test_images, cfg.dataset_idx_test_labels);
        } else {
            throw std::invalid_argument("dataset.idx_test_images is required for kind=idx");
        }
    } else {
        const SyntheticKind kind = parse_synthetic_kind(cfg.dataset_kind);
        train_full = gen_synthetic(kind, cfg.dataset_n_points, cfg.dataset_noise_sigma,
                                   cfg.dataset_seed);
        data.test = gen_synthetic(kind, cfg.dataset_test_points, cfg.dataset_noise_sigma,
                                  cfg.dataset_test_seed);
        if (cfg.dataset_bounded) {
            train_full.domain_bounds = {0.0, 1.0};
            data.test.domain_bounds = {0.0, 1.0};
        }
    }
    auto [d_l, d_u] = split_semisup(train_full, cfg.split_labeled_fraction, cfg.split_seed);
    data.labeled = std::move(d_l);
    data.unlabeled = std::move(d_u);
    return data;
}

inline std::string dataset_manifest(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "dataset.kind = " << cfg.dataset_kind << "\n";
    os << "dataset.n_points = " << cfg.dataset_n_points << "\n";
    os << "dataset.noise_sigma = " << cfg.dataset_noise_sigma << "\n";
    os << "dataset.seed = " << cfg.dataset_seed << "\n";
    os << "dataset.test_points = " << cfg.dataset_test_points << "\n";
    os << "dataset.test_seed = " << cfg.dataset_test_seed << "\n";
    os << "split.labeled_fraction = " << cfg.split_labeled_fraction << "\n";
    os << "split.seed = " << cfg.split_seed << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Decision-boundary SVG (class-region raster, data points, optional
// x -> x_adv -> x_pgd interpolation traces)
// ---------------------------------------------------------------------------

struct BoundaryOverlay {
    std::array<double, 2> x, x_adv, x_pgd;
};

namespace detail {

struct Viewport {
    double lo_x, hi_x, lo_y, hi_y;
    static constexpr double kMargin = 20.0, kPlot = 520.0;

    // The documented affine transform: data -> pixels, y inverted.
    std::pair<double, double> to_px(double x, double y) const {
        return {kMargin + (x - lo_x) / (hi_x - lo_x) * kPlot,
                kMargin + (hi_y - y) / (hi_y - lo_y) * kPlot};
    }
};

inline const char* class_color(std::size_t cls) {
    static constexpr const char* palette[] = {"#4e79a7", "#e15759", "#59a14f",
                                              "#f28e2b", "#b07aa1", "#76b7b2"};
    return palette[cls % 6];
}

inline std::string fmt_px(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
}

}  // namespace detail

/// Self-contained deterministic SVG of a 2D classifier: a grid_resolution^2
/// cell raster of predicted class regions (exactly that many model
/// evaluations, one batched forward), the dataset points, and optional
/// clean/interpolated/pgd segment overlays.
inline std::string emit_boundary_svg(const Model& model, const Dataset& dataset_2d,
                                     const std::vector<BoundaryOverlay>& overlay,
                                     std::size_t grid_resolution = 60) {
    if (dataset_2d.dim() != 2 || model.input_dim() != 2) {
        throw std::invalid_argument("emit_boundary_svg: input dimension must be exactly 2");
    }
    if (grid_resolution < 2) throw std::invalid_argument("emit_boundary_svg: grid too small");

    detail::Viewport vp{dataset_2d.inputs.at(0), dataset_2d.inputs.at(0),
                        dataset_2d.inputs.at(1), dataset_2d.inputs.at(1)};
    auto widen = [&](double x, double y) {
        vp.lo_x = std::min(vp.lo_x, x);
        vp.hi_x = std::max(vp.hi_x, x);
        vp.lo_y = std::min(vp.lo_y, y);
        vp.hi_y = std::max(vp.hi_y, y);
    };
    auto xs = dataset_2d.inputs.data();
    for (std::size_t i = 0; i < dataset_2d.size(); ++i) widen(xs[i * 2], xs[i * 2 + 1]);
    for (const auto& o : overlay) {
        widen(o.x[0], o.x[1]);
        widen(o.x_adv[0], o.x_adv[1]);
        widen(o.x_pgd[0], o.x_pgd[1]);
    }
    const double pad_x = std::max(1e-6, 0.05 * (vp.hi_x - vp.lo_x));
    const double pad_y = std::max(1e-6, 0.05 * (vp.hi_y - vp.lo_y));
    vp.lo_x -= pad_x;
    vp.hi_x += pad_x;
    vp.lo_y -= pad_y;
    vp.hi_y += pad_y;

    const std::size_t r = grid_resolution;
    std::vector<double> centers(r * r * 2);
    for (std::size_t iy = 0; iy < r; ++iy) {
        for (std::size_t ix = 0; ix < r; ++ix) {
            const double fx = (static_cast<double>(ix) + 0.5) / static_cast<double>(r);
            const double fy = (static_cast<double>(iy) + 0.5) / static_cast<double>(r);
            centers[(iy * r + ix) * 2] = vp.lo_x + fx * (vp.hi_x - vp.lo_x);
            centers[(iy * r + ix) * 2 + 1] = vp.lo_y + fy * (vp.hi_y - vp.lo_y);
        }
    }
    Tensor logits = model.forward(Tensor({r * r, 2}, std::move(centers)), Model::Params::Frozen);
    const std::size_t C = model.class_count();
    auto lv = logits.data();

    const double size = 2.0 * detail::Viewport::kMargin + detail::Viewport::kPlot;
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
        << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
    svg << "<rect width=\"" << size << "\" height=\"" << size << "\" fill=\"white\"/>\n";

    const double cell = detail::Viewport::kPlot / static_cast<double>(r);
    for (std::size_t iy = 0; iy < r; ++iy) {
        for (std::size_t ix = 0; ix < r; ++ix) {
            const std::size_t cls = detail::argmax_row(lv.subspan((iy * r + ix) * C, C));
            // cell (ix, iy) covers an x interval and the y interval flipped
            const double px = detail::Viewport::kMargin + static_cast<double>(ix) * cell;
            const double py = detail::Viewport::kMargin +
                              (static_cast<double>(r - 1 - iy)) * cell;
            svg << "<rect x=\"" << detail::fmt_px(px) << "\" y=\"" << detail::fmt_px(py)
                << "\" width=\"" << detail::fmt_px(cell) << "\" height=\"" << detail::fmt_px(cell)
                << "\" fill=\"" << detail::class_color(cls) << "\" fill-opacity=\"0.30\"/>\n";
        }
    }

    for (std::size_t i = 0; i < dataset_2d.size(); ++i) {
        auto [px, py] = vp.to_px(xs[i * 2], xs[i * 2 + 1]);
        const auto cls = static_cast<std::size_t>(dataset_2d.truth_for_eval(i));
        svg << "<circle cx=\"" << detail::fmt_px(px) << "\" cy=\"" << detail::fmt_px(py)
            << "\" r=\"3\" fill=\"" << detail::class_color(cls)
            << "\" stroke=\"black\" stroke-width=\"0.5\"/>\n";
    }

    for (const auto& o : overlay) {
        auto [x0, y0] = vp.to_px(o.x[0], o.x[1]);
        auto [x1, y1] = vp.to_px(o.x_adv[0], o.x_adv[1]);
        auto [x2, y2] = vp.to_px(o.x_pgd[0], o.x_pgd[1]);
        svg << "<line x1=\"" << detail::fmt_px(x0) << "\" y1=\"" << detail::fmt_px(y0)
            << "\" x2=\"" << detail::fmt_px(x1) << "\" y2=\"" << detail::fmt_px(y1)
            << "\" stroke=\"#222222\" stroke-width=\"1.2\"/>\n";
        svg << "<line x1=\"" << detail::fmt_px(x1) << "\" y1=\"" << detail::fmt_px(y1)
            << "\" x2=\"" << detail::fmt_px(x2) << "\" y2=\"" << detail::fmt_px(y2)
            << "\" stroke=\"#222222\" stroke-width=\"1.2\" stroke-dasharray=\"4 3\"/>\n";
        svg << "<circle cx=\"" << detail::fmt_px(x0) << "\" cy=\"" << detail::fmt_px(y0)
            << "\" r=\"4\" fill=\"none\" stroke=\"#111111\" stroke-width=\"1.5\"/>\n";
        svg << "<circle cx=\"" << detail::fmt_px(x1) << "\" cy=\"" << detail::fmt_px(y1)
            << "\" r=\"3\" fill=\"#ffd60a\" stroke=\"#111111\" stroke-width=\"1\"/>\n";
        svg << "<circle cx=\"" << detail::fmt_px(x2) << "\" cy=\"" << detail::fmt_px(y2)
            << "\" r=\"3\" fill=\"#111111\"/>\n";
    }

    svg << "</svg>\n";
    return svg.str();
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

namespace detail {

inline EvalReport evaluate_model(const Model& model, const Dataset& test, const RunPlan& plan,
                                 std::uint64_t seed) {
    EvalReport report;
    report.natural_acc = natural_accuracy(model, test);
    std::vector<std::size_t> step_grid{10, 20, 40};
    if (std::find(step_grid.begin(), step_grid.end(), plan.eval_attack.steps) == step_grid.end()) {
        step_grid.push_back(plan.eval_attack.steps);
    }
    for (std::size_t steps : step_grid) {
        AttackConfig cfg = plan.eval_attack;
        cfg.steps = steps;
        RobustAccEntry row;
        row.steps = steps;
        row.epsilon = cfg.epsilon;
        row.restarts = cfg.restarts;
        row.accuracy = robust_accuracy(model, test, cfg, Rng::stream_seed(seed, 0x6576u, steps));
        report.robust.push_back(row);
    }
    return report;
}

inline std::vector<BoundaryOverlay> interp_overlays(const Model& model, const Dataset& test,
                                                    const RunPlan& plan, std::size_t want,
                                                    std::uint64_t seed) {
    std::vector<BoundaryOverlay> overlays;
    if (test.dim() != 2) return overlays;
    AttackConfig acfg = plan.eval_attack;
    acfg.epsilon = plan.train.schedule.eps_base;
    acfg.steps = plan.train.attack.steps;
    InterpolationConfig icfg = plan.train.interp;
    auto xv = test.inputs.data();
    const std::size_t C = model.class_count();
    Tensor clean_logits = model.forward(test.inputs, Model::Params::Frozen);
    for (std::size_t i = 0; i < test.size() && overlays.size() < want; ++i) {
        const auto y = static_cast<std::size_t>(test.truth_for_eval(i));
        if (argmax_row(clean_logits.data().subspan(i * C, C)) != y) continue;
        Tensor x({2}, {xv[i * 2], xv[i * 2 + 1]});
        SoftLabel label = SoftLabel::one_hot(y, C);
        Tensor x_pgd = pgd(model, x, label, acfg, Rng::stream_seed(seed, 0x6F76u, i));
        Tensor pgd_logits = model.forward(
            Tensor({1, 2}, {x_pgd.at(0), x_pgd.at(1)}), Model::Params::Frozen);
        if (argmax_row(pgd_logits.data().subspan(0, C)) == y) continue;
        auto [alpha_hat, x_adv] = binary_search_alpha(model, x, x_pgd, label, icfg);
        (void)alpha_hat;
        overlays.push_back(BoundaryOverlay{{x.at(0), x.at(1)},
                                           {x_adv.at(0), x_adv.at(1)},
                                           {x_pgd.at(0), x_pgd.at(1)}});
    }
    return overlays;
}

}  // namespace detail

inline int run_train(const ExperimentConfig& cfg, std::ostream& out) {
    RunPlan plan = build_plan(cfg);
    ExperimentData data = build_data(cfg);
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);

    out << "training: " << cfg.loss_variant << " on " << cfg.dataset_kind << " ("
        << data.labeled.size() << " labeled / " << data.unlabeled.size() << " unlabeled)\n";
    TrainResult result = train(plan.train, {data.labeled, data.unlabeled, data.test}, nullptr,
                               &plan.teacher);

    write_file_atomic(dir / "metrics.csv", result.log.to_csv());
    {
        std::ostringstream bytes;
        auto ckpt = save_checkpoint_bytes(result.model);
        bytes.write(reinterpret_cast<const char*>(ckpt.data()),
                    static_cast<std::streamsize>(ckpt.size()));
        write_file_atomic(dir / "model.ckpt", bytes.str());
        std::ostringstream tbytes;
        auto tckpt = save_checkpoint_bytes(result.teacher);
        tbytes.write(reinterpret_cast<const char*>(tckpt.data()),
                     static_cast<std::streamsize>(tckpt.size()));
        write_file_atomic(dir / "teacher.ckpt", tbytes.str());
    }
    write_file_atomic(dir / "config.cfg", serialize_config(cfg));
    write_file_atomic(dir / "manifest.txt", dataset_manifest(cfg));

    EvalReport report = detail::evaluate_model(result.model, data.test, plan, cfg.train_seed);
    report.diagnostics = assumption_diagnostics(
        result.model, data.test, cfg.diagnose_points, cfg.diagnose_grid_size, plan.train.interp,
        plan.eval_attack, Rng::stream_seed(cfg.train_seed, 0x6467u));
    write_file_atomic(dir / "eval_report.csv", eval_report_csv(report));
    write_file_atomic(dir / "eval_report.records", eval_report_records(report));

    if (data.test.dim() == 2) {
        auto overlays = detail::interp_overlays(result.model, data.test, plan, 6, cfg.train_seed);
        write_file_atomic(dir / "boundary.svg",
                          emit_boundary_svg(result.model, data.test, overlays));
    }

    const auto& last = result.log.epochs.back();
    out << "done: nat_acc=" << last.nat_acc << " robust_acc_pgd20=" << last.robust_acc_pgd20
        << "\nartifacts in " << dir.string() << "\n";
    return 0;
}

inline int run_eval(const ExperimentConfig& cfg, std::ostream& out) {
    if (cfg.eval_checkpoint.empty()) {
        throw std::invalid_argument("eval: eval.checkpoint must name a model file");
    }
    RunPlan plan = build_plan(cfg);
    Model model = load_checkpoint(cfg.eval_checkpoint);
    ExperimentData data = build_data(cfg);
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);

    EvalReport report = detail::evaluate_model(model, data.test, plan, cfg.train_seed);
    write_file_atomic(dir / "eval_report.csv", eval_report_csv(report));
    out << "natural_acc=" << report.natural_acc;
    for (const auto& r : report.robust) {
        out << " pgd" << r.steps << "=" << r.accuracy;
    }
    out << "\n";
    return 0;
}

inline int run_diagnose(const ExperimentConfig& cfg, std::ostream& out) {
    if (cfg.eval_checkpoint.empty()) {
        throw std::invalid_argument("diagnose: eval.checkpoint must name a model file");
    }
    RunPlan plan = build_plan(cfg);
    Model model = load_checkpoint(cfg.eval_checkpoint);
    ExperimentData data = build_data(cfg);
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);

    AttackConfig acfg = plan.eval_attack;
    acfg.steps = plan.train.attack.steps;
    EvalReport report;
    report.natural_acc = natural_accuracy(model, data.test);
    report.diagnostics = assumption_diagnostics(
        model, data.test, cfg.diagnose_points, cfg.diagnose_grid_size, plan.train.interp, acfg,
        Rng::stream_seed(cfg.train_seed, 0x6467u));
    write_file_atomic(dir / "diagnostics.csv", eval_report_csv(report));
    write_file_atomic(dir / "diagnostics.records", eval_report_records(report));
    if (data.test.dim() == 2) {
        auto overlays = detail::interp_overlays(model, data.test, plan, 6, cfg.train_seed);
        write_file_atomic(dir / "boundary.svg", emit_boundary_svg(model, data.test, overlays));
    }
    out << "eligible=" << report.diagnostics.eligible
        << " monotone_fraction=" << report.diagnostics.monotone_fraction
        << " median_loss_ratio=" << report.diagnostics.ratio_stats.median << "\n";
    return 0;
}

inline int run_schedule(const ExperimentConfig& cfg, std::ostream& out) {
    RunPlan plan = build_plan(cfg);
    ScheduleSpec sched = plan.train.schedule;
    sched.total_epochs = plan.train.epochs;
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);

    std::ostringstream csv;
    csv << std::setprecision(17);
    csv << "epoch,eps_max,rho\n";
    for (std::size_t e = 1; e <= plan.train.epochs; ++e) {
        csv << e << "," << eps_at(sched, e) << "," << rho_at(plan.train.rho_schedule, e) << "\n";
    }
    write_file_atomic(dir / "schedule.csv", csv.str());

    // Simple polyline plot of the two schedules.
    double peak = 0.0;
    for (std::size_t e = 1; e <= plan.train.epochs; ++e) {
        peak = std::max({peak, eps_at(sched, e), rho_at(plan.train.rho_schedule, e)});
    }
    std::ostringstream svg;
    const double W = 560, H = 320, M = 30;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" "
        << "width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H
        << "\">\n<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    auto polyline = [&](auto value_at, const char* color, const char* dash) {
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
        if (dash[0] != '\0') svg << " stroke-dasharray=\"" << dash << "\"";
        svg << " points=\"";
        for (std::size_t e = 1; e <= plan.train.epochs; ++e) {
            const double px =
                M + (W - 2 * M) * static_cast<double>(e - 1) /
                        static_cast<double>(std::max<std::size_t>(1, plan.train.epochs - 1));
            const double py = H - M - (H - 2 * M) * (value_at(e) / peak);
            svg << detail::fmt_px(px) << "," << detail::fmt_px(py) << " ";
        }
        svg << "\"/>\n";
    };
    polyline([&](std::size_t e) { return eps_at(sched, e); }, "#4e79a7", "");
    polyline([&](std::size_t e) { return rho_at(plan.train.rho_schedule, e); }, "#e15759", "5 3");
    svg << "</svg>\n";
    write_file_atomic(dir / "schedule.svg", svg.str());
    out << "schedule tabulated for " << plan.train.epochs << " epochs into "
        << (dir / "schedule.csv").string() << "\n";
    return 0;
}

/// Reverse-mode vs central finite differences on randomly composed small
/// MLP losses. Returns the worst relative error observed.
inline double gradcheck_suite(std::size_t cases, std::uint64_t seed, std::ostream& out) {
    double worst = 0.0;
    for (std::size_t c = 0; c < cases; ++c) {
        Rng rng = Rng::derive(seed, c);
        const std::size_t d = 2 + rng.index(3);
        const std::size_t h = 2 + rng.index(5);
        const std::size_t C = 2 + rng.index(3);
        const std::size_t B = 1 + rng.index(3);
        Model model = mlp_init({d, h, C}, rng.next_u64());

        std::vector<double> xv(B * d);
        for (double& v : xv) v = rng.uniform(-1.0, 1.0);
        std::vector<double> yv(B * C, 0.0);
        for (std::size_t b = 0; b < B; ++b) yv[b * C + rng.index(C)] = 1.0;
        Tensor y({B, C}, yv);

        const int flavor = static_cast<int>(c % 3);
        auto loss_value = [&](const Model& m, const Tensor& x) {
            Tensor logits = m.forward(x);
            switch (flavor) {
                case 0:
                    return cross_entropy_mean(logits, y);
                case 1:
                    return add(cross_entropy_mean(logits, y, 0.1),
                               scale(detail::mean_rows(kl_rows_const_ref(y, logits)), 0.5));
                default:
                    return detail::mean_rows(
                        kl_rows_between_logits(scale(logits, 0.5), relu(logits)));
            }
        };

        // Gradient w.r.t. the input batch.
        Tensor x({B, d}, xv, /*requires_grad=*/true);
        Tensor loss = loss_value(model, x);
        GradientMap grads = backward(loss);
        Tensor fd = finite_difference_grad(
            [&](const Tensor& probe) { return loss_value(model, probe).value(); },
            x.detach(), 1e-5);
        auto g = grads.at(x).data();
        auto f = fd.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double denom = std::max({std::abs(g[i]), std::abs(f[i]), 1e-8});
            worst = std::max(worst, std::abs(g[i] - f[i]) / denom);
        }

        // Gradient w.r.t. the first-layer weights via a rebuilt model.
        const Tensor w0 = model.weights()[0];
        if (grads.contains(w0)) {
            Tensor fdw = finite_difference_grad(
                [&](const Tensor& probe) {
                    Model m2 = load_checkpoint_bytes(save_checkpoint_bytes(model));
                    std::copy(probe.data().begin(), probe.data().end(),
                              m2.weights()[0].values_mut().begin());
                    return loss_value(m2, x.detach()).value();
                },
                w0.detach(), 1e-5);
            auto gw = grads.at(w0).data();
            auto fw = fdw.data();
            for (std::size_t i = 0; i < gw.size(); ++i) {
                const double denom = std::max({std::abs(gw[i]), std::abs(fw[i]), 1e-8});
                worst = std::max(worst, std::abs(gw[i] - fw[i]) / denom);
            }
        }
    }
    out << "gradcheck: " << cases << " cases, worst relative error " << worst << "\n";
    return worst;
}

inline int run_gradcheck(const ExperimentConfig& cfg, std::ostream& out) {
    const double worst = gradcheck_suite(50, cfg.train_seed, out);
    if (worst >= 1e-4) {
        out << "gradcheck FAILED (tolerance 1e-4)\n";
        return 1;
    }
    out << "gradcheck passed (tolerance 1e-4)\n";
    return 0;
}

inline int run_sweep(const ExperimentConfig& cfg, std::ostream& out) {
    build_plan(cfg);  // validate before running anything
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);
    std::ostringstream summary;
    summary << std::setprecision(17);
    summary << "parameter,value,nat_acc,robust_acc_pgd20\n";
    for (double v : cfg.sweep_values) {
        ExperimentConfig point = cfg;
        if (cfg.sweep_parameter == "beta") {
            point.loss_beta = v;
        } else {
            point.rho_initial = v;
        }
        std::ostringstream subdir;
        subdir << cfg.sweep_parameter << "_" << v;
        point.output_dir = (dir / subdir.str()).string();
        out << "sweep " << cfg.sweep_parameter << " = " << v << "\n";
        run_train(point, out);
        // Pull the headline numbers back out of the run's metrics.
        RunPlan plan = build_plan(point);
        ExperimentData data = build_data(point);
        Model model = load_checkpoint((std::filesystem::path(point.output_dir) / "model.ckpt").string());
        AttackConfig ecfg = plan.eval_attack;
        ecfg.steps = 20;
        summary << cfg.sweep_parameter << "," << v << "," << natural_accuracy(model, data.test)
                << ","
                << robust_accuracy(model, data.test, ecfg,
                                   Rng::stream_seed(point.train_seed, 0x6576u, 20))
                << "\n";
    }
    write_file_atomic(dir / "sweep_summary.csv", summary.str());
    out << "sweep summary in " << (dir / "sweep_summary.csv").string() << "\n";
    return 0;
}

inline int run_command(const std::string& command, const ExperimentConfig& cfg,
                       std::ostream& out) {
    if (command == "train") return run_train(cfg, out);
    if (command == "eval") return run_eval(cfg, out);
    if (command == "diagnose") return run_diagnose(cfg, out);
    if (command == "schedule") return run_schedule(cfg, out);
    if (command == "gradcheck") return run_gradcheck(cfg, out);
    if (command == "sweep") return run_sweep(cfg, out);
    throw std::invalid_argument("unknown command '" + command + "'");
}

}  // namespace marginforge
