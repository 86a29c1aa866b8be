// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Thresholds for the end-to-end two-moons experiment were frozen
// from oracle runs of this same harness and are deterministic for the pinned
// seeds.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "marginforge/config.hpp"
#include "marginforge/runner.hpp"

using namespace marginforge;

namespace {

int failures = 0;

void criterion(int id, const std::string& name,
               const std::function<std::pair<bool, std::string>()>& body) {
    const auto start = std::chrono::steady_clock::now();
    bool ok = false;
    std::string detail;
    try {
        auto [passed, info] = body();
        ok = passed;
        detail = info;
    } catch (const std::exception& e) {
        ok = false;
        detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %2d: %s — %s (%.1f s)\n", ok ? "PASS" : "FAIL", id, name.c_str(),
                detail.c_str(), secs);
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

// --- shared fixtures ------------------------------------------------------

struct MoonsFixture {
    Dataset labeled, unlabeled, test;
};

MoonsFixture moons_fixture() {
    Dataset full = gen_synthetic(SyntheticKind::TwoMoons, 1000, 0.02, 7);
    auto [d_l, d_u] = split_semisup(full, 0.05, 3);
    Dataset test = gen_synthetic(SyntheticKind::TwoMoons, 400, 0.02, 99);
    return {std::move(d_l), std::move(d_u), std::move(test)};
}

TeacherConfig teacher_config() {
    TeacherConfig tc;
    tc.epochs = 150;
    tc.optimizer.lr = 0.1;
    tc.weak_sigma = 0.005;
    tc.strong_sigma = 0.03;
    tc.hidden = {64, 64};
    return tc;
}

TrainConfig mbi_config(std::size_t epochs, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 128;
    cfg.hidden = {64, 64};
    cfg.attack.steps = 10;
    cfg.attack.objective = InnerObjective::CeSoft;
    cfg.schedule.variant = EpsVariant::Curious;
    cfg.schedule.eps_base = 0.1;
    cfg.schedule.gamma = 1.25;
    cfg.schedule.t_epochs = (epochs * 7) / 10;
    cfg.rho_schedule.rho_initial = 0.05;
    cfg.rho_schedule.double_at_epoch = (epochs * 3) / 4;
    cfg.interp.steps_k = 3;
    cfg.interp.tau = 2.0;
    cfg.loss.variant = LossVariant::SsatMbi;
    cfg.loss.lambda = 8.0;
    cfg.loss.beta = 0.4;
    cfg.seed = seed;
    return cfg;
}

// --- criteria -------------------------------------------------------------

std::pair<bool, std::string> autodiff_oracle() {
    std::ostringstream sink;
    const auto start = std::chrono::steady_clock::now();
    const double worst = gradcheck_suite(50, 2024, sink);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {worst < 1e-4 && secs < 30.0,
            "worst rel err " + fmt(worst) + " over 50 models in " + fmt(secs) + " s"};
}

std::pair<bool, std::string> pgd_containment() {
    Rng rng(404);
    std::size_t attacked = 0, violations = 0;
    for (int variant = 0; variant < 4; ++variant) {
        const bool bounded = variant % 2 == 0;
        Model model = mlp_init({4, 10, 3}, 50 + static_cast<std::uint64_t>(variant));
        const std::size_t B = 2500, d = 4;
        std::vector<double> xv(B * d);
        for (double& v : xv) v = rng.uniform(0.0, 1.0);
        std::vector<double> yv(B * 3, 0.0);
        for (std::size_t i = 0; i < B; ++i) yv[i * 3 + rng.index(3)] = 1.0;
        Tensor x({B, d}, xv);
        Tensor y({B, 3}, yv);

        AttackConfig cfg;
        cfg.epsilon = variant < 2 ? 0.07 : 0.2;
        cfg.steps = 8;
        cfg.objective = variant < 2 ? InnerObjective::CeSoft : InnerObjective::Kl;
        cfg.restarts = 2;
        if (bounded) cfg.domain_bounds = {0.0, 1.0};

        Tensor out = pgd_batch(model, x, y, cfg, 900 + static_cast<std::uint64_t>(variant));
        attacked += B;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (std::abs(out.at(i) - xv[i]) > cfg.epsilon + 1e-12) ++violations;
            if (bounded && (out.at(i) < -1e-12 || out.at(i) > 1.0 + 1e-12)) ++violations;
        }
    }

    // zero budget is the bit-exact identity
    Model model = mlp_init({3, 5, 2}, 77);
    std::vector<double> xv(60 * 3);
    for (double& v : xv) v = rng.uniform(0.0, 1.0);
    Tensor x({60, 3}, xv);
    std::vector<double> yv(60 * 2, 0.0);
    for (std::size_t i = 0; i < 60; ++i) yv[i * 2 + rng.index(2)] = 1.0;
    AttackConfig zero;
    zero.epsilon = 0.0;
    zero.steps = 10;
    Tensor out = pgd_batch(model, x, Tensor({60, 2}, yv), zero, 5);
    const bool bit_exact =
        std::memcmp(out.data().data(), xv.data(), xv.size() * sizeof(double)) == 0;

    return {violations == 0 && bit_exact,
            std::to_string(attacked) + " points, " + std::to_string(violations) +
                " violations; zero-budget identity " + (bit_exact ? "bit-exact" : "BROKEN")};
}

std::pair<bool, std::string> linear_closed_form() {
    Model m = mlp_init({3, 2}, 4);
    m.weights()[0].values_mut() = {0.8, -0.3, -1.1, 0.6, 0.2, 0.9};
    m.biases()[0].values_mut() = {0.1, -0.2};
    const std::vector<double> xv{0.25, -0.5, 1.5};
    SoftLabel y = SoftLabel::one_hot(1, 2);

    AttackConfig cfg;
    cfg.epsilon = 0.15;
    cfg.steps = 1;
    cfg.step_size = 0.05;
    cfg.random_start = false;
    Tensor x_pgd = pgd(m, Tensor({3}, xv), y, cfg, 0);

    auto w = m.weights()[0].data();
    auto b = m.biases()[0].data();
    std::vector<double> logits{b[0], b[1]};
    for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t j = 0; j < 3; ++j) logits[c] += xv[j] * w[j * 2 + c];
    }
    SoftLabel p = score(logits, 1.0);
    bool exact = true;
    for (std::size_t j = 0; j < 3; ++j) {
        double grad_j = 0.0;
        for (std::size_t c = 0; c < 2; ++c) grad_j += w[j * 2 + c] * (p.probs[c] - y.probs[c]);
        const double expected =
            xv[j] + cfg.step_size * (grad_j > 0 ? 1.0 : grad_j < 0 ? -1.0 : 0.0);
        exact = exact && x_pgd.at(j) == expected;
    }
    return {exact, exact ? "sign-gradient step exact in every coordinate" : "mismatch"};
}

std::pair<bool, std::string> binary_search_oracle() {
    Rng rng(2468);
    std::size_t bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t K = 1 + rng.index(6);
        const double rho = rng.uniform(0.05, 0.8);

        std::function<double(double)> d;
        if (rng.uniform() < 0.5) {
            const double jump = rng.uniform();
            const double low = rng.uniform(0.0, 0.4);
            const double high = low + rng.uniform(0.0, 0.6);
            d = [=](double a) { return a < jump ? low : high; };
        } else {
            const double start = rng.uniform(0.0, 0.5);
            const double knee = rng.uniform(0.1, 0.9);
            const double mid = start + rng.uniform(0.0, 0.3);
            const double end = mid + rng.uniform(0.0, 0.5);
            d = [=](double a) {
                return a <= knee ? start + (mid - start) * (a / knee)
                                 : mid + (end - mid) * ((a - knee) / (1.0 - knee));
            };
        }
        const double alpha_hat = binary_search_threshold(d, rho, K);
        const std::size_t n = std::size_t{1} << K;
        double alpha_star = 1.0;
        for (std::size_t k = 1; k <= n; ++k) {
            const double a = static_cast<double>(k) / static_cast<double>(n);
            if (d(a) >= rho) {
                alpha_star = a;
                break;
            }
        }
        if (std::abs(alpha_hat - alpha_star) > std::pow(2.0, -static_cast<double>(K)) + 1e-15) {
            ++bad;
        }
    }
    const bool degenerate = binary_search_threshold([](double a) { return a; }, 0.3, 3) == 0.375 &&
                            binary_search_threshold([](double) { return 0.0; }, 0.3, 4) == 1.0 &&
                            binary_search_threshold([](double) { return 0.9; }, 0.3, 4) == 0.0625;
    return {bad == 0 && degenerate,
            std::to_string(1000 - bad) + "/1000 surrogates within 2^-K; degenerate cases " +
                (degenerate ? "exact" : "BROKEN")};
}

std::pair<bool, std::string> schedule_closed_forms() {
    const double base = 8.0 / 255.0;
    double worst = 0.0;
    auto track = [&](double got, double expected) {
        worst = std::max(worst, std::abs(got - expected));
    };

    ScheduleSpec c;
    c.variant = EpsVariant::Const;
    c.eps_base = base;
    c.total_epochs = 100;
    for (std::size_t e = 1; e <= 100; ++e) track(eps_at(c, e), base);

    bool exact_equiv = true;
    for (std::size_t t : {std::size_t{50}, std::size_t{60}, std::size_t{70}}) {
        ScheduleSpec lin;
        lin.variant = EpsVariant::Linear;
        lin.eps_base = base;
        lin.t_epochs = t;
        lin.total_epochs = 100;
        for (std::size_t e = 1; e <= 100; ++e) {
            track(eps_at(lin, e), base * std::min(1.0, static_cast<double>(e) / static_cast<double>(t)));
        }
        for (double gamma : {1.25, 1.5}) {
            ScheduleSpec cur = lin;
            cur.variant = EpsVariant::Curious;
            cur.gamma = gamma;
            for (std::size_t e = 1; e <= 100; ++e) {
                const double expected =
                    e <= t ? gamma * base * (static_cast<double>(e) / static_cast<double>(t))
                           : base;
                track(eps_at(cur, e), expected);
            }
            track(eps_at(cur, t) - eps_at(cur, t + 1), (gamma - 1.0) * base);
        }
        ScheduleSpec unit = lin;
        unit.variant = EpsVariant::Curious;
        unit.gamma = 1.0;
        for (std::size_t e = 1; e <= 100; ++e) {
            exact_equiv = exact_equiv && eps_at(unit, e) == eps_at(lin, e);
        }
    }

    RhoSchedule rho;
    rho.rho_initial = 0.05;
    rho.double_at_epoch = 75;
    for (std::size_t e = 1; e <= 100; ++e) {
        track(rho_at(rho, e), e < 75 ? 0.05 : 0.10);
    }

    return {worst <= 1e-12 && exact_equiv,
            "max deviation " + fmt(worst) + "; Curious(1,t)==Linear(t) " +
                (exact_equiv ? "bit-exact" : "BROKEN")};
}

std::pair<bool, std::string> loss_reductions() {
    Rng rng(31);
    Model model = mlp_init({3, 6, 3}, 12);
    const std::size_t B = 5, d = 3, C = 3;
    std::vector<double> xv(B * d), av(B * d), pv(B * d), lv(B * C, 0.0);
    for (std::size_t i = 0; i < B * d; ++i) {
        xv[i] = rng.uniform(0, 1);
        av[i] = xv[i] + rng.uniform(-0.05, 0.05);
        pv[i] = xv[i] + rng.uniform(-0.1, 0.1);
    }
    for (std::size_t i = 0; i < B; ++i) lv[i * C + rng.index(C)] = 1.0;
    LossBatch batch;
    batch.x = Tensor({B, d}, xv);
    batch.x_adv = Tensor({B, d}, av);
    batch.x_pgd = Tensor({B, d}, pv);
    batch.labels = Tensor({B, C}, lv);

    LossConfig b1;
    b1.variant = LossVariant::SsatMbi;
    b1.lambda = 8.0;
    b1.beta = 1.0;
    OuterLossResult r1 = outer_loss(b1, model, nullptr, batch);
    Tensor lx = model.forward(batch.x, Model::Params::Frozen);
    Tensor ladv = model.forward(batch.x_adv, Model::Params::Frozen);
    const double composed =
        cross_entropy_mean(lx, batch.labels).value() +
        8.0 * scale(sum_axis(kl_rows_between_logits(lx, ladv), 0), 1.0 / B).value();
    const bool beta1_exact = r1.total.value() == composed && !r1.logits_pgd.defined();

    LossBatch degen = batch;
    degen.x_adv = batch.x_pgd;
    LossConfig b0 = b1;
    b0.beta = 0.0;
    LossConfig rst;
    rst.variant = LossVariant::Rst;
    rst.lambda = 8.0;
    const double v0 = outer_loss(b0, model, nullptr, degen).total.value();
    const double vr = outer_loss(rst, model, nullptr, degen).total.value();
    const bool beta0_matches_rst = std::abs(v0 - vr) < 1e-9;

    std::size_t out_of_range = 0;
    for (int i = 0; i < 10000; ++i) {
        const std::size_t Cc = 2 + rng.index(4);
        auto draw = [&] {
            SoftLabel l;
            l.probs.resize(Cc);
            double sum = 0;
            for (double& p : l.probs) {
                p = rng.uniform(0, 1);
                sum += p;
            }
            for (double& p : l.probs) p /= sum;
            return l;
        };
        const double w = awr_weight(draw(), draw(), draw());
        if (w < 0.0 || w > 1.0) ++out_of_range;
    }
    SoftLabel onehot = SoftLabel::one_hot(0, 3);
    SoftLabel wrong;
    wrong.probs = {0.0, 0.6, 0.4};
    const bool saturation =
        awr_weight(onehot, onehot, onehot) == 0.5 && awr_weight(onehot, wrong, onehot) == 1.0;

    const bool ok = beta1_exact && beta0_matches_rst && out_of_range == 0 && saturation;
    return {ok, std::string("beta=1 ") + (beta1_exact ? "exact" : "BROKEN") +
                    ", beta=0==RST |diff|<1e-9 " + (beta0_matches_rst ? "yes" : "NO") +
                    ", awr range violations " + std::to_string(out_of_range) +
                    ", saturations " + (saturation ? "exact" : "BROKEN")};
}

struct EndToEnd {
    double mbi_nat = 0, mbi_rob = 0, rst_nat = 0, rst_rob = 0, nat_nat = 0, nat_rob = 0;
    Model sample_mbi_model;  // seed-101 model reused by the diagnostics criterion
    Dataset test;
};

EndToEnd run_end_to_end() {
    EndToEnd out;
    MoonsFixture fx = moons_fixture();
    out.test = fx.test;
    AttackConfig eval_cfg;
    eval_cfg.steps = 20;
    eval_cfg.epsilon = 0.1;
    eval_cfg.objective = InnerObjective::CeHard;

    const std::uint64_t seeds[] = {101, 202, 303};
    for (std::uint64_t seed : seeds) {
        Model teacher = train_teacher(fx.labeled, fx.unlabeled, teacher_config(),
                                      Rng::stream_seed(seed, 1));

        TrainResult mbi = train(mbi_config(60, seed), {fx.labeled, fx.unlabeled, fx.test},
                                &teacher);
        out.mbi_nat += mbi.log.epochs.back().nat_acc / 3.0;
        out.mbi_rob += mbi.log.epochs.back().robust_acc_pgd20 / 3.0;
        if (seed == 101) out.sample_mbi_model = mbi.model;

        TrainConfig rst_cfg = mbi_config(60, seed);
        rst_cfg.loss.variant = LossVariant::Rst;
        rst_cfg.schedule.variant = EpsVariant::Const;
        TrainResult rst = train(rst_cfg, {fx.labeled, fx.unlabeled, fx.test}, &teacher);
        out.rst_nat += rst.log.epochs.back().nat_acc / 3.0;
        out.rst_rob += rst.log.epochs.back().robust_acc_pgd20 / 3.0;

        TrainConfig nat_cfg = rst_cfg;
        nat_cfg.schedule.eps_base = 0.0;
        TrainResult nat = train(nat_cfg, {fx.labeled, fx.unlabeled, fx.test}, &teacher);
        out.nat_nat += nat.log.epochs.back().nat_acc / 3.0;
        out.nat_rob += robust_accuracy(nat.model, fx.test, eval_cfg, 555) / 3.0;
    }
    return out;
}

std::pair<bool, std::string> diagnostics_criterion(const EndToEnd& e2e) {
    InterpolationConfig icfg;
    icfg.rho = 0.05;
    icfg.tau = 2.0;
    icfg.steps_k = 3;
    AttackConfig acfg;
    acfg.epsilon = 0.1;
    acfg.steps = 10;
    AssumptionDiagnostics diag =
        assumption_diagnostics(e2e.sample_mbi_model, e2e.test, 200, 11, icfg, acfg, 7);
    const bool trained_ok = diag.eligible > 0 && diag.monotone_fraction > 0.5 &&
                            diag.ratio_stats.median >= 0.8 && diag.ratio_stats.median <= 1.25;

    // pure linear classifier: monotone fraction exactly 1
    Dataset blobs = gen_synthetic(SyntheticKind::GaussianBlobs, 200, 0.05, 61);
    Model linear = mlp_init({2, 2}, 8);
    std::vector<std::vector<double>> velocity;
    Tensor y = detail::one_hot_rows(blobs.labels, 2);
    for (int step = 0; step < 120; ++step) {
        Tensor loss = cross_entropy_mean(linear.forward(blobs.inputs), y);
        sgd_step(linear, backward(loss), velocity, 0.5, 0.9, 0.0);
    }
    AttackConfig lin_cfg;
    lin_cfg.epsilon = 0.25;
    lin_cfg.steps = 10;
    AssumptionDiagnostics lin = assumption_diagnostics(linear, blobs, 50, 11, icfg, lin_cfg, 17);
    const bool linear_ok = lin.eligible > 0 && lin.monotone_fraction == 1.0;

    return {trained_ok && linear_ok,
            "trained: eligible " + std::to_string(diag.eligible) + ", monotone " +
                fmt(diag.monotone_fraction) + ", median ratio " + fmt(diag.ratio_stats.median) +
                "; linear monotone " + fmt(lin.monotone_fraction)};
}

std::pair<bool, std::string> determinism() {
    ExperimentConfig cfg;
    cfg.dataset_n_points = 300;
    cfg.dataset_test_points = 100;
    cfg.split_labeled_fraction = 0.1;
    cfg.model_hidden = {24, 24};
    cfg.teacher_epochs = 40;
    cfg.attack_steps = 6;
    cfg.train_epochs = 6;
    cfg.schedule_t_epochs = 4;
    cfg.rho_double_at_epoch = 5;
    cfg.diagnose_points = 5;
    cfg.diagnose_grid_size = 5;

    namespace fs = std::filesystem;
    const fs::path a = fs::temp_directory_path() / "marginforge_accept_det_a";
    const fs::path b = fs::temp_directory_path() / "marginforge_accept_det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    std::ostringstream sink;
    cfg.output_dir = a.string();
    run_train(cfg, sink);
    cfg.output_dir = b.string();
    run_train(cfg, sink);

    const auto bytes_a = read_file_bytes(a / "metrics.csv");
    const auto bytes_b = read_file_bytes(b / "metrics.csv");
    const bool same = bytes_a == bytes_b;
    return {same, same ? "metrics CSVs byte-identical (" + std::to_string(bytes_a.size()) +
                             " bytes)"
                       : "metrics CSVs differ"};
}

std::pair<bool, std::string> idx_round_trip() {
    Rng rng(88);
    std::size_t bad = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.index(8);
        const std::size_t d = 1 + rng.index(12);
        const bool matrix = rng.uniform() < 0.5;
        const bool as_f64 = trial % 2 == 1;
        std::vector<double> vals(matrix ? n * d : n);
        for (double& v : vals) {
            v = as_f64 ? rng.uniform(-100.0, 100.0)
                       : static_cast<double>(rng.index(256)) / 255.0;
        }
        Tensor t = matrix ? Tensor({n, d}, vals) : Tensor({n}, vals);
        Tensor back = parse_idx(serialize_idx(t, as_f64 ? 0x0E : 0x08));
        if (back.shape() != t.shape()) {
            ++bad;
            continue;
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (back.at(i) != t.at(i)) {
                ++bad;
                break;
            }
        }
    }

    auto diag_contains = [](const std::vector<unsigned char>& bytes, const char* needle) {
        try {
            parse_idx(bytes);
            return false;
        } catch (const std::exception& e) {
            return std::string(e.what()).find(needle) != std::string::npos;
        }
    };
    const bool magic = diag_contains({1, 0, 0x08, 0x01, 0, 0, 0, 1, 42}, "bad magic");
    const bool trunc =
        diag_contains({0, 0, 0x08, 0x01, 0, 0, 0, 5, 1, 2, 3}, "expected 13");
    const bool dtype =
        diag_contains({0, 0, 0x0D, 0x01, 0, 0, 0, 1, 0}, "unsupported dtype");

    return {bad == 0 && magic && trunc && dtype,
            std::to_string(100 - bad) + "/100 arrays bit-exact; diagnostics " +
                ((magic && trunc && dtype) ? "as documented" : "BROKEN")};
}

}  // namespace

int main() {
    std::printf("marginforge acceptance suite\n");

    criterion(1, "autodiff oracle (50 models vs central differences)", autodiff_oracle);
    criterion(2, "pgd containment over 10000 attacked points", pgd_containment);
    criterion(3, "one-step pgd matches the linear-model closed form", linear_closed_form);
    criterion(4, "bisection vs grid oracle on 1000 monotone surrogates", binary_search_oracle);
    criterion(5, "epsilon and rho schedules match their closed forms", schedule_closed_forms);
    criterion(6, "loss-reduction identities and awr weight range", loss_reductions);

    EndToEnd e2e;
    criterion(7, "two-moons end-to-end direction (3 seeds, 60 epochs)", [&] {
        e2e = run_end_to_end();
        // Thresholds frozen from the oracle runs of this harness: the
        // adversarially trained model stays robust at the 0.72 line where the
        // naturally trained control falls below it, and SSAT-MBI keeps RST's
        // natural accuracy (within 3 points) without losing more than 1 point
        // of robustness.
        const bool a = e2e.mbi_rob >= 0.72 && e2e.nat_rob < 0.72;
        const bool b = e2e.mbi_nat >= e2e.rst_nat - 0.03 && e2e.mbi_rob >= e2e.rst_rob - 0.01;
        return std::pair<bool, std::string>{
            a && b, "MBI " + fmt(e2e.mbi_nat) + "/" + fmt(e2e.mbi_rob) + ", RST " +
                        fmt(e2e.rst_nat) + "/" + fmt(e2e.rst_rob) + ", natural " +
                        fmt(e2e.nat_nat) + "/" + fmt(e2e.nat_rob) + " (nat/rob)"};
    });
    criterion(8, "assumption diagnostics (trained model + linear closed form)",
              [&] { return diagnostics_criterion(e2e); });
    criterion(9, "byte-identical metrics for identical config and seed", determinism);
    criterion(10, "idx serialize/parse round trip and diagnostics", idx_round_trip);

    if (failures == 0) {
        std::printf("all criteria passed\n");
        return 0;
    }
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
}
