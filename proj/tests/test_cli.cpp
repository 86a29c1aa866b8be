#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "marginforge/config.hpp"
#include "marginforge/runner.hpp"

using namespace marginforge;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("marginforge_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::size_t count_substr(const std::string& hay, const std::string& needle) {
    std::size_t count = 0, pos = 0;
    while ((pos = hay.find(needle, pos)) != std::string::npos) {
        ++count;
        pos += needle.size();
    }
    return count;
}

ExperimentConfig tiny_experiment(const std::string& outname) {
    ExperimentConfig cfg;
    cfg.dataset_n_points = 160;
    cfg.dataset_test_points = 60;
    cfg.split_labeled_fraction = 0.1;
    cfg.model_hidden = {12, 12};
    cfg.teacher_epochs = 15;
    cfg.attack_steps = 4;
    cfg.train_epochs = 3;
    cfg.schedule_t_epochs = 2;
    cfg.rho_double_at_epoch = 3;
    cfg.diagnose_points = 8;
    cfg.diagnose_grid_size = 5;
    cfg.output_dir = fresh_dir(outname).string();
    return cfg;
}

}  // namespace

TEST_CASE("config round-trips losslessly through its text form", "[cli]") {
    ExperimentConfig cfg;
    cfg.dataset_kind = "concentric_circles";
    cfg.model_hidden = {7, 3, 9};
    cfg.optimizer_lr_decay_fracs = {0.5};
    cfg.optimizer_lr_decay_factors = {0.25};
    cfg.loss_lambda = 3.14159265358979312;
    cfg.schedule_gamma = 1.0000000001;
    cfg.sweep_values = {0.0, 0.125, 1.0};
    cfg.eval_checkpoint = "some/path.ckpt";
    cfg.train_record_wall_seconds = true;

    const std::string text = serialize_config(cfg);
    ExperimentConfig back = parse_config(text);
    CHECK(back == cfg);
    CHECK(serialize_config(back) == text);
}

TEST_CASE("config rejects unknown keys and malformed lines by line number", "[cli]") {
    CHECK_THROWS_WITH(parse_config("dataset.kind = two_moons\nnope.key = 3\n"),
                      Catch::Matchers::ContainsSubstring("line 2") &&
                          Catch::Matchers::ContainsSubstring("nope.key"));
    CHECK_THROWS_WITH(parse_config("# fine\n\njust words\n"),
                      Catch::Matchers::ContainsSubstring("line 3"));
    CHECK_THROWS_WITH(parse_config("train.epochs = many\n"),
                      Catch::Matchers::ContainsSubstring("line 1"));
    CHECK_THROWS_WITH(parse_config("attack.random_start = yes\n"),
                      Catch::Matchers::ContainsSubstring("true/false"));

    // comments and blank lines are fine, values may carry trailing comments
    ExperimentConfig cfg = parse_config("# header\n\ntrain.epochs = 9 # inline\n");
    CHECK(cfg.train_epochs == 9);
}

TEST_CASE("build_plan validates enumerations", "[cli]") {
    ExperimentConfig cfg;
    cfg.loss_variant = "nonsense";
    CHECK_THROWS_WITH(build_plan(cfg), Catch::Matchers::ContainsSubstring("nonsense"));
    cfg.loss_variant = "rst";
    cfg.schedule_variant = "sometimes";
    CHECK_THROWS_AS(build_plan(cfg), std::invalid_argument);
    cfg.schedule_variant = "const";
    cfg.attack_objective = "ce";
    CHECK_THROWS_AS(build_plan(cfg), std::invalid_argument);
    cfg.attack_objective = "kl";
    cfg.sweep_parameter = "tau";
    CHECK_THROWS_AS(build_plan(cfg), std::invalid_argument);
    cfg.sweep_parameter = "rho";
    CHECK_NOTHROW(build_plan(cfg));

    // AWR parameters are wired through exactly for AWR variants
    cfg.loss_variant = "ssat_mbi_awr";
    RunPlan plan = build_plan(cfg);
    REQUIRE(plan.train.loss.awr.has_value());
    CHECK(plan.train.loss.awr->lambda_prime == cfg.loss_lambda_prime);
    cfg.loss_variant = "ssat_mbi";
    CHECK_FALSE(build_plan(cfg).train.loss.awr.has_value());
}

TEST_CASE("atomic writes leave no temp residue", "[cli]") {
    fs::path dir = fresh_dir("atomic");
    fs::path target = dir / "artifact.csv";
    write_file_atomic(target, "a,b\n1,2\n");
    CHECK(slurp(target) == "a,b\n1,2\n");
    CHECK_FALSE(fs::exists(target.string() + ".tmp"));
    write_file_atomic(target, "new\n");
    CHECK(slurp(target) == "new\n");
}

TEST_CASE("boundary svg honors the raster contract and the viewport transform", "[cli]") {
    Model m = mlp_init({2, 6, 2}, 4);
    Dataset blobs = gen_synthetic(SyntheticKind::GaussianBlobs, 24, 0.03, 5);

    const std::size_t r = 16;
    const std::uint64_t before = m.forward_call_count();
    const std::string svg = emit_boundary_svg(m, blobs, {}, r);
    CHECK(m.forward_call_count() - before == 1);  // one batched pass over the r^2 grid

    CHECK(svg.rfind("<?xml", 0) == 0);
    CHECK(svg.find("</svg>") != std::string::npos);
    CHECK(count_substr(svg, "<rect ") == r * r + 1);  // background + r^2 cells
    CHECK(count_substr(svg, "<circle ") == blobs.size());
    CHECK(count_substr(svg, "<line ") == 0);

    // overlay endpoints appear at the documented affine-transformed pixels
    BoundaryOverlay o{{0.3, 0.4}, {0.35, 0.42}, {0.4, 0.44}};
    const std::string with_overlay = emit_boundary_svg(m, blobs, {o}, r);
    CHECK(count_substr(with_overlay, "<line ") == 2);

    double lo_x = blobs.inputs.at(0), hi_x = lo_x, lo_y = blobs.inputs.at(1), hi_y = lo_y;
    for (std::size_t i = 0; i < blobs.size(); ++i) {
        lo_x = std::min(lo_x, blobs.inputs.at(i * 2));
        hi_x = std::max(hi_x, blobs.inputs.at(i * 2));
        lo_y = std::min(lo_y, blobs.inputs.at(i * 2 + 1));
        hi_y = std::max(hi_y, blobs.inputs.at(i * 2 + 1));
    }
    lo_x = std::min(lo_x, 0.3);
    hi_x = std::max(hi_x, 0.4);
    lo_y = std::min(lo_y, 0.4);
    hi_y = std::max(hi_y, 0.44);
    const double pad_x = std::max(1e-6, 0.05 * (hi_x - lo_x));
    const double pad_y = std::max(1e-6, 0.05 * (hi_y - lo_y));
    lo_x -= pad_x;
    hi_x += pad_x;
    lo_y -= pad_y;
    hi_y += pad_y;
    auto px = [&](double x) { return 20.0 + (x - lo_x) / (hi_x - lo_x) * 520.0; };
    auto py = [&](double y) { return 20.0 + (hi_y - y) / (hi_y - lo_y) * 520.0; };
    std::ostringstream expected;
    expected << std::fixed << std::setprecision(3) << "x1=\"" << px(0.3) << "\" y1=\"" << py(0.4)
             << "\" x2=\"" << px(0.35) << "\" y2=\"" << py(0.42) << "\"";
    CHECK(with_overlay.find(expected.str()) != std::string::npos);

    Dataset wide;
    wide.inputs = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
    wide.labels = {0, 1};
    wide.class_count = 2;
    CHECK_THROWS_AS(emit_boundary_svg(m, wide, {}), std::invalid_argument);
}

TEST_CASE("schedule subcommand tabulates the curious drop", "[cli]") {
    ExperimentConfig cfg;
    cfg.train_epochs = 100;
    cfg.schedule_variant = "curious";
    cfg.schedule_gamma = 1.25;
    cfg.schedule_t_epochs = 70;
    cfg.schedule_eps_base = 8.0 / 255.0;
    cfg.rho_double_at_epoch = 75;
    cfg.output_dir = fresh_dir("schedule").string();

    std::ostringstream log;
    REQUIRE(run_schedule(cfg, log) == 0);
    std::ifstream csv(fs::path(cfg.output_dir) / "schedule.csv");
    REQUIRE(csv);
    std::string line;
    std::getline(csv, line);
    CHECK(line == "epoch,eps_max,rho");
    double eps70 = 0, eps71 = 0;
    while (std::getline(csv, line)) {
        std::istringstream row(line);
        std::string epoch_s, eps_s, rho_s;
        std::getline(row, epoch_s, ',');
        std::getline(row, eps_s, ',');
        std::getline(row, rho_s, ',');
        if (epoch_s == "70") eps70 = std::stod(eps_s);
        if (epoch_s == "71") eps71 = std::stod(eps_s);
    }
    CHECK(std::abs(eps70 - 10.0 / 255.0) <= 1e-12);
    CHECK(std::abs(eps71 - 8.0 / 255.0) <= 1e-12);
    CHECK(fs::exists(fs::path(cfg.output_dir) / "schedule.svg"));
}

TEST_CASE("train runs are byte-identical for a fixed config and seed", "[cli]") {
    ExperimentConfig cfg = tiny_experiment("det_a");
    std::ostringstream log;
    REQUIRE(run_train(cfg, log) == 0);
    ExperimentConfig cfg2 = cfg;
    cfg2.output_dir = fresh_dir("det_b").string();
    REQUIRE(run_train(cfg2, log) == 0);

    CHECK(slurp(fs::path(cfg.output_dir) / "metrics.csv") ==
          slurp(fs::path(cfg2.output_dir) / "metrics.csv"));
    CHECK(slurp(fs::path(cfg.output_dir) / "model.ckpt") ==
          slurp(fs::path(cfg2.output_dir) / "model.ckpt"));

    // metrics csv has the fixed schema
    std::istringstream csv(slurp(fs::path(cfg.output_dir) / "metrics.csv"));
    std::string header;
    std::getline(csv, header);
    CHECK(header ==
          "epoch,eps_max,rho,mean_alpha_hat,mean_eff_eps,train_loss,nat_acc,robust_acc_pgd20,"
          "wall_seconds");
    std::size_t rows = 0;
    std::string line;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == cfg.train_epochs);
}

TEST_CASE("eval and diagnose consume a trained checkpoint", "[cli]") {
    ExperimentConfig cfg = tiny_experiment("evalcycle");
    std::ostringstream log;
    REQUIRE(run_train(cfg, log) == 0);

    ExperimentConfig ev = cfg;
    ev.eval_checkpoint = (fs::path(cfg.output_dir) / "model.ckpt").string();
    ev.output_dir = fresh_dir("evalcycle_eval").string();
    REQUIRE(run_eval(ev, log) == 0);
    const std::string report = slurp(fs::path(ev.output_dir) / "eval_report.csv");
    CHECK(report.find("natural_acc") != std::string::npos);
    CHECK(report.find("robust_acc,10,") != std::string::npos);
    CHECK(report.find("robust_acc,20,") != std::string::npos);
    CHECK(report.find("robust_acc,40,") != std::string::npos);

    ExperimentConfig di = ev;
    di.output_dir = fresh_dir("evalcycle_diag").string();
    REQUIRE(run_diagnose(di, log) == 0);
    CHECK(fs::exists(fs::path(di.output_dir) / "diagnostics.csv"));
    CHECK(fs::exists(fs::path(di.output_dir) / "diagnostics.records"));
    CHECK(fs::exists(fs::path(di.output_dir) / "boundary.svg"));

    ExperimentConfig missing = cfg;
    missing.eval_checkpoint.clear();
    CHECK_THROWS_WITH(run_eval(missing, log),
                      Catch::Matchers::ContainsSubstring("eval.checkpoint"));
}

TEST_CASE("sweep produces one report per grid value", "[cli]") {
    ExperimentConfig cfg = tiny_experiment("sweep");
    cfg.train_epochs = 2;
    cfg.teacher_epochs = 8;
    cfg.sweep_parameter = "beta";
    cfg.sweep_values = {0.0, 0.5, 1.0};

    std::ostringstream log;
    REQUIRE(run_sweep(cfg, log) == 0);
    const fs::path dir = cfg.output_dir;
    for (const char* sub : {"beta_0", "beta_0.5", "beta_1"}) {
        CHECK(fs::exists(dir / sub / "eval_report.csv"));
        CHECK(fs::exists(dir / sub / "metrics.csv"));
    }
    std::istringstream summary(slurp(dir / "sweep_summary.csv"));
    std::string line;
    std::getline(summary, line);
    CHECK(line == "parameter,value,nat_acc,robust_acc_pgd20");
    std::size_t rows = 0;
    while (std::getline(summary, line)) ++rows;
    CHECK(rows == 3);
}

TEST_CASE("gradcheck subcommand passes its own oracle", "[cli]") {
    std::ostringstream log;
    CHECK(gradcheck_suite(8, 42, log) < 1e-4);
}
