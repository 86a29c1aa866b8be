#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "marginforge/config.hpp"
#include "marginforge/runner.hpp"

namespace {

marginforge::ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return marginforge::parse_config(buf.str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"marginforge: semi-supervised adversarial training with margin-based "
                 "interpolation"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;

    const char* commands[] = {"train", "eval", "diagnose", "schedule", "sweep", "gradcheck"};
    const char* descriptions[] = {
        "run the full training pipeline and write metrics, checkpoint and eval report",
        "attack an existing checkpoint and report natural/robust accuracy",
        "margin-monotonicity and loss-ratio diagnostics for a checkpoint",
        "tabulate and plot the epsilon and rho schedules",
        "train/eval once per value of the swept hyperparameter",
        "run the reverse-mode-vs-finite-difference oracle suite",
    };
    for (int i = 0; i < 6; ++i) {
        CLI::App* sub = app.add_subcommand(commands[i], descriptions[i]);
        sub->add_option("--config", config_path, "experiment config file")->required();
        sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
        sub->add_option("--seed", seed, "training seed (overrides train.seed)")
            ->each([&seed_set](const std::string&) { seed_set = true; });
    }

    CLI11_PARSE(app, argc, argv);

    try {
        marginforge::ExperimentConfig cfg = load_config(config_path);
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        if (seed_set) cfg.train_seed = seed;
        return marginforge::run_command(app.get_subcommands().front()->get_name(), cfg,
                                        std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
