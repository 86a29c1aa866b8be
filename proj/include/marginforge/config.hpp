#pragma once

#include <cctype>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "marginforge/attack.hpp"
#include "marginforge/data.hpp"
#include "marginforge/semisup.hpp"

namespace marginforge {

/// Full experiment description, mirroring the line-oriented
/// `section.key = value` config format one field per key. Enumerated options
/// are kept as strings here and converted by build_plan(); every key is
/// always serialized, so parse -> serialize -> parse is the identity.
struct ExperimentConfig {
    std::string dataset_kind = "two_moons";  // two_moons|gaussian_blobs|concentric_circles|idx
    std::size_t dataset_n_points = 1000;
    double dataset_noise_sigma = 0.02;
    std::uint64_t dataset_seed = 7;
    std::size_t dataset_test_points = 400;
    std::uint64_t dataset_test_seed = 99;
    std::string dataset_idx_images;
    std::string dataset_idx_labels;
    std::string dataset_idx_test_images;
    std::string dataset_idx_test_labels;
    bool dataset_bounded = false;  // clamp attacks to [0,1] (image data)

    double split_labeled_fraction = 0.05;
    std::uint64_t split_seed = 3;

    std::vector<std::size_t> model_hidden{64, 64};

    double teacher_confidence_threshold = 0.95;
    double teacher_unsup_weight = 1.0;
    std::size_t teacher_epochs = 150;
    double teacher_weak_sigma = 0.005;
    double teacher_strong_sigma = 0.03;
    std::size_t teacher_batch_labeled = 64;
    std::size_t teacher_batch_unlabeled = 128;
    double teacher_lr = 0.1;
    double teacher_momentum = 0.9;
    double teacher_weight_decay = 5e-4;

    std::size_t attack_steps = 10;
    double attack_step_size = 0.0;  // 0 = epsilon/4
    std::string attack_objective = "ce_soft";  // ce_hard|ce_soft|kl
    std::size_t attack_restarts = 1;
    bool attack_random_start = true;

    std::string schedule_variant = "curious";  // const|linear|curious
    double schedule_eps_base = 0.1;
    std::size_t schedule_t_epochs = 42;
    double schedule_gamma = 1.25;

    double rho_initial = 0.05;
    std::size_t rho_double_at_epoch = 45;  // 0 = never

    double interp_tau = 2.0;
    std::size_t interp_steps_k = 3;

    std::string loss_variant = "ssat_mbi";  // rst|uatpp|ssat_mbi|srst_awr|ssat_mbi_awr
    double loss_lambda = 8.0;
    double loss_beta = 0.4;
    double loss_gamma_prime = 20.0;
    double loss_lambda_prime = 20.0;
    double loss_tau_prime = 1.0;
    double loss_alpha_prime = 0.1;

    double optimizer_lr = 0.1;
    double optimizer_momentum = 0.9;
    double optimizer_weight_decay = 2e-4;
    std::vector<double> optimizer_lr_decay_fracs{0.6, 0.7, 0.9};
    std::vector<double> optimizer_lr_decay_factors{0.1, 0.01, 0.005};

    std::size_t train_epochs = 60;
    std::size_t train_batch_size = 128;
    std::uint64_t train_seed = 1;
    std::size_t train_eval_attack_steps = 20;
    bool train_record_wall_seconds = false;

    std::size_t eval_steps = 20;
    double eval_epsilon = 0.1;
    std::size_t eval_restarts = 1;
    std::string eval_checkpoint;

    std::size_t diagnose_points = 200;
    std::size_t diagnose_grid_size = 11;

    std::string sweep_parameter = "beta";  // beta|rho
    std::vector<double> sweep_values{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};

    std::string output_dir = "out";

    bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

using ConfigMember =
    std::variant<double ExperimentConfig::*, std::size_t ExperimentConfig::*,
                 bool ExperimentConfig::*, std::string ExperimentConfig::*,
                 std::vector<double> ExperimentConfig::*,
                 std::vector<std::size_t> ExperimentConfig::*>;

struct ConfigField {
    const char* key;
    ConfigMember member;
};

inline const std::vector<ConfigField>& config_fields() {
    using C = ExperimentConfig;
    static const std::vector<ConfigField> fields = {
        {"dataset.kind", &C::dataset_kind},
        {"dataset.n_points", &C::dataset_n_points},
        {"dataset.noise_sigma", &C::dataset_noise_sigma},
        {"dataset.seed", &C::dataset_seed},
        {"dataset.test_points", &C::dataset_test_points},
        {"dataset.test_seed", &C::dataset_test_seed},
        {"dataset.idx_images", &C::dataset_idx_images},
        {"dataset.idx_labels", &C::dataset_idx_labels},
        {"dataset.idx_test_images", &C::dataset_idx_test_images},
        {"dataset.idx_test_labels", &C::dataset_idx_test_labels},
        {"dataset.bounded", &C::dataset_bounded},
        {"split.labeled_fraction", &C::split_labeled_fraction},
        {"split.seed", &C::split_seed},
        {"model.hidden", &C::model_hidden},
        {"teacher.confidence_threshold", &C::teacher_confidence_threshold},
        {"teacher.unsup_weight", &C::teacher_unsup_weight},
        {"teacher.epochs", &C::teacher_epochs},
        {"teacher.weak_sigma", &C::teacher_weak_sigma},
        {"teacher.strong_sigma", &C::teacher_strong_sigma},
        {"teacher.batch_labeled", &C::teacher_batch_labeled},
        {"teacher.batch_unlabeled", &C::teacher_batch_unlabeled},
        {"teacher.lr", &C::teacher_lr},
        {"teacher.momentum", &C::teacher_momentum},
        {"teacher.weight_decay", &C::teacher_weight_decay},
        {"attack.steps", &C::attack_steps},
        {"attack.step_size", &C::attack_step_size},
        {"attack.objective", &C::attack_objective},
        {"attack.restarts", &C::attack_restarts},
        {"attack.random_start", &C::attack_random_start},
        {"schedule.variant", &C::schedule_variant},
        {"schedule.eps_base", &C::schedule_eps_base},
        {"schedule.t_epochs", &C::schedule_t_epochs},
        {"schedule.gamma", &C::schedule_gamma},
        {"rho.initial", &C::rho_initial},
        {"rho.double_at_epoch", &C::rho_double_at_epoch},
        {"interp.tau", &C::interp_tau},
        {"interp.steps_k", &C::interp_steps_k},
        {"loss.variant", &C::loss_variant},
        {"loss.lambda", &C::loss_lambda},
        {"loss.beta", &C::loss_beta},
        {"loss.gamma_prime", &C::loss_gamma_prime},
        {"loss.lambda_prime", &C::loss_lambda_prime},
        {"loss.tau_prime", &C::loss_tau_prime},
        {"loss.alpha_prime", &C::loss_alpha_prime},
        {"optimizer.lr", &C::optimizer_lr},
        {"optimizer.momentum", &C::optimizer_momentum},
        {"optimizer.weight_decay", &C::optimizer_weight_decay},
        {"optimizer.lr_decay_fracs", &C::optimizer_lr_decay_fracs},
        {"optimizer.lr_decay_factors", &C::optimizer_lr_decay_factors},
        {"train.epochs", &C::train_epochs},
        {"train.batch_size", &C::train_batch_size},
        {"train.seed", &C::train_seed},
        {"train.eval_attack_steps", &C::train_eval_attack_steps},
        {"train.record_wall_seconds", &C::train_record_wall_seconds},
        {"eval.steps", &C::eval_steps},
        {"eval.epsilon", &C::eval_epsilon},
        {"eval.restarts", &C::eval_restarts},
        {"eval.checkpoint", &C::eval_checkpoint},
        {"diagnose.points", &C::diagnose_points},
        {"diagnose.grid_size", &C::diagnose_grid_size},
        {"sweep.parameter", &C::sweep_parameter},
        {"sweep.values", &C::sweep_values},
        {"output.dir", &C::output_dir},
    };
    return fields;
}

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline double parse_double(const std::string& v, std::size_t line) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return d;
    } catch (const std::exception&) {
        throw std::runtime_error("config line " + std::to_string(line) + ": '" + v +
                                 "' is not a number");
    }
}

inline std::size_t parse_size(const std::string& v, std::size_t line) {
    try {
        std::size_t pos = 0;
        unsigned long long u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return static_cast<std::size_t>(u);
    } catch (const std::exception&) {
        throw std::runtime_error("config line " + std::to_string(line) + ": '" + v +
                                 "' is not a non-negative integer");
    }
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            parts.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    const std::string last = trim(cur);
    if (!last.empty() || !parts.empty()) parts.push_back(last);
    return parts;
}

}  // namespace detail

/// Parse the `section.key = value` format: `#` starts a comment, blank lines
/// are ignored, strings are unquoted, lists comma-separated, booleans
/// true/false. Unknown keys and malformed lines are rejected with their line
/// number.
inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        const std::string line = detail::trim(raw);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": expected 'section.key = value'");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));

        const detail::ConfigField* field = nullptr;
        for (const auto& f : detail::config_fields()) {
            if (key == f.key) {
                field = &f;
                break;
            }
        }
        if (field == nullptr) {
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": unknown key '" + key + "'");
        }
        std::visit(
            [&](auto member) {
                using M = std::remove_cvref_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<M, double>) {
                    cfg.*member = detail::parse_double(value, line_no);
                } else if constexpr (std::is_same_v<M, std::size_t>) {
                    cfg.*member = detail::parse_size(value, line_no);
                } else if constexpr (std::is_same_v<M, bool>) {
                    if (value == "true") {
                        cfg.*member = true;
                    } else if (value == "false") {
                        cfg.*member = false;
                    } else {
                        throw std::runtime_error("config line " + std::to_string(line_no) +
                                                 ": expected true/false, got '" + value + "'");
                    }
                } else if constexpr (std::is_same_v<M, std::string>) {
                    cfg.*member = value;
                } else if constexpr (std::is_same_v<M, std::vector<double>>) {
                    std::vector<double> out;
                    for (const auto& p : detail::split_list(value)) {
                        out.push_back(detail::parse_double(p, line_no));
                    }
                    cfg.*member = std::move(out);
                } else {
                    std::vector<std::size_t> out;
                    for (const auto& p : detail::split_list(value)) {
                        out.push_back(detail::parse_size(p, line_no));
                    }
                    cfg.*member = std::move(out);
                }
            },
            field->member);
    }
    return cfg;
}

/// Canonical serialization: every key, registry order, 17-significant-digit
/// numbers so values survive the round trip bit-exactly.
inline std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    for (const auto& f : detail::config_fields()) {
        os << f.key << " = ";
        std::visit(
            [&](auto member) {
                using M = std::remove_cvref_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<M, double>) {
                    os << detail::fmt_double(cfg.*member);
                } else if constexpr (std::is_same_v<M, std::size_t>) {
                    os << cfg.*member;
                } else if constexpr (std::is_same_v<M, bool>) {
                    os << ((cfg.*member) ? "true" : "false");
                } else if constexpr (std::is_same_v<M, std::string>) {
                    os << cfg.*member;
                } else if constexpr (std::is_same_v<M, std::vector<double>>) {
                    const auto& v = cfg.*member;
                    for (std::size_t i = 0; i < v.size(); ++i) {
                        if (i) os << ",";
                        os << detail::fmt_double(v[i]);
                    }
                } else {
                    const auto& v = cfg.*member;
                    for (std::size_t i = 0; i < v.size(); ++i) {
                        if (i) os << ",";
                        os << v[i];
                    }
                }
            },
            f.member);
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Conversion into the typed runtime plan
// ---------------------------------------------------------------------------

struct RunPlan {
    TrainConfig train;
    TeacherConfig teacher;
    AttackConfig eval_attack;
    ExperimentConfig raw;
};

inline SyntheticKind parse_synthetic_kind(const std::string& s) {
    if (s == "two_moons") return SyntheticKind::TwoMoons;
    if (s == "gaussian_blobs") return SyntheticKind::GaussianBlobs;
    if (s == "concentric_circles") return SyntheticKind::ConcentricCircles;
    throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

inline InnerObjective parse_objective(const std::string& s) {
    if (s == "ce_hard") return InnerObjective::CeHard;
    if (s == "ce_soft") return InnerObjective::CeSoft;
    if (s == "kl") return InnerObjective::Kl;
    throw std::invalid_argument("unknown attack objective '" + s + "'");
}

inline EpsVariant parse_eps_variant(const std::string& s) {
    if (s == "const") return EpsVariant::Const;
    if (s == "linear") return EpsVariant::Linear;
    if (s == "curious") return EpsVariant::Curious;
    throw std::invalid_argument("unknown schedule variant '" + s + "'");
}

inline LossVariant parse_loss_variant(const std::string& s) {
    if (s == "rst") return LossVariant::Rst;
    if (s == "uatpp") return LossVariant::Uatpp;
    if (s == "ssat_mbi") return LossVariant::SsatMbi;
    if (s == "srst_awr") return LossVariant::SrstAwr;
    if (s == "ssat_mbi_awr") return LossVariant::SsatMbiAwr;
    throw std::invalid_argument("unknown loss variant '" + s + "'");
}

inline RunPlan build_plan(const ExperimentConfig& cfg) {
    RunPlan plan;
    plan.raw = cfg;

    TrainConfig& t = plan.train;
    t.epochs = cfg.train_epochs;
    t.batch_size = cfg.train_batch_size;
    t.hidden = cfg.model_hidden;
    t.optimizer.lr = cfg.optimizer_lr;
    t.optimizer.momentum = cfg.optimizer_momentum;
    t.optimizer.weight_decay = cfg.optimizer_weight_decay;
    t.optimizer.decay_fracs = cfg.optimizer_lr_decay_fracs;
    t.optimizer.decay_factors = cfg.optimizer_lr_decay_factors;
    t.attack.steps = cfg.attack_steps;
    t.attack.step_size = cfg.attack_step_size;
    t.attack.objective = parse_objective(cfg.attack_objective);
    t.attack.restarts = cfg.attack_restarts;
    t.attack.random_start = cfg.attack_random_start;
    if (cfg.dataset_bounded) t.attack.domain_bounds = {0.0, 1.0};
    t.schedule.variant = parse_eps_variant(cfg.schedule_variant);
    t.schedule.eps_base = cfg.schedule_eps_base;
    t.schedule.t_epochs = cfg.schedule_t_epochs;
    t.schedule.gamma = cfg.schedule_gamma;
    t.schedule.total_epochs = cfg.train_epochs;
    t.rho_schedule.rho_initial = cfg.rho_initial;
    t.rho_schedule.double_at_epoch = cfg.rho_double_at_epoch;
    t.interp.rho = cfg.rho_initial;
    t.interp.tau = cfg.interp_tau;
    t.interp.steps_k = cfg.interp_steps_k;
    t.loss.variant = parse_loss_variant(cfg.loss_variant);
    t.loss.lambda = cfg.loss_lambda;
    t.loss.beta = cfg.loss_beta;
    if (t.loss.is_awr()) {
        AwrConfig awr;
        awr.gamma_prime = cfg.loss_gamma_prime;
        awr.lambda_prime = cfg.loss_lambda_prime;
        awr.tau_prime = cfg.loss_tau_prime;
        awr.alpha_prime = cfg.loss_alpha_prime;
        t.loss.awr = awr;
    }
    t.eval_attack_steps = cfg.train_eval_attack_steps;
    t.seed = cfg.train_seed;
    t.record_wall_seconds = cfg.train_record_wall_seconds;
    t.validate();

    TeacherConfig& tc = plan.teacher;
    tc.confidence_threshold = cfg.teacher_confidence_threshold;
    tc.unsup_weight = cfg.teacher_unsup_weight;
    tc.epochs = cfg.teacher_epochs;
    tc.weak_sigma = cfg.teacher_weak_sigma;
    tc.strong_sigma = cfg.teacher_strong_sigma;
    tc.batch_labeled = cfg.teacher_batch_labeled;
    tc.batch_unlabeled = cfg.teacher_batch_unlabeled;
    tc.optimizer.lr = cfg.teacher_lr;
    tc.optimizer.momentum = cfg.teacher_momentum;
    tc.optimizer.weight_decay = cfg.teacher_weight_decay;
    tc.optimizer.decay_fracs.clear();
    tc.optimizer.decay_factors.clear();
    tc.hidden = cfg.model_hidden;
    tc.validate();

    AttackConfig& e = plan.eval_attack;
    e.epsilon = cfg.eval_epsilon;
    e.steps = cfg.eval_steps;
    e.step_size = 0.0;
    e.objective = InnerObjective::CeHard;
    e.restarts = cfg.eval_restarts;
    if (cfg.dataset_bounded) e.domain_bounds = {0.0, 1.0};
    e.validate();

    if (cfg.sweep_parameter != "beta" && cfg.sweep_parameter != "rho") {
        throw std::invalid_argument("unknown sweep parameter '" + cfg.sweep_parameter + "'");
    }
    if (cfg.diagnose_grid_size < 2) {
        throw std::invalid_argument("diagnose.grid_size must be >= 2");
    }
    return plan;
}

}  // namespace marginforge
