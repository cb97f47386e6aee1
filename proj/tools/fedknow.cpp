// fedknow: knowledge-injected federated learning simulator.
//
//   fedknow run --config PATH [--out DIR] [--seed N] [--threads N]
//   fedknow sweep-lambda --config PATH --grid a,b,c [--out DIR] [--seed N] [--threads N]
//   fedknow check [--instances N] [--seed N]
//
// Exit status: 0 success, 1 runtime failure, 2 bad flags or config.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedknow/check.hpp"
#include "fedknow/config.hpp"
#include "fedknow/experiment.hpp"
#include "fedknow/log.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Overrides {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
};

fedknow::ExperimentConfig load(const Overrides& o) {
    fedknow::ExperimentConfig cfg = fedknow::load_config(o.config);
    if (o.out) cfg.out = *o.out;
    if (o.seed) cfg.seed = *o.seed;
    if (o.threads) cfg.threads = *o.threads;
    cfg.validate();
    return cfg;
}

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> grid;
    for (const std::string& item : fedknow::detail::split_list(text)) {
        const double v = fedknow::detail::parse_scalar<double>("--grid", item);
        if (!(v >= 0.0 && v <= 1.0)) throw fedknow::ConfigError("--grid values must lie in [0,1]");
        grid.push_back(v);
    }
    if (grid.empty()) throw fedknow::ConfigError("--grid must list at least one value");
    return grid;
}

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "experiment configuration file")->required();
    cmd->add_option("--out", o.out, "output directory (overrides experiment.out)");
    cmd->add_option("--seed", o.seed, "random seed (overrides experiment.seed)");
    cmd->add_option("--threads", o.threads, "worker threads per round")->check(CLI::PositiveNumber);
}

int run_check(std::size_t instances, std::uint64_t seed) {
    fedknow::CheckOptions opts;
    opts.instances = instances;
    opts.seed = seed;
    const fedknow::CheckReport r = fedknow::run_invariant_check(opts);
    std::printf("instances           %zu (largest d = %zu)\n", r.instances, r.largest_d);
    std::printf("(a) simplex         %s  worst |sum-1| = %.3g\n", r.simplex_failures ? "FAIL" : "ok", r.worst_simplex_error);
    std::printf("(b) trust >= lambda %s  failures = %zu\n", r.trust_failures ? "FAIL" : "ok", r.trust_failures);
    std::printf("(b) argmax = gp     %s  %zu checked, %zu failures\n", r.argmax_failures ? "FAIL" : "ok", r.argmax_checks,
                r.argmax_failures);
    std::printf("(c) range support   %s  failures = %zu\n", r.range_failures ? "FAIL" : "ok", r.range_failures);
    std::printf("(d) jacobian vs FD  %s  worst rel. error = %.3g\n", r.jacobian_failures ? "FAIL" : "ok",
                r.worst_jacobian_error);
    std::printf("elapsed             %.2f s\n", r.seconds);
    return r.ok() ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge-injected federated learning simulator"};
    app.require_subcommand(1);

    Overrides run_opts;
    auto* run = app.add_subcommand("run", "train and evaluate every configured approach");
    add_common(run, run_opts);

    Overrides sweep_opts;
    std::string grid_text;
    auto* sweep = app.add_subcommand("sweep-lambda", "federated runs over a grid of lambda values");
    add_common(sweep, sweep_opts);
    sweep->add_option("--grid", grid_text, "comma-separated lambda values")->required();

    std::size_t check_instances = 200;
    std::uint64_t check_seed = fedknow::CheckOptions{}.seed;
    auto* check = app.add_subcommand("check", "randomized invariant suite for the personalized model");
    check->add_option("--instances", check_instances, "number of random instances")->check(CLI::PositiveNumber);
    check->add_option("--seed", check_seed, "random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "fedknow: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (*check) return run_check(check_instances, check_seed);

        if (*run) {
            const auto cfg = load(run_opts);
            const auto rows = fedknow::run_experiment(cfg, cfg.seed, cfg.out);
            std::printf("mode,client,ta,pov\n");
            for (const auto& r : rows)
                std::printf("%s,%zu,%.4f,%.4f\n", fedknow::mode_name(r.mode), r.client, r.ta, r.pov);
            return 0;
        }

        if (*sweep) {
            const auto cfg = load(sweep_opts);
            const auto grid = parse_grid(grid_text);
            const auto ex = fedknow::build_experiment(cfg, cfg.seed);
            const auto table = fedknow::lambda_sweep(ex, grid);
            const std::filesystem::path out = std::filesystem::path(cfg.out) / "lambda_sweep.csv";
            fedknow::write_file_atomic(out, [&](std::ostream& o) { fedknow::write_sweep_csv(o, table); });
            for (const auto& r : table) std::printf("lambda %.3f  mean TA %.4f\n", r.lambda, r.mean);
            return 0;
        }
    } catch (const fedknow::ConfigError& e) {
        fedknow::log::error(e.what());
        std::cerr << app.help();
        return kExitUsage;
    } catch (const std::exception& e) {
        fedknow::log::error(e.what());
        return kExitRuntime;
    }
    return kExitUsage;
}
