// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//
//   acceptance [--only N[,N...]]

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedknow/check.hpp"
#include "fedknow/experiment.hpp"
#include "fedknow/regression.hpp"

using namespace fedknow;
namespace fs = std::filesystem;

namespace {

const std::string kBenchmark = std::string(FEDKNOW_CONFIG_DIR) + "/synthetic.conf";
constexpr std::size_t kSeeds = 5;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ExperimentConfig benchmark() { return load_config(kBenchmark); }

std::uint64_t seed_at(const ExperimentConfig& cfg, std::size_t s) { return cfg.seed + s; }

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

// ---------------------------------------------------------------------------

Outcome invariant_suite() {
    CheckOptions opts;
    const CheckReport r = run_invariant_check(opts);
    const bool pass = r.ok() && r.instances >= 200 && r.largest_d <= 500 && r.argmax_checks > 0 && r.seconds <= 30.0;
    return {pass, fmt("%zu instances, d<=%zu, worst simplex %.2g, worst jac %.2g, %zu argmax checks, %.1fs",
                      r.instances, r.largest_d, r.worst_simplex_error, r.worst_jacobian_error, r.argmax_checks,
                      r.seconds)};
}

Outcome gradient_check() {
    Rng rng(0x6EAD);
    const double lambdas[] = {0.0, 0.3, 0.7};
    double worst = 0.0;
    std::size_t largest_d = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 2 + rng.below(7), n = 1 + rng.below(6), count = 4 + rng.below(12);
        const std::size_t c = rng.below(k);
        auto mask = [&] {
            LabelMask m(k);
            m.set(c);
            for (std::size_t i = 0; i < k; ++i)
                if (rng.uniform() < 0.5) m.set(i);
            return m;
        };
        ThresholdRule rule{rng.below(n), rng.uniform(-0.5, 0.5), mask(), mask()};
        const KnowledgePair km(PredKM::constant(k, c), RangeKM(k, IdentityMap{}, std::move(rule)), lambdas[trial % 3]);
        auto ds = std::make_shared<Dataset>();
        ds->n = n;
        ds->k = k;
        for (std::size_t i = 0; i < k; ++i) ds->class_names.push_back(std::to_string(i));
        for (std::size_t i = 0; i < count; ++i) {
            Vec x(n);
            for (double& v : x) v = rng.uniform(-1, 1);
            const auto support = km.gr(x).support();
            ds->labels.push_back(support[rng.below(support.size())]);
            ds->features.push_back(std::move(x));
        }
        const Client client(0, ds, iota(count), {}, km);
        ModelParams p = init_params(MlpSpec{{n, 1 + rng.below(12), k}}, rng);
        for (double& v : p.theta) v += 0.3 * rng.normal();
        largest_d = std::max(largest_d, p.size());

        const Vec g = batch_gradient(client, p, client.train());
        double num = 0.0, den = 0.0;
        const double h = 1e-6;
        for (std::size_t j = 0; j < p.size(); ++j) {
            ModelParams up = p, down = p;
            up.theta[j] += h;
            down.theta[j] -= h;
            const double fd = (local_loss(client, up) - local_loss(client, down)) / (2 * h);
            num += (g[j] - fd) * (g[j] - fd);
            den += fd * fd;
        }
        worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-8));
    }
    return {worst <= 1e-5 && largest_d <= 200, fmt("50 instances, d<=%zu, worst rel. error %.2g", largest_d, worst)};
}

Outcome single_client_degeneracy() {
    ExperimentConfig cfg = benchmark();
    cfg.clients = 1;
    cfg.classes_per_client = cfg.synth_classes;
    cfg.rounds = 5;
    cfg.epochs = 2;
    cfg.sampling_rate = 1.0;
    const Experiment ex = build_experiment(cfg, cfg.seed);
    bool pass = true;
    for (FedMode mode : {FedMode::fl, FedMode::flwkm}) {
        ServerState server{ex.init, 0, fed_config(cfg), ex.master, 1};
        const FederatedResult r = run_federated(server, ex.clients, mode);
        const Client c = ex.clients[0].with_injection(mode == FedMode::flwkm);
        ModelParams seq = ex.init;
        for (std::size_t t = 0; t < cfg.rounds; ++t) {
            Rng rng = client_round_rng(ex.master, t, 0);
            seq = local_update(c, seq, cfg.epochs, cfg.batch_size, cfg.learning_rate, rng);
        }
        pass = pass && r.params.size() == seq.size() &&
               std::memcmp(r.params.theta.data(), seq.theta.data(), seq.size() * sizeof(double)) == 0;
    }
    return {pass, fmt("T=5 E=2, d=%zu, fl and flwkm compared bitwise", ex.init.size())};
}

// Five-mode runs of the benchmark, shared by the POV and pattern criteria.
struct BenchmarkRuns {
    std::vector<std::vector<MetricRow>> by_seed;
    double seconds = 0.0;
};

const BenchmarkRuns& benchmark_runs() {
    static const BenchmarkRuns runs = [] {
        const ExperimentConfig cfg = benchmark();
        BenchmarkRuns out;
        const auto start = std::chrono::steady_clock::now();
        for (std::size_t s = 0; s < kSeeds; ++s) {
            const Experiment ex = build_experiment(cfg, seed_at(cfg, s));
            std::vector<MetricRow> rows;
            for (Mode mode : {Mode::ml, Mode::pkm, Mode::mlwkm, Mode::fl, Mode::flwkm}) {
                const auto r = run_baseline(ex, mode).rows;
                rows.insert(rows.end(), r.begin(), r.end());
            }
            out.by_seed.push_back(std::move(rows));
        }
        out.seconds = seconds_since(start);
        return out;
    }();
    return runs;
}

double mode_mean(const std::vector<MetricRow>& rows, Mode mode) {
    std::vector<MetricRow> sel;
    for (const MetricRow& r : rows)
        if (r.mode == mode) sel.push_back(r);
    return mean_ta(sel);
}

Outcome pov_guarantee() {
    const ExperimentConfig cfg = benchmark();
    const BenchmarkRuns& runs = benchmark_runs();
    std::size_t injected_violations = 0, seeds_with_fl_violation = 0;
    double max_fl_pov = 0.0;
    for (const auto& rows : runs.by_seed) {
        bool fl_violation = false;
        for (const MetricRow& r : rows) {
            if ((r.mode == Mode::mlwkm || r.mode == Mode::flwkm) && r.pov != 0.0) ++injected_violations;
            if (r.mode == Mode::fl && r.pov > 0.0) fl_violation = true;
            if (r.mode == Mode::fl) max_fl_pov = std::max(max_fl_pov, r.pov);
        }
        seeds_with_fl_violation += fl_violation ? 1 : 0;
    }
    const bool setting = cfg.synth_classes == 7 && cfg.clients == 5;
    return {setting && injected_violations == 0 && seeds_with_fl_violation == kSeeds,
            fmt("k=%zu M=%zu: %zu injected rows with POV>0; fl POV>0 on %zu/%zu seeds (max %.3f)", cfg.synth_classes,
                cfg.clients, injected_violations, seeds_with_fl_violation, kSeeds, max_fl_pov)};
}

Outcome table_pattern() {
    const ExperimentConfig cfg = benchmark();
    const BenchmarkRuns& runs = benchmark_runs();
    double ml = 0.0, fl = 0.0, flwkm = 0.0;
    for (const auto& rows : runs.by_seed) {
        ml += mode_mean(rows, Mode::ml);
        fl += mode_mean(rows, Mode::fl);
        flwkm += mode_mean(rows, Mode::flwkm);
    }
    const double n = static_cast<double>(kSeeds);
    ml /= n;
    fl /= n;
    flwkm /= n;
    const bool setting = cfg.fraction == 0.01 && cfg.lambda.size() == 1 && cfg.lambda[0] == 0.3;
    return {setting && flwkm - ml >= 0.02 && flwkm >= fl && runs.seconds <= 300.0,
            fmt("fraction %.2f lambda %.1f: ML %.4f FL %.4f FLwKM %.4f (FLwKM-ML %+.2f pp), %.1fs", cfg.fraction,
                cfg.lambda[0], ml, fl, flwkm, 100 * (flwkm - ml), runs.seconds)};
}

Outcome fraction_trend() {
    ExperimentConfig cfg = benchmark();
    cfg.modes = {Mode::flwkm};
    std::vector<double> medians;
    std::string detail;
    for (double fraction : {0.01, 0.05, 0.10, 0.30}) {
        cfg.fraction = fraction;
        std::vector<double> per_seed;
        for (std::size_t s = 0; s < kSeeds; ++s)
            per_seed.push_back(mean_ta(run_baseline(build_experiment(cfg, seed_at(cfg, s)), Mode::flwkm).rows));
        medians.push_back(median(per_seed));
        detail += fmt("%s%.0f%%: %.4f", detail.empty() ? "" : ", ", 100 * fraction, medians.back());
    }
    return {std::is_sorted(medians.begin(), medians.end()), "median FLwKM TA " + detail};
}

Outcome lambda_endpoints() {
    const ExperimentConfig cfg = benchmark();
    const std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    std::vector<std::vector<double>> mean_by_lambda(grid.size());
    std::size_t pkm_mismatches = 0;
    for (std::size_t s = 0; s < kSeeds; ++s) {
        const Experiment ex = build_experiment(cfg, seed_at(cfg, s));
        const auto table = lambda_sweep(ex, grid);
        const auto pkm = run_baseline(ex, Mode::pkm).rows;
        for (std::size_t m = 0; m < pkm.size(); ++m) pkm_mismatches += table.back().ta[m] == pkm[m].ta ? 0 : 1;
        for (std::size_t i = 0; i < grid.size(); ++i) mean_by_lambda[i].push_back(table[i].mean);
    }
    std::vector<double> med;
    for (const auto& v : mean_by_lambda) med.push_back(median(v));
    const auto best = std::max_element(med.begin() + 1, med.begin() + 6);
    return {pkm_mismatches == 0 && *best >= med[0],
            fmt("TA(0.6)!=pkm on %zu client runs; median TA(0)=%.4f best in [0.1,0.5]=%.4f at %.1f, TA(0.6)=%.4f",
                pkm_mismatches, med[0], *best, grid[static_cast<std::size_t>(best - med.begin())], med[6])};
}

Outcome discretization_audit() {
    Rng rng(0xA0D17);
    RegressionDataset reg;
    for (int i = 0; i < 1000; ++i) {
        const Vec x{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
        reg.targets.push_back(std::clamp(6 * x[0] + 4 * x[1] * x[2] + 0.3 * rng.normal(), 0.0, 10.0));
        reg.features.push_back(x);
    }
    auto gp = [](std::span<const double> x) { return 6 * x[0] + 2.0; };
    auto gr = [](std::span<const double> x) {
        return RangeSet::closed(std::max(0.0, 6 * x[0] - 1.5), std::min(10.0, 6 * x[0] + 5.5));
    };
    const IntervalPartition part(0, 10, 12);
    const DiscretizedProblem out = discretize_problem(reg, gp, gr, part);
    const std::size_t violations = audit_assumption(KnowledgePair(out.gp, out.gr, 0.3), out.data.features).size();

    std::size_t refinement_failures = 0;
    for (std::size_t k : {4u, 8u, 16u}) {
        const IntervalPartition coarse(-2.5, 7.25, k), fine(-2.5, 7.25, 2 * k);
        for (int trial = 0; trial < 10000; ++trial) {
            const double s = rng.uniform(-2.5, 7.25);
            refinement_failures += phi_gp(coarse, s) == phi_gp(fine, s) / 2 ? 0 : 1;
        }
        for (std::size_t i = 0; i < k; ++i)
            refinement_failures += phi_gp(coarse, coarse.edge(i)) == phi_gp(fine, fine.edge(2 * i)) / 2 ? 0 : 1;
    }
    return {out.data.size() == 1000 && violations == 0 && refinement_failures == 0,
            fmt("1000 samples, %zu bins: %zu audit violations; refinement k=4,8,16: %zu failures", part.bins(),
                violations, refinement_failures)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome parsers() {
    const std::string data_dir = FEDKNOW_TEST_DATA_DIR;
    std::istringstream fixture(slurp(data_dir + "/sparse-1000.libsvm"));
    const Dataset a = parse_libsvm(fixture);
    std::ostringstream emitted;
    emit_libsvm(emitted, a);
    std::istringstream again(emitted.str());
    LibsvmOptions same_dims;
    same_dims.dims = a.n;
    const bool round_trip = a.size() == 1000 && parse_libsvm(again, same_dims) == a;

    const std::string img = slurp(data_dir + "/golden3-images.idx"), lab = slurp(data_dir + "/golden3-labels.idx");
    std::istringstream img_in(img), lab_in(lab);
    const Dataset g = parse_idx(img_in, lab_in);
    std::ostringstream img_out, lab_out;
    write_idx(img_out, lab_out, 2, 3, {{0, 51, 102, 153, 204, 255}, {255, 0, 255, 0, 255, 0}, {1, 2, 3, 4, 5, 6}},
              {2, 0, 1});
    const bool golden = g.size() == 3 && g.labels == std::vector<std::size_t>{2, 0, 1} &&
                        g.features[0] == Vec{0, 0.2, 0.4, 0.6, 0.8, 1.0} && img_out.str() == img &&
                        lab_out.str() == lab;

    // Each fuzzed line starts valid and receives at least one corruption that
    // makes it malformed, then trailing noise.
    Rng rng(0xF022);
    const std::string noise = "0123456789:.-+eExq,; \t";
    std::size_t structured = 0, accepted = 0, other = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<std::string> tokens{std::to_string(rng.below(5))};
        std::size_t idx = 0;
        const std::size_t entries = 1 + rng.below(6);
        for (std::size_t e = 0; e < entries; ++e) {
            idx += 1 + rng.below(20);
            tokens.push_back(std::to_string(idx) + ":" + format_double(rng.normal()));
        }
        const std::size_t at = 1 + rng.below(entries);
        switch (rng.below(8)) {
            case 0: tokens[0] = "lab" + tokens[0]; break;
            case 1: tokens[at].replace(tokens[at].find(':'), 1, "="); break;
            case 2: tokens[at] = "0:" + tokens[at].substr(tokens[at].find(':') + 1); break;
            case 3: tokens.push_back(tokens[at]); break;
            case 4: tokens[at] = tokens[at].substr(0, tokens[at].find(':') + 1) + "nan"; break;
            case 5: tokens[at] = tokens[at].substr(tokens[at].find(':')); break;
            case 6: tokens[at] += ":" + std::string(1, noise[rng.below(noise.size() - 2)]); break;
            default: tokens[at] = std::to_string(idx + 1 + (std::size_t{1} << 20)) + ":1"; break;
        }
        std::string line;
        for (const std::string& t : tokens) line += (line.empty() ? "" : " ") + t;
        for (std::size_t i = rng.below(4); i > 0; --i) line.push_back(noise[rng.below(noise.size())]);
        std::istringstream in(line + "\n");
        try {
            parse_libsvm(in);
            ++accepted;
        } catch (const ParseError& e) {
            structured += e.location() == 1 ? 1 : 0;
        } catch (...) {
            ++other;
        }
    }
    return {round_trip && golden && structured == 10000,
            fmt("round trip %s, idx golden %s, fuzz: %zu structured errors, %zu accepted, %zu other", round_trip ? "ok" : "FAIL",
                golden ? "ok" : "FAIL", structured, accepted, other)};
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FEDKNOW_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / ("fedknow-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(root);
    const std::vector<std::string> runs{"--threads 1", "--threads 1", "--threads 4"};
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const fs::path dir = root / std::to_string(i);
        const int status = run_cli("run --config " + kBenchmark + " --out " + dir.string() + " " + runs[i]);
        if (status != 0) return {false, fmt("run %zu exited with %d", i, status)};
    }
    std::size_t files = 0, mismatches = 0;
    for (const auto& entry : fs::directory_iterator(root / "0")) {
        const std::string name = entry.path().filename().string();
        ++files;
        const std::string ref = slurp(entry.path());
        for (const char* other : {"1", "2"})
            if (!fs::exists(root / other / name) || slurp(root / other / name) != ref) ++mismatches;
    }
    fs::remove_all(root);
    return {files >= 3 && mismatches == 0,
            fmt("%zu output files compared across 2 runs and threads 1 vs 4: %zu mismatches", files, mismatches)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    if (argc == 3 && std::strcmp(argv[1], "--only") == 0) {
        std::istringstream ids(argv[2]);
        for (std::string id; std::getline(ids, id, ',');) only.insert(std::atoi(id.c_str()));
    } else if (argc != 1) {
        std::fprintf(stderr, "usage: acceptance [--only N[,N...]]\n");
        return 2;
    }

    const std::vector<Criterion> criteria{
        {1, "invariant suite", invariant_suite},
        {2, "gradient vs finite differences", gradient_check},
        {3, "single-client degeneracy", single_client_degeneracy},
        {4, "POV guarantee", pov_guarantee},
        {5, "low-data TA pattern", table_pattern},
        {6, "data-fraction trend", fraction_trend},
        {7, "lambda-sweep endpoints", lambda_endpoints},
        {8, "regression discretization audit", discretization_audit},
        {9, "parsers", parsers},
        {10, "determinism", determinism},
    };
    int failures = 0;
    for (const Criterion& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("%s %2d %-32s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    seconds_since(start));
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
