#pragma once

// The five-approach comparison (ml, pkm, mlwkm, fl, flwkm) and the lambda
// sweep. Every mode of one seed shares the same data, splits, knowledge
// models and initial parameters, so results are paired.

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedknow/config.hpp"
#include "fedknow/data.hpp"
#include "fedknow/fed.hpp"
#include "fedknow/knowledge.hpp"
#include "fedknow/log.hpp"
#include "fedknow/metrics.hpp"
#include "fedknow/nn.hpp"

namespace fedknow {

struct MetricRow {
    Mode mode = Mode::ml;
    std::size_t client = 0;
    std::uint64_t seed = 0;
    double ta = 0.0;
    double pov = 0.0;
};

struct Experiment {
    ExperimentConfig config;
    std::uint64_t seed = 0;
    std::shared_ptr<const Dataset> data;
    std::vector<Client> clients;
    ModelParams init;
    /// Rng that seeds sampling and per-client training streams.
    Rng master;
};

// Stream tags for Rng::derive.
inline constexpr std::uint64_t kTagData = 1;
inline constexpr std::uint64_t kTagPartition = 2;
inline constexpr std::uint64_t kTagSplit = 3;
inline constexpr std::uint64_t kTagKm = 4;
inline constexpr std::uint64_t kTagSubsample = 5;
inline constexpr std::uint64_t kTagInit = 6;
inline constexpr std::uint64_t kTagTrain = 7;

inline Dataset load_dataset(const ExperimentConfig& cfg, const Rng& root) {
    switch (cfg.source) {
        case DataSource::synth: {
            Rng rng = root.derive({kTagData});
            return synth_gaussian(cfg.synth_classes, cfg.synth_dims,
                                  std::vector<std::size_t>(cfg.synth_classes, cfg.synth_per_class), cfg.synth_sep, rng);
        }
        case DataSource::libsvm: {
            std::ifstream in(cfg.libsvm_path);
            if (!in) throw std::runtime_error("cannot open libsvm file '" + cfg.libsvm_path + "'");
            return parse_libsvm(in);
        }
        case DataSource::idx: {
            std::ifstream images(cfg.idx_images, std::ios::binary);
            std::ifstream labels(cfg.idx_labels, std::ios::binary);
            if (!images) throw std::runtime_error("cannot open idx file '" + cfg.idx_images + "'");
            if (!labels) throw std::runtime_error("cannot open idx file '" + cfg.idx_labels + "'");
            return parse_idx(images, labels);
        }
    }
    throw std::logic_error("load_dataset: unknown source");
}

inline FeatureMap pkm_feature_map(const ExperimentConfig& cfg, std::size_t dims) {
    if (cfg.pkm_pool > 0) {
        const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dims))));
        if (side * side != dims) throw ConfigError("knowledge.pkm_pool needs square image features");
        return MaxpoolMap{side, cfg.pkm_pool};
    }
    if (cfg.pkm_features.empty()) return IdentityMap{};
    for (std::size_t i : cfg.pkm_features)
        if (i >= dims) throw ConfigError("knowledge.pkm_features index " + std::to_string(i) + " out of range");
    return MaskMap{cfg.pkm_features};
}

inline Experiment build_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const Rng root(seed);
    Dataset raw = load_dataset(cfg, root);
    raw.validate();
    if (cfg.classes_per_client > raw.k) throw ConfigError("data.classes_per_client exceeds the number of classes");

    Rng part_rng = root.derive({kTagPartition});
    const ClientSplit split = partition_noniid(raw, cfg.clients, cfg.classes_per_client, cfg.imbalance, part_rng);

    std::vector<TrainTest> local(cfg.clients);
    std::vector<std::size_t> pool;
    for (std::size_t m = 0; m < cfg.clients; ++m) {
        Rng rng = root.derive({kTagSplit, m});
        local[m] = train_test_split(raw, split.indices[m], cfg.test_fraction, rng);
        if (local[m].train.empty() || local[m].test.empty())
            throw std::runtime_error("client " + std::to_string(m) + " received too few samples");
        pool.insert(pool.end(), local[m].train.begin(), local[m].train.end());
    }
    auto data = std::make_shared<const Dataset>(MinMaxScaler::fit(raw, pool).apply(raw));

    const FeatureMap fmap = pkm_feature_map(cfg, data->n);
    const KeyQuantizer quantizer{cfg.rkm_features, cfg.rkm_buckets};
    Experiment ex{cfg, seed, data, {}, {}, root.derive({kTagTrain})};
    for (std::size_t m = 0; m < cfg.clients; ++m) {
        Rng rng = root.derive({kTagKm, m});
        // The P-KM is fitted on a held-out share of the training pool; the
        // remainder is the pool the learned models may draw from.
        const TrainTest km_split = train_test_split(*data, local[m].train, cfg.km_fraction, rng);
        const Dataset km_data = data->select(km_split.test);
        PredKM gp = fit_logistic_pkm(km_data.features, km_data.labels, data->k, fmap, cfg.pkm_epochs,
                                     cfg.pkm_learning_rate, rng);

        // The R-KM sees training labels only; test points contribute their
        // P-KM prediction.
        const Dataset labelled = data->select(local[m].train);
        RangeKM gr = build_table_rkm(labelled.features, labelled.labels, data->k, gp, quantizer,
                                     data->select(local[m].test).features);

        Rng sub = root.derive({kTagSubsample, m});
        std::vector<std::size_t> train = subsample_indices(*data, km_split.train, cfg.fraction, sub);
        ex.clients.emplace_back(m, data, std::move(train), local[m].test,
                                KnowledgePair(std::move(gp), std::move(gr), cfg.lambda_for(m)));
    }

    MlpSpec spec;
    spec.layer_sizes.push_back(data->n);
    spec.layer_sizes.insert(spec.layer_sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
    spec.layer_sizes.push_back(data->k);
    Rng init_rng = root.derive({kTagInit});
    ex.init = init_params(spec, init_rng);
    return ex;
}

/// Same experiment with every client's lambda replaced.
inline Experiment with_lambda(const Experiment& ex, double lambda) {
    Experiment out = ex;
    out.clients.clear();
    for (const Client& c : ex.clients)
        out.clients.emplace_back(c.id(), ex.data, c.train(), c.test(),
                                 KnowledgePair(c.knowledge().gp, c.knowledge().gr, lambda), c.injects());
    return out;
}

/// FNV-1a over the initial parameters and every client's index lists.
inline std::uint64_t fingerprint(const Experiment& ex) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto eat = [&](const void* p, std::size_t len) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < len; ++i) h = (h ^ b[i]) * 0x100000001B3ULL;
    };
    eat(ex.init.theta.data(), ex.init.theta.size() * sizeof(double));
    for (const Client& c : ex.clients) {
        eat(c.train().data(), c.train().size() * sizeof(std::size_t));
        eat(c.test().data(), c.test().size() * sizeof(std::size_t));
    }
    return h;
}

inline FedConfig fed_config(const ExperimentConfig& cfg) {
    FedConfig f;
    f.rounds = cfg.rounds;
    f.epochs = cfg.epochs;
    f.batch_size = cfg.batch_size;
    f.learning_rate = cfg.learning_rate;
    f.sampling_rate = cfg.sampling_rate;
    f.threads = cfg.threads;
    return f;
}

/// Local-only training for T*E epochs using the same per-round streams as
/// a single-client federation.
inline ModelParams train_locally(const Experiment& ex, const Client& client) {
    ModelParams params = ex.init;
    for (std::size_t t = 0; t < ex.config.rounds; ++t) {
        Rng rng = client_round_rng(ex.master, t, client.id());
        params = local_update(client, params, ex.config.epochs, ex.config.batch_size, ex.config.learning_rate, rng);
    }
    return params;
}

struct BaselineResult {
    std::vector<MetricRow> rows;
    /// Per-round reports, filled for fl and flwkm.
    std::vector<RoundReport> rounds;
    /// Final shared parameters for fl and flwkm.
    std::optional<ModelParams> params;
};

inline BaselineResult run_baseline(const Experiment& ex, Mode mode) {
    BaselineResult out;
    auto row = [&](const Client& c, double ta, double pov_value) {
        out.rows.push_back({mode, c.id(), ex.seed, ta, pov_value});
    };
    switch (mode) {
        case Mode::pkm:
            for (const Client& c : ex.clients) {
                std::vector<std::size_t> predicted, labels;
                std::vector<LabelMask> ranges;
                for (std::size_t pos = 0; pos < c.test().size(); ++pos) {
                    predicted.push_back(c.test_knowledge(pos).gp_class);
                    labels.push_back(c.test_y(pos));
                    ranges.push_back(c.test_range(pos));
                }
                row(c, test_accuracy(predicted, labels), pov(predicted, ranges));
            }
            break;
        case Mode::ml:
        case Mode::mlwkm: {
            std::vector<ClientMetrics> metrics(ex.clients.size());
            detail::parallel_for(ex.clients.size(), ex.config.threads, [&](std::size_t m) {
                const Client c = ex.clients[m].with_injection(mode == Mode::mlwkm);
                metrics[m] = evaluate_client(c, train_locally(ex, c));
            });
            for (std::size_t m = 0; m < ex.clients.size(); ++m) row(ex.clients[m], metrics[m].ta, metrics[m].pov);
            break;
        }
        case Mode::fl:
        case Mode::flwkm: {
            ServerState server{ex.init, 0, fed_config(ex.config), ex.master, ex.clients.size()};
            FederatedResult fr = run_federated(server, ex.clients, mode == Mode::flwkm ? FedMode::flwkm : FedMode::fl);
            for (const Client& c : ex.clients) {
                const ClientMetrics cm = evaluate_client(c.with_injection(mode == Mode::flwkm), fr.params);
                row(c, cm.ta, cm.pov);
            }
            out.rounds = std::move(fr.reports);
            out.params = std::move(fr.params);
            break;
        }
    }
    return out;
}

inline double mean_ta(const std::vector<MetricRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("mean_ta: no rows");
    double acc = 0.0;
    for (const MetricRow& r : rows) acc += r.ta;
    return acc / static_cast<double>(rows.size());
}

struct SweepRow {
    double lambda = 0.0;
    std::vector<double> ta;  // per client
    double mean = 0.0;
};

/// One flwkm run per lambda on the same experiment.
inline std::vector<SweepRow> lambda_sweep(const Experiment& ex, const std::vector<double>& grid) {
    std::vector<SweepRow> table;
    for (double lambda : grid) {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda_sweep: grid values must lie in [0,1]");
        const auto rows = run_baseline(with_lambda(ex, lambda), Mode::flwkm).rows;
        SweepRow r{lambda, {}, mean_ta(rows)};
        for (const MetricRow& mr : rows) r.ta.push_back(mr.ta);
        table.push_back(std::move(r));
    }
    return table;
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_metric_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
    out << "mode,client,seed,ta,pov\n";
    for (const MetricRow& r : rows)
        out << mode_name(r.mode) << ',' << r.client << ',' << r.seed << ',' << format_double(r.ta) << ','
            << format_double(r.pov) << '\n';
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "lambda,client,ta\n";
    for (const SweepRow& r : rows) {
        for (std::size_t m = 0; m < r.ta.size(); ++m)
            out << format_double(r.lambda) << ',' << m << ',' << format_double(r.ta[m]) << '\n';
        out << format_double(r.lambda) << ",mean," << format_double(r.mean) << '\n';
    }
}

/// Writes through a temporary sibling and renames it into place.
template <typename Writer>
void write_file_atomic(const std::filesystem::path& path, Writer&& writer, bool binary = false) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        writer(out);
        out.flush();
        if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

/// Runs every configured mode and writes metrics.csv, rounds_<mode>.csv and
/// params_<mode>.bin under `out_dir`. Returns all metric rows.
inline std::vector<MetricRow> run_experiment(const ExperimentConfig& cfg, std::uint64_t seed,
                                             const std::filesystem::path& out_dir) {
    const Experiment ex = build_experiment(cfg, seed);
    log::info("experiment seed ", seed, ": ", ex.clients.size(), " clients, d = ", ex.init.size());
    std::vector<MetricRow> all;
    for (Mode mode : cfg.modes) {
        BaselineResult res = run_baseline(ex, mode);
        log::info("mode ", mode_name(mode), ": mean TA ", mean_ta(res.rows));
        if (mode == Mode::fl || mode == Mode::flwkm) {
            write_file_atomic(out_dir / ("rounds_" + std::string(mode_name(mode)) + ".csv"),
                              [&](std::ostream& o) { write_round_csv(o, res.rounds); });
            write_file_atomic(
                out_dir / ("params_" + std::string(mode_name(mode)) + ".bin"),
                [&](std::ostream& o) { save_params(o, *res.params); }, true);
        }
        all.insert(all.end(), res.rows.begin(), res.rows.end());
    }
    write_file_atomic(out_dir / "metrics.csv", [&](std::ostream& o) { write_metric_csv(o, all); });
    return all;
}

}  // namespace fedknow
