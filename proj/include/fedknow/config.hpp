#pragma once

// Experiment configuration: a flat `key = value` file grouped by `[section]`
// headers. `#` starts a comment. Unknown sections or keys are errors.
//
//   [data]        source, libsvm, idx_images, idx_labels, synth_classes,
//                 synth_dims, synth_per_class, synth_sep, fraction,
//                 classes_per_client, imbalance, test_fraction
//   [federation]  clients, rounds, epochs, batch_size, learning_rate,
//                 sampling_rate, hidden
//   [knowledge]   lambda, pkm_features, pkm_pool, pkm_epochs,
//                 pkm_learning_rate, km_fraction, rkm_features, rkm_buckets
//   [experiment]  seed, modes, out, threads

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fedknow {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Mode { ml, pkm, mlwkm, fl, flwkm };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::ml: return "ml";
        case Mode::pkm: return "pkm";
        case Mode::mlwkm: return "mlwkm";
        case Mode::fl: return "fl";
        case Mode::flwkm: return "flwkm";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    for (Mode m : {Mode::ml, Mode::pkm, Mode::mlwkm, Mode::fl, Mode::flwkm})
        if (s == mode_name(m)) return m;
    throw ConfigError("unknown mode '" + s + "' (expected ml, pkm, mlwkm, fl or flwkm)");
}

enum class DataSource { synth, libsvm, idx };

struct ExperimentConfig {
    // [data]
    DataSource source = DataSource::synth;
    std::string libsvm_path;
    std::string idx_images;
    std::string idx_labels;
    std::size_t synth_classes = 7;
    std::size_t synth_dims = 20;
    std::size_t synth_per_class = 3000;
    double synth_sep = 3.0;
    double fraction = 1.0;
    std::size_t classes_per_client = 5;
    double imbalance = 0.7;
    double test_fraction = 0.2;

    // [federation]
    std::size_t clients = 5;
    std::size_t rounds = 20;
    std::size_t epochs = 1;
    std::size_t batch_size = 10;
    double learning_rate = 0.1;
    double sampling_rate = 1.0;
    std::vector<std::size_t> hidden{64, 64};

    // [knowledge]
    /// One value for every client, or one per client.
    std::vector<double> lambda{0.3};
    /// Feature indices (0-based) seen by the P-KM; empty means all.
    std::vector<std::size_t> pkm_features;
    /// When nonzero, the P-KM sees p x p max-pooled square images instead.
    std::size_t pkm_pool = 0;
    std::size_t pkm_epochs = 20;
    double pkm_learning_rate = 0.05;
    double km_fraction = 0.5;
    std::size_t rkm_features = 3;
    std::size_t rkm_buckets = 4;

    // [experiment]
    std::uint64_t seed = 1;
    std::vector<Mode> modes{Mode::ml, Mode::pkm, Mode::mlwkm, Mode::fl, Mode::flwkm};
    std::string out = "out";
    std::size_t threads = 1;

    double lambda_for(std::size_t client) const { return lambda.size() == 1 ? lambda.front() : lambda.at(client); }

    void validate() const {
        auto fail = [](const std::string& msg) { throw ConfigError(msg); };
        if (source == DataSource::libsvm && libsvm_path.empty()) fail("data.libsvm is required for source = libsvm");
        if (source == DataSource::idx && (idx_images.empty() || idx_labels.empty()))
            fail("data.idx_images and data.idx_labels are required for source = idx");
        if (synth_classes < 2) fail("data.synth_classes must be >= 2");
        if (synth_dims == 0) fail("data.synth_dims must be >= 1");
        if (synth_per_class == 0) fail("data.synth_per_class must be >= 1");
        if (!(synth_sep > 0.0)) fail("data.synth_sep must be positive");
        if (!(fraction > 0.0 && fraction <= 1.0)) fail("data.fraction must lie in (0,1]");
        if (classes_per_client == 0) fail("data.classes_per_client must be >= 1");
        if (!(imbalance > 0.0 && imbalance <= 1.0)) fail("data.imbalance must lie in (0,1]");
        if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("data.test_fraction must lie in (0,1)");
        if (clients == 0) fail("federation.clients must be >= 1");
        if (batch_size == 0) fail("federation.batch_size must be >= 1");
        if (!(learning_rate > 0.0)) fail("federation.learning_rate must be positive");
        if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) fail("federation.sampling_rate must lie in (0,1]");
        for (std::size_t h : hidden)
            if (h == 0) fail("federation.hidden sizes must be >= 1");
        if (lambda.empty() || (lambda.size() != 1 && lambda.size() != clients))
            fail("knowledge.lambda needs one value or one per client");
        for (double l : lambda)
            if (!(l >= 0.0 && l <= 1.0)) fail("knowledge.lambda values must lie in [0,1]");
        if (!(km_fraction > 0.0 && km_fraction < 1.0)) fail("knowledge.km_fraction must lie in (0,1)");
        if (!(pkm_learning_rate > 0.0)) fail("knowledge.pkm_learning_rate must be positive");
        if (rkm_buckets == 0) fail("knowledge.rkm_buckets must be >= 1");
        if (rkm_features > 16) fail("knowledge.rkm_features must be <= 16");
        if (threads == 0) fail("experiment.threads must be >= 1");
        if (modes.empty()) fail("experiment.modes must not be empty");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
T parse_scalar(const std::string& key, const std::string& value) {
    T out{};
    const char* b = value.data();
    const char* e = b + value.size();
    auto [ptr, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || ptr != e) throw ConfigError("bad value for " + key + ": '" + value + "'");
    if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(out)) throw ConfigError("non-finite value for " + key);
    return out;
}

/// "1,3,5-8" -> {1,3,5,6,7,8}
inline std::vector<std::size_t> parse_index_list(const std::string& key, const std::string& value) {
    std::vector<std::size_t> out;
    for (const std::string& item : split_list(value)) {
        const auto dash = item.find('-');
        if (dash == std::string::npos) {
            out.push_back(parse_scalar<std::size_t>(key, item));
            continue;
        }
        const auto a = parse_scalar<std::size_t>(key, trim(item.substr(0, dash)));
        const auto b = parse_scalar<std::size_t>(key, trim(item.substr(dash + 1)));
        if (b < a) throw ConfigError("bad range in " + key + ": '" + item + "'");
        for (std::size_t i = a; i <= b; ++i) out.push_back(i);
    }
    std::sort(out.begin(), out.end());
    if (std::adjacent_find(out.begin(), out.end()) != out.end()) throw ConfigError("duplicate index in " + key);
    return out;
}

}  // namespace detail

inline void apply_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_scalar;
    auto size = [&] { return parse_scalar<std::size_t>(key, value); };
    auto real = [&] { return parse_scalar<double>(key, value); };

    if (key == "data.source") {
        if (value == "synth") cfg.source = DataSource::synth;
        else if (value == "libsvm") cfg.source = DataSource::libsvm;
        else if (value == "idx") cfg.source = DataSource::idx;
        else throw ConfigError("data.source must be synth, libsvm or idx");
    } else if (key == "data.libsvm") cfg.libsvm_path = value;
    else if (key == "data.idx_images") cfg.idx_images = value;
    else if (key == "data.idx_labels") cfg.idx_labels = value;
    else if (key == "data.synth_classes") cfg.synth_classes = size();
    else if (key == "data.synth_dims") cfg.synth_dims = size();
    else if (key == "data.synth_per_class") cfg.synth_per_class = size();
    else if (key == "data.synth_sep") cfg.synth_sep = real();
    else if (key == "data.fraction") cfg.fraction = real();
    else if (key == "data.classes_per_client") cfg.classes_per_client = size();
    else if (key == "data.imbalance") cfg.imbalance = real();
    else if (key == "data.test_fraction") cfg.test_fraction = real();
    else if (key == "federation.clients") cfg.clients = size();
    else if (key == "federation.rounds") cfg.rounds = size();
    else if (key == "federation.epochs") cfg.epochs = size();
    else if (key == "federation.batch_size") cfg.batch_size = size();
    else if (key == "federation.learning_rate") cfg.learning_rate = real();
    else if (key == "federation.sampling_rate") cfg.sampling_rate = real();
    else if (key == "federation.hidden") {
        cfg.hidden.clear();
        for (const auto& item : detail::split_list(value)) cfg.hidden.push_back(parse_scalar<std::size_t>(key, item));
    } else if (key == "knowledge.lambda") {
        cfg.lambda.clear();
        for (const auto& item : detail::split_list(value)) cfg.lambda.push_back(parse_scalar<double>(key, item));
    } else if (key == "knowledge.pkm_features") cfg.pkm_features = detail::parse_index_list(key, value);
    else if (key == "knowledge.pkm_pool") cfg.pkm_pool = size();
    else if (key == "knowledge.pkm_epochs") cfg.pkm_epochs = size();
    else if (key == "knowledge.pkm_learning_rate") cfg.pkm_learning_rate = real();
    else if (key == "knowledge.km_fraction") cfg.km_fraction = real();
    else if (key == "knowledge.rkm_features") cfg.rkm_features = size();
    else if (key == "knowledge.rkm_buckets") cfg.rkm_buckets = size();
    else if (key == "experiment.seed") cfg.seed = parse_scalar<std::uint64_t>(key, value);
    else if (key == "experiment.modes") {
        cfg.modes.clear();
        for (const auto& item : detail::split_list(value)) cfg.modes.push_back(parse_mode(item));
    } else if (key == "experiment.out") cfg.out = value;
    else if (key == "experiment.threads") cfg.threads = size();
    else throw ConfigError("unknown key '" + key + "'");
}

inline ExperimentConfig parse_config(std::istream& in) {
    static const std::set<std::string> sections{"data", "federation", "knowledge", "experiment"};
    ExperimentConfig cfg;
    std::string section;
    std::string line;
    std::set<std::string> seen;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto where = [&] { return "config line " + std::to_string(lineno) + ": "; };
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where() + "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (!sections.count(section)) throw ConfigError(where() + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where() + "expected 'key = value'");
        if (section.empty()) throw ConfigError(where() + "key outside of any section");
        const std::string key = section + "." + detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (!seen.insert(key).second) throw ConfigError(where() + "duplicate key '" + key + "'");
        try {
            apply_config_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where() + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse_config(in);
}

}  // namespace fedknow
