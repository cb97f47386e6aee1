#pragma once

// Datasets: LIBSVM and IDX ingestion, Gaussian mixtures, non-i.i.d. client
// partitioning, stratified splits and minibatch plans.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "fedknow/linalg.hpp"
#include "fedknow/log.hpp"

namespace fedknow {

/// Structured input error; `location` is a 1-based line number for text
/// formats and a byte offset for binary ones.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t location)
        : std::runtime_error(what), location_(location) {}
    std::size_t location() const noexcept { return location_; }

private:
    std::size_t location_;
};

struct Dataset {
    std::vector<Vec> features;
    std::vector<std::size_t> labels;
    std::size_t n = 0;  // feature dimension
    std::size_t k = 0;  // number of classes
    /// Original label token for each class index.
    std::vector<std::string> class_names;

    std::size_t size() const noexcept { return labels.size(); }

    void validate() const {
        require_same_size(features.size(), labels.size(), "Dataset");
        for (std::size_t i = 0; i < features.size(); ++i) {
            require_same_size(features[i].size(), n, "Dataset feature row");
            if (labels[i] >= k) throw DimensionError("Dataset: label index out of range at sample " + std::to_string(i));
            for (double v : features[i])
                if (!std::isfinite(v)) throw std::domain_error("Dataset: non-finite feature at sample " + std::to_string(i));
        }
    }

    Dataset select(const std::vector<std::size_t>& idx) const {
        Dataset out{{}, {}, n, k, class_names};
        out.features.reserve(idx.size());
        out.labels.reserve(idx.size());
        for (std::size_t i : idx) {
            out.features.push_back(features.at(i));
            out.labels.push_back(labels.at(i));
        }
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// LIBSVM text

struct LibsvmOptions {
    /// Feature dimension; inferred from the largest index when absent.
    std::optional<std::size_t> dims;
    /// Fixed class mapping (e.g. from the training file); labels outside it
    /// are rejected.
    std::optional<std::vector<std::string>> class_names;
    /// Indices above this are rejected when `dims` is absent.
    std::size_t max_dims = std::size_t{1} << 20;
};

namespace detail {

inline bool parse_number(std::string_view tok, double& out) {
    if (tok.empty()) return false;
    if (tok.front() == '+') tok.remove_prefix(1);
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
    return ec == std::errc() && ptr == tok.data() + tok.size() && std::isfinite(out);
}

inline bool parse_index(std::string_view tok, std::size_t& out) {
    if (tok.empty()) return false;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
    return ec == std::errc() && ptr == tok.data() + tok.size();
}

}  // namespace detail

/// Lines are `label idx:val idx:val ...` with 1-based strictly ascending
/// indices. Blank lines and `#` comments are ignored; CRLF is accepted.
/// Classes are numbered by ascending numeric label value.
inline Dataset parse_libsvm(std::istream& in, const LibsvmOptions& opts = {}) {
    struct Row {
        double label;
        std::string label_token;
        std::size_t line;
        std::vector<std::pair<std::size_t, double>> entries;
    };
    std::vector<Row> rows;
    std::size_t max_index = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::string_view rest(line);
        auto next_token = [&]() -> std::string_view {
            const auto b = rest.find_first_not_of(" \t");
            if (b == std::string_view::npos) {
                rest = {};
                return {};
            }
            rest.remove_prefix(b);
            const auto e = rest.find_first_of(" \t");
            std::string_view tok = rest.substr(0, e);
            rest.remove_prefix(e == std::string_view::npos ? rest.size() : e);
            return tok;
        };
        std::string_view label_tok = next_token();
        if (label_tok.empty()) continue;
        Row row;
        if (!detail::parse_number(label_tok, row.label))
            throw ParseError("libsvm line " + std::to_string(lineno) + ": bad label '" + std::string(label_tok) + "'",
                             lineno);
        row.label_token = std::string(label_tok);
        row.line = lineno;
        std::size_t last = 0;
        for (std::string_view tok = next_token(); !tok.empty(); tok = next_token()) {
            const auto colon = tok.find(':');
            std::size_t idx = 0;
            double val = 0.0;
            if (colon == std::string_view::npos || !detail::parse_index(tok.substr(0, colon), idx) ||
                !detail::parse_number(tok.substr(colon + 1), val))
                throw ParseError("libsvm line " + std::to_string(lineno) + ": malformed token '" + std::string(tok) + "'",
                                 lineno);
            if (idx == 0)
                throw ParseError("libsvm line " + std::to_string(lineno) + ": feature indices are 1-based", lineno);
            if (idx <= last)
                throw ParseError("libsvm line " + std::to_string(lineno) + ": index " + std::to_string(idx) +
                                     " not ascending",
                                 lineno);
            if (const std::size_t cap = opts.dims.value_or(opts.max_dims); idx > cap)
                throw ParseError("libsvm line " + std::to_string(lineno) + ": index " + std::to_string(idx) +
                                     " exceeds dimension " + std::to_string(cap),
                                 lineno);
            last = idx;
            row.entries.emplace_back(idx, val);
        }
        max_index = std::max(max_index, last);
        rows.push_back(std::move(row));
    }
    if (in.bad()) throw ParseError("libsvm: read failure", lineno);

    Dataset ds;
    ds.n = opts.dims.value_or(max_index);
    std::map<double, std::size_t> class_of;
    if (opts.class_names) {
        ds.class_names = *opts.class_names;
        for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
            double v = 0.0;
            if (!detail::parse_number(ds.class_names[c], v))
                throw std::invalid_argument("libsvm: fixed class mapping has non-numeric label");
            class_of[v] = c;
        }
    } else {
        std::map<double, std::string> names;
        for (const Row& r : rows) names.try_emplace(r.label, r.label_token);
        for (const auto& [v, name] : names) {
            class_of[v] = ds.class_names.size();
            ds.class_names.push_back(name);
        }
    }
    ds.k = ds.class_names.size();
    ds.features.reserve(rows.size());
    ds.labels.reserve(rows.size());
    for (const Row& r : rows) {
        auto it = class_of.find(r.label);
        if (it == class_of.end())
            throw ParseError("libsvm line " + std::to_string(r.line) + ": unknown label '" + r.label_token + "'",
                             r.line);
        Vec x(ds.n, 0.0);
        for (const auto& [idx, val] : r.entries) x[idx - 1] = val;
        ds.features.push_back(std::move(x));
        ds.labels.push_back(it->second);
    }
    return ds;
}

/// Writes nonzero entries only, with round-trip precision.
inline void emit_libsvm(std::ostream& out, const Dataset& ds) {
    char buf[32];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.class_names.at(ds.labels[i]);
        for (std::size_t j = 0; j < ds.n; ++j) {
            const double v = ds.features[i][j];
            if (v == 0.0) continue;
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << ' ' << (j + 1) << ':' << buf;
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// IDX binary (big-endian)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

class ByteReader {
public:
    ByteReader(std::istream& in, const char* name) : in_(in), name_(name) {}

    std::uint32_t u32() {
        unsigned char b[4];
        read(b, 4, "header field");
        return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
               std::uint32_t{b[3]};
    }

    void read(unsigned char* dst, std::size_t len, const char* what) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(len));
        const auto got = static_cast<std::size_t>(in_.gcount());
        if (got != len)
            throw ParseError(std::string(name_) + ": truncated " + what + " at byte offset " +
                                 std::to_string(offset_ + got),
                             offset_ + got);
        offset_ += len;
    }

    std::size_t offset() const noexcept { return offset_; }
    const char* name() const noexcept { return name_; }

private:
    std::istream& in_;
    const char* name_;
    std::size_t offset_ = 0;
};

}  // namespace detail

/// Pixels are scaled by 1/255 and each image is flattened row-major.
/// `classes` defaults to (largest label + 1).
inline Dataset parse_idx(std::istream& images, std::istream& labels, std::optional<std::size_t> classes = {}) {
    detail::ByteReader img(images, "idx images");
    detail::ByteReader lab(labels, "idx labels");
    if (const auto m = img.u32(); m != kIdxImagesMagic)
        throw ParseError("idx images: bad magic at byte offset 0", 0);
    if (const auto m = lab.u32(); m != kIdxLabelsMagic)
        throw ParseError("idx labels: bad magic at byte offset 0", 0);
    const std::uint32_t count = img.u32();
    const std::uint32_t rows = img.u32();
    const std::uint32_t cols = img.u32();
    const std::uint32_t label_count = lab.u32();
    if (count != label_count)
        throw ParseError("idx: image count " + std::to_string(count) + " != label count " +
                             std::to_string(label_count) + " (label header at byte offset 4)",
                         4);
    if (rows == 0 || cols == 0) throw ParseError("idx images: zero image dimension at byte offset 8", 8);
    if (std::uint64_t{rows} * cols > (std::uint64_t{1} << 24))
        throw ParseError("idx images: image size " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " too large (header at byte offset 8)",
                         8);

    Dataset ds;
    ds.n = std::size_t{rows} * cols;
    std::vector<unsigned char> buf(ds.n);
    std::vector<unsigned char> raw_labels;
    for (std::uint32_t i = 0; i < count; ++i) {
        unsigned char b;
        lab.read(&b, 1, "label payload");
        raw_labels.push_back(b);
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        img.read(buf.data(), buf.size(), "image payload");
        Vec x(ds.n);
        for (std::size_t j = 0; j < ds.n; ++j) x[j] = static_cast<double>(buf[j]) / 255.0;
        ds.features.push_back(std::move(x));
    }
    std::size_t max_label = 0;
    for (auto l : raw_labels) max_label = std::max<std::size_t>(max_label, l);
    ds.k = classes.value_or(count == 0 ? 0 : max_label + 1);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (raw_labels[i] >= ds.k)
            throw ParseError("idx labels: label " + std::to_string(raw_labels[i]) + " out of range at byte offset " +
                                 std::to_string(8 + i),
                             8 + i);
        ds.labels.push_back(raw_labels[i]);
    }
    for (std::size_t c = 0; c < ds.k; ++c) ds.class_names.push_back(std::to_string(c));
    return ds;
}

/// Inverse of parse_idx for pixel data already in bytes.
inline void write_idx(std::ostream& images, std::ostream& labels, std::uint32_t rows, std::uint32_t cols,
                      const std::vector<std::vector<unsigned char>>& pixels, const std::vector<unsigned char>& ys) {
    auto put32 = [](std::ostream& out, std::uint32_t v) {
        const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                           static_cast<char>(v)};
        out.write(b, 4);
    };
    put32(images, kIdxImagesMagic);
    put32(images, static_cast<std::uint32_t>(pixels.size()));
    put32(images, rows);
    put32(images, cols);
    for (const auto& p : pixels) images.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size()));
    put32(labels, kIdxLabelsMagic);
    put32(labels, static_cast<std::uint32_t>(ys.size()));
    labels.write(reinterpret_cast<const char*>(ys.data()), static_cast<std::streamsize>(ys.size()));
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Class c ~ N(mu_c, I). The means are standard-normal draws rescaled so the
/// closest pair is exactly `sep` apart.
inline Dataset synth_gaussian(std::size_t k, std::size_t n, const std::vector<std::size_t>& per_class, double sep,
                              Rng& rng) {
    if (k < 2) throw std::invalid_argument("synth_gaussian: need at least 2 classes");
    if (n == 0) throw std::invalid_argument("synth_gaussian: need at least 1 dimension");
    require_same_size(per_class.size(), k, "synth_gaussian per_class");
    for (std::size_t c = 0; c < k; ++c)
        if (per_class[c] == 0) throw std::invalid_argument("synth_gaussian: class " + std::to_string(c) + " has zero samples");
    if (!(sep > 0.0)) throw std::invalid_argument("synth_gaussian: sep must be positive");

    std::vector<Vec> means(k, Vec(n));
    for (Vec& mu : means)
        for (double& v : mu) v = rng.normal();
    double closest = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = a + 1; b < k; ++b) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) d2 += (means[a][j] - means[b][j]) * (means[a][j] - means[b][j]);
            closest = std::min(closest, std::sqrt(d2));
        }
    const double scale = sep / closest;
    for (Vec& mu : means)
        for (double& v : mu) v *= scale;

    Dataset ds;
    ds.n = n;
    ds.k = k;
    for (std::size_t c = 0; c < k; ++c) ds.class_names.push_back(std::to_string(c));
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < per_class[c]; ++i) {
            Vec x(n);
            for (std::size_t j = 0; j < n; ++j) x[j] = means[c][j] + rng.normal();
            ds.features.push_back(std::move(x));
            ds.labels.push_back(c);
        }
    return ds;
}

// ---------------------------------------------------------------------------
// Client partitioning and splitting

struct ClientSplit {
    std::vector<std::vector<std::size_t>> indices;     // per client, ascending
    std::vector<std::vector<std::size_t>> allowlists;  // per client, ascending classes
    std::size_t clients() const noexcept { return indices.size(); }
};

/// Client m may hold classes {m, ..., m + classes_per_client - 1} mod k.
/// Each class is shuffled and dealt to its claiming clients in contiguous
/// chunks with weights imbalance^0, imbalance^1, ... assigned in a seeded
/// random order. Classes nobody claims are dropped.
inline ClientSplit partition_noniid(const Dataset& ds, std::size_t clients, std::size_t classes_per_client,
                                    double imbalance, Rng& rng) {
    if (clients == 0) throw std::invalid_argument("partition_noniid: need at least one client");
    if (classes_per_client == 0 || classes_per_client > ds.k)
        throw std::invalid_argument("partition_noniid: classes_per_client must lie in [1, k]");
    if (!(imbalance > 0.0 && imbalance <= 1.0)) throw std::invalid_argument("partition_noniid: imbalance must lie in (0,1]");

    ClientSplit split;
    split.indices.resize(clients);
    split.allowlists.resize(clients);
    std::vector<std::vector<std::size_t>> claimers(ds.k);
    for (std::size_t m = 0; m < clients; ++m) {
        for (std::size_t j = 0; j < classes_per_client; ++j) split.allowlists[m].push_back((m + j) % ds.k);
        std::sort(split.allowlists[m].begin(), split.allowlists[m].end());
        for (std::size_t c : split.allowlists[m]) claimers[c].push_back(m);
    }
    std::vector<std::vector<std::size_t>> by_class(ds.k);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

    for (std::size_t c = 0; c < ds.k; ++c) {
        auto& idx = by_class[c];
        if (claimers[c].empty()) {
            if (!idx.empty()) log::warn("partition_noniid: class ", c, " claimed by no client; dropping ", idx.size(), " samples");
            continue;
        }
        rng.shuffle(idx);
        std::vector<std::size_t> order = claimers[c];
        rng.shuffle(order);
        std::vector<double> cum(order.size());
        double total = 0.0;
        double w = 1.0;
        for (std::size_t j = 0; j < order.size(); ++j) {
            total += w;
            cum[j] = total;
            w *= imbalance;
        }
        std::size_t begin = 0;
        for (std::size_t j = 0; j < order.size(); ++j) {
            const std::size_t end = j + 1 == order.size()
                                        ? idx.size()
                                        : static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * cum[j] / total));
            auto& dst = split.indices[order[j]];
            dst.insert(dst.end(), idx.begin() + static_cast<std::ptrdiff_t>(begin), idx.begin() + static_cast<std::ptrdiff_t>(end));
            begin = end;
        }
    }
    for (auto& v : split.indices) std::sort(v.begin(), v.end());
    return split;
}

/// Per-class sample counts for a stratified downsample by largest remainder,
/// bumping classes with at least two samples up to one.
inline std::vector<std::size_t> stratified_counts(const std::vector<std::size_t>& class_sizes, double fraction) {
    std::size_t total = 0;
    for (std::size_t s : class_sizes) total += s;
    const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
    std::vector<std::size_t> keep(class_sizes.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < class_sizes.size(); ++c) {
        const double exact = fraction * static_cast<double>(class_sizes[c]);
        keep[c] = std::min(class_sizes[c], static_cast<std::size_t>(std::floor(exact)));
        assigned += keep[c];
        if (keep[c] < class_sizes[c]) remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (const auto& [r, c] : remainders) {
        if (assigned >= target) break;
        ++keep[c];
        ++assigned;
    }
    for (std::size_t c = 0; c < class_sizes.size(); ++c)
        if (keep[c] == 0 && class_sizes[c] >= 2) keep[c] = 1;
    return keep;
}

/// Stratified-by-class downsample of an index list; the result is ascending.
inline std::vector<std::size_t> subsample_indices(const Dataset& ds, const std::vector<std::size_t>& indices,
                                                  double fraction, Rng& rng) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample: fraction must lie in (0,1]");
    if (fraction == 1.0) return indices;
    std::vector<std::vector<std::size_t>> by_class(ds.k);
    for (std::size_t i : indices) by_class.at(ds.labels.at(i)).push_back(i);
    std::vector<std::size_t> sizes;
    for (const auto& v : by_class) sizes.push_back(v.size());
    const auto keep = stratified_counts(sizes, fraction);
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < ds.k; ++c) {
        auto& v = by_class[c];
        rng.shuffle(v);
        out.insert(out.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(keep[c]));
    }
    if (out.empty()) throw std::invalid_argument("subsample: fraction leaves no samples");
    std::sort(out.begin(), out.end());
    return out;
}

inline Dataset subsample(const Dataset& ds, double fraction, Rng& rng) {
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return ds.select(subsample_indices(ds, all, fraction, rng));
}

/// Client m draws from rng.derive({m}).
inline ClientSplit subsample(const Dataset& ds, const ClientSplit& split, double fraction, const Rng& rng) {
    ClientSplit out = split;
    for (std::size_t m = 0; m < split.clients(); ++m) {
        Rng local = rng.derive({m});
        try {
            out.indices[m] = subsample_indices(ds, split.indices[m], fraction, local);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("client " + std::to_string(m) + ": " + e.what());
        }
    }
    return out;
}

struct TrainTest {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Per-class split; each class sends round(test_fraction * n_c) samples to
/// test but always keeps at least one in train.
inline TrainTest train_test_split(const Dataset& ds, const std::vector<std::size_t>& indices, double test_fraction,
                                  Rng& rng) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw std::invalid_argument("train_test_split: bad test fraction");
    std::vector<std::vector<std::size_t>> by_class(ds.k);
    for (std::size_t i : indices) by_class.at(ds.labels.at(i)).push_back(i);
    TrainTest out;
    for (auto& v : by_class) {
        if (v.empty()) continue;
        rng.shuffle(v);
        auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(v.size())));
        n_test = std::min(n_test, v.size() - 1);
        out.test.insert(out.test.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n_test));
        out.train.insert(out.train.end(), v.begin() + static_cast<std::ptrdiff_t>(n_test), v.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

/// Per-feature min-max scaling to [0,1]; constant features map to 0.
struct MinMaxScaler {
    Vec lo;
    Vec hi;

    static MinMaxScaler fit(const Dataset& ds, const std::vector<std::size_t>& indices) {
        if (indices.empty()) throw std::invalid_argument("MinMaxScaler: empty fit set");
        MinMaxScaler s{Vec(ds.n, std::numeric_limits<double>::infinity()),
                       Vec(ds.n, -std::numeric_limits<double>::infinity())};
        for (std::size_t i : indices)
            for (std::size_t j = 0; j < ds.n; ++j) {
                s.lo[j] = std::min(s.lo[j], ds.features[i][j]);
                s.hi[j] = std::max(s.hi[j], ds.features[i][j]);
            }
        return s;
    }

    Dataset apply(const Dataset& ds) const {
        Dataset out = ds;
        for (Vec& x : out.features)
            for (std::size_t j = 0; j < ds.n; ++j) {
                const double span = hi[j] - lo[j];
                x[j] = span > 0.0 ? (x[j] - lo[j]) / span : 0.0;
            }
        return out;
    }
};

/// Reshuffled each epoch; batches partition the local indices and the last
/// one may be short.
class BatchPlan {
public:
    BatchPlan(std::vector<std::size_t> indices, std::size_t batch_size)
        : order_(std::move(indices)), batch_size_(batch_size) {
        if (batch_size_ == 0) throw std::invalid_argument("BatchPlan: batch size must be positive");
        if (order_.empty()) throw std::invalid_argument("BatchPlan: no local samples");
    }

    std::vector<std::span<const std::size_t>> next_epoch(Rng& rng) {
        rng.shuffle(order_);
        ++epoch_;
        std::vector<std::span<const std::size_t>> batches;
        for (std::size_t b = 0; b < order_.size(); b += batch_size_)
            batches.emplace_back(order_.data() + b, std::min(batch_size_, order_.size() - b));
        return batches;
    }

    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batch_size() const noexcept { return batch_size_; }

private:
    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t epoch_ = 0;
};

}  // namespace fedknow
