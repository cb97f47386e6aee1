#pragma once

// The server model: a tanh multilayer perceptron that emits raw logits.
//
// Parameter layout: for each layer, the weight block (out x in, row-major)
// followed by the bias (out). Layers are stored in order from input to output.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedknow/linalg.hpp"

namespace fedknow {

struct MlpSpec {
    /// [n_in, h_1, ..., h_L, k]
    std::vector<std::size_t> layer_sizes;

    std::size_t inputs() const { return layer_sizes.front(); }
    std::size_t outputs() const { return layer_sizes.back(); }
    std::size_t layers() const { return layer_sizes.size() - 1; }

    std::size_t param_count() const {
        std::size_t d = 0;
        for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l)
            d += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
        return d;
    }

    void validate() const {
        if (layer_sizes.size() < 2) throw std::invalid_argument("MlpSpec: need at least 2 layer sizes");
        for (std::size_t s : layer_sizes)
            if (s == 0) throw std::invalid_argument("MlpSpec: layer sizes must be >= 1");
    }

    friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct ModelParams {
    Vec theta;
    MlpSpec spec;

    ModelParams() = default;
    ModelParams(MlpSpec s, Vec t) : theta(std::move(t)), spec(std::move(s)) {
        spec.validate();
        require_same_size(theta.size(), spec.param_count(), "ModelParams");
    }

    std::size_t size() const noexcept { return theta.size(); }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

namespace detail {

// Offset of layer l's weight block inside theta.
inline std::size_t layer_offset(const MlpSpec& spec, std::size_t l) {
    std::size_t off = 0;
    for (std::size_t j = 0; j < l; ++j)
        off += spec.layer_sizes[j] * spec.layer_sizes[j + 1] + spec.layer_sizes[j + 1];
    return off;
}

// activations[0] = x, activations[l] = output of layer l (tanh for hidden
// layers, identity for the last one).
inline std::vector<Vec> forward_trace(const ModelParams& params, std::span<const double> x) {
    const MlpSpec& spec = params.spec;
    require_same_size(x.size(), spec.inputs(), "forward");
    require_same_size(params.theta.size(), spec.param_count(), "forward(theta)");
    std::vector<Vec> acts;
    acts.reserve(spec.layer_sizes.size());
    acts.emplace_back(x.begin(), x.end());
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const std::size_t n_in = spec.layer_sizes[l];
        const std::size_t n_out = spec.layer_sizes[l + 1];
        const double* w = params.theta.data() + off;
        const double* b = w + n_in * n_out;
        const Vec& a = acts.back();
        Vec z(n_out);
        for (std::size_t r = 0; r < n_out; ++r) {
            double acc = b[r];
            for (std::size_t c = 0; c < n_in; ++c) acc += w[r * n_in + c] * a[c];
            z[r] = acc;
        }
        if (l + 1 < spec.layers())
            for (double& v : z) v = std::tanh(v);
        acts.push_back(std::move(z));
        off += n_in * n_out + n_out;
    }
    return acts;
}

// Accumulates scale * (w^T J) into grad, given a forward trace.
inline void backprop(const ModelParams& params, const std::vector<Vec>& acts,
                     std::span<const double> w, std::span<double> grad) {
    const MlpSpec& spec = params.spec;
    Vec delta(w.begin(), w.end());
    for (std::size_t l = spec.layers(); l-- > 0;) {
        const std::size_t n_in = spec.layer_sizes[l];
        const std::size_t n_out = spec.layer_sizes[l + 1];
        const std::size_t off = layer_offset(spec, l);
        const Vec& a = acts[l];
        double* gw = grad.data() + off;
        double* gb = gw + n_in * n_out;
        for (std::size_t r = 0; r < n_out; ++r) {
            const double dr = delta[r];
            gb[r] += dr;
            if (dr == 0.0) continue;
            for (std::size_t c = 0; c < n_in; ++c) gw[r * n_in + c] += dr * a[c];
        }
        if (l == 0) break;
        const double* wt = params.theta.data() + off;
        Vec prev(n_in, 0.0);
        for (std::size_t r = 0; r < n_out; ++r) {
            const double dr = delta[r];
            if (dr == 0.0) continue;
            for (std::size_t c = 0; c < n_in; ++c) prev[c] += wt[r * n_in + c] * dr;
        }
        // a = tanh(z) on hidden layers, so da/dz = 1 - a^2
        for (std::size_t c = 0; c < n_in; ++c) prev[c] *= 1.0 - a[c] * a[c];
        delta = std::move(prev);
    }
}

}  // namespace detail

/// Raw logits f(theta; x).
inline Vec forward(const ModelParams& params, std::span<const double> x) {
    return detail::forward_trace(params, x).back();
}

/// w^T * d f / d theta, without materializing the Jacobian.
inline Vec vjp(const ModelParams& params, std::span<const double> x, std::span<const double> w) {
    require_same_size(w.size(), params.spec.outputs(), "vjp");
    const auto acts = detail::forward_trace(params, x);
    Vec grad(params.size(), 0.0);
    detail::backprop(params, acts, w, grad);
    return grad;
}

/// Full k x d Jacobian, one reverse pass per output row.
inline Mat jacobian(const ModelParams& params, std::span<const double> x) {
    const auto acts = detail::forward_trace(params, x);
    const std::size_t k = params.spec.outputs();
    Mat jac(k, params.size());
    Vec unit(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        unit[i] = 1.0;
        detail::backprop(params, acts, unit, jac.row(i));
        unit[i] = 0.0;
    }
    return jac;
}

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
inline ModelParams init_params(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    Vec theta(spec.param_count(), 0.0);
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const std::size_t n_in = spec.layer_sizes[l];
        const std::size_t n_out = spec.layer_sizes[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(n_in + n_out));
        for (std::size_t i = 0; i < n_in * n_out; ++i) theta[off + i] = rng.uniform(-limit, limit);
        off += n_in * n_out + n_out;
    }
    return ModelParams(spec, std::move(theta));
}

// Checkpoint format:
//   FEDKNOW-PARAMS v1\n
//   <L+1> <n_0> <n_1> ... <n_L>\n
//   d little-endian IEEE-754 binary64 values
inline constexpr const char* kParamsMagic = "FEDKNOW-PARAMS v1";

inline void save_params(std::ostream& out, const ModelParams& params) {
    out << kParamsMagic << '\n' << params.spec.layer_sizes.size();
    for (std::size_t s : params.spec.layer_sizes) out << ' ' << s;
    out << '\n';
    for (double v : params.theta) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
        out.write(bytes, 8);
    }
    if (!out) throw std::runtime_error("save_params: write failed");
}

inline ModelParams load_params(std::istream& in) {
    std::string magic;
    if (!std::getline(in, magic) || magic != kParamsMagic)
        throw std::runtime_error("load_params: bad header, expected '" + std::string(kParamsMagic) + "'");
    std::string spec_line;
    if (!std::getline(in, spec_line)) throw std::runtime_error("load_params: missing spec line");
    std::istringstream ss(spec_line);
    std::size_t count = 0;
    if (!(ss >> count) || count < 2 || count > 1024) throw std::runtime_error("load_params: bad layer count");
    MlpSpec spec;
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t s = 0;
        if (!(ss >> s)) throw std::runtime_error("load_params: truncated spec line");
        spec.layer_sizes.push_back(s);
    }
    spec.validate();
    Vec theta(spec.param_count());
    for (double& v : theta) {
        unsigned char bytes[8];
        if (!in.read(reinterpret_cast<char*>(bytes), 8))
            throw std::runtime_error("load_params: truncated parameter payload");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        v = std::bit_cast<double>(bits);
    }
    return ModelParams(std::move(spec), std::move(theta));
}

}  // namespace fedknow
