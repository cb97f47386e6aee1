#pragma once

// FedAvg over personalized models.
//
// Each round the server samples ceil(tau * M) clients, broadcasts theta, every
// sampled client runs E epochs of minibatch SGD on its own knowledge-injected
// loss, and the server replaces theta by the unweighted mean of the uploads.
// Only parameter vectors and scalar metrics cross the ClientEndpoint
// interface; datasets and knowledge models stay inside Client.

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <memory>
#include <ostream>
#include <thread>
#include <vector>

#include "fedknow/data.hpp"
#include "fedknow/knowledge.hpp"
#include "fedknow/metrics.hpp"
#include "fedknow/nn.hpp"

namespace fedknow {

enum class FedMode { fl, flwkm };

/// A client's local view: its samples, its knowledge pair and whether the
/// knowledge is injected into the model. POV is always measured against the
/// client's own R-KM.
class Client {
public:
    Client(std::size_t id, std::shared_ptr<const Dataset> data, std::vector<std::size_t> train,
           std::vector<std::size_t> test, KnowledgePair km, bool inject = true)
        : id_(id), data_(std::move(data)), train_(std::move(train)), test_(std::move(test)), km_(std::move(km)),
          inject_(inject) {
        if (!data_) throw std::invalid_argument("Client: null dataset");
        require_same_size(km_.classes(), data_->k, "Client knowledge arity");
        train_at_ = evaluate_all(train_);
        test_at_ = evaluate_all(test_);
    }

    std::size_t id() const noexcept { return id_; }
    const Dataset& data() const noexcept { return *data_; }
    const std::vector<std::size_t>& train() const noexcept { return train_; }
    const std::vector<std::size_t>& test() const noexcept { return test_; }
    const KnowledgePair& knowledge() const noexcept { return km_; }
    bool injects() const noexcept { return inject_; }

    /// Same data and knowledge; inject=false trains with lambda = 0, gr = 1^k.
    Client with_injection(bool inject) const {
        Client c = *this;
        c.inject_ = inject;
        return c;
    }
    Client with_train(std::vector<std::size_t> train) const {
        return Client(id_, data_, std::move(train), test_, km_, inject_);
    }

    double lambda() const noexcept { return inject_ ? km_.lambda : 0.0; }

    /// Knowledge actually used by the model at the pos-th training sample.
    KnowledgeAt train_knowledge(std::size_t pos) const { return effective(train_at_.at(pos)); }
    KnowledgeAt test_knowledge(std::size_t pos) const { return effective(test_at_.at(pos)); }
    /// The client's own R-KM output at the pos-th test sample.
    const LabelMask& test_range(std::size_t pos) const { return test_at_.at(pos).range; }

    const Vec& train_x(std::size_t pos) const { return data_->features[train_.at(pos)]; }
    std::size_t train_y(std::size_t pos) const { return data_->labels[train_.at(pos)]; }
    const Vec& test_x(std::size_t pos) const { return data_->features[test_.at(pos)]; }
    std::size_t test_y(std::size_t pos) const { return data_->labels[test_.at(pos)]; }

private:
    // Eager consistency audit (gp inside gr) over every local sample.
    std::vector<KnowledgeAt> evaluate_all(const std::vector<std::size_t>& idx) const {
        std::vector<KnowledgeAt> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) {
            try {
                out.push_back(evaluate_knowledge(km_, data_->features.at(i)));
            } catch (const AssumptionViolation& e) {
                throw AssumptionViolation("client " + std::to_string(id_) + ", sample " + std::to_string(i) + ": " +
                                          e.what());
            }
        }
        return out;
    }

    KnowledgeAt effective(const KnowledgeAt& at) const {
        if (inject_) return at;
        return {at.gp_class, LabelMask::all(at.range.size())};
    }

    std::size_t id_;
    std::shared_ptr<const Dataset> data_;
    std::vector<std::size_t> train_;
    std::vector<std::size_t> test_;
    KnowledgePair km_;
    bool inject_;
    std::vector<KnowledgeAt> train_at_;
    std::vector<KnowledgeAt> test_at_;
};

/// Personalized prediction at an arbitrary point with the client's effective
/// knowledge.
inline Vec client_predict(const Client& client, const ModelParams& params, const KnowledgeAt& at,
                          std::span<const double> x) {
    return transform(client.lambda(), at, forward(params, x));
}

/// Mean cross-entropy of the personalized model over the training set.
inline double local_loss(const Client& client, const ModelParams& params) {
    const std::size_t n = client.train().size();
    if (n == 0) throw std::invalid_argument("local_loss: client " + std::to_string(client.id()) + " has no training data");
    double acc = 0.0;
    for (std::size_t pos = 0; pos < n; ++pos)
        acc += cross_entropy(client_predict(client, params, client.train_knowledge(pos), client.train_x(pos)),
                             client.train_y(pos));
    return acc / static_cast<double>(n);
}

/// Mean cross-entropy over a batch of training positions.
inline double batch_loss(const Client& client, const ModelParams& params, std::span<const std::size_t> batch) {
    if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
    double acc = 0.0;
    for (std::size_t pos : batch)
        acc += cross_entropy(client_predict(client, params, client.train_knowledge(pos), client.train_x(pos)),
                             client.train_y(pos));
    return acc / static_cast<double>(batch.size());
}

/// Gradient of batch_loss. Per sample with true class y and p = f^m(theta; x):
///   d(-log p_y) = -(1 - lambda) / p_y * s_y (e_y - s)^T J_f
/// which is one vector-Jacobian product with the server model.
inline Vec batch_gradient(const Client& client, const ModelParams& params, std::span<const std::size_t> batch) {
    if (batch.empty()) throw std::invalid_argument("batch_gradient: empty batch");
    Vec grad(params.size(), 0.0);
    const double lambda = client.lambda();
    if (lambda == 1.0) return grad;
    const std::size_t k = params.spec.outputs();
    Vec w(k);
    for (std::size_t pos : batch) {
        const KnowledgeAt at = client.train_knowledge(pos);
        const auto acts = detail::forward_trace(params, client.train_x(pos));
        const Vec s = masked_softmax(acts.back(), at.range);
        const std::size_t y = client.train_y(pos);
        const double p_y = (1.0 - lambda) * s[y] + (at.gp_class == y ? lambda : 0.0);
        const double scale = -(1.0 - lambda) * s[y] / std::max(p_y, kProbFloor);
        if (scale == 0.0) continue;
        for (std::size_t j = 0; j < k; ++j) w[j] = scale * ((j == y ? 1.0 : 0.0) - s[j]);
        detail::backprop(params, acts, w, grad);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (double& g : grad) g *= inv;
    return grad;
}

/// E epochs of minibatch SGD, reshuffling from `rng` every epoch.
inline ModelParams local_update(const Client& client, const ModelParams& start, std::size_t epochs,
                                std::size_t batch_size, double lr, Rng& rng) {
    if (!(lr >= 0.0)) throw std::invalid_argument("local_update: learning rate must be non-negative");
    ModelParams params = start;
    if (epochs == 0 || lr == 0.0) return params;
    std::vector<std::size_t> positions(client.train().size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    BatchPlan plan(std::move(positions), batch_size);
    for (std::size_t e = 0; e < epochs; ++e)
        for (auto batch : plan.next_epoch(rng)) {
            const Vec g = batch_gradient(client, params, batch);
            axpy(-lr, g, params.theta);
        }
    for (double v : params.theta)
        if (!std::isfinite(v))
            throw std::runtime_error("local_update: client " + std::to_string(client.id()) + " diverged (non-finite theta)");
    return params;
}

struct ClientMetrics {
    std::size_t client = 0;
    double loss = 0.0;  // mean training cross-entropy
    double ta = 0.0;    // test accuracy
    double pov = 0.0;   // test percentage of violation
};

/// Test-set predicted classes under the effective knowledge.
inline std::vector<std::size_t> predict_test(const Client& client, const ModelParams& params) {
    std::vector<std::size_t> out;
    out.reserve(client.test().size());
    for (std::size_t pos = 0; pos < client.test().size(); ++pos)
        out.push_back(argmax(client_predict(client, params, client.test_knowledge(pos), client.test_x(pos))));
    return out;
}

inline ClientMetrics evaluate_client(const Client& client, const ModelParams& params) {
    const auto predicted = predict_test(client, params);
    std::vector<std::size_t> labels;
    std::vector<LabelMask> ranges;
    for (std::size_t pos = 0; pos < client.test().size(); ++pos) {
        labels.push_back(client.test_y(pos));
        ranges.push_back(client.test_range(pos));
    }
    return {client.id(), local_loss(client, params), test_accuracy(predicted, labels), pov(predicted, ranges)};
}

// ---------------------------------------------------------------------------
// Transport seam

struct Broadcast {
    std::size_t round = 0;
    Vec theta;
    std::size_t epochs = 1;
    std::size_t batch_size = 1;
    double learning_rate = 0.0;
};

struct Upload {
    std::size_t client = 0;
    Vec theta;
};

/// Everything the server can ask of a client.
class ClientEndpoint {
public:
    virtual ~ClientEndpoint() = default;
    virtual std::size_t id() const = 0;
    virtual Upload train(const Broadcast& msg) = 0;
    virtual ClientMetrics evaluate(const Vec& theta) = 0;
};

inline constexpr std::uint64_t kClientStreamTag = 0xC11E;
inline constexpr std::uint64_t kSamplingStreamTag = 0x5A3E;

/// Stream used by client m in round t; independent of scheduling.
inline Rng client_round_rng(const Rng& master, std::size_t round, std::size_t client) {
    return master.derive({kClientStreamTag, round, client});
}

/// In-process endpoint wrapping a Client.
class LocalEndpoint final : public ClientEndpoint {
public:
    LocalEndpoint(const Client& client, MlpSpec spec, Rng master)
        : client_(&client), spec_(std::move(spec)), master_(master) {}

    std::size_t id() const override { return client_->id(); }

    Upload train(const Broadcast& msg) override {
        Rng rng = client_round_rng(master_, msg.round, client_->id());
        ModelParams start(spec_, msg.theta);
        ModelParams out = local_update(*client_, start, msg.epochs, msg.batch_size, msg.learning_rate, rng);
        return {client_->id(), std::move(out.theta)};
    }

    ClientMetrics evaluate(const Vec& theta) override { return evaluate_client(*client_, ModelParams(spec_, theta)); }

private:
    const Client* client_;
    MlpSpec spec_;
    Rng master_;
};

// ---------------------------------------------------------------------------
// Server

struct FedConfig {
    std::size_t rounds = 10;        // T
    std::size_t epochs = 1;         // E
    std::size_t batch_size = 10;    // C
    double learning_rate = 0.1;     // eta
    double sampling_rate = 1.0;     // tau
    std::size_t threads = 1;

    void validate() const {
        if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) throw std::invalid_argument("FedConfig: sampling rate must lie in (0,1]");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("FedConfig: learning rate must be positive");
        if (batch_size == 0) throw std::invalid_argument("FedConfig: batch size must be positive");
        if (threads == 0) throw std::invalid_argument("FedConfig: threads must be positive");
    }
};

struct ServerState {
    ModelParams params;
    std::size_t round = 0;
    FedConfig config;
    Rng master;
    std::size_t clients = 0;
};

/// ceil(tau * M), robust to tau * M landing a rounding error above an integer.
inline std::size_t participants_per_round(double tau, std::size_t clients) {
    const double exact = tau * static_cast<double>(clients);
    const double nearest = std::round(exact);
    const double n = std::fabs(exact - nearest) < 1e-9 ? nearest : std::ceil(exact);
    return std::clamp<std::size_t>(static_cast<std::size_t>(n), 1, clients);
}

/// Uniform sample without replacement, sorted, determined by (seed, round).
inline std::vector<std::size_t> sample_clients(const ServerState& server) {
    if (!(server.config.sampling_rate > 0.0 && server.config.sampling_rate <= 1.0))
        throw std::invalid_argument("sample_clients: sampling rate must lie in (0,1]");
    const std::size_t m = server.clients;
    const std::size_t s = participants_per_round(server.config.sampling_rate, m);
    std::vector<std::size_t> ids(m);
    for (std::size_t i = 0; i < m; ++i) ids[i] = i;
    Rng rng = server.master.derive({kSamplingStreamTag, server.round});
    for (std::size_t i = 0; i < s; ++i) std::swap(ids[i], ids[i + static_cast<std::size_t>(rng.below(m - i))]);
    ids.resize(s);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// Unweighted mean, reduced in ascending client-id order.
inline Vec aggregate(std::vector<Upload> uploads) {
    if (uploads.empty()) throw std::invalid_argument("aggregate: no uploads");
    std::sort(uploads.begin(), uploads.end(), [](const Upload& a, const Upload& b) { return a.client < b.client; });
    Vec acc = uploads.front().theta;
    for (std::size_t i = 1; i < uploads.size(); ++i) {
        require_same_size(uploads[i].theta.size(), acc.size(), "aggregate");
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += uploads[i].theta[j];
    }
    const double n = static_cast<double>(uploads.size());
    for (double& v : acc) v /= n;
    return acc;
}

inline void aggregate(ServerState& server, std::vector<Upload> uploads) {
    Vec theta = aggregate(std::move(uploads));
    require_same_size(theta.size(), server.params.size(), "aggregate(server)");
    server.params.theta = std::move(theta);
}

struct RoundReport {
    std::size_t round = 0;
    std::vector<std::size_t> participants;
    /// Metrics of each participant evaluated at the aggregated model.
    std::vector<ClientMetrics> clients;
    double seconds = 0.0;
};

struct FederatedResult {
    ModelParams params;
    std::vector<RoundReport> reports;
};

namespace detail {

// Runs job(i) for i in [0, n) on up to `threads` workers; the first failure
// is rethrown after all workers finish.
template <typename Job>
void parallel_for(std::size_t n, std::size_t threads, Job&& job) {
    std::vector<std::exception_ptr> errors(n);
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                job(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < std::min(threads, n); ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        job(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// T rounds of sample -> broadcast -> local update -> aggregate.
inline FederatedResult run_federated(ServerState& server, const std::vector<ClientEndpoint*>& endpoints) {
    server.config.validate();
    server.clients = endpoints.size();
    if (endpoints.empty()) throw std::invalid_argument("run_federated: no clients");
    for (std::size_t m = 0; m < endpoints.size(); ++m)
        if (endpoints[m]->id() != m) throw std::invalid_argument("run_federated: endpoint ids must be 0..M-1 in order");

    FederatedResult result;
    const FedConfig& cfg = server.config;
    for (; server.round < cfg.rounds; ++server.round) {
        const auto started = std::chrono::steady_clock::now();
        RoundReport report;
        report.round = server.round;
        report.participants = sample_clients(server);
        const Broadcast msg{server.round, server.params.theta, cfg.epochs, cfg.batch_size, cfg.learning_rate};

        std::vector<Upload> uploads(report.participants.size());
        detail::parallel_for(uploads.size(), cfg.threads, [&](std::size_t i) {
            const std::size_t m = report.participants[i];
            try {
                uploads[i] = endpoints[m]->train(msg);
            } catch (const std::exception& e) {
                throw std::runtime_error("round " + std::to_string(server.round) + ", client " + std::to_string(m) +
                                         ": " + e.what());
            }
        });
        aggregate(server, std::move(uploads));
        for (double v : server.params.theta)
            if (!std::isfinite(v)) throw std::runtime_error("run_federated: non-finite global parameters");

        report.clients.resize(report.participants.size());
        detail::parallel_for(report.clients.size(), cfg.threads, [&](std::size_t i) {
            report.clients[i] = endpoints[report.participants[i]]->evaluate(server.params.theta);
        });
        report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.reports.push_back(std::move(report));
    }
    result.params = server.params;
    return result;
}

/// Convenience overload: fl trains every client with lambda = 0 and
/// gr = 1^k, flwkm with the clients' own knowledge pairs.
inline FederatedResult run_federated(ServerState& server, const std::vector<Client>& clients, FedMode mode) {
    std::vector<Client> effective;
    effective.reserve(clients.size());
    for (const Client& c : clients) effective.push_back(c.with_injection(mode == FedMode::flwkm));
    std::vector<std::unique_ptr<LocalEndpoint>> owned;
    std::vector<ClientEndpoint*> endpoints;
    for (const Client& c : effective) {
        owned.push_back(std::make_unique<LocalEndpoint>(c, server.params.spec, server.master));
        endpoints.push_back(owned.back().get());
    }
    return run_federated(server, endpoints);
}

/// CSV rows `round,client,loss,ta,pov`, header included.
inline void write_round_csv(std::ostream& out, const std::vector<RoundReport>& reports) {
    out << "round,client,loss,ta,pov\n";
    char buf[128];
    for (const RoundReport& r : reports)
        for (const ClientMetrics& c : r.clients) {
            std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g\n", r.round, c.client, c.loss, c.ta, c.pov);
            out << buf;
        }
}

}  // namespace fedknow
