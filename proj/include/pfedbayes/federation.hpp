#pragma once

// Personalized federated training: every client keeps its own variational
// posterior q_i and a localized copy of the global posterior w. Clients
// alternate SGD steps on
//     -(n/b)(1/K) sum log p(D | theta ~ q_i) + zeta KL(q_i || w)     (personal)
//     KL(q_i || w)                                                  (localized global)
// and the server mixes a random subset of the localized globals into w.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pfedbayes/bnn.hpp"
#include "pfedbayes/data.hpp"
#include "pfedbayes/metrics.hpp"
#include "pfedbayes/tensor.hpp"

namespace pfedbayes {

struct FedConfig {
    std::size_t rounds = 100;
    std::size_t local_steps = 20;
    std::size_t subset_size = 10;
    double beta = 1.0;
    double zeta = 10.0;
    /// Personalized-model learning rate.
    double eta1 = 0.001;
    /// Localized-global-model learning rate.
    double eta2 = 0.001;
    std::size_t batch_size = 50;
    std::size_t mc_draws = 1;
    double rho_init = -2.5;
    std::uint64_t seed = 0;
    /// Thread count for client updates and evaluation; never changes results.
    std::size_t workers = 1;
    /// Weight draws per Bayesian-model-averaging prediction.
    std::size_t k_eval = 10;
    /// Evaluate accuracies every this many rounds (the last round always is).
    std::size_t eval_every = 1;
    /// Learning rate of the FedAvg baseline.
    double fedavg_lr = 0.01;
    /// Fill RoundRecord::wall_ms; off by default so outputs stay reproducible.
    bool record_timing = false;

    /// Throws std::invalid_argument naming the first violated field.
    void validate(std::size_t num_clients) const;
};

struct RoundRecord {
    std::size_t round = 0;
    std::optional<double> pm_acc;
    std::optional<double> gm_acc;
    double mean_client_loss = 0.0;
    double mean_kl = 0.0;
    std::optional<double> hellinger;
    double wall_ms = 0.0;

    bool operator==(const RoundRecord&) const = default;
};

struct ClientState {
    std::size_t client_id = 0;
    VariationalParams v_personal;
    std::vector<std::size_t> shard;
};

struct ServerState {
    VariationalParams v_global;
    std::size_t round = 0;
};

/// Epoch-style minibatches over a shard: shuffle, hand out consecutive
/// batches, reshuffle when fewer than b indices remain. The batch size is
/// min(b, shard size).
class MinibatchSampler {
public:
    MinibatchSampler(std::span<const std::size_t> shard, std::size_t batch_size, const RngStream& stream);

    std::span<const std::size_t> next();
    std::size_t batch_size() const { return batch_size_; }

private:
    void reshuffle();

    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t cursor_ = 0;
    std::size_t pass_ = 0;
    RngStream stream_;
};

/// Stream for a client's local work in one round; both the Bayesian and the
/// FedAvg trainers use it so they see identical minibatch orders.
RngStream local_training_stream(std::uint64_t seed, std::size_t client_id, std::size_t round);

/// Ascending ids of `subset_size` clients drawn uniformly without replacement.
std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t subset_size, std::uint64_t seed,
                                        std::size_t round);

struct ClientUpdateResult {
    VariationalParams v_personal;
    VariationalParams v_localized_global;
    /// Mean per-example negative log-likelihood over the local steps.
    double mean_nll = 0.0;
};

ClientUpdateResult client_update(const NetworkArch& arch, const ClientState& client,
                                 const VariationalParams& v_global, const FedConfig& cfg, const Dataset& data,
                                 const RngStream& stream);

/// (1 - beta) v_t + beta * mean(uploads), on both mu and rho.
VariationalParams server_aggregate(const VariationalParams& v_t, std::span<const VariationalParams> uploads,
                                   double beta);

/// Minimizer of (1/N) sum_i KL(q_i || w) over diagonal Gaussians w: the mean
/// of the client means and the mixture second moment around it.
VariationalParams optimal_global_aggregate(std::span<const VariationalParams> clients);

struct RunResult {
    std::vector<RoundRecord> records;
    ServerState server;
    std::vector<ClientState> clients;
};

RunResult run(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data, const Partition& partition);

/// Accuracy / Hellinger evaluation of every personalized model and the
/// global model at the given round.
EvalReport evaluate_bayes(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data,
                          const Partition& partition, std::span<const ClientState> clients,
                          const VariationalParams& v_global, std::size_t round);

void check_run_inputs(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data, const Partition& partition);

}  // namespace pfedbayes
