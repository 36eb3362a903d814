#pragma once

// FedAvg on a deterministic MLP with the same architecture, initial means and
// minibatch order as the Bayesian trainer.

#include <cstddef>
#include <span>
#include <vector>

#include "pfedbayes/bnn.hpp"
#include "pfedbayes/data.hpp"
#include "pfedbayes/federation.hpp"

namespace pfedbayes {

struct PointParams {
    Vector theta;

    bool operator==(const PointParams&) const = default;
};

struct PointObjective {
    /// Mean negative log-likelihood over the batch.
    double value = 0.0;
    Vector grad;
};

PointObjective mean_nll_with_gradient(const NetworkArch& arch, const PointParams& params, Batch batch);

/// cfg.local_steps SGD steps with learning rate cfg.fedavg_lr on the mean
/// negative log-likelihood.
PointParams fedavg_client_update(const NetworkArch& arch, const PointParams& theta,
                                 std::span<const std::size_t> shard, const FedConfig& cfg, const Dataset& data,
                                 const RngStream& stream);

/// Plain average of the uploads.
PointParams average_points(std::span<const PointParams> uploads);

struct FedAvgResult {
    std::vector<RoundRecord> records;
    PointParams global;
};

/// FedAvg rounds. pm_acc is the global model's accuracy averaged over the
/// clients' own test shards, gm_acc its accuracy on their union.
FedAvgResult fedavg_run(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data,
                        const Partition& partition);

}  // namespace pfedbayes
