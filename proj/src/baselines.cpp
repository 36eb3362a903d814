#include "pfedbayes/baselines.hpp"

#include <chrono>
#include <numeric>
#include <stdexcept>

#include <fmt/core.h>

#include "pfedbayes/parallel.hpp"

namespace pfedbayes {
namespace {

// Must match the tag used by the Bayesian client update so both trainers
// draw the same minibatch sequence.
constexpr std::uint64_t kMinibatchTag = 0x6d62;

}  // namespace

PointObjective mean_nll_with_gradient(const NetworkArch& arch, const PointParams& params, Batch batch) {
    if (batch.empty()) throw std::invalid_argument("mean_nll_with_gradient: empty batch");
    PointObjective out{0.0, Vector(params.theta.size(), 0.0)};
    const double scale = -1.0 / static_cast<double>(batch.size());
    double sum = 0.0;
    for (const Example& ex : batch) {
        sum += accumulate_log_likelihood_gradient(arch, params.theta, ex.x, ex.y, scale, out.grad);
    }
    out.value = scale * sum;
    return out;
}

PointParams fedavg_client_update(const NetworkArch& arch, const PointParams& theta,
                                 std::span<const std::size_t> shard, const FedConfig& cfg, const Dataset& data,
                                 const RngStream& stream) {
    if (theta.theta.size() != arch.parameter_count()) throw DimensionError("fedavg: parameter length mismatch");
    PointParams out = theta;
    if (cfg.local_steps == 0) return out;
    if (shard.empty()) throw std::invalid_argument("fedavg: local steps requested on an empty shard");

    MinibatchSampler sampler(shard, cfg.batch_size, stream.derive(kMinibatchTag));
    for (std::size_t r = 0; r < cfg.local_steps; ++r) {
        const std::vector<Example> batch = gather(data, sampler.next());
        const PointObjective step = mean_nll_with_gradient(arch, out, batch);
        axpy(-cfg.fedavg_lr, step.grad, out.theta);
    }
    return out;
}

PointParams average_points(std::span<const PointParams> uploads) {
    if (uploads.empty()) throw std::invalid_argument("average_points: no uploads");
    PointParams out{Vector(uploads.front().theta.size(), 0.0)};
    const double inv = 1.0 / static_cast<double>(uploads.size());
    for (const auto& u : uploads) axpy(inv, u.theta, out.theta);
    return out;
}

FedAvgResult fedavg_run(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data,
                        const Partition& partition) {
    check_run_inputs(cfg, arch, data, partition);
    const std::size_t num_clients = partition.num_clients();

    FedAvgResult result;
    result.global.theta = init_point(arch, RngStream::keyed(cfg.seed, Purpose::init));

    std::vector<PointParams> uploads(num_clients);
    std::vector<double> losses(num_clients, 0.0);
    const std::vector<std::size_t> global_test = partition.union_test();

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const auto start = std::chrono::steady_clock::now();
        parallel_for(num_clients, cfg.workers, [&](std::size_t i) {
            uploads[i] = fedavg_client_update(arch, result.global, partition.shards[i], cfg, data,
                                              local_training_stream(cfg.seed, i, t));
            if (!partition.shards[i].empty()) {
                losses[i] = mean_nll_with_gradient(arch, uploads[i], gather(data, partition.shards[i])).value;
            }
        });
        std::vector<PointParams> selected;
        for (std::size_t i : sample_clients(num_clients, cfg.subset_size, cfg.seed, t)) selected.push_back(uploads[i]);
        result.global = average_points(selected);

        RoundRecord rec;
        rec.round = t + 1;
        rec.mean_client_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(num_clients);
        const bool evaluate = (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds;
        if (evaluate) {
            const Predictor predict = [&](std::span<const double> x) {
                Vector out = forward(arch, result.global.theta, x);
                return arch.likelihood == LikelihoodKind::categorical ? softmax(out) : out;
            };
            if (data.kind == TaskKind::classification) {
                std::vector<double> acc(num_clients + 1, 0.0);
                parallel_for(num_clients + 1, cfg.workers, [&](std::size_t slot) {
                    acc[slot] = accuracy(predict, data, slot == num_clients ? global_test : partition.test_shards[slot]);
                });
                rec.pm_acc = std::accumulate(acc.begin(), acc.end() - 1, 0.0) / static_cast<double>(num_clients);
                rec.gm_acc = acc.back();
            } else {
                // Point weights are a zero-variance posterior.
                const VariationalParams point{result.global.theta, Vector(result.global.theta.size(), -1e3)};
                double h = 0.0;
                for (std::size_t c = 0; c < num_clients; ++c) {
                    Matrix x_eval(partition.test_shards[c].size(), data.input_dim());
                    for (std::size_t r = 0; r < x_eval.rows(); ++r) {
                        const auto src = data.features.row(partition.test_shards[c][r]);
                        std::copy(src.begin(), src.end(), x_eval.row(r).begin());
                    }
                    if (x_eval.rows() == 0) continue;
                    h += hellinger_error(arch, point, data.true_fn, x_eval, arch.noise_std, 1,
                                         RngStream::keyed(cfg.seed, Purpose::evaluation, c, t + 1));
                }
                rec.hellinger = h / static_cast<double>(num_clients);
            }
        }
        if (cfg.record_timing) {
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        }
        result.records.push_back(rec);
    }
    return result;
}

}  // namespace pfedbayes
