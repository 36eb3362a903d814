#include "pfedbayes/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/core.h>

#include "pfedbayes/parallel.hpp"

namespace pfedbayes {
namespace {

constexpr std::uint64_t kMinibatchTag = 0x6d62;
constexpr std::uint64_t kNoiseTag = 0x6e7a;

void sgd_step(VariationalParams& v, const Gradients& g, double lr) {
    axpy(-lr, g.d_mu, v.mu);
    axpy(-lr, g.d_rho, v.rho);
}

Matrix rows_of(const Matrix& m, std::span<const std::size_t> indices) {
    Matrix out(indices.size(), m.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto src = m.row(indices[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

}  // namespace

void FedConfig::validate(std::size_t num_clients) const {
    if (subset_size == 0) throw std::invalid_argument("subset_size must be >= 1");
    if (subset_size > num_clients) {
        throw std::invalid_argument(fmt::format("subset_size {} exceeds the {} clients", subset_size, num_clients));
    }
    if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument(fmt::format("beta must be in (0, 1], got {}", beta));
    if (!(zeta > 0.0)) throw std::invalid_argument(fmt::format("zeta must be > 0, got {}", zeta));
    if (!(eta1 >= 0.0)) throw std::invalid_argument("eta1 must be >= 0");
    if (!(eta2 >= 0.0)) throw std::invalid_argument("eta2 must be >= 0");
    if (!(fedavg_lr >= 0.0)) throw std::invalid_argument("fedavg_lr must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (mc_draws == 0) throw std::invalid_argument("mc_draws must be >= 1");
    if (k_eval == 0) throw std::invalid_argument("k_eval must be >= 1");
    if (eval_every == 0) throw std::invalid_argument("eval_every must be >= 1");
    if (workers == 0) throw std::invalid_argument("workers must be >= 1");
    if (!std::isfinite(rho_init)) throw std::invalid_argument("rho_init must be finite");
}

MinibatchSampler::MinibatchSampler(std::span<const std::size_t> shard, std::size_t batch_size,
                                   const RngStream& stream)
    : order_(shard.begin(), shard.end()), batch_size_(std::min(batch_size, shard.size())), stream_(stream) {
    if (order_.empty()) throw std::invalid_argument("minibatch sampler: empty shard");
    if (batch_size == 0) throw std::invalid_argument("minibatch sampler: batch size must be >= 1");
    reshuffle();
}

void MinibatchSampler::reshuffle() {
    RngEngine rng(stream_.derive(pass_++));
    rng.shuffle(order_);
    cursor_ = 0;
}

std::span<const std::size_t> MinibatchSampler::next() {
    if (cursor_ + batch_size_ > order_.size()) reshuffle();
    const std::span<const std::size_t> batch(order_.data() + cursor_, batch_size_);
    cursor_ += batch_size_;
    return batch;
}

RngStream local_training_stream(std::uint64_t seed, std::size_t client_id, std::size_t round) {
    return RngStream::keyed(seed, Purpose::minibatch, client_id, round);
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t subset_size, std::uint64_t seed,
                                        std::size_t round) {
    if (subset_size > num_clients) throw std::invalid_argument("sample_clients: subset larger than population");
    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), 0);
    RngEngine rng(RngStream::keyed(seed, Purpose::subsample, round));
    // Partial Fisher-Yates: the first subset_size slots are a uniform sample.
    for (std::size_t i = 0; i < subset_size; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(num_clients - i));
        std::swap(ids[i], ids[j]);
    }
    ids.resize(subset_size);
    std::sort(ids.begin(), ids.end());
    return ids;
}

ClientUpdateResult client_update(const NetworkArch& arch, const ClientState& client,
                                 const VariationalParams& v_global, const FedConfig& cfg, const Dataset& data,
                                 const RngStream& stream) {
    const std::size_t count = arch.parameter_count();
    v_global.check_size(count);
    client.v_personal.check_size(count);

    ClientUpdateResult result{client.v_personal, v_global, 0.0};
    if (cfg.local_steps == 0) return result;
    if (client.shard.empty()) {
        throw std::invalid_argument(fmt::format("client {}: local steps requested on an empty shard", client.client_id));
    }

    MinibatchSampler sampler(client.shard, cfg.batch_size, stream.derive(kMinibatchTag));
    const RngStream noise = stream.derive(kNoiseTag);
    const std::size_t n = client.shard.size();
    const std::size_t b = sampler.batch_size();
    std::vector<Vector> g_draws(cfg.mc_draws, Vector(count));
    double nll_sum = 0.0;

    for (std::size_t r = 0; r < cfg.local_steps; ++r) {
        const std::vector<Example> batch = gather(data, sampler.next());
        for (std::size_t k = 0; k < cfg.mc_draws; ++k) randn_fill(noise.derive(r * cfg.mc_draws + k), g_draws[k]);

        const auto step = client_objective_with_gradient(arch, result.v_personal, result.v_localized_global, batch,
                                                         g_draws, cfg.zeta, n, b);
        sgd_step(result.v_personal, step.grad, cfg.eta1);
        sgd_step(result.v_localized_global, grad_localized_global(result.v_personal, result.v_localized_global),
                 cfg.eta2);
        nll_sum += step.value.scaled_nll / static_cast<double>(n);
    }
    result.mean_nll = nll_sum / static_cast<double>(cfg.local_steps);
    return result;
}

VariationalParams server_aggregate(const VariationalParams& v_t, std::span<const VariationalParams> uploads,
                                   double beta) {
    if (uploads.empty()) throw std::invalid_argument("server_aggregate: no uploads");
    const std::size_t count = v_t.size();
    v_t.check_size(count);
    VariationalParams mean = VariationalParams::filled(count, 0.0, 0.0);
    for (const auto& u : uploads) {
        u.check_size(count);
        axpy(1.0, u.mu, mean.mu);
        axpy(1.0, u.rho, mean.rho);
    }
    const double inv = 1.0 / static_cast<double>(uploads.size());
    VariationalParams out = VariationalParams::filled(count, 0.0, 0.0);
    for (std::size_t m = 0; m < count; ++m) {
        out.mu[m] = (1.0 - beta) * v_t.mu[m] + beta * (mean.mu[m] * inv);
        out.rho[m] = (1.0 - beta) * v_t.rho[m] + beta * (mean.rho[m] * inv);
    }
    return out;
}

VariationalParams optimal_global_aggregate(std::span<const VariationalParams> clients) {
    if (clients.empty()) throw std::invalid_argument("optimal_global_aggregate: no clients");
    const std::size_t count = clients.front().size();
    const double inv = 1.0 / static_cast<double>(clients.size());
    VariationalParams out = VariationalParams::filled(count, 0.0, 0.0);
    for (const auto& c : clients) {
        c.check_size(count);
        axpy(inv, c.mu, out.mu);
    }
    for (std::size_t m = 0; m < count; ++m) {
        double second = 0.0;
        for (const auto& c : clients) {
            const double sigma = softplus(c.rho[m]);
            const double diff = c.mu[m] - out.mu[m];
            second += sigma * sigma + diff * diff;
        }
        out.rho[m] = inverse_softplus(std::sqrt(second * inv));
    }
    return out;
}

void check_run_inputs(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data, const Partition& partition) {
    const std::size_t num_clients = partition.num_clients();
    if (num_clients == 0) throw std::invalid_argument("partition has no clients");
    cfg.validate(num_clients);
    arch.validate();
    data.validate();
    if (arch.input_dim() != data.input_dim()) {
        throw std::invalid_argument(fmt::format("architecture input {} != data width {}", arch.input_dim(), data.input_dim()));
    }
    if (data.kind == TaskKind::classification) {
        if (arch.likelihood != LikelihoodKind::categorical) throw std::invalid_argument("classification data needs a categorical architecture");
        if (arch.output_dim() < data.num_classes) throw std::invalid_argument("architecture has fewer outputs than classes");
    } else {
        if (arch.likelihood != LikelihoodKind::gaussian) throw std::invalid_argument("regression data needs a gaussian architecture");
        if (arch.output_dim() != data.targets.cols()) throw std::invalid_argument("architecture output != target width");
    }
    if (partition.test_shards.size() != num_clients) throw std::invalid_argument("partition test shards missing");
    for (std::size_t c = 0; c < num_clients; ++c) {
        if (cfg.local_steps > 0 && partition.shards[c].empty()) {
            throw std::invalid_argument(fmt::format("client {} has an empty training shard", c));
        }
        for (const auto* shard : {&partition.shards[c], &partition.test_shards[c]}) {
            for (std::size_t i : *shard) {
                if (i >= data.size()) throw std::invalid_argument(fmt::format("client {}: sample index {} out of range", c, i));
            }
        }
    }
}

EvalReport evaluate_bayes(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data,
                          const Partition& partition, std::span<const ClientState> clients,
                          const VariationalParams& v_global, std::size_t round) {
    const std::size_t num_clients = clients.size();
    EvalReport report;
    for (const auto& c : clients) report.mean_kl += kl_diag_gauss(c.v_personal, v_global);
    report.mean_kl /= static_cast<double>(num_clients);

    if (data.kind == TaskKind::regression) {
        std::vector<double> per_client(num_clients, 0.0);
        parallel_for(num_clients, cfg.workers, [&](std::size_t i) {
            const Matrix x_eval = rows_of(data.features, partition.test_shards[i]);
            if (x_eval.rows() == 0) return;
            per_client[i] = hellinger_error(arch, clients[i].v_personal, data.true_fn, x_eval, arch.noise_std,
                                            cfg.k_eval, RngStream::keyed(cfg.seed, Purpose::evaluation, i, round));
        });
        report.hellinger = std::accumulate(per_client.begin(), per_client.end(), 0.0) / static_cast<double>(num_clients);
        return report;
    }

    // Slot num_clients evaluates the global model on the union of test shards.
    const std::vector<std::size_t> global_test = partition.union_test();
    std::vector<double> acc(num_clients + 1, 0.0);
    std::vector<double> entropy(num_clients, 0.0);
    parallel_for(num_clients + 1, cfg.workers, [&](std::size_t slot) {
        const bool global = slot == num_clients;
        const auto& indices = global ? global_test : partition.test_shards[slot];
        if (indices.empty()) throw std::invalid_argument(fmt::format("evaluation set for slot {} is empty", slot));
        const BmaPredictor bma(arch, global ? v_global : clients[slot].v_personal, cfg.k_eval,
                               RngStream::keyed(cfg.seed, Purpose::evaluation, slot, round, global ? 1 : 0));
        std::size_t hits = 0;
        double h = 0.0;
        for (std::size_t i : indices) {
            const Vector probs = bma.predict(data.features.row(i));
            if (argmax(probs) == data.labels[i]) ++hits;
            if (!global) h += predictive_entropy(probs);
        }
        acc[slot] = static_cast<double>(hits) / static_cast<double>(indices.size());
        if (!global) entropy[slot] = h / static_cast<double>(indices.size());
    });
    report.per_client_pm_acc.assign(acc.begin(), acc.begin() + static_cast<std::ptrdiff_t>(num_clients));
    report.pm_acc = std::accumulate(report.per_client_pm_acc.begin(), report.per_client_pm_acc.end(), 0.0) /
                    static_cast<double>(num_clients);
    report.gm_acc = acc.back();
    report.mean_entropy = std::accumulate(entropy.begin(), entropy.end(), 0.0) / static_cast<double>(num_clients);
    return report;
}

RunResult run(const FedConfig& cfg, const NetworkArch& arch, const Dataset& data, const Partition& partition) {
    check_run_inputs(cfg, arch, data, partition);
    const std::size_t num_clients = partition.num_clients();

    RunResult result;
    result.server.v_global = init_variational(arch, cfg.rho_init, RngStream::keyed(cfg.seed, Purpose::init));
    result.clients.reserve(num_clients);
    for (std::size_t i = 0; i < num_clients; ++i) {
        result.clients.push_back({i, result.server.v_global, partition.shards[i]});
    }

    std::vector<VariationalParams> uploads(num_clients);
    std::vector<double> losses(num_clients, 0.0);
    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const auto start = std::chrono::steady_clock::now();
        const VariationalParams& v_t = result.server.v_global;

        parallel_for(num_clients, cfg.workers, [&](std::size_t i) {
            auto update = client_update(arch, result.clients[i], v_t, cfg, data, local_training_stream(cfg.seed, i, t));
            result.clients[i].v_personal = std::move(update.v_personal);
            uploads[i] = std::move(update.v_localized_global);
            losses[i] = update.mean_nll;
        });

        std::vector<VariationalParams> selected;
        for (std::size_t i : sample_clients(num_clients, cfg.subset_size, cfg.seed, t)) selected.push_back(uploads[i]);
        result.server.v_global = server_aggregate(v_t, selected, cfg.beta);
        result.server.round = t + 1;

        RoundRecord rec;
        rec.round = t + 1;
        rec.mean_client_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(num_clients);
        const bool evaluate = (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds;
        if (evaluate) {
            const EvalReport report = evaluate_bayes(cfg, arch, data, partition, result.clients, result.server.v_global, t + 1);
            rec.pm_acc = report.pm_acc;
            rec.gm_acc = report.gm_acc;
            rec.hellinger = report.hellinger;
            rec.mean_kl = report.mean_kl;
        } else {
            for (const auto& c : result.clients) rec.mean_kl += kl_diag_gauss(c.v_personal, result.server.v_global);
            rec.mean_kl /= static_cast<double>(num_clients);
        }
        if (cfg.record_timing) {
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        }
        result.records.push_back(rec);
    }
    return result;
}

}  // namespace pfedbayes
