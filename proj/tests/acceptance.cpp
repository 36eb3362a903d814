// Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit if a
// required criterion fails. Set PFEDBAYES_MNIST_DIR to a directory holding
// the four MNIST IDX files (optionally .gz) to enable the MNIST check.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/core.h>

#include "pfedbayes/baselines.hpp"
#include "pfedbayes/experiment.hpp"
#include "support.hpp"

using namespace pfedbayes;
namespace fs = std::filesystem;
namespace ts = testing_support;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
    Status status;
    std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "pfedbayes_acceptance" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome kl_vs_monte_carlo() {
    std::mt19937_64 gen(20240917);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> rho_dist(-2.0, 1.0);
    const std::size_t samples = 1'000'000;
    double worst_z = 0.0;
    for (int instance = 0; instance < 100; ++instance) {
        VariationalParams q = VariationalParams::filled(5, 0.0, 0.0), w = q;
        for (std::size_t m = 0; m < 5; ++m) {
            q.mu[m] = normal(gen);
            w.mu[m] = normal(gen);
            q.rho[m] = rho_dist(gen);
            w.rho[m] = rho_dist(gen);
        }
        double sum = 0.0, sum_sq = 0.0;
        for (std::size_t s = 0; s < samples; ++s) {
            double log_ratio = 0.0;
            for (std::size_t m = 0; m < 5; ++m) {
                const double sq = softplus(q.rho[m]), sw = softplus(w.rho[m]);
                const double z = normal(gen);
                const double theta = q.mu[m] + sq * z;
                const double zw = (theta - w.mu[m]) / sw;
                log_ratio += std::log(sw / sq) - 0.5 * z * z + 0.5 * zw * zw;
            }
            sum += log_ratio;
            sum_sq += log_ratio * log_ratio;
        }
        const double n = static_cast<double>(samples);
        const double mean = sum / n;
        const double se = std::sqrt((sum_sq / n - mean * mean) / n);
        worst_z = std::max(worst_z, std::abs(mean - kl_diag_gauss(q, w)) / se);
    }
    return verdict(worst_z < 3.0, fmt::format("worst deviation {:.2f} standard errors over 100 instances", worst_z));
}

Outcome gradients_vs_finite_differences() {
    const NetworkArch arch = NetworkArch::classifier({2, 3, 2});
    const std::size_t count = arch.parameter_count();
    const auto split = [count](const Vector& flat) {
        return VariationalParams{Vector(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(count)),
                                 Vector(flat.begin() + static_cast<std::ptrdiff_t>(count), flat.end())};
    };
    const auto join = [](const Vector& a, const Vector& b) {
        Vector out = a;
        out.insert(out.end(), b.begin(), b.end());
        return out;
    };
    double worst_client = 0.0, worst_global = 0.0;
    for (std::uint64_t restart = 0; restart < 20; ++restart) {
        RngEngine rng(RngStream{900, restart});
        const auto v_i = ts::random_params(count, rng, 0.8, -3.0, 0.5);
        const auto v_w = ts::random_params(count, rng, 0.8, -3.0, 0.5);
        const Dataset d = gen_blobs(2, 3, 2, 1.0, restart);
        std::vector<std::size_t> idx(d.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        const auto batch = gather(d, idx);
        const std::vector<Vector> g{randn(RngStream{901, restart}, count), randn(RngStream{902, restart}, count)};
        const double zeta = 10.0;
        const std::size_t n = 30, b = batch.size();

        const Gradients gc = grad_client_objective(arch, v_i, v_w, batch, g, zeta, n, b);
        const Vector fd_c = ts::central_differences(
            [&](const Vector& flat) { return client_objective(arch, split(flat), v_w, batch, g, zeta, n, b); },
            join(v_i.mu, v_i.rho), 1e-5);
        worst_client = std::max(worst_client, ts::grad_error(join(gc.d_mu, gc.d_rho), fd_c));

        const Gradients gw = grad_localized_global(v_i, v_w);
        const Vector fd_w = ts::central_differences(
            [&](const Vector& flat) { return kl_diag_gauss(v_i, split(flat)); }, join(v_w.mu, v_w.rho), 1e-5);
        worst_global = std::max(worst_global, ts::grad_error(join(gw.d_mu, gw.d_rho), fd_w));
    }
    return verdict(worst_client < 1e-4 && worst_global < 1e-4,
                   fmt::format("max relative error: client objective {:.2e}, localized global {:.2e}", worst_client,
                               worst_global));
}

// Gradient descent on (mu_w, log sigma_w) for one coordinate, scaled by the
// diagonal curvature, until the gradient norm drops below 1e-10.
std::pair<double, double> descend(const std::vector<double>& mu, const std::vector<double>& sigma) {
    double m = 0.0, s = 0.0;
    const double n = static_cast<double>(mu.size());
    for (int it = 0; it < 1'000'000; ++it) {
        const double var = std::exp(2.0 * s);
        double gm = 0.0, gs = 0.0;
        for (std::size_t i = 0; i < mu.size(); ++i) {
            const double d = mu[i] - m;
            gm -= d / var / n;
            gs += (1.0 - (sigma[i] * sigma[i] + d * d) / var) / n;
        }
        if (std::hypot(gm, gs) < 1e-10) break;
        m -= 0.25 * var * gm;
        s -= 0.25 * gs;
    }
    return {m, std::exp(s)};
}

Outcome aggregate_vs_descent() {
    std::mt19937_64 gen(77);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> rho_dist(-3.0, 1.0);
    const std::size_t sizes[] = {2, 3, 5};
    const std::size_t dim = 4;
    double worst_coord = 0.0, worst_grad = 0.0;
    for (int instance = 0; instance < 50; ++instance) {
        const std::size_t n = sizes[instance % 3];
        std::vector<VariationalParams> clients(n, VariationalParams::filled(dim, 0.0, 0.0));
        for (auto& c : clients) {
            for (std::size_t m = 0; m < dim; ++m) {
                c.mu[m] = 2.0 * normal(gen);
                c.rho[m] = rho_dist(gen);
            }
        }
        const VariationalParams w = optimal_global_aggregate(clients);
        Vector g_mu(dim, 0.0), g_rho(dim, 0.0);
        for (const auto& c : clients) {
            const Gradients g = grad_localized_global(c, w);
            axpy(1.0 / static_cast<double>(n), g.d_mu, g_mu);
            axpy(1.0 / static_cast<double>(n), g.d_rho, g_rho);
        }
        worst_grad = std::max(worst_grad, std::hypot(norm2(g_mu), norm2(g_rho)));
        for (std::size_t m = 0; m < dim; ++m) {
            std::vector<double> mu, sigma;
            for (const auto& c : clients) {
                mu.push_back(c.mu[m]);
                sigma.push_back(softplus(c.rho[m]));
            }
            const auto [m_ref, s_ref] = descend(mu, sigma);
            worst_coord = std::max({worst_coord, std::abs(w.mu[m] - m_ref), std::abs(softplus(w.rho[m]) - s_ref)});
        }
    }
    return verdict(worst_coord < 1e-6 && worst_grad < 1e-8,
                   fmt::format("max coordinate gap {:.2e}, max aggregate gradient norm {:.2e}", worst_coord,
                               worst_grad));
}

Outcome worker_determinism() {
    const std::string common =
        " --dataset blobs --clients 6 --labels-per-client 3 --classes 6 --input-dim 8 --hidden 16"
        " --train-per-class 20 --test-per-class 10 --rounds 4 --local-steps 5 --subset-size 4 --batch-size 10"
        " --k-eval 3 --seed 11";
    bool identical = true;
    for (const std::string algo : {"pfedbayes", "fedavg"}) {
        std::vector<fs::path> outs;
        for (const int workers : {1, 2, 4}) {
            outs.push_back(scratch(fmt::format("det_{}_{}", algo, workers)));
            const std::string cmd = fmt::format("{} run{} --algorithm {} --workers {} --out {} > /dev/null 2>&1",
                                                PFEDBAYES_CLI, common, algo, workers, outs.back().string());
            if (std::system(cmd.c_str()) != 0) return {Status::fail, "CLI run failed: " + cmd};
        }
        for (const char* file : {"rounds.csv", "summary.csv"}) {
            const std::string ref = slurp(outs[0] / file);
            for (std::size_t k = 1; k < outs.size(); ++k) identical = identical && slurp(outs[k] / file) == ref;
        }
    }
    return verdict(identical, "rounds.csv and summary.csv across --workers 1, 2, 4 for both algorithms");
}

ExperimentConfig blobs_benchmark(std::uint64_t seed) {
    ExperimentConfig cfg = parse_config(std::nullopt, {{"dataset", "blobs"},
                                                       {"classes", "10"},
                                                       {"clients", "10"},
                                                       {"labels_per_client", "5"},
                                                       {"train_per_class", "50"},
                                                       {"test_per_class", "40"},
                                                       {"input_dim", "20"},
                                                       {"blob_spread", "2.5"},
                                                       {"hidden", "32"},
                                                       {"rounds", "100"},
                                                       {"eval_every", "100"}});
    cfg.fed.seed = seed;
    return cfg;
}

Outcome personalization_beats_global() {
    std::vector<double> pm, gm, fedavg_gm, margin, own_margin;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const ExperimentConfig cfg = blobs_benchmark(seed);
        const ExperimentData ed = build_experiment_data(cfg);
        const RoundRecord bayes = run(cfg.fed, ed.arch, ed.data, ed.partition).records.back();
        const RoundRecord avg = fedavg_run(cfg.fed, ed.arch, ed.data, ed.partition).records.back();
        pm.push_back(*bayes.pm_acc);
        gm.push_back(*bayes.gm_acc);
        fedavg_gm.push_back(*avg.gm_acc);
        margin.push_back(*bayes.pm_acc - *avg.gm_acc);
        own_margin.push_back(*bayes.pm_acc - *bayes.gm_acc);
    }
    const double m = median(margin), own = median(own_margin);
    return verdict(m >= 0.05 && own >= 0.0,
                   fmt::format("median PM {:.4f}, own GM {:.4f}, FedAvg GM {:.4f}; PM - FedAvg GM {:+.4f}, "
                               "PM - own GM {:+.4f}",
                               median(pm), median(gm), median(fedavg_gm), m, own));
}

Outcome error_shrinks_with_n() {
    std::vector<double> medians;
    std::string detail;
    for (const std::size_t n : {50, 200, 800}) {
        std::vector<double> h;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            ExperimentConfig cfg = parse_config(std::nullopt, {{"dataset", "synth_regression"},
                                                               {"clients", "1"},
                                                               {"subset_size", "1"},
                                                               {"zeta", "1"},
                                                               {"hidden", "32"},
                                                               {"train_per_client", std::to_string(n)},
                                                               {"test_per_client", "500"},
                                                               {"rounds", "300"},
                                                               {"local_steps", "50"},
                                                               {"batch_size", "50"},
                                                               {"eta1", "0.0001"},
                                                               {"eta2", "0.0001"},
                                                               {"eval_every", "300"}});
            cfg.fed.seed = seed;
            const ExperimentData ed = build_experiment_data(cfg);
            h.push_back(*run(cfg.fed, ed.arch, ed.data, ed.partition).records.back().hellinger);
        }
        medians.push_back(median(h));
        detail += fmt::format("{}n={}: {:.4f}", detail.empty() ? "median hellinger " : ", ", n, medians.back());
    }
    return verdict(medians[0] > medians[1] && medians[1] > medians[2], detail);
}

Outcome zeta_tradeoff() {
    std::vector<double> medians;
    std::string detail;
    for (const double zeta : {1.0, 10.0, 100.0}) {
        std::vector<double> kl;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            ExperimentConfig cfg = blobs_benchmark(seed);
            cfg.fed.zeta = zeta;
            // Plain SGD on zeta * KL is stable only for eta1 < 2 sigma_w^2 / zeta.
            cfg.fed.eta1 = 1e-4;
            const ExperimentData ed = build_experiment_data(cfg);
            kl.push_back(run(cfg.fed, ed.arch, ed.data, ed.partition).records.back().mean_kl);
        }
        medians.push_back(median(kl));
        detail += fmt::format("{}zeta={:g}: {:.4g}", detail.empty() ? "median mean KL " : ", ", zeta, medians.back());
    }
    return verdict(medians[0] > medians[1] && medians[1] > medians[2], detail);
}

std::optional<fs::path> find_idx(const fs::path& dir, const std::string& stem) {
    for (const std::string& name : {stem, stem + ".gz"}) {
        if (fs::exists(dir / name)) return dir / name;
    }
    return std::nullopt;
}

Outcome mnist_small_tier() {
    const char* env = std::getenv("PFEDBAYES_MNIST_DIR");
    if (!env) return {Status::skip, "PFEDBAYES_MNIST_DIR not set"};
    const fs::path dir = env;
    const auto train_images = find_idx(dir, "train-images-idx3-ubyte");
    const auto train_labels = find_idx(dir, "train-labels-idx1-ubyte");
    const auto test_images = find_idx(dir, "t10k-images-idx3-ubyte");
    const auto test_labels = find_idx(dir, "t10k-labels-idx1-ubyte");
    if (!train_images || !train_labels || !test_images || !test_labels) {
        return {Status::skip, "MNIST IDX files missing from " + dir.string()};
    }
    ExperimentConfig cfg = parse_config(std::nullopt, {{"dataset", "mnist"},
                                                       {"tier", "small"},
                                                       {"clients", "10"},
                                                       {"labels_per_client", "5"},
                                                       {"hidden", "100"},
                                                       {"rounds", "100"},
                                                       {"eval_every", "100"},
                                                       {"mnist_train_images", train_images->string()},
                                                       {"mnist_train_labels", train_labels->string()},
                                                       {"mnist_test_images", test_images->string()},
                                                       {"mnist_test_labels", test_labels->string()}});
    cfg.fed.workers = std::max(1u, std::thread::hardware_concurrency());
    const ExperimentData ed = build_experiment_data(cfg);
    const RoundRecord bayes = run(cfg.fed, ed.arch, ed.data, ed.partition).records.back();
    const RoundRecord avg = fedavg_run(cfg.fed, ed.arch, ed.data, ed.partition).records.back();
    const double margin = *bayes.pm_acc - *avg.gm_acc;
    return verdict(margin >= 0.02, fmt::format("PM {:.4f}, FedAvg GM {:.4f}, margin {:+.4f}", *bayes.pm_acc,
                                               *avg.gm_acc, margin));
}

template <class Fn>
bool raises(IdxError::Kind kind, Fn&& fn) {
    try {
        fn();
    } catch (const IdxError& e) {
        return e.kind() == kind;
    }
    return false;
}

Outcome idx_fixtures() {
    const std::vector<std::uint8_t> images = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 128, 255, 1, 2, 3};
    const std::vector<std::uint8_t> labels = {0, 0, 8, 1, 0, 0, 0, 2, 9, 0};
    const fs::path dir = scratch("idx");
    const auto write = [](const fs::path& p, const std::vector<std::uint8_t>& bytes) {
        std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                 static_cast<std::streamsize>(bytes.size()));
    };
    write(dir / "images", images);
    write(dir / "labels", labels);

    bool ok = true;
    const Dataset d = load_idx(dir / "images", dir / "labels");
    const Vector expected{0.0, 128.0 / 255.0, 1.0, 1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0};
    ok = ok && d.size() == 2 && d.input_dim() == 3 &&
         std::equal(expected.begin(), expected.end(), d.features.data().begin(), d.features.data().end());
    ok = ok && d.labels == std::vector<std::size_t>{9, 0};
    ok = ok && encode_idx_images(parse_idx_images(images)) == images;
    ok = ok && encode_idx_labels(parse_idx_labels(labels)) == labels;

    auto bad_magic = labels;
    bad_magic[3] = 3;
    ok = ok && raises(IdxError::Kind::wrong_magic, [&] { parse_idx_labels(bad_magic); });
    auto bad_image_magic = images;
    bad_image_magic[2] = 9;
    ok = ok && raises(IdxError::Kind::wrong_magic, [&] { parse_idx_images(bad_image_magic); });
    const std::vector<std::uint8_t> cut(images.begin(), images.end() - 1);
    ok = ok && raises(IdxError::Kind::truncated, [&] { parse_idx_images(cut); });
    const std::vector<std::uint8_t> header_only(images.begin(), images.begin() + 10);
    ok = ok && raises(IdxError::Kind::truncated, [&] { parse_idx_images(header_only); });
    write(dir / "cut_labels", std::vector<std::uint8_t>(labels.begin(), labels.end() - 1));
    ok = ok && raises(IdxError::Kind::truncated, [&] { load_idx(dir / "images", dir / "cut_labels"); });
    return verdict(ok, "golden round-trip, wrong magic and truncation fixtures");
}

struct Criterion {
    int id;
    const char* name;
    bool required;
    std::function<Outcome()> check;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "KL closed form vs Monte Carlo", true, kl_vs_monte_carlo},
        {2, "gradients vs central differences", true, gradients_vs_finite_differences},
        {3, "optimal aggregate vs numerical minimization", true, aggregate_vs_descent},
        {4, "byte-identical outputs across worker counts", true, worker_determinism},
        {5, "personalized beats global under label skew", true, personalization_beats_global},
        {6, "regression error decreases with n", true, error_shrinks_with_n},
        {7, "larger zeta reduces personal-global KL", true, zeta_tradeoff},
        {8, "MNIST small tier (optional)", false, mnist_small_tier},
        {9, "IDX parser fixtures", true, idx_fixtures},
    };
    bool all_ok = true;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.check();
        } catch (const std::exception& e) {
            out = {Status::fail, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const char* tag = out.status == Status::pass ? "PASS" : out.status == Status::fail ? "FAIL" : "SKIP";
        fmt::print("{} [{}] {}: {} ({:.1f} s)\n", tag, c.id, c.name, out.detail, secs);
        std::fflush(stdout);
        if (out.status == Status::fail && c.required) all_ok = false;
    }
    return all_ok ? 0 : 1;
}
