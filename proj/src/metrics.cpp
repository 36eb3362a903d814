#include "pfedbayes/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/core.h>

namespace pfedbayes {

std::size_t argmax(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

double accuracy(const Predictor& predict, const Dataset& data, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("accuracy: empty evaluation set");
    if (data.kind != TaskKind::classification) throw std::invalid_argument("accuracy: classification data required");
    std::size_t hits = 0;
    for (std::size_t i : indices) {
        const Vector probs = predict(data.features.row(i));
        if (argmax(probs) == data.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(indices.size());
}

double hellinger_error(const NetworkArch& arch, const VariationalParams& v, const RegressionFunction& true_fn,
                       const Matrix& x_eval, double noise_std, std::size_t k_mc, const RngStream& stream) {
    if (arch.likelihood != LikelihoodKind::gaussian) {
        throw std::invalid_argument("hellinger_error: regression architecture required");
    }
    if (!true_fn) throw std::invalid_argument("hellinger_error: true function unavailable");
    if (k_mc == 0) throw std::invalid_argument("hellinger_error: k_mc must be >= 1");
    if (x_eval.rows() == 0) throw std::invalid_argument("hellinger_error: empty evaluation set");
    if (!(noise_std > 0.0)) throw std::invalid_argument("hellinger_error: noise_std must be positive");

    const BmaPredictor sampler(arch, v, k_mc, stream);
    const double denom = 8.0 * noise_std * noise_std;
    double total = 0.0;
    for (std::size_t i = 0; i < x_eval.rows(); ++i) {
        const auto x = x_eval.row(i);
        const Vector truth = true_fn(x);
        for (const SampledWeights& w : sampler.draws()) {
            const Vector f = forward(arch, w, x);
            double sq = 0.0;
            for (std::size_t d = 0; d < f.size(); ++d) sq += (f[d] - truth[d]) * (f[d] - truth[d]);
            total += -std::expm1(-sq / denom);
        }
    }
    return total / static_cast<double>(x_eval.rows() * k_mc);
}

double predictive_entropy(std::span<const double> probs) {
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= -1e-6)) throw std::invalid_argument(fmt::format("predictive_entropy: negative entry {}", p));
        sum += p;
    }
    if (probs.empty() || std::abs(sum - 1.0) > 1e-6) {
        throw std::invalid_argument(fmt::format("predictive_entropy: entries sum to {}", sum));
    }
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

}  // namespace pfedbayes
