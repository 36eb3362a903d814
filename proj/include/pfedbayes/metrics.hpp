#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "pfedbayes/bnn.hpp"
#include "pfedbayes/data.hpp"

namespace pfedbayes {

using Predictor = std::function<Vector(std::span<const double>)>;

struct EvalReport {
    std::vector<double> per_client_pm_acc;
    std::optional<double> pm_acc;
    std::optional<double> gm_acc;
    double mean_kl = 0.0;
    std::optional<double> hellinger;
    std::optional<double> mean_entropy;
};

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

/// Fraction of `indices` whose predicted argmax equals the label.
double accuracy(const Predictor& predict, const Dataset& data, std::span<const std::size_t> indices);

/// Empirical squared Hellinger distance between the predictive model and the
/// true regression model, averaged over x_eval rows and k_mc weight draws:
///   mean over (x, theta) of 1 - exp(-|f_theta(x) - f(x)|^2 / (8 sigma^2)).
double hellinger_error(const NetworkArch& arch, const VariationalParams& v, const RegressionFunction& true_fn,
                       const Matrix& x_eval, double noise_std, std::size_t k_mc, const RngStream& stream);

/// Shannon entropy in nats. Throws if `probs` is not a probability vector
/// within 1e-6.
double predictive_entropy(std::span<const double> probs);

}  // namespace pfedbayes
