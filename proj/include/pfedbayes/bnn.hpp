#pragma once

// Mean-field Gaussian Bayesian MLP.
//
// Every weight and bias m carries an independent Gaussian N(mu_m, sigma_m^2)
// with sigma_m = softplus(rho_m). Parameters are stored flat, layer by layer:
// the weight matrix (out x in, row-major) followed by the bias vector.

#include <cstddef>
#include <span>
#include <variant>
#include <vector>

#include "pfedbayes/tensor.hpp"

namespace pfedbayes {

enum class Activation { relu };

enum class LikelihoodKind { categorical, gaussian };

/// Slice of the flat parameter vector that belongs to one dense layer.
struct LayerSlice {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
};

struct NetworkArch {
    std::vector<std::size_t> layer_widths;
    Activation activation = Activation::relu;
    LikelihoodKind likelihood = LikelihoodKind::categorical;
    /// Observation noise std for the gaussian likelihood.
    double noise_std = 1.0;

    static NetworkArch classifier(std::vector<std::size_t> widths);
    static NetworkArch regressor(std::vector<std::size_t> widths, double noise_std);

    /// Throws std::invalid_argument if the architecture is malformed.
    void validate() const;

    std::size_t input_dim() const { return layer_widths.front(); }
    std::size_t output_dim() const { return layer_widths.back(); }
    std::size_t parameter_count() const;
    std::vector<LayerSlice> layers() const;
};

struct VariationalParams {
    Vector mu;
    Vector rho;

    static VariationalParams filled(std::size_t count, double mu, double rho) {
        return {Vector(count, mu), Vector(count, rho)};
    }

    std::size_t size() const { return mu.size(); }
    /// Throws if mu/rho lengths differ from each other or from `expected`.
    void check_size(std::size_t expected) const;

    bool operator==(const VariationalParams&) const = default;
};

struct SampledWeights {
    Vector theta;
};

struct Gradients {
    Vector d_mu;
    Vector d_rho;

    static Gradients zeros(std::size_t count) { return {Vector(count, 0.0), Vector(count, 0.0)}; }
};

/// Class index for categorical likelihoods, target vector for gaussian ones.
using Target = std::variant<std::size_t, std::span<const double>>;

struct Example {
    std::span<const double> x;
    Target y;
};

using Batch = std::span<const Example>;

double softplus(double rho);
double sigmoid(double x);
/// rho such that softplus(rho) == sigma, sigma > 0.
double inverse_softplus(double sigma);

SampledWeights sample_weights(const VariationalParams& v, std::span<const double> g);

Vector forward(const NetworkArch& arch, std::span<const double> theta, std::span<const double> x);
inline Vector forward(const NetworkArch& arch, const SampledWeights& w, std::span<const double> x) {
    return forward(arch, w.theta, x);
}

Vector softmax(std::span<const double> logits);

double log_likelihood(const NetworkArch& arch, std::span<const double> theta, std::span<const double> x,
                      const Target& y);
inline double log_likelihood(const NetworkArch& arch, const SampledWeights& w, std::span<const double> x,
                             const Target& y) {
    return log_likelihood(arch, w.theta, x, y);
}

/// Backpropagates one example: grad += scale * d(log p)/d(theta). Returns log p.
double accumulate_log_likelihood_gradient(const NetworkArch& arch, std::span<const double> theta,
                                          std::span<const double> x, const Target& y, double scale,
                                          std::span<double> grad);

/// KL(q || w) between two diagonal Gaussians, closed form.
double kl_diag_gauss(const VariationalParams& q, const VariationalParams& w);

/// The two additive pieces of the client objective.
struct ObjectiveParts {
    /// -(n/b)(1/K) sum_j sum_k log p
    double scaled_nll = 0.0;
    /// KL(q_i || w), not multiplied by zeta.
    double kl = 0.0;
    double zeta = 1.0;

    double total() const { return scaled_nll + zeta * kl; }
};

ObjectiveParts client_objective_parts(const NetworkArch& arch, const VariationalParams& v_personal,
                                      const VariationalParams& v_global, Batch batch,
                                      std::span<const Vector> g_draws, double zeta, std::size_t n,
                                      std::size_t b);

/// Minibatch Monte Carlo estimate of the personalized objective.
double client_objective(const NetworkArch& arch, const VariationalParams& v_personal,
                        const VariationalParams& v_global, Batch batch, std::span<const Vector> g_draws,
                        double zeta, std::size_t n, std::size_t b);

struct ObjectiveWithGradient {
    ObjectiveParts value;
    Gradients grad;
};

/// Objective and its exact gradient with respect to the personalized (mu, rho);
/// v_global is held constant.
ObjectiveWithGradient client_objective_with_gradient(const NetworkArch& arch, const VariationalParams& v_personal,
                                                     const VariationalParams& v_global, Batch batch,
                                                     std::span<const Vector> g_draws, double zeta,
                                                     std::size_t n, std::size_t b);

Gradients grad_client_objective(const NetworkArch& arch, const VariationalParams& v_personal,
                                const VariationalParams& v_global, Batch batch, std::span<const Vector> g_draws,
                                double zeta, std::size_t n, std::size_t b);

/// zeta * d KL(q || w) / d(mu_q, rho_q).
Gradients grad_kl_wrt_q(const VariationalParams& q, const VariationalParams& w, double zeta);

/// d KL(q_i || w) / d(mu_w, rho_w): gradient of the localized global objective.
Gradients grad_localized_global(const VariationalParams& v_personal, const VariationalParams& v_global);

/// Bayesian model averaging over a fixed set of weight draws. The draws are
/// taken once at construction so many inputs can share them.
class BmaPredictor {
public:
    BmaPredictor(const NetworkArch& arch, const VariationalParams& v, std::size_t k_eval, const RngStream& stream);

    /// Class probabilities (categorical) or mean prediction (gaussian).
    Vector predict(std::span<const double> x) const;
    std::span<const SampledWeights> draws() const { return draws_; }

private:
    const NetworkArch* arch_;
    std::vector<SampledWeights> draws_;
};

Vector predict_bma(const NetworkArch& arch, const VariationalParams& v, std::span<const double> x,
                   std::size_t k_eval, const RngStream& stream);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer for mu, constant rho.
VariationalParams init_variational(const NetworkArch& arch, double rho_init, const RngStream& stream);
Vector init_point(const NetworkArch& arch, const RngStream& stream);

}  // namespace pfedbayes
