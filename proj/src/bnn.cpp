#include "pfedbayes/bnn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/core.h>

namespace pfedbayes {
namespace {

constexpr double kVarianceFloor = 1e-12;

double variance_of(double rho) { return std::max(softplus(rho) * softplus(rho), kVarianceFloor); }

void check_same_length(const VariationalParams& a, const VariationalParams& b, const char* what) {
    a.check_size(a.mu.size());
    if (b.mu.size() != a.mu.size() || b.rho.size() != a.mu.size()) {
        throw DimensionError(fmt::format("{}: parameter lengths {} and {} differ", what, a.mu.size(), b.mu.size()));
    }
}

// Activations of every layer: acts[0] = x, acts[l+1] = output of layer l.
// Hidden layers hold post-ReLU values, the last holds raw outputs.
void forward_into(const NetworkArch& arch, const std::vector<LayerSlice>& layers, std::span<const double> theta,
                  std::span<const double> x, std::vector<Vector>& acts) {
    if (x.size() != arch.input_dim()) {
        throw DimensionError(fmt::format("forward: input length {} != {}", x.size(), arch.input_dim()));
    }
    if (theta.size() != arch.parameter_count()) {
        throw DimensionError(fmt::format("forward: {} weights, arch expects {}", theta.size(), arch.parameter_count()));
    }
    acts.resize(layers.size() + 1);
    acts[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const LayerSlice& s = layers[l];
        const double* w = theta.data() + s.weight_offset;
        const double* bias = theta.data() + s.bias_offset;
        const Vector& in = acts[l];
        Vector& out = acts[l + 1];
        out.resize(s.out);
        const bool hidden = l + 1 < layers.size();
        for (std::size_t o = 0; o < s.out; ++o) {
            const double* row = w + o * s.in;
            double z = bias[o];
            for (std::size_t i = 0; i < s.in; ++i) z += row[i] * in[i];
            out[o] = hidden ? std::max(z, 0.0) : z;
        }
    }
}

double log_softmax_at(std::span<const double> logits, std::size_t index) {
    const double max = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - max);
    return logits[index] - max - std::log(sum);
}

std::size_t class_index(const NetworkArch& arch, const Target& y) {
    const auto* label = std::get_if<std::size_t>(&y);
    if (label == nullptr) throw std::invalid_argument("categorical likelihood needs a class index target");
    if (*label >= arch.output_dim()) {
        throw std::out_of_range(fmt::format("class index {} out of range [0, {})", *label, arch.output_dim()));
    }
    return *label;
}

std::span<const double> regression_target(const NetworkArch& arch, const Target& y) {
    const auto* values = std::get_if<std::span<const double>>(&y);
    if (values == nullptr) throw std::invalid_argument("gaussian likelihood needs a real-valued target");
    if (values->size() != arch.output_dim()) {
        throw DimensionError(fmt::format("target length {} != output width {}", values->size(), arch.output_dim()));
    }
    return *values;
}

// log p(y | f) and d log p / d f written into `delta`.
double output_log_likelihood(const NetworkArch& arch, std::span<const double> f, const Target& y, Vector* delta) {
    if (arch.likelihood == LikelihoodKind::categorical) {
        const std::size_t label = class_index(arch, y);
        const double lp = log_softmax_at(f, label);
        if (delta != nullptr) {
            *delta = softmax(f);
            for (double& d : *delta) d = -d;
            (*delta)[label] += 1.0;
        }
        return lp;
    }
    const auto target = regression_target(arch, y);
    const double var = arch.noise_std * arch.noise_std;
    const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi * var);
    double lp = 0.0;
    if (delta != nullptr) delta->resize(f.size());
    for (std::size_t d = 0; d < f.size(); ++d) {
        const double r = target[d] - f[d];
        lp -= r * r / (2.0 * var) + log_norm;
        if (delta != nullptr) (*delta)[d] = r / var;
    }
    return lp;
}

void validate_objective_inputs(const NetworkArch& arch, const VariationalParams& v_personal,
                               const VariationalParams& v_global, Batch batch, std::span<const Vector> g_draws,
                               double zeta, std::size_t n, std::size_t b) {
    const std::size_t count = arch.parameter_count();
    v_personal.check_size(count);
    v_global.check_size(count);
    if (batch.empty()) throw std::invalid_argument("client objective: empty batch");
    if (!(zeta > 0.0)) throw std::invalid_argument("client objective: zeta must be positive");
    if (g_draws.empty()) throw std::invalid_argument("client objective: need at least one noise draw");
    if (b == 0 || b > n) throw std::invalid_argument("client objective: need 1 <= b <= n");
    if (batch.size() != b) {
        throw std::invalid_argument(fmt::format("client objective: batch holds {} examples, b = {}", batch.size(), b));
    }
    for (const auto& g : g_draws) {
        if (g.size() != count) throw DimensionError("client objective: noise draw length mismatch");
    }
}

}  // namespace

NetworkArch NetworkArch::classifier(std::vector<std::size_t> widths) {
    NetworkArch arch{std::move(widths), Activation::relu, LikelihoodKind::categorical, 1.0};
    arch.validate();
    return arch;
}

NetworkArch NetworkArch::regressor(std::vector<std::size_t> widths, double noise_std) {
    NetworkArch arch{std::move(widths), Activation::relu, LikelihoodKind::gaussian, noise_std};
    arch.validate();
    return arch;
}

void NetworkArch::validate() const {
    if (layer_widths.size() < 2) throw std::invalid_argument("network needs at least input and output widths");
    for (std::size_t w : layer_widths) {
        if (w == 0) throw std::invalid_argument("layer widths must be >= 1");
    }
    if (likelihood == LikelihoodKind::gaussian && !(noise_std > 0.0)) {
        throw std::invalid_argument("gaussian likelihood needs noise_std > 0");
    }
}

std::size_t NetworkArch::parameter_count() const {
    std::size_t count = 0;
    for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l) {
        count += layer_widths[l + 1] * (layer_widths[l] + 1);
    }
    return count;
}

std::vector<LayerSlice> NetworkArch::layers() const {
    std::vector<LayerSlice> out;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l) {
        LayerSlice s;
        s.in = layer_widths[l];
        s.out = layer_widths[l + 1];
        s.weight_offset = offset;
        s.bias_offset = offset + s.in * s.out;
        offset = s.bias_offset + s.out;
        out.push_back(s);
    }
    return out;
}

void VariationalParams::check_size(std::size_t expected) const {
    if (mu.size() != rho.size()) {
        throw DimensionError(fmt::format("variational params: mu has {} entries, rho has {}", mu.size(), rho.size()));
    }
    if (mu.size() != expected) {
        throw DimensionError(fmt::format("variational params: {} entries, expected {}", mu.size(), expected));
    }
}

double softplus(double rho) {
    if (rho > 30.0) return rho;
    if (rho < -30.0) return std::exp(rho);
    return std::log1p(std::exp(rho));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double inverse_softplus(double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("inverse_softplus: sigma must be positive");
    if (sigma > 30.0) return sigma + std::log(-std::expm1(-sigma));
    return std::log(std::expm1(sigma));
}

SampledWeights sample_weights(const VariationalParams& v, std::span<const double> g) {
    v.check_size(v.mu.size());
    if (g.size() != v.size()) {
        throw DimensionError(fmt::format("sample_weights: noise length {} != {}", g.size(), v.size()));
    }
    SampledWeights w{Vector(v.size())};
    for (std::size_t m = 0; m < v.size(); ++m) w.theta[m] = v.mu[m] + softplus(v.rho[m]) * g[m];
    return w;
}

Vector forward(const NetworkArch& arch, std::span<const double> theta, std::span<const double> x) {
    std::vector<Vector> acts;
    forward_into(arch, arch.layers(), theta, x, acts);
    return std::move(acts.back());
}

Vector softmax(std::span<const double> logits) {
    Vector p(logits.begin(), logits.end());
    if (p.empty()) return p;
    const double max = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (double& z : p) {
        z = std::exp(z - max);
        sum += z;
    }
    for (double& z : p) z /= sum;
    return p;
}

double log_likelihood(const NetworkArch& arch, std::span<const double> theta, std::span<const double> x,
                      const Target& y) {
    const Vector f = forward(arch, theta, x);
    return output_log_likelihood(arch, f, y, nullptr);
}

double accumulate_log_likelihood_gradient(const NetworkArch& arch, std::span<const double> theta,
                                          std::span<const double> x, const Target& y, double scale,
                                          std::span<double> grad) {
    if (grad.size() != theta.size()) throw DimensionError("gradient buffer length mismatch");
    const auto layers = arch.layers();
    thread_local std::vector<Vector> acts;
    forward_into(arch, layers, theta, x, acts);

    Vector delta;
    const double lp = output_log_likelihood(arch, acts.back(), y, &delta);
    Vector prev;
    for (std::size_t l = layers.size(); l-- > 0;) {
        const LayerSlice& s = layers[l];
        const Vector& in = acts[l];
        double* gw = grad.data() + s.weight_offset;
        double* gb = grad.data() + s.bias_offset;
        const double* w = theta.data() + s.weight_offset;
        const bool propagate = l > 0;
        if (propagate) prev.assign(s.in, 0.0);
        for (std::size_t o = 0; o < s.out; ++o) {
            const double d = delta[o];
            if (d == 0.0) continue;
            const double sd = scale * d;
            gb[o] += sd;
            double* grow = gw + o * s.in;
            for (std::size_t i = 0; i < s.in; ++i) grow[i] += sd * in[i];
            if (propagate) {
                const double* wrow = w + o * s.in;
                for (std::size_t i = 0; i < s.in; ++i) prev[i] += d * wrow[i];
            }
        }
        if (propagate) {
            // ReLU derivative: the stored activation is positive exactly where the unit was active.
            for (std::size_t i = 0; i < s.in; ++i) {
                if (in[i] <= 0.0) prev[i] = 0.0;
            }
            delta.swap(prev);
        }
    }
    return lp;
}

double kl_diag_gauss(const VariationalParams& q, const VariationalParams& w) {
    check_same_length(q, w, "kl_diag_gauss");
    double kl = 0.0;
    for (std::size_t m = 0; m < q.size(); ++m) {
        const double var_q = variance_of(q.rho[m]);
        const double var_w = variance_of(w.rho[m]);
        const double diff = q.mu[m] - w.mu[m];
        kl += std::log(var_w / var_q) + (var_q + diff * diff) / var_w - 1.0;
    }
    return std::max(0.5 * kl, 0.0);
}

ObjectiveParts client_objective_parts(const NetworkArch& arch, const VariationalParams& v_personal,
                                      const VariationalParams& v_global, Batch batch,
                                      std::span<const Vector> g_draws, double zeta, std::size_t n,
                                      std::size_t b) {
    validate_objective_inputs(arch, v_personal, v_global, batch, g_draws, zeta, n, b);
    double sum = 0.0;
    for (const auto& g : g_draws) {
        const SampledWeights w = sample_weights(v_personal, g);
        for (const Example& ex : batch) sum += log_likelihood(arch, w, ex.x, ex.y);
    }
    ObjectiveParts parts;
    parts.scaled_nll = -(static_cast<double>(n) / static_cast<double>(b)) * sum / static_cast<double>(g_draws.size());
    parts.kl = kl_diag_gauss(v_personal, v_global);
    parts.zeta = zeta;
    return parts;
}

double client_objective(const NetworkArch& arch, const VariationalParams& v_personal,
                        const VariationalParams& v_global, Batch batch, std::span<const Vector> g_draws,
                        double zeta, std::size_t n, std::size_t b) {
    return client_objective_parts(arch, v_personal, v_global, batch, g_draws, zeta, n, b).total();
}

ObjectiveWithGradient client_objective_with_gradient(const NetworkArch& arch, const VariationalParams& v_personal,
                                                     const VariationalParams& v_global, Batch batch,
                                                     std::span<const Vector> g_draws, double zeta,
                                                     std::size_t n, std::size_t b) {
    validate_objective_inputs(arch, v_personal, v_global, batch, g_draws, zeta, n, b);
    const std::size_t count = v_personal.size();
    const double scale = -(static_cast<double>(n) / static_cast<double>(b)) / static_cast<double>(g_draws.size());

    ObjectiveWithGradient out{{}, grad_kl_wrt_q(v_personal, v_global, zeta)};
    Vector sigmoid_rho(count);
    for (std::size_t m = 0; m < count; ++m) sigmoid_rho[m] = sigmoid(v_personal.rho[m]);

    Vector d_theta(count);
    double sum = 0.0;
    for (const auto& g : g_draws) {
        const SampledWeights w = sample_weights(v_personal, g);
        std::fill(d_theta.begin(), d_theta.end(), 0.0);
        for (const Example& ex : batch) {
            sum += accumulate_log_likelihood_gradient(arch, w.theta, ex.x, ex.y, scale, d_theta);
        }
        // theta = mu + softplus(rho) g  =>  dtheta/dmu = 1, dtheta/drho = g sigmoid(rho)
        for (std::size_t m = 0; m < count; ++m) {
            out.grad.d_mu[m] += d_theta[m];
            out.grad.d_rho[m] += d_theta[m] * g[m] * sigmoid_rho[m];
        }
    }
    out.value.scaled_nll = scale * sum;
    out.value.kl = kl_diag_gauss(v_personal, v_global);
    out.value.zeta = zeta;
    return out;
}

Gradients grad_client_objective(const NetworkArch& arch, const VariationalParams& v_personal,
                                const VariationalParams& v_global, Batch batch, std::span<const Vector> g_draws,
                                double zeta, std::size_t n, std::size_t b) {
    return client_objective_with_gradient(arch, v_personal, v_global, batch, g_draws, zeta, n, b).grad;
}

Gradients grad_kl_wrt_q(const VariationalParams& q, const VariationalParams& w, double zeta) {
    check_same_length(q, w, "grad_kl_wrt_q");
    Gradients g = Gradients::zeros(q.size());
    for (std::size_t m = 0; m < q.size(); ++m) {
        const double sigma_q = softplus(q.rho[m]);
        const double var_q = std::max(sigma_q * sigma_q, kVarianceFloor);
        const double var_w = variance_of(w.rho[m]);
        g.d_mu[m] = zeta * (q.mu[m] - w.mu[m]) / var_w;
        const double d_sigma = zeta * (sigma_q / var_w - sigma_q / var_q);
        g.d_rho[m] = d_sigma * sigmoid(q.rho[m]);
    }
    return g;
}

Gradients grad_localized_global(const VariationalParams& v_personal, const VariationalParams& v_global) {
    check_same_length(v_personal, v_global, "grad_localized_global");
    Gradients g = Gradients::zeros(v_personal.size());
    for (std::size_t m = 0; m < v_personal.size(); ++m) {
        const double sigma_w = softplus(v_global.rho[m]);
        const double var_w = std::max(sigma_w * sigma_w, kVarianceFloor);
        const double var_q = variance_of(v_personal.rho[m]);
        const double diff = v_personal.mu[m] - v_global.mu[m];
        g.d_mu[m] = -diff / var_w;
        const double d_sigma = sigma_w / var_w - (var_q + diff * diff) * sigma_w / (var_w * var_w);
        g.d_rho[m] = d_sigma * sigmoid(v_global.rho[m]);
    }
    return g;
}

BmaPredictor::BmaPredictor(const NetworkArch& arch, const VariationalParams& v, std::size_t k_eval,
                           const RngStream& stream)
    : arch_(&arch) {
    if (k_eval == 0) throw std::invalid_argument("BMA needs k_eval >= 1");
    v.check_size(arch.parameter_count());
    draws_.reserve(k_eval);
    for (std::size_t k = 0; k < k_eval; ++k) {
        draws_.push_back(sample_weights(v, randn(stream.derive(k), v.size())));
    }
}

Vector BmaPredictor::predict(std::span<const double> x) const {
    Vector avg(arch_->output_dim(), 0.0);
    const auto layers = arch_->layers();
    std::vector<Vector> acts;
    for (const auto& w : draws_) {
        forward_into(*arch_, layers, w.theta, x, acts);
        const Vector out = arch_->likelihood == LikelihoodKind::categorical ? softmax(acts.back()) : acts.back();
        axpy(1.0, out, avg);
    }
    for (double& a : avg) a /= static_cast<double>(draws_.size());
    return avg;
}

Vector predict_bma(const NetworkArch& arch, const VariationalParams& v, std::span<const double> x,
                   std::size_t k_eval, const RngStream& stream) {
    return BmaPredictor(arch, v, k_eval, stream).predict(x);
}

Vector init_point(const NetworkArch& arch, const RngStream& stream) {
    arch.validate();
    Vector theta(arch.parameter_count());
    RngEngine rng(stream);
    for (const LayerSlice& s : arch.layers()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
        for (std::size_t m = s.weight_offset; m < s.bias_offset + s.out; ++m) theta[m] = rng.uniform(-bound, bound);
    }
    return theta;
}

VariationalParams init_variational(const NetworkArch& arch, double rho_init, const RngStream& stream) {
    Vector mu = init_point(arch, stream);
    Vector rho(mu.size(), rho_init);
    return {std::move(mu), std::move(rho)};
}

}  // namespace pfedbayes
