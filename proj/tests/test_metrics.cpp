#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "pfedbayes/metrics.hpp"

using namespace pfedbayes;

namespace {

Dataset labelled(std::vector<std::size_t> labels, std::size_t classes) {
    Dataset d;
    d.features = Matrix(labels.size(), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) d.features(i, 0) = static_cast<double>(labels[i]);
    d.labels = std::move(labels);
    d.num_classes = classes;
    return d;
}

std::vector<std::size_t> all_indices(const Dataset& d) {
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

// Regressor f(x) = bias with a single zero weight and effectively no noise.
VariationalParams constant_output(double bias) {
    VariationalParams v = VariationalParams::filled(2, 0.0, -60.0);
    v.mu[1] = bias;
    return v;
}

}  // namespace

TEST_CASE("accuracy of oracle and uniform predictors") {
    const Dataset d = labelled({0, 1, 2, 0, 2, 2, 1, 0, 0}, 3);
    const auto idx = all_indices(d);
    const Predictor oracle = [](std::span<const double> x) {
        Vector p(3, 0.0);
        p[static_cast<std::size_t>(x[0])] = 1.0;
        return p;
    };
    CHECK(accuracy(oracle, d, idx) == 1.0);
    const Predictor uniform = [](std::span<const double>) { return Vector(3, 1.0 / 3.0); };
    CHECK(accuracy(uniform, d, idx) == doctest::Approx(4.0 / 9.0));

    // Always guesses class 2: right on three of the first five.
    const Predictor twos = [](std::span<const double>) { return Vector{0.1, 0.2, 0.7}; };
    const std::vector<std::size_t> first_five{0, 1, 2, 3, 4};
    CHECK(accuracy(twos, d, first_five) == doctest::Approx(2.0 / 5.0));

    CHECK_THROWS(accuracy(oracle, d, std::vector<std::size_t>{}));
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    CHECK(argmax(Vector{1, 3, 3, 2}) == 1);
    CHECK(argmax(Vector{5}) == 0);
}

TEST_CASE("hellinger error of constant offsets") {
    const NetworkArch arch = NetworkArch::regressor({1, 1}, 1.0);
    const RegressionFunction zero = [](std::span<const double>) { return Vector{0.0}; };
    const Matrix x(4, 1, {-1.0, -0.5, 0.25, 1.0});
    const RngStream stream{1, 1};

    CHECK(hellinger_error(arch, constant_output(0.0), zero, x, 1.0, 5, stream) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(hellinger_error(arch, constant_output(2.0), zero, x, 1.0, 5, stream) ==
          doctest::Approx(0.393469340287366).epsilon(1e-12));

    double previous = 0.0;
    for (double err = 0.125; err <= 16.0; err *= 2.0) {
        const double h = hellinger_error(arch, constant_output(err), zero, x, 1.0, 3, stream);
        CHECK(h > previous);
        CHECK(h < 1.0);
        previous = h;
    }

    CHECK_THROWS(hellinger_error(NetworkArch::classifier({1, 2}), VariationalParams::filled(4, 0.0, -3.0), zero, x,
                                 1.0, 1, stream));
}

TEST_CASE("predictive entropy") {
    Vector one_hot(10, 0.0);
    one_hot[4] = 1.0;
    CHECK(predictive_entropy(one_hot) == 0.0);
    CHECK(predictive_entropy(Vector(10, 0.1)) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    Vector halves(10, 0.0);
    halves[0] = halves[1] = 0.5;
    CHECK(predictive_entropy(halves) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    CHECK_THROWS(predictive_entropy(Vector{0.5, 0.6}));
    CHECK_THROWS(predictive_entropy(Vector{1.2, -0.2}));
    CHECK_THROWS(predictive_entropy(Vector{}));

    // Moving mass away from uniform lowers entropy.
    RngEngine rng(RngStream{12, 0});
    for (int trial = 0; trial < 100; ++trial) {
        Vector p(5);
        double total = 0.0;
        for (double& x : p) total += x = rng.uniform();
        for (double& x : p) x /= total;
        CHECK(predictive_entropy(p) < std::log(5.0));
    }
}
