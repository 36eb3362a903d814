#include "pfedbayes/tensor.hpp"

#include <cmath>
#include <numbers>

#include <fmt/core.h>

namespace pfedbayes {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, Vector data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw DimensionError(fmt::format("matrix data has {} entries, expected {}x{}", data_.size(), rows_, cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Vector matvec(const MatrixView& m, std::span<const double> v) {
    if (v.size() != m.cols) {
        throw DimensionError(fmt::format("matvec: vector length {} != matrix cols {}", v.size(), m.cols));
    }
    Vector out(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) {
        out[r] = dot(m.row(r), v);
    }
    return out;
}

void matvec_transposed_accumulate(const MatrixView& m, std::span<const double> v, std::span<double> out) {
    if (v.size() != m.rows || out.size() != m.cols) {
        throw DimensionError("matvec_transposed_accumulate: shape mismatch");
    }
    for (std::size_t r = 0; r < m.rows; ++r) {
        if (v[r] != 0.0) axpy(v[r], m.row(r), out);
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError(fmt::format("matmul: {}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            axpy(a(i, k), b.row(k), out.row(i));
        }
    }
    return out;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

RngStream RngStream::keyed(std::uint64_t seed, Purpose purpose, std::uint64_t a, std::uint64_t b,
                           std::uint64_t c) {
    std::uint64_t id = mix64(static_cast<std::uint64_t>(purpose));
    id = hash_combine(id, a);
    id = hash_combine(id, b);
    id = hash_combine(id, c);
    return {seed, id};
}

RngEngine::RngEngine(const RngStream& stream)
    : key_(hash_combine(mix64(stream.seed ^ 0x6A09E667F3BCC909ULL), stream.stream_id)) {}

std::uint64_t RngEngine::next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

double RngEngine::uniform() {
    // 53 random bits, shifted by half an ulp so 0 is never returned.
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t RngEngine::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngEngine::below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

double RngEngine::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Vector randn(const RngStream& stream, std::size_t n) {
    Vector out(n);
    randn_fill(stream, out);
    return out;
}

void randn_fill(const RngStream& stream, std::span<double> out) {
    RngEngine engine(stream);
    for (double& x : out) x = engine.normal();
}

}  // namespace pfedbayes
