#pragma once

// Dense row-major matrices and counter-keyed random streams.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfedbayes {

using Vector = std::vector<double>;

/// Raised when operand shapes disagree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-owning row-major view, used to treat a slice of a flat parameter
/// vector as a weight matrix without copying.
struct MatrixView {
    std::span<const double> data;
    std::size_t rows = 0;
    std::size_t cols = 0;

    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return data.subspan(r * cols, cols); }
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, Vector data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<const double> row(std::size_t r) const { return std::span(data_).subspan(r * cols_, cols_); }
    std::span<double> row(std::size_t r) { return std::span(data_).subspan(r * cols_, cols_); }

    MatrixView view() const { return {data_, rows_, cols_}; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

Vector matvec(const MatrixView& m, std::span<const double> v);
inline Vector matvec(const Matrix& m, std::span<const double> v) { return matvec(m.view(), v); }

/// out += m^T v
void matvec_transposed_accumulate(const MatrixView& m, std::span<const double> v, std::span<double> out);

Matrix matmul(const Matrix& a, const Matrix& b);

/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// SplitMix64 output function; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
    return mix64(h ^ (v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2)));
}

/// What a stream of draws is used for. Part of every stream key so that two
/// consumers with the same (client, round) never share draws.
enum class Purpose : std::uint64_t {
    init = 1,
    minibatch = 2,
    weight_noise = 3,
    subsample = 4,
    evaluation = 5,
    data = 6,
    partition = 7,
    target_function = 8,
};

/// A reproducible stream of random draws identified by (seed, stream_id).
/// Streams are plain values; the draw sequence is a pure function of the pair.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    static RngStream keyed(std::uint64_t seed, Purpose purpose, std::uint64_t a = 0,
                           std::uint64_t b = 0, std::uint64_t c = 0);

    /// Child stream for sub-draws (e.g. the k-th Monte Carlo sample).
    RngStream derive(std::uint64_t tag) const { return {seed, hash_combine(stream_id, tag)}; }

    bool operator==(const RngStream&) const = default;
};

/// Sequential generator over a stream: counter-based SplitMix64 keyed by the
/// stream. Box-Muller normals are computed from our own uniforms so the
/// sequence does not depend on the standard library implementation.
class RngEngine {
public:
    explicit RngEngine(const RngStream& stream);

    std::uint64_t next_u64();
    /// Uniform in the open interval (0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n), n > 0, without modulo bias.
    std::uint64_t below(std::uint64_t n);
    double normal();

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// n i.i.d. standard normals; identical output for identical streams.
Vector randn(const RngStream& stream, std::size_t n);
void randn_fill(const RngStream& stream, std::span<double> out);

}  // namespace pfedbayes
