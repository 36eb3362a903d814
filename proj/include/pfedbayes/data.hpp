#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfedbayes/bnn.hpp"
#include "pfedbayes/tensor.hpp"

namespace pfedbayes {

enum class TaskKind { classification, regression };

using RegressionFunction = std::function<Vector(std::span<const double>)>;

struct Dataset {
    Matrix features;
    /// Class indices; used when kind == classification.
    std::vector<std::size_t> labels;
    /// One row per sample; used when kind == regression.
    Matrix targets;
    TaskKind kind = TaskKind::classification;
    std::size_t num_classes = 0;
    /// Noise-free regression function, kept for generalization metrics.
    RegressionFunction true_fn;

    std::size_t size() const { return features.rows(); }
    std::size_t input_dim() const { return features.cols(); }
    Target target(std::size_t i) const;
    Example example(std::size_t i) const { return {features.row(i), target(i)}; }
    /// Throws std::invalid_argument when an invariant is broken.
    void validate() const;
};

std::vector<Example> gather(const Dataset& data, std::span<const std::size_t> indices);

struct Partition {
    /// Per-client training indices into the dataset.
    std::vector<std::vector<std::size_t>> shards;
    /// Per-client test indices; the union is the global test set.
    std::vector<std::vector<std::size_t>> test_shards;
    std::vector<std::vector<std::size_t>> client_labels;
    std::size_t labels_per_client = 0;

    std::size_t num_clients() const { return shards.size(); }
    std::vector<std::size_t> union_test() const;
};

enum class Tier { small, medium, large };

struct SplitSpec {
    std::size_t train_per_class = 50;
    std::size_t test_per_class = 950;
    Tier tier = Tier::small;

    static SplitSpec for_tier(Tier tier);
};

Dataset gen_synth_regression(std::size_t n, std::size_t input_dim, double noise_std, std::uint64_t seed,
                             std::size_t hidden = 16);

/// Isotropic Gaussian clusters around N(0, I) centers; `spread` is the
/// per-coordinate noise standard deviation. Samples are grouped by class.
Dataset gen_blobs(std::size_t classes, std::size_t per_class, std::size_t input_dim, double spread,
                  std::uint64_t seed);

/// Concatenates two datasets of the same kind and width.
Dataset concat(const Dataset& a, const Dataset& b);

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

class IdxError : public std::runtime_error {
public:
    enum class Kind { io, wrong_magic, truncated, count_mismatch, unsupported };

    IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
    std::size_t count = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> pixels;
};

/// Raw file bytes; gzip input (0x1f 0x8b) is inflated transparently.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_idx_images(const IdxImages& images);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

/// Images scaled to [0, 1], one row per image.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Label-skew split: each client holds `labels_per_client` distinct labels,
/// chosen so every label is held by the same number of clients (+-1). For each
/// held label a client receives `per_class_train` training and
/// `per_class_test` test samples; no sample is given out twice.
Partition partition_label_skew(const Dataset& data, std::size_t n_clients, std::size_t labels_per_client,
                               std::size_t per_class_train, std::size_t per_class_test, std::uint64_t seed);

/// Uniformly shuffled equal-size shards, for regression or iid baselines.
Partition partition_iid(const Dataset& data, std::size_t n_clients, std::size_t per_client_train,
                        std::size_t per_client_test, std::uint64_t seed);

}  // namespace pfedbayes
