#pragma once

// Experiment configuration (flat key=value files plus overrides) and the
// end-to-end runner that writes rounds.csv and summary.csv.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfedbayes/bnn.hpp"
#include "pfedbayes/data.hpp"
#include "pfedbayes/federation.hpp"

namespace pfedbayes {

enum class Algorithm { pfedbayes, fedavg };
enum class DatasetKind { mnist, blobs, synth_regression };

/// Configuration problem tied to one key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& message)
        : std::runtime_error(key + ": " + message), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct ExperimentConfig {
    Algorithm algorithm = Algorithm::pfedbayes;
    DatasetKind dataset = DatasetKind::blobs;
    Tier tier = Tier::small;
    FedConfig fed;

    std::vector<std::size_t> hidden{100};
    std::size_t clients = 10;
    std::size_t labels_per_client = 5;
    /// Override the tier's per-class counts.
    std::optional<std::size_t> train_per_class;
    std::optional<std::size_t> test_per_class;

    std::size_t classes = 10;
    std::optional<std::size_t> input_dim;
    double blob_spread = 1.0;

    double noise_std = 0.5;
    std::size_t train_per_client = 200;
    std::size_t test_per_client = 200;

    std::filesystem::path mnist_train_images;
    std::filesystem::path mnist_train_labels;
    std::filesystem::path mnist_test_images;
    std::filesystem::path mnist_test_labels;

    std::filesystem::path out = "out";

    SplitSpec split() const;
    std::size_t resolved_input_dim() const;
    NetworkArch arch(std::size_t input_dim, std::size_t outputs) const;
};

/// Names of every accepted key, in output order.
const std::vector<std::string>& config_keys();

/// Parses `key=value` lines; '#' starts a comment. Duplicate or malformed
/// lines raise ConfigError.
std::map<std::string, std::string> parse_key_values(const std::string& text);

/// Applies key/value pairs in order; unknown keys and bad values raise
/// ConfigError naming the key.
void apply_settings(ExperimentConfig& cfg, const std::map<std::string, std::string>& settings);

/// Defaults, then the file (if any), then `overrides` (which win), then
/// validation.
ExperimentConfig parse_config(const std::optional<std::filesystem::path>& file,
                              const std::map<std::string, std::string>& overrides = {});

/// Checks invariants that do not need the data; raises ConfigError.
void validate_config(const ExperimentConfig& cfg);

/// Resolved configuration as key=value lines.
std::string format_config(const ExperimentConfig& cfg);

struct ExperimentData {
    Dataset data;
    Partition partition;
    NetworkArch arch;
};

ExperimentData build_experiment_data(const ExperimentConfig& cfg);

struct Summary {
    std::optional<double> best_pm_acc;
    std::optional<double> best_gm_acc;
    std::optional<double> final_mean_kl;
    std::optional<double> final_hellinger;
};

struct ExperimentOutcome {
    std::vector<RoundRecord> records;
    Summary summary;
};

Summary summarize(const std::vector<RoundRecord>& records);

/// Six significant digits, '.' decimal separator, empty for missing values.
std::string format_number(std::optional<double> value);
std::string rounds_csv(const std::vector<RoundRecord>& records);
std::string summary_csv(const ExperimentConfig& cfg, const Summary& summary);

/// Runs the configured algorithm and writes `rounds.csv` and `summary.csv`
/// into cfg.out. Throws std::runtime_error on IO failure.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

/// Writes data.csv (features then target) and partition.csv
/// (client,split,index) into cfg.out.
void write_experiment_data(const ExperimentConfig& cfg);

}  // namespace pfedbayes
