#include "pfedbayes/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/core.h>

#include "pfedbayes/baselines.hpp"

namespace pfedbayes {
namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

std::size_t to_count(const std::string& key, const std::string& value) {
    std::size_t out = 0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw ConfigError(key, fmt::format("expected a non-negative integer, got '{}'", value));
    return out;
}

double to_real(const std::string& key, const std::string& value) {
    double out = 0.0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc{} || ptr != end || !std::isfinite(out)) {
        throw ConfigError(key, fmt::format("expected a real number, got '{}'", value));
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(key, fmt::format("expected true/false, got '{}'", value));
}

std::vector<std::size_t> to_widths(const std::string& key, const std::string& value) {
    std::vector<std::size_t> out;
    if (value.empty()) return out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_count(key, trim(item)));
    return out;
}

template <class E>
E to_enum(const std::string& key, const std::string& value, std::initializer_list<std::pair<const char*, E>> names) {
    for (const auto& [name, e] : names) {
        if (value == name) return e;
    }
    std::string allowed;
    for (const auto& [name, e] : names) allowed += (allowed.empty() ? "" : "|") + std::string(name);
    throw ConfigError(key, fmt::format("expected one of {}, got '{}'", allowed, value));
}

const char* algorithm_name(Algorithm a) { return a == Algorithm::pfedbayes ? "pfedbayes" : "fedavg"; }

const char* dataset_name(DatasetKind d) {
    switch (d) {
        case DatasetKind::mnist: return "mnist";
        case DatasetKind::blobs: return "blobs";
        case DatasetKind::synth_regression: return "synth_regression";
    }
    return "";
}

const char* tier_name(Tier t) {
    switch (t) {
        case Tier::small: return "small";
        case Tier::medium: return "medium";
        case Tier::large: return "large";
    }
    return "";
}

std::string real_text(double v) { return fmt::format("{}", v); }
std::string optional_count(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : ""; }

// Empty means "use the default".
std::optional<std::size_t> to_optional_count(const std::string& key, const std::string& value) {
    if (value.empty()) return std::nullopt;
    return to_count(key, value);
}

struct Field {
    std::string name;
    std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define PFB_COUNT(key, member)                                                                     \
    Field{key, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = to_count(k, v); }, \
          [](const ExperimentConfig& c) { return std::to_string(c.member); }}
#define PFB_REAL(key, member)                                                                     \
    Field{key, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = to_real(k, v); }, \
          [](const ExperimentConfig& c) { return real_text(c.member); }}
#define PFB_PATH(key, member)                                                                     \
    Field{key, [](ExperimentConfig& c, const std::string&, const std::string& v) { c.member = v; },               \
          [](const ExperimentConfig& c) { return c.member.string(); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        Field{"algorithm",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                  c.algorithm = to_enum<Algorithm>(k, v, {{"pfedbayes", Algorithm::pfedbayes}, {"fedavg", Algorithm::fedavg}});
              },
              [](const ExperimentConfig& c) { return std::string(algorithm_name(c.algorithm)); }},
        Field{"dataset",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                  c.dataset = to_enum<DatasetKind>(k, v, {{"mnist", DatasetKind::mnist}, {"blobs", DatasetKind::blobs},
                                                          {"synth_regression", DatasetKind::synth_regression}});
              },
              [](const ExperimentConfig& c) { return std::string(dataset_name(c.dataset)); }},
        Field{"tier",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                  c.tier = to_enum<Tier>(k, v, {{"small", Tier::small}, {"medium", Tier::medium}, {"large", Tier::large}});
              },
              [](const ExperimentConfig& c) { return std::string(tier_name(c.tier)); }},
        PFB_COUNT("rounds", fed.rounds),
        PFB_COUNT("local_steps", fed.local_steps),
        PFB_COUNT("subset_size", fed.subset_size),
        PFB_REAL("beta", fed.beta),
        PFB_REAL("zeta", fed.zeta),
        PFB_REAL("eta1", fed.eta1),
        PFB_REAL("eta2", fed.eta2),
        PFB_COUNT("batch_size", fed.batch_size),
        PFB_COUNT("mc_draws", fed.mc_draws),
        PFB_REAL("rho_init", fed.rho_init),
        Field{"seed",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.fed.seed = to_count(k, v); },
              [](const ExperimentConfig& c) { return std::to_string(c.fed.seed); }},
        PFB_COUNT("workers", fed.workers),
        PFB_COUNT("k_eval", fed.k_eval),
        PFB_COUNT("eval_every", fed.eval_every),
        PFB_REAL("fedavg_lr", fed.fedavg_lr),
        Field{"record_timing",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.fed.record_timing = to_bool(k, v); },
              [](const ExperimentConfig& c) { return std::string(c.fed.record_timing ? "true" : "false"); }},
        Field{"hidden",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.hidden = to_widths(k, v); },
              [](const ExperimentConfig& c) {
                  std::string s;
                  for (std::size_t w : c.hidden) s += (s.empty() ? "" : ",") + std::to_string(w);
                  return s;
              }},
        PFB_COUNT("clients", clients),
        PFB_COUNT("labels_per_client", labels_per_client),
        Field{"train_per_class",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train_per_class = to_optional_count(k, v); },
              [](const ExperimentConfig& c) { return optional_count(c.train_per_class); }},
        Field{"test_per_class",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.test_per_class = to_optional_count(k, v); },
              [](const ExperimentConfig& c) { return optional_count(c.test_per_class); }},
        PFB_COUNT("classes", classes),
        Field{"input_dim",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.input_dim = to_optional_count(k, v); },
              [](const ExperimentConfig& c) { return optional_count(c.input_dim); }},
        PFB_REAL("blob_spread", blob_spread),
        PFB_REAL("noise_std", noise_std),
        PFB_COUNT("train_per_client", train_per_client),
        PFB_COUNT("test_per_client", test_per_client),
        PFB_PATH("mnist_train_images", mnist_train_images),
        PFB_PATH("mnist_train_labels", mnist_train_labels),
        PFB_PATH("mnist_test_images", mnist_test_images),
        PFB_PATH("mnist_test_labels", mnist_test_labels),
        PFB_PATH("out", out),
    };
    return table;
}

#undef PFB_COUNT
#undef PFB_REAL
#undef PFB_PATH

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
    out << text;
    out.flush();
    if (!out) throw std::runtime_error(fmt::format("failed writing {}", path.string()));
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw std::runtime_error(fmt::format("cannot create output directory {}", dir.string()));
    }
}

}  // namespace

SplitSpec ExperimentConfig::split() const {
    SplitSpec spec = SplitSpec::for_tier(tier);
    if (train_per_class) spec.train_per_class = *train_per_class;
    if (test_per_class) spec.test_per_class = *test_per_class;
    return spec;
}

std::size_t ExperimentConfig::resolved_input_dim() const {
    if (input_dim) return *input_dim;
    switch (dataset) {
        case DatasetKind::mnist: return 784;
        case DatasetKind::blobs: return 20;
        case DatasetKind::synth_regression: return 4;
    }
    return 0;
}

NetworkArch ExperimentConfig::arch(std::size_t in, std::size_t outputs) const {
    std::vector<std::size_t> widths{in};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(outputs);
    if (dataset == DatasetKind::synth_regression) return NetworkArch::regressor(std::move(widths), noise_std);
    return NetworkArch::classifier(std::move(widths));
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& f : fields()) k.push_back(f.name);
        return k;
    }();
    return keys;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(fmt::format("line {}", line_no), fmt::format("expected key=value, got '{}'", stripped));
        }
        std::string key = trim(std::string_view(stripped).substr(0, eq));
        std::string value = trim(std::string_view(stripped).substr(eq + 1));
        if (key.empty()) throw ConfigError(fmt::format("line {}", line_no), "empty key");
        if (out.contains(key)) throw ConfigError(key, fmt::format("duplicate key on line {}", line_no));
        out.emplace(std::move(key), std::move(value));
    }
    return out;
}

void apply_settings(ExperimentConfig& cfg, const std::map<std::string, std::string>& settings) {
    for (const auto& [key, value] : settings) {
        const auto& table = fields();
        const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.name == key; });
        if (it == table.end()) throw ConfigError(key, "unknown key");
        it->set(cfg, key, value);
    }
}

ExperimentConfig parse_config(const std::optional<std::filesystem::path>& file,
                              const std::map<std::string, std::string>& overrides) {
    ExperimentConfig cfg;
    if (file) {
        std::ifstream in(*file, std::ios::binary);
        if (!in) throw ConfigError("config", fmt::format("cannot read {}", file->string()));
        std::stringstream text;
        text << in.rdbuf();
        apply_settings(cfg, parse_key_values(text.str()));
    }
    apply_settings(cfg, overrides);
    validate_config(cfg);
    return cfg;
}

void validate_config(const ExperimentConfig& cfg) {
    const FedConfig& f = cfg.fed;
    if (cfg.clients == 0) throw ConfigError("clients", "must be >= 1");
    if (f.subset_size == 0 || f.subset_size > cfg.clients) {
        throw ConfigError("subset_size", fmt::format("must be in [1, clients={}]", cfg.clients));
    }
    if (!(f.beta > 0.0 && f.beta <= 1.0)) throw ConfigError("beta", fmt::format("must be in (0, 1], got {}", f.beta));
    if (!(f.zeta > 0.0)) throw ConfigError("zeta", "must be > 0");
    if (f.eta1 < 0.0) throw ConfigError("eta1", "must be >= 0");
    if (f.eta2 < 0.0) throw ConfigError("eta2", "must be >= 0");
    if (f.fedavg_lr < 0.0) throw ConfigError("fedavg_lr", "must be >= 0");
    if (f.batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
    if (f.mc_draws == 0) throw ConfigError("mc_draws", "must be >= 1");
    if (f.k_eval == 0) throw ConfigError("k_eval", "must be >= 1");
    if (f.eval_every == 0) throw ConfigError("eval_every", "must be >= 1");
    if (f.workers == 0) throw ConfigError("workers", "must be >= 1");
    for (std::size_t w : cfg.hidden) {
        if (w == 0) throw ConfigError("hidden", "widths must be >= 1");
    }
    if (cfg.resolved_input_dim() == 0) throw ConfigError("input_dim", "must be >= 1");

    if (cfg.dataset == DatasetKind::synth_regression) {
        if (!(cfg.noise_std > 0.0)) throw ConfigError("noise_std", "must be > 0");
        if (cfg.train_per_client == 0) throw ConfigError("train_per_client", "must be >= 1");
        if (cfg.test_per_client == 0) throw ConfigError("test_per_client", "must be >= 1");
        return;
    }
    if (cfg.classes < 2) throw ConfigError("classes", "must be >= 2");
    if (cfg.labels_per_client == 0 || cfg.labels_per_client > cfg.classes) {
        throw ConfigError("labels_per_client", fmt::format("must be in [1, classes={}]", cfg.classes));
    }
    const SplitSpec spec = cfg.split();
    if (spec.train_per_class == 0) throw ConfigError("train_per_class", "must be >= 1");
    if (spec.test_per_class == 0) throw ConfigError("test_per_class", "must be >= 1");
    if (cfg.dataset == DatasetKind::blobs && !(cfg.blob_spread >= 0.0)) throw ConfigError("blob_spread", "must be >= 0");
    if (cfg.dataset == DatasetKind::mnist) {
        const std::pair<const char*, const std::filesystem::path*> paths[] = {
            {"mnist_train_images", &cfg.mnist_train_images},
            {"mnist_train_labels", &cfg.mnist_train_labels},
            {"mnist_test_images", &cfg.mnist_test_images},
            {"mnist_test_labels", &cfg.mnist_test_labels},
        };
        for (const auto& [key, path] : paths) {
            if (path->empty()) throw ConfigError(key, "required for dataset=mnist");
            if (!std::filesystem::exists(*path)) throw ConfigError(key, fmt::format("{} does not exist", path->string()));
        }
    }
}

std::string format_config(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += f.name + "=" + f.get(cfg) + "\n";
    return out;
}

ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
    validate_config(cfg);
    const std::uint64_t seed = cfg.fed.seed;
    if (cfg.dataset == DatasetKind::synth_regression) {
        const std::size_t dim = cfg.resolved_input_dim();
        Dataset data = gen_synth_regression(cfg.clients * (cfg.train_per_client + cfg.test_per_client), dim,
                                            cfg.noise_std, seed);
        Partition part = partition_iid(data, cfg.clients, cfg.train_per_client, cfg.test_per_client, seed);
        return {std::move(data), std::move(part), cfg.arch(dim, 1)};
    }

    const SplitSpec spec = cfg.split();
    Dataset data;
    if (cfg.dataset == DatasetKind::blobs) {
        const std::size_t holders = (cfg.clients * cfg.labels_per_client + cfg.classes - 1) / cfg.classes;
        data = gen_blobs(cfg.classes, holders * (spec.train_per_class + spec.test_per_class), cfg.resolved_input_dim(),
                         cfg.blob_spread, seed);
    } else {
        // Train and test files form one pool; the partition draws both splits from it.
        data = concat(load_idx(cfg.mnist_train_images, cfg.mnist_train_labels),
                      load_idx(cfg.mnist_test_images, cfg.mnist_test_labels));
    }
    Partition part = partition_label_skew(data, cfg.clients, cfg.labels_per_client, spec.train_per_class,
                                          spec.test_per_class, seed);
    NetworkArch arch = cfg.arch(data.input_dim(), data.num_classes);
    return {std::move(data), std::move(part), std::move(arch)};
}

Summary summarize(const std::vector<RoundRecord>& records) {
    Summary s;
    for (const auto& r : records) {
        if (r.pm_acc && (!s.best_pm_acc || *r.pm_acc > *s.best_pm_acc)) s.best_pm_acc = r.pm_acc;
        if (r.gm_acc && (!s.best_gm_acc || *r.gm_acc > *s.best_gm_acc)) s.best_gm_acc = r.gm_acc;
        if (r.hellinger) s.final_hellinger = r.hellinger;
    }
    if (!records.empty()) s.final_mean_kl = records.back().mean_kl;
    return s;
}

std::string format_number(std::optional<double> value) {
    if (!value) return {};
    // fmt ignores the global locale unless asked, so '.' is always the separator.
    return fmt::format("{:.6g}", *value);
}

std::string rounds_csv(const std::vector<RoundRecord>& records) {
    std::string out = "round,pm_acc,gm_acc,mean_loss,mean_kl,hellinger,wall_ms\n";
    for (const auto& r : records) {
        out += fmt::format("{},{},{},{},{},{},{}\n", r.round, format_number(r.pm_acc), format_number(r.gm_acc),
                           format_number(r.mean_client_loss), format_number(r.mean_kl), format_number(r.hellinger),
                           format_number(r.wall_ms));
    }
    return out;
}

std::string summary_csv(const ExperimentConfig& cfg, const Summary& s) {
    return fmt::format("algorithm,dataset,rounds,best_pm_acc,best_gm_acc,final_mean_kl,final_hellinger\n{},{},{},{},{},{},{}\n",
                       algorithm_name(cfg.algorithm), dataset_name(cfg.dataset), cfg.fed.rounds,
                       format_number(s.best_pm_acc), format_number(s.best_gm_acc), format_number(s.final_mean_kl),
                       format_number(s.final_hellinger));
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
    ensure_dir(cfg.out);
    ExperimentData ed = build_experiment_data(cfg);
    ExperimentOutcome outcome;
    if (cfg.algorithm == Algorithm::pfedbayes) {
        outcome.records = run(cfg.fed, ed.arch, ed.data, ed.partition).records;
    } else {
        outcome.records = fedavg_run(cfg.fed, ed.arch, ed.data, ed.partition).records;
    }
    outcome.summary = summarize(outcome.records);
    write_text(cfg.out / "rounds.csv", rounds_csv(outcome.records));
    write_text(cfg.out / "summary.csv", summary_csv(cfg, outcome.summary));
    return outcome;
}

void write_experiment_data(const ExperimentConfig& cfg) {
    ensure_dir(cfg.out);
    const ExperimentData ed = build_experiment_data(cfg);
    const Dataset& d = ed.data;

    std::string data_csv;
    for (std::size_t j = 0; j < d.input_dim(); ++j) data_csv += fmt::format("x{},", j);
    if (d.kind == TaskKind::classification) {
        data_csv += "label\n";
    } else {
        for (std::size_t j = 0; j < d.targets.cols(); ++j) data_csv += fmt::format("{}y{}", j ? "," : "", j);
        data_csv += "\n";
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (double v : d.features.row(i)) data_csv += format_number(v) + ",";
        if (d.kind == TaskKind::classification) {
            data_csv += std::to_string(d.labels[i]);
        } else {
            const auto row = d.targets.row(i);
            for (std::size_t j = 0; j < row.size(); ++j) data_csv += (j ? "," : "") + format_number(row[j]);
        }
        data_csv += "\n";
    }
    write_text(cfg.out / "data.csv", data_csv);

    std::string part_csv = "client,split,index\n";
    for (std::size_t c = 0; c < ed.partition.num_clients(); ++c) {
        for (std::size_t i : ed.partition.shards[c]) part_csv += fmt::format("{},train,{}\n", c, i);
        for (std::size_t i : ed.partition.test_shards[c]) part_csv += fmt::format("{},test,{}\n", c, i);
    }
    write_text(cfg.out / "partition.csv", part_csv);
}

}  // namespace pfedbayes
