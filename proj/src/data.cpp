#include "pfedbayes/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>

#include <fmt/core.h>
#include <zlib.h>

namespace pfedbayes {
namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t check_header(std::span<const std::uint8_t> bytes, std::uint32_t expected_magic, std::size_t dims,
                           const char* what) {
    if (bytes.size() < 4) throw IdxError(IdxError::Kind::truncated, fmt::format("{}: file shorter than magic", what));
    const std::uint32_t magic = read_be32(bytes, 0);
    if (magic != expected_magic) {
        throw IdxError(IdxError::Kind::wrong_magic,
                       fmt::format("{}: wrong magic 0x{:08x}, expected 0x{:08x}", what, magic, expected_magic));
    }
    if (bytes.size() < 4 + 4 * dims) {
        throw IdxError(IdxError::Kind::truncated, fmt::format("{}: truncated header", what));
    }
    return magic;
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw IdxError(IdxError::Kind::io, "zlib init failed");
    std::vector<std::uint8_t> out;
    std::uint8_t chunk[1 << 16];
    zs.next_in = const_cast<Bytef*>(bytes.data());
    zs.avail_in = static_cast<uInt>(bytes.size());
    int status = Z_OK;
    while (status != Z_STREAM_END) {
        zs.next_out = chunk;
        zs.avail_out = sizeof(chunk);
        status = inflate(&zs, Z_NO_FLUSH);
        if (status != Z_OK && status != Z_STREAM_END) {
            inflateEnd(&zs);
            throw IdxError(IdxError::Kind::truncated, fmt::format("gzip stream error ({})", status));
        }
        out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
        if (status == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
            inflateEnd(&zs);
            throw IdxError(IdxError::Kind::truncated, "gzip stream ended early");
        }
    }
    inflateEnd(&zs);
    return out;
}

}  // namespace

Target Dataset::target(std::size_t i) const {
    if (kind == TaskKind::classification) return labels[i];
    return targets.row(i);
}

void Dataset::validate() const {
    for (double v : features.data()) {
        if (!std::isfinite(v)) throw std::invalid_argument("dataset: non-finite feature");
    }
    if (kind == TaskKind::classification) {
        if (labels.size() != features.rows()) throw std::invalid_argument("dataset: label count != sample count");
        for (std::size_t y : labels) {
            if (y >= num_classes) throw std::invalid_argument(fmt::format("dataset: label {} >= {} classes", y, num_classes));
        }
    } else if (targets.rows() != features.rows()) {
        throw std::invalid_argument("dataset: target rows != sample count");
    }
}

std::vector<Example> gather(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<Example> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        if (i >= data.size()) throw std::out_of_range(fmt::format("sample index {} >= {}", i, data.size()));
        out.push_back(data.example(i));
    }
    return out;
}

std::vector<std::size_t> Partition::union_test() const {
    std::vector<std::size_t> all;
    for (const auto& s : test_shards) all.insert(all.end(), s.begin(), s.end());
    return all;
}

SplitSpec SplitSpec::for_tier(Tier tier) {
    switch (tier) {
        case Tier::small: return {50, 950, tier};
        case Tier::medium: return {200, 800, tier};
        case Tier::large: return {900, 300, tier};
    }
    throw std::invalid_argument("unknown tier");
}

Dataset gen_synth_regression(std::size_t n, std::size_t input_dim, double noise_std, std::uint64_t seed,
                             std::size_t hidden) {
    if (n == 0) throw std::invalid_argument("gen_synth_regression: n must be >= 1");
    if (noise_std < 0.0) throw std::invalid_argument("gen_synth_regression: noise_std must be >= 0");

    // Fixed random two-layer ReLU network as the ground truth.
    auto truth_arch = NetworkArch::regressor({input_dim, hidden, 1}, 1.0);
    Vector truth_theta(truth_arch.parameter_count());
    {
        RngEngine rng(RngStream::keyed(seed, Purpose::target_function));
        for (const LayerSlice& s : truth_arch.layers()) {
            const double scale = 2.0 / std::sqrt(static_cast<double>(s.in));
            for (std::size_t m = s.weight_offset; m < s.bias_offset + s.out; ++m) truth_theta[m] = scale * rng.normal();
        }
    }
    Dataset data;
    data.kind = TaskKind::regression;
    data.true_fn = [truth_arch, truth_theta](std::span<const double> x) { return forward(truth_arch, truth_theta, x); };
    data.features = Matrix(n, input_dim);
    data.targets = Matrix(n, 1);

    RngEngine xs(RngStream::keyed(seed, Purpose::data, 0));
    RngEngine noise(RngStream::keyed(seed, Purpose::data, 1));
    for (std::size_t i = 0; i < n; ++i) {
        for (double& v : data.features.row(i)) v = xs.uniform(-1.0, 1.0);
        const Vector f = data.true_fn(data.features.row(i));
        data.targets(i, 0) = noise_std == 0.0 ? f[0] : f[0] + noise_std * noise.normal();
    }
    return data;
}

Dataset gen_blobs(std::size_t classes, std::size_t per_class, std::size_t input_dim, double spread,
                  std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("gen_blobs: need at least 2 classes");
    if (input_dim == 0) throw std::invalid_argument("gen_blobs: input_dim must be >= 1");
    Matrix centers(classes, input_dim);
    RngEngine center_rng(RngStream::keyed(seed, Purpose::data, 0));
    for (double& c : centers.data()) c = center_rng.normal();

    Dataset data;
    data.kind = TaskKind::classification;
    data.num_classes = classes;
    data.features = Matrix(classes * per_class, input_dim);
    data.labels.resize(classes * per_class);
    RngEngine rng(RngStream::keyed(seed, Purpose::data, 1));
    for (std::size_t k = 0; k < classes; ++k) {
        for (std::size_t j = 0; j < per_class; ++j) {
            const std::size_t i = k * per_class + j;
            data.labels[i] = k;
            auto row = data.features.row(i);
            for (std::size_t d = 0; d < input_dim; ++d) row[d] = centers(k, d) + spread * rng.normal();
        }
    }
    return data;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.kind != b.kind || a.input_dim() != b.input_dim()) throw std::invalid_argument("concat: incompatible datasets");
    Dataset out;
    out.kind = a.kind;
    out.num_classes = std::max(a.num_classes, b.num_classes);
    out.true_fn = a.true_fn;
    Vector features(a.features.data().begin(), a.features.data().end());
    features.insert(features.end(), b.features.data().begin(), b.features.data().end());
    out.features = Matrix(a.size() + b.size(), a.input_dim(), std::move(features));
    if (a.kind == TaskKind::classification) {
        out.labels = a.labels;
        out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    } else {
        Vector targets(a.targets.data().begin(), a.targets.data().end());
        targets.insert(targets.end(), b.targets.data().begin(), b.targets.data().end());
        out.targets = Matrix(a.size() + b.size(), a.targets.cols(), std::move(targets));
    }
    return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IdxError(IdxError::Kind::io, fmt::format("cannot open {}", path.string()));
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes);
    return bytes;
}

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
    check_header(bytes, kIdxImagesMagic, 3, "idx images");
    IdxImages images;
    images.count = read_be32(bytes, 4);
    images.rows = read_be32(bytes, 8);
    images.cols = read_be32(bytes, 12);
    const std::size_t payload = images.count * images.rows * images.cols;
    if (bytes.size() - 16 < payload) {
        throw IdxError(IdxError::Kind::truncated,
                       fmt::format("idx images: {} payload bytes, header promises {}", bytes.size() - 16, payload));
    }
    images.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
    return images;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
    check_header(bytes, kIdxLabelsMagic, 1, "idx labels");
    const std::size_t count = read_be32(bytes, 4);
    if (bytes.size() - 8 < count) {
        throw IdxError(IdxError::Kind::truncated,
                       fmt::format("idx labels: {} payload bytes, header promises {}", bytes.size() - 8, count));
    }
    return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images) {
    std::vector<std::uint8_t> out;
    write_be32(out, kIdxImagesMagic);
    write_be32(out, static_cast<std::uint32_t>(images.count));
    write_be32(out, static_cast<std::uint32_t>(images.rows));
    write_be32(out, static_cast<std::uint32_t>(images.cols));
    out.insert(out.end(), images.pixels.begin(), images.pixels.end());
    return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
    std::vector<std::uint8_t> out;
    write_be32(out, kIdxLabelsMagic);
    write_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    const IdxImages images = parse_idx_images(read_file_bytes(images_path));
    const std::vector<std::uint8_t> labels = parse_idx_labels(read_file_bytes(labels_path));
    if (images.count != labels.size()) {
        throw IdxError(IdxError::Kind::count_mismatch,
                       fmt::format("{} images but {} labels", images.count, labels.size()));
    }
    const std::size_t dim = images.rows * images.cols;
    Dataset data;
    data.kind = TaskKind::classification;
    Vector features(images.pixels.size());
    std::transform(images.pixels.begin(), images.pixels.end(), features.begin(),
                   [](std::uint8_t p) { return static_cast<double>(p) / 255.0; });
    data.features = Matrix(images.count, dim, std::move(features));
    data.labels.assign(labels.begin(), labels.end());
    data.num_classes = labels.empty() ? 0 : std::size_t{*std::max_element(labels.begin(), labels.end())} + 1;
    return data;
}

Partition partition_label_skew(const Dataset& data, std::size_t n_clients, std::size_t labels_per_client,
                               std::size_t per_class_train, std::size_t per_class_test, std::uint64_t seed) {
    if (data.kind != TaskKind::classification) throw std::invalid_argument("label-skew partition needs class labels");
    const std::size_t classes = data.num_classes;
    if (n_clients == 0) throw std::invalid_argument("partition: need at least one client");
    if (labels_per_client == 0 || labels_per_client > classes) {
        throw std::invalid_argument(fmt::format("partition: labels_per_client must be in [1, {}]", classes));
    }

    RngEngine rng(RngStream::keyed(seed, Purpose::partition, 0));
    Partition part;
    part.labels_per_client = labels_per_client;
    part.client_labels.resize(n_clients);

    // Give each client the least-held labels, ties broken at random. Label
    // loads therefore never differ by more than one.
    std::vector<std::size_t> load(classes, 0);
    std::vector<std::vector<std::size_t>> holders(classes);
    for (std::size_t c = 0; c < n_clients; ++c) {
        std::vector<std::size_t> order(classes);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return load[a] < load[b]; });
        order.resize(labels_per_client);
        std::sort(order.begin(), order.end());
        for (std::size_t k : order) {
            ++load[k];
            holders[k].push_back(c);
        }
        part.client_labels[c] = std::move(order);
    }

    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

    part.shards.resize(n_clients);
    part.test_shards.resize(n_clients);
    for (std::size_t k = 0; k < classes; ++k) {
        const std::size_t needed = holders[k].size() * (per_class_train + per_class_test);
        if (by_class[k].size() < needed) {
            throw std::invalid_argument(fmt::format("partition: class {} has {} samples, {} needed", k,
                                                    by_class[k].size(), needed));
        }
        RngEngine class_rng(RngStream::keyed(seed, Purpose::partition, 1, k));
        class_rng.shuffle(by_class[k]);
        auto next = by_class[k].begin();
        for (std::size_t c : holders[k]) {
            part.shards[c].insert(part.shards[c].end(), next, next + static_cast<std::ptrdiff_t>(per_class_train));
            next += static_cast<std::ptrdiff_t>(per_class_train);
            part.test_shards[c].insert(part.test_shards[c].end(), next, next + static_cast<std::ptrdiff_t>(per_class_test));
            next += static_cast<std::ptrdiff_t>(per_class_test);
        }
    }
    return part;
}

Partition partition_iid(const Dataset& data, std::size_t n_clients, std::size_t per_client_train,
                        std::size_t per_client_test, std::uint64_t seed) {
    if (n_clients == 0) throw std::invalid_argument("partition: need at least one client");
    const std::size_t needed = n_clients * (per_client_train + per_client_test);
    if (data.size() < needed) {
        throw std::invalid_argument(fmt::format("partition: {} samples, {} needed", data.size(), needed));
    }
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    RngEngine rng(RngStream::keyed(seed, Purpose::partition, 2));
    rng.shuffle(order);

    Partition part;
    part.shards.resize(n_clients);
    part.test_shards.resize(n_clients);
    part.client_labels.resize(n_clients);
    auto next = order.begin();
    for (std::size_t c = 0; c < n_clients; ++c) {
        part.shards[c].assign(next, next + static_cast<std::ptrdiff_t>(per_client_train));
        next += static_cast<std::ptrdiff_t>(per_client_train);
        part.test_shards[c].assign(next, next + static_cast<std::ptrdiff_t>(per_client_test));
        next += static_cast<std::ptrdiff_t>(per_client_test);
        if (data.kind == TaskKind::classification) {
            std::set<std::size_t> seen;
            for (std::size_t i : part.shards[c]) seen.insert(data.labels[i]);
            part.client_labels[c].assign(seen.begin(), seen.end());
        }
    }
    part.labels_per_client = data.kind == TaskKind::classification ? data.num_classes : 0;
    return part;
}

}  // namespace pfedbayes
