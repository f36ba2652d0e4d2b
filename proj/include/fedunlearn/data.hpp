#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedunlearn/binary_io.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/nn.hpp"
#include "fedunlearn/rng.hpp"

namespace fedunlearn::data {

enum class Provenance { Clean, Poisoned, DistillPool, Test };

inline std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::Clean: return "clean";
        case Provenance::Poisoned: return "poisoned";
        case Provenance::DistillPool: return "distill-pool";
        case Provenance::Test: return "test";
    }
    return "?";
}

inline constexpr int kNoOwner = -1;

struct Example {
    std::vector<double> features;
    int label = 0;
    std::uint64_t id = 0;  // identity in the source dataset; survives partitioning and triggering
    Provenance provenance = Provenance::Clean;
    int owner = kNoOwner;  // client whose shard the example was dealt into

    friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
    std::vector<Example> examples;
    std::size_t num_classes = 0;
    std::size_t feature_dim = 0;
    Provenance provenance = Provenance::Clean;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }

    std::size_t count_label(int label) const {
        return static_cast<std::size_t>(
            std::count_if(examples.begin(), examples.end(), [&](const Example& e) { return e.label == label; }));
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct BackdoorSpec {
    std::vector<std::size_t> trigger_indices;
    std::vector<double> trigger_values;
    int source_class = 1;
    int target_class = 7;
    double poison_fraction = 0.5;

    void validate(std::size_t feature_dim, std::size_t num_classes) const {
        if (trigger_indices.size() != trigger_values.size()) {
            throw ConfigurationError("trigger indices and values differ in length");
        }
        for (auto i : trigger_indices) {
            if (i >= feature_dim) throw ConfigurationError("trigger index " + std::to_string(i) + " out of range");
        }
        if (source_class == target_class) throw ConfigurationError("source and target class must differ");
        if (source_class < 0 || target_class < 0 || static_cast<std::size_t>(source_class) >= num_classes ||
            static_cast<std::size_t>(target_class) >= num_classes) {
            throw ConfigurationError("backdoor classes out of range");
        }
        if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) {
            throw ConfigurationError("poison fraction must be in [0, 1]");
        }
    }
};

struct Partition {
    std::vector<Dataset> client_shards;
    Dataset distill_pool;
    Dataset test_set;
};

// ---------------------------------------------------------------------------

/// Gaussian clusters: class centers uniform in [-1, 1]^d, examples drawn as
/// center + spread * N(0, I). Examples are laid out class-major.
inline Dataset gen_synthetic(std::size_t num_classes, std::size_t feature_dim, std::size_t per_class,
                             double spread, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigurationError("need at least two classes");
    if (feature_dim < 1) throw ConfigurationError("feature_dim must be >= 1");
    if (per_class < 1) throw ConfigurationError("per_class must be >= 1");
    if (!(spread > 0.0) || !std::isfinite(spread)) throw ConfigurationError("spread must be positive");

    Rng rng(seed);
    std::vector<std::vector<double>> centers(num_classes, std::vector<double>(feature_dim));
    for (auto& c : centers) {
        for (double& v : c) v = rng.uniform(-1.0, 1.0);
    }
    Dataset ds;
    ds.num_classes = num_classes;
    ds.feature_dim = feature_dim;
    ds.examples.reserve(num_classes * per_class);
    std::uint64_t id = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        for (std::size_t n = 0; n < per_class; ++n) {
            Example e;
            e.features.resize(feature_dim);
            for (std::size_t d = 0; d < feature_dim; ++d) e.features[d] = centers[k][d] + spread * rng.normal();
            e.label = static_cast<int>(k);
            e.id = id++;
            ds.examples.push_back(std::move(e));
        }
    }
    return ds;
}

/// Seeded shuffle, then n_clients shards of `shard_size`, one shard-sized
/// distillation pool, and the remainder as test set. shard_size = 0 picks
/// size / (n_clients + 2).
inline Partition partition(const Dataset& dataset, std::size_t n_clients, std::uint64_t seed,
                           std::size_t shard_size = 0) {
    if (n_clients < 1) throw ConfigurationError("need at least one client");
    if (shard_size == 0) shard_size = dataset.size() / (n_clients + 2);
    if (shard_size == 0 || (n_clients + 1) * shard_size >= dataset.size()) {
        throw ConfigurationError("dataset of " + std::to_string(dataset.size()) + " examples is too small for " +
                                 std::to_string(n_clients) + " shards, a pool and a test set");
    }
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));

    auto slice = [&](std::size_t begin, std::size_t end, Provenance prov, int owner) {
        Dataset d;
        d.num_classes = dataset.num_classes;
        d.feature_dim = dataset.feature_dim;
        d.provenance = prov;
        d.examples.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
            Example e = dataset.examples[order[i]];
            e.provenance = prov;
            e.owner = owner;
            d.examples.push_back(std::move(e));
        }
        return d;
    };

    Partition p;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < n_clients; ++c, pos += shard_size) {
        p.client_shards.push_back(slice(pos, pos + shard_size, Provenance::Clean, static_cast<int>(c)));
    }
    p.distill_pool = slice(pos, pos + shard_size, Provenance::DistillPool, kNoOwner);
    pos += shard_size;
    p.test_set = slice(pos, dataset.size(), Provenance::Test, kNoOwner);
    return p;
}

inline Example apply_trigger(Example example, const BackdoorSpec& spec) {
    if (spec.trigger_indices.size() != spec.trigger_values.size()) {
        throw ConfigurationError("trigger indices and values differ in length");
    }
    for (std::size_t k = 0; k < spec.trigger_indices.size(); ++k) {
        const auto i = spec.trigger_indices[k];
        if (i >= example.features.size()) {
            throw ConfigurationError("trigger index " + std::to_string(i) + " out of range");
        }
        example.features[i] = spec.trigger_values[k];
    }
    return example;
}

/// Triggers and relabels floor(poison_fraction * #source) source-class
/// examples chosen by a seeded shuffle; everything else stays as it was.
inline Dataset poison_shard(const Dataset& shard, const BackdoorSpec& spec, std::uint64_t seed) {
    spec.validate(shard.feature_dim, shard.num_classes);
    std::vector<std::size_t> source;
    for (std::size_t i = 0; i < shard.size(); ++i) {
        if (shard.examples[i].label == spec.source_class) source.push_back(i);
    }
    if (source.empty()) throw ConfigurationError("shard has no examples of the backdoor source class");

    const auto n_poison = static_cast<std::size_t>(std::floor(spec.poison_fraction * static_cast<double>(source.size())));
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(source));

    Dataset out = shard;
    out.provenance = Provenance::Poisoned;
    for (std::size_t k = 0; k < n_poison; ++k) {
        Example& e = out.examples[source[k]];
        e = apply_trigger(std::move(e), spec);
        e.label = spec.target_class;
        e.provenance = Provenance::Poisoned;
    }
    return out;
}

/// Every source-class test example with the trigger stamped on; labels are
/// left as the true class.
inline Dataset build_attack_set(const Dataset& test_set, const BackdoorSpec& spec) {
    Dataset out;
    out.num_classes = test_set.num_classes;
    out.feature_dim = test_set.feature_dim;
    out.provenance = Provenance::Test;
    for (const auto& e : test_set.examples) {
        if (e.label == spec.source_class) out.examples.push_back(apply_trigger(e, spec));
    }
    if (out.empty()) throw ConfigurationError("test set has no examples of the backdoor source class");
    return out;
}

// ---------------------------------------------------------------------------

inline nn::Matrix feature_matrix(const Dataset& ds, std::span<const std::size_t> rows) {
    nn::Matrix m(rows.size(), ds.feature_dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& f = ds.examples[rows[r]].features;
        std::copy(f.begin(), f.end(), m.row(r).begin());
    }
    return m;
}

inline nn::Matrix feature_matrix(const Dataset& ds) {
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return feature_matrix(ds, all);
}

inline std::vector<int> labels(const Dataset& ds, std::span<const std::size_t> rows) {
    std::vector<int> out(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) out[r] = ds.examples[rows[r]].label;
    return out;
}

inline std::vector<int> labels(const Dataset& ds) {
    std::vector<int> out(ds.size());
    for (std::size_t r = 0; r < ds.size(); ++r) out[r] = ds.examples[r].label;
    return out;
}

/// One row per example: features..., label, provenance.
inline std::string to_csv(const Dataset& ds) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t d = 0; d < ds.feature_dim; ++d) os << 'f' << d << ',';
    os << "label,provenance\n";
    for (const auto& e : ds.examples) {
        for (double v : e.features) os << v << ',';
        os << e.label << ',' << to_string(e.provenance) << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// IDX reader. Layout: two zero bytes, a type code (0x08 = unsigned byte), the
// number of dimensions, then one big-endian u32 per dimension, then the raw
// payload in row-major order.

namespace idx {

struct Array {
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;
};

inline std::uint32_t read_be32(std::string_view data, std::size_t pos) {
    if (data.size() < pos + 4) throw FormatError("truncated IDX header", pos);
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(data[pos + i]);
    return v;
}

inline Array parse(std::string_view data) {
    if (data.size() < 4) throw FormatError("truncated IDX magic", 0);
    if (data[0] != 0 || data[1] != 0) throw FormatError("IDX magic must start with two zero bytes", 0);
    if (static_cast<unsigned char>(data[2]) != 0x08) throw FormatError("only unsigned-byte IDX files are supported", 2);
    const auto ndims = static_cast<unsigned char>(data[3]);
    if (ndims == 0) throw FormatError("IDX file declares zero dimensions", 3);
    Array a;
    std::uint64_t total = 1;
    for (std::size_t d = 0; d < ndims; ++d) {
        a.dims.push_back(read_be32(data, 4 + 4 * d));
        total *= a.dims.back();
    }
    const std::size_t header = 4 + 4 * static_cast<std::size_t>(ndims);
    if (data.size() - header < total) throw FormatError("IDX payload shorter than declared", data.size());
    if (data.size() - header > total) throw FormatError("trailing bytes after IDX payload", header + total);
    a.payload.assign(data.begin() + static_cast<std::ptrdiff_t>(header), data.end());
    return a;
}

inline std::string encode(const Array& a) {
    std::string out{'\0', '\0', '\x08', static_cast<char>(a.dims.size())};
    for (auto d : a.dims) {
        for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((d >> s) & 0xff));
    }
    out.append(a.payload.begin(), a.payload.end());
    return out;
}

/// Images (n x rows x cols) and labels (n) become a Dataset with pixel values
/// rescaled to [0, 1]. `limit` > 0 keeps only the first `limit` examples.
inline Dataset load(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                    std::size_t num_classes = 10, std::size_t limit = 0) {
    const auto images = parse(io::read_file(images_path));
    const auto labels = parse(io::read_file(labels_path));
    if (images.dims.size() < 2) throw FormatError("image file needs at least two dimensions", 3);
    if (labels.dims.size() != 1) throw FormatError("label file must be one-dimensional", 3);
    if (images.dims[0] != labels.dims[0]) throw ConfigurationError("image and label counts differ");

    std::size_t dim = 1;
    for (std::size_t d = 1; d < images.dims.size(); ++d) dim *= images.dims[d];
    std::size_t n = images.dims[0];
    if (limit > 0) n = std::min(n, limit);

    Dataset ds;
    ds.num_classes = num_classes;
    ds.feature_dim = dim;
    ds.examples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Example e;
        e.features.resize(dim);
        for (std::size_t k = 0; k < dim; ++k) e.features[k] = images.payload[i * dim + k] / 255.0;
        e.label = labels.payload[i];
        if (static_cast<std::size_t>(e.label) >= num_classes) {
            throw ConfigurationError("IDX label " + std::to_string(e.label) + " exceeds num_classes");
        }
        e.id = i;
        ds.examples.push_back(std::move(e));
    }
    return ds;
}

}  // namespace idx

}  // namespace fedunlearn::data
