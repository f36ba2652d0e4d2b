#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "fedunlearn/error.hpp"
#include "fedunlearn/experiment.hpp"

namespace fedunlearn::config {

// Config files are line oriented:
//
//   # comment
//   master_seed = 7
//   [training]
//   rounds = 30
//
// Keys before the first section header belong to the top level. Lists are
// comma separated. Unknown sections and keys are rejected.

class MissingFileError : public ConfigurationError {
public:
    using ConfigurationError::ConfigurationError;
};

class SyntaxError : public ConfigurationError {
public:
    SyntaxError(const std::string& what, std::size_t line)
        : ConfigurationError("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class UnknownKeyError : public ConfigurationError {
public:
    UnknownKeyError(const std::string& key, std::size_t line)
        : ConfigurationError("line " + std::to_string(line) + ": unknown key '" + key + "'"), key_(key) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class InvariantError : public ConfigurationError {
public:
    InvariantError(const std::string& field, const std::string& what)
        : ConfigurationError(field + ": " + what), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Pipeline controls that live alongside the experiment in the config file
/// but do not influence results (and so are excluded from the config hash).
struct PipelineSection {
    bool resume = false;
    std::vector<std::string> skip;  // stage names loaded from checkpoints instead of recomputed
};

struct RunConfig {
    ExperimentConfig experiment;
    PipelineSection pipeline;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(std::string_view v) {
    std::vector<std::string> out;
    if (trim(v).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto comma = v.find(',', start);
        out.emplace_back(trim(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <typename T>
T parse_int(std::string_view v, const std::string& field) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw InvariantError(field, "expected an integer, got '" + std::string(v) + "'");
    return out;
}

inline double parse_double(std::string_view v, const std::string& field) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw InvariantError(field, "expected a number, got '" + std::string(v) + "'");
    return out;
}

inline bool parse_bool(std::string_view v, const std::string& field) {
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    throw InvariantError(field, "expected true/false, got '" + std::string(v) + "'");
}

inline std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_same_v<T, double>) {
            out += fmt_double(xs[i]);
        } else if constexpr (std::is_same_v<T, std::string>) {
            out += xs[i];
        } else {
            out += std::to_string(xs[i]);
        }
    }
    return out;
}

using Setter = std::function<void(RunConfig&, std::string_view, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto size = [](auto member) {
            return [member](RunConfig& c, std::string_view v, const std::string& f) {
                member(c.experiment) = parse_int<std::size_t>(v, f);
            };
        };
        auto seed = [](auto member) {
            return [member](RunConfig& c, std::string_view v, const std::string& f) {
                member(c.experiment) = parse_int<std::uint64_t>(v, f);
            };
        };
        auto real = [](auto member) {
            return [member](RunConfig& c, std::string_view v, const std::string& f) {
                member(c.experiment) = parse_double(v, f);
            };
        };

        t["master_seed"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.master_seed = parse_int<std::uint64_t>(v, f);
        };

        t["data.source"] = [](RunConfig& c, std::string_view v, const std::string&) { c.experiment.data.source = v; };
        t["data.num_classes"] = size([](ExperimentConfig& e) -> auto& { return e.data.num_classes; });
        t["data.feature_dim"] = size([](ExperimentConfig& e) -> auto& { return e.data.feature_dim; });
        t["data.per_class"] = size([](ExperimentConfig& e) -> auto& { return e.data.per_class; });
        t["data.spread"] = real([](ExperimentConfig& e) -> auto& { return e.data.spread; });
        t["data.idx_images"] = [](RunConfig& c, std::string_view v, const std::string&) { c.experiment.data.idx_images = v; };
        t["data.idx_labels"] = [](RunConfig& c, std::string_view v, const std::string&) { c.experiment.data.idx_labels = v; };
        t["data.idx_limit"] = size([](ExperimentConfig& e) -> auto& { return e.data.idx_limit; });
        t["data.n_clients"] = size([](ExperimentConfig& e) -> auto& { return e.data.n_clients; });
        t["data.shard_size"] = size([](ExperimentConfig& e) -> auto& { return e.data.shard_size; });
        t["data.seed"] = seed([](ExperimentConfig& e) -> auto& { return e.data.seed; });
        t["data.partition_seed"] = seed([](ExperimentConfig& e) -> auto& { return e.data.partition_seed; });

        t["model.hidden"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.model.hidden.clear();
            for (const auto& item : split_list(v)) c.experiment.model.hidden.push_back(parse_int<std::size_t>(item, f));
        };
        t["model.seed"] = seed([](ExperimentConfig& e) -> auto& { return e.model.seed; });

        t["attack.enabled"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.attack.enabled = parse_bool(v, f);
        };
        t["attack.attacker"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.attack.attacker = parse_int<int>(v, f);
        };
        t["attack.source_class"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.attack.spec.source_class = parse_int<int>(v, f);
        };
        t["attack.target_class"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.attack.spec.target_class = parse_int<int>(v, f);
        };
        t["attack.trigger_indices"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            auto& idx = c.experiment.attack.spec.trigger_indices;
            idx.clear();
            for (const auto& item : split_list(v)) idx.push_back(parse_int<std::size_t>(item, f));
        };
        t["attack.trigger_values"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            auto& vals = c.experiment.attack.spec.trigger_values;
            vals.clear();
            for (const auto& item : split_list(v)) vals.push_back(parse_double(item, f));
        };
        t["attack.poison_fraction"] = real([](ExperimentConfig& e) -> auto& { return e.attack.spec.poison_fraction; });
        t["attack.seed"] = seed([](ExperimentConfig& e) -> auto& { return e.attack.seed; });

        t["training.rounds"] = size([](ExperimentConfig& e) -> auto& { return e.training.rounds; });
        t["training.local_epochs"] = size([](ExperimentConfig& e) -> auto& { return e.training.local_epochs; });
        t["training.batch_size"] = size([](ExperimentConfig& e) -> auto& { return e.training.batch_size; });
        t["training.learning_rate"] = real([](ExperimentConfig& e) -> auto& { return e.training.learning_rate; });
        t["training.seed"] = seed([](ExperimentConfig& e) -> auto& { return e.training.seed; });
        t["training.threads"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.training.threads = parse_int<unsigned>(v, f);
        };

        t["unlearn.mode"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            if (v == "lazy") {
                c.experiment.unlearn.mode = unlearn::SubtractionMode::Lazy;
            } else if (v == "rescaled") {
                c.experiment.unlearn.mode = unlearn::SubtractionMode::Rescaled;
            } else {
                throw InvariantError(f, "expected lazy or rescaled, got '" + std::string(v) + "'");
            }
        };
        t["unlearn.distill_epochs"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.experiment.unlearn.distill_epochs = parse_int<int>(v, f);
        };
        t["unlearn.temperature"] = real([](ExperimentConfig& e) -> auto& { return e.unlearn.temperature; });
        t["unlearn.distill_learning_rate"] =
            real([](ExperimentConfig& e) -> auto& { return e.unlearn.distill_learning_rate; });
        t["unlearn.distill_batch_size"] = size([](ExperimentConfig& e) -> auto& { return e.unlearn.distill_batch_size; });
        t["unlearn.hard_label_weight"] = real([](ExperimentConfig& e) -> auto& { return e.unlearn.hard_label_weight; });
        t["unlearn.post_rounds"] = size([](ExperimentConfig& e) -> auto& { return e.unlearn.post_rounds; });
        t["unlearn.seed"] = seed([](ExperimentConfig& e) -> auto& { return e.unlearn.seed; });

        t["output.directory"] = [](RunConfig& c, std::string_view v, const std::string&) {
            c.experiment.output.directory = v;
        };
        t["output.formats"] = [](RunConfig& c, std::string_view v, const std::string&) {
            c.experiment.output.formats = split_list(v);
        };

        t["pipeline.resume"] = [](RunConfig& c, std::string_view v, const std::string& f) {
            c.pipeline.resume = parse_bool(v, f);
        };
        t["pipeline.skip"] = [](RunConfig& c, std::string_view v, const std::string&) { c.pipeline.skip = split_list(v); };
        return t;
    }();
    return table;
}

}  // namespace detail

/// Checks the cross-field invariants; throws InvariantError naming the field.
inline void validate(const RunConfig& rc) {
    const auto& c = rc.experiment;
    auto require = [](bool ok, const char* field, const std::string& what) {
        if (!ok) throw InvariantError(field, what);
    };
    require(c.data.source == "synthetic" || c.data.source == "idx", "data.source", "must be synthetic or idx");
    require(c.data.num_classes >= 2, "data.num_classes", "must be >= 2");
    require(c.data.feature_dim >= 1, "data.feature_dim", "must be >= 1");
    require(c.data.per_class >= 1, "data.per_class", "must be >= 1");
    require(c.data.spread > 0.0, "data.spread", "must be > 0");
    require(c.data.n_clients >= 1, "data.n_clients", "must be >= 1");
    if (c.data.source == "idx") {
        require(!c.data.idx_images.empty(), "data.idx_images", "required when data.source = idx");
        require(!c.data.idx_labels.empty(), "data.idx_labels", "required when data.source = idx");
    }
    require(c.attack.attacker >= 0 && static_cast<std::size_t>(c.attack.attacker) < c.data.n_clients,
            "attack.attacker", "must be < data.n_clients (" + std::to_string(c.data.n_clients) + ")");
    require(c.attack.spec.source_class != c.attack.spec.target_class, "attack.target_class",
            "must differ from attack.source_class");
    require(c.attack.spec.source_class >= 0 && static_cast<std::size_t>(c.attack.spec.source_class) < c.data.num_classes,
            "attack.source_class", "out of range");
    require(c.attack.spec.target_class >= 0 && static_cast<std::size_t>(c.attack.spec.target_class) < c.data.num_classes,
            "attack.target_class", "out of range");
    require(c.attack.spec.trigger_indices.size() == c.attack.spec.trigger_values.size(), "attack.trigger_values",
            "must have as many entries as attack.trigger_indices");
    if (c.data.source == "synthetic") {
        for (auto i : c.attack.spec.trigger_indices) {
            require(i < c.data.feature_dim, "attack.trigger_indices", "index " + std::to_string(i) + " >= feature_dim");
        }
    }
    require(c.attack.spec.poison_fraction >= 0.0 && c.attack.spec.poison_fraction <= 1.0, "attack.poison_fraction",
            "must be in [0, 1]");
    for (auto h : c.model.hidden) require(h >= 1, "model.hidden", "layer sizes must be >= 1");
    require(c.training.batch_size >= 1, "training.batch_size", "must be >= 1");
    require(c.training.learning_rate >= 0.0, "training.learning_rate", "must be >= 0");
    require(c.training.threads >= 1, "training.threads", "must be >= 1");
    require(c.unlearn.distill_epochs >= 0, "unlearn.distill_epochs", "must be >= 0");
    require(c.unlearn.temperature > 0.0, "unlearn.temperature", "must be > 0");
    require(c.unlearn.distill_learning_rate >= 0.0, "unlearn.distill_learning_rate", "must be >= 0");
    require(c.unlearn.distill_batch_size >= 1, "unlearn.distill_batch_size", "must be >= 1");
    require(c.unlearn.hard_label_weight >= 0.0 && c.unlearn.hard_label_weight <= 1.0, "unlearn.hard_label_weight",
            "must be in [0, 1]");
    for (const auto& f : c.output.formats) {
        require(f == "csv" || f == "json" || f == "svg", "output.formats", "unknown format '" + f + "'");
    }
    for (const auto& s : rc.pipeline.skip) {
        try {
            eval::parse_stage(s);
        } catch (const LookupError&) {
            throw InvariantError("pipeline.skip", "unknown stage '" + s + "'");
        }
    }
}

inline RunConfig parse_text(std::string_view text) {
    RunConfig rc;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;

        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') throw SyntaxError("unterminated section header", line_no);
            section = std::string(detail::trim(line.substr(1, line.size() - 2)));
            static const char* kSections[] = {"data", "model", "attack", "training", "unlearn", "output", "pipeline"};
            if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections)) {
                throw UnknownKeyError("[" + section + "]", line_no);
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw SyntaxError("expected 'key = value'", line_no);
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw SyntaxError("missing key before '='", line_no);

        const std::string field = section.empty() ? std::string(key) : section + "." + std::string(key);
        const auto& table = detail::setters();
        const auto it = table.find(field);
        if (it == table.end()) throw UnknownKeyError(field, line_no);
        try {
            it->second(rc, value, field);
        } catch (const InvariantError& e) {
            throw SyntaxError(e.what(), line_no);
        }
    }
    validate(rc);
    return rc;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
}

// ---------------------------------------------------------------------------

struct Entry {
    std::string section;  // empty for top level
    std::string key;
    std::string value;
};

/// Fully resolved experiment settings (every seed made explicit), in a fixed
/// order. Output and pipeline controls are not part of the experiment.
inline std::vector<Entry> resolved_entries(const ExperimentConfig& c) {
    using detail::fmt_double;
    using detail::join;
    const char* mode = c.unlearn.mode == unlearn::SubtractionMode::Lazy ? "lazy" : "rescaled";
    std::vector<Entry> e{
        {"", "master_seed", std::to_string(c.master_seed)},
        {"data", "source", c.data.source},
        {"data", "num_classes", std::to_string(c.data.num_classes)},
        {"data", "feature_dim", std::to_string(c.data.feature_dim)},
        {"data", "per_class", std::to_string(c.data.per_class)},
        {"data", "spread", fmt_double(c.data.spread)},
        {"data", "idx_images", c.data.idx_images},
        {"data", "idx_labels", c.data.idx_labels},
        {"data", "idx_limit", std::to_string(c.data.idx_limit)},
        {"data", "n_clients", std::to_string(c.data.n_clients)},
        {"data", "shard_size", std::to_string(c.data.shard_size)},
        {"data", "seed", std::to_string(c.seed_for(SeedTag::Data))},
        {"data", "partition_seed", std::to_string(c.seed_for(SeedTag::Partition))},
        {"model", "hidden", join(c.model.hidden)},
        {"model", "seed", std::to_string(c.seed_for(SeedTag::Model))},
        {"attack", "enabled", c.attack.enabled ? "true" : "false"},
        {"attack", "attacker", std::to_string(c.attack.attacker)},
        {"attack", "source_class", std::to_string(c.attack.spec.source_class)},
        {"attack", "target_class", std::to_string(c.attack.spec.target_class)},
        {"attack", "trigger_indices", join(c.attack.spec.trigger_indices)},
        {"attack", "trigger_values", join(c.attack.spec.trigger_values)},
        {"attack", "poison_fraction", fmt_double(c.attack.spec.poison_fraction)},
        {"attack", "seed", std::to_string(c.seed_for(SeedTag::Poison))},
        {"training", "rounds", std::to_string(c.training.rounds)},
        {"training", "local_epochs", std::to_string(c.training.local_epochs)},
        {"training", "batch_size", std::to_string(c.training.batch_size)},
        {"training", "learning_rate", fmt_double(c.training.learning_rate)},
        {"training", "seed", std::to_string(c.seed_for(SeedTag::LocalTrain))},
        {"unlearn", "mode", mode},
        {"unlearn", "distill_epochs", std::to_string(c.unlearn.distill_epochs)},
        {"unlearn", "temperature", fmt_double(c.unlearn.temperature)},
        {"unlearn", "distill_learning_rate", fmt_double(c.unlearn.distill_learning_rate)},
        {"unlearn", "distill_batch_size", std::to_string(c.unlearn.distill_batch_size)},
        {"unlearn", "hard_label_weight", fmt_double(c.unlearn.hard_label_weight)},
        {"unlearn", "post_rounds", std::to_string(c.unlearn.post_rounds)},
        {"unlearn", "seed", std::to_string(c.seed_for(SeedTag::Distill))},
    };
    return e;
}

/// The resolved experiment in config-file syntax; parsing it back yields an
/// equivalent experiment with the same hash.
inline std::string to_text(const ExperimentConfig& c) {
    std::ostringstream os;
    std::string section;
    for (const auto& e : resolved_entries(c)) {
        if (e.section != section) {
            section = e.section;
            os << "\n[" << section << "]\n";
        }
        os << e.key << " = " << e.value << '\n';
    }
    return os.str();
}

/// 64-bit FNV-1a digest of the resolved experiment text.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_text(c)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace fedunlearn::config
