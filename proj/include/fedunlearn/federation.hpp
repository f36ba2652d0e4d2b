#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedunlearn/binary_io.hpp"
#include "fedunlearn/data.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/evaluation.hpp"
#include "fedunlearn/nn.hpp"
#include "fedunlearn/params.hpp"
#include "fedunlearn/rng.hpp"

namespace fedunlearn::fed {

struct LocalTrainConfig {
    std::size_t local_epochs = 2;
    std::size_t batch_size = 16;
    double learning_rate = 0.05;
    std::uint64_t shuffle_seed_base = 0;

    void validate() const {
        if (batch_size < 1) throw ConfigurationError("batch_size must be >= 1");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw ConfigurationError("learning_rate must be finite and non-negative");
        }
    }
};

/// Seed of client `client_id`'s mini-batch order at round `round`.
inline std::uint64_t client_stream_seed(std::uint64_t base, std::size_t round, int client_id) {
    return derive_seed(base, round, static_cast<std::uint64_t>(client_id));
}

/// Runs seeded mini-batch SGD on one shard from `global_model` and returns
/// the change in parameters.
inline ParameterVector local_train(const ParameterVector& global_model, const data::Dataset& shard,
                                   const LocalTrainConfig& cfg, std::size_t round, int client_id) {
    if (shard.empty()) throw ConfigurationError("client " + std::to_string(client_id) + " has an empty shard");
    cfg.validate();
    ParameterVector model = global_model;
    Rng rng(client_stream_seed(cfg.shuffle_seed_base, round, client_id));
    std::vector<std::size_t> order(shard.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const nn::LossSpec loss{nn::LossKind::Hard, 1.0, 0.0};

    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const auto rows = std::span<const std::size_t>(order).subspan(
                start, std::min(cfg.batch_size, order.size() - start));
            nn::Batch batch{data::feature_matrix(shard, rows), data::labels(shard, rows), std::nullopt};
            const auto fwd = nn::forward(model, batch, 1.0);
            model = nn::sgd_step(model, nn::backward(model, fwd.cache, loss, batch), cfg.learning_rate);
        }
    }
    return model - global_model;
}

/// global + (1/N) * sum(deltas), summed in list order.
inline ParameterVector fedavg_aggregate(const ParameterVector& global_model, std::span<const ParameterVector> deltas) {
    if (deltas.empty()) throw ConfigurationError("fedavg_aggregate needs at least one delta");
    for (const auto& d : deltas) global_model.require_same_shape(d, "fedavg_aggregate");
    const auto n = static_cast<double>(deltas.size());
    ParameterVector out = global_model;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double s = 0.0;
        for (const auto& d : deltas) s += d[i];
        out[i] += s / n;
    }
    return out;
}

// ---------------------------------------------------------------------------

struct ClientDelta {
    int client_id = 0;
    ParameterVector delta;

    friend bool operator==(const ClientDelta&, const ClientDelta&) = default;
};

/// One aggregation round: N_t and the raw (unscaled) deltas, ordered by client id.
struct LedgerRound {
    std::vector<ClientDelta> deltas;

    std::size_t participants() const { return deltas.size(); }

    const ParameterVector* find(int client_id) const {
        for (const auto& cd : deltas) {
            if (cd.client_id == client_id) return &cd.delta;
        }
        return nullptr;
    }

    friend bool operator==(const LedgerRound&, const LedgerRound&) = default;
};

/// Server-side history of every client's per-round update.
class UpdateLedger {
public:
    UpdateLedger() = default;
    UpdateLedger(ParameterVector initial_model, std::vector<int> clients)
        : initial_model_(std::move(initial_model)), clients_(std::move(clients)) {
        std::sort(clients_.begin(), clients_.end());
    }

    const ParameterVector& initial_model() const { return initial_model_; }
    const std::vector<int>& clients() const { return clients_; }
    const std::vector<LedgerRound>& rounds() const { return rounds_; }

    bool knows(int client_id) const { return std::binary_search(clients_.begin(), clients_.end(), client_id); }

    void append_round(LedgerRound round) {
        std::sort(round.deltas.begin(), round.deltas.end(),
                  [](const ClientDelta& a, const ClientDelta& b) { return a.client_id < b.client_id; });
        for (std::size_t i = 0; i < round.deltas.size(); ++i) {
            const auto& cd = round.deltas[i];
            if (!knows(cd.client_id)) throw LookupError("client " + std::to_string(cd.client_id) + " is not registered");
            if (i > 0 && round.deltas[i - 1].client_id == cd.client_id) {
                throw StateError("duplicate delta for client " + std::to_string(cd.client_id));
            }
            initial_model_.require_same_shape(cd.delta, "ledger append");
        }
        if (round.deltas.empty()) throw StateError("a ledger round needs at least one participant");
        rounds_.push_back(std::move(round));
    }

    /// Re-applies FedAvg from the initial model; deltas of `zeroed` clients
    /// are replaced by zero vectors (the client stays in N_t).
    ParameterVector replay(std::optional<int> zeroed = std::nullopt) const {
        ParameterVector model = initial_model_;
        const auto zero = ParameterVector::zeros_like(initial_model_);
        std::vector<ParameterVector> deltas;
        for (const auto& r : rounds_) {
            deltas.clear();
            for (const auto& cd : r.deltas) deltas.push_back(zeroed && cd.client_id == *zeroed ? zero : cd.delta);
            model = fedavg_aggregate(model, deltas);
        }
        return model;
    }

    friend bool operator==(const UpdateLedger&, const UpdateLedger&) = default;

private:
    ParameterVector initial_model_;
    std::vector<int> clients_;
    std::vector<LedgerRound> rounds_;
};

/// Sum over rounds of (1/N_t) * delta of `client_id`. Zero if the client is
/// registered but never participated.
inline ParameterVector ledger_client_sum(const UpdateLedger& ledger, int client_id) {
    if (!ledger.knows(client_id)) throw LookupError("client " + std::to_string(client_id) + " is not in the ledger");
    ParameterVector sum = ParameterVector::zeros_like(ledger.initial_model());
    for (const auto& r : ledger.rounds()) {
        if (const auto* d = r.find(client_id)) {
            const auto n = static_cast<double>(r.participants());
            for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += (*d)[i] / n;
        }
    }
    return sum;
}

// ---------------------------------------------------------------------------
// Ledger file (little-endian):
//   "FULG" magic, u32 version (= 1), u64 config tag
//   shape manifest (as in the checkpoint format)
//   u64 count + f64 values of the initial model
//   u32 client count, u32 client ids
//   u32 round count, then per round: u32 N_t, N_t x { u32 client id, f64 delta values }

inline constexpr std::string_view kLedgerMagic = "FULG";
inline constexpr std::uint32_t kLedgerVersion = 1;

inline std::string encode_ledger(const UpdateLedger& ledger, std::uint64_t tag = 0) {
    io::ByteWriter w;
    w.bytes(kLedgerMagic);
    w.u32(kLedgerVersion);
    w.u64(tag);
    checkpoint::write_manifest(w, ledger.initial_model().shapes());
    checkpoint::write_values(w, ledger.initial_model());
    w.u32(static_cast<std::uint32_t>(ledger.clients().size()));
    for (int c : ledger.clients()) w.u32(static_cast<std::uint32_t>(c));
    w.u32(static_cast<std::uint32_t>(ledger.rounds().size()));
    for (const auto& r : ledger.rounds()) {
        w.u32(static_cast<std::uint32_t>(r.participants()));
        for (const auto& cd : r.deltas) {
            w.u32(static_cast<std::uint32_t>(cd.client_id));
            w.f64s(cd.delta.values());
        }
    }
    return w.buffer();
}

struct DecodedLedger {
    UpdateLedger ledger;
    std::uint64_t tag = 0;
};

inline DecodedLedger decode_ledger(std::string_view bytes) {
    io::ByteReader r(bytes);
    if (r.bytes(4, "magic") != kLedgerMagic) throw FormatError("not a ledger file (bad magic)", 0);
    const auto version = r.u32("version");
    if (version != kLedgerVersion) throw VersionError(version, kLedgerVersion);
    DecodedLedger out;
    out.tag = r.u64("config tag");
    const auto shapes = checkpoint::read_manifest(r);
    auto initial = checkpoint::read_values(r, shapes);
    const auto n_clients = r.u32("client count");
    std::vector<int> clients;
    for (std::uint32_t i = 0; i < n_clients; ++i) clients.push_back(static_cast<int>(r.u32("client id")));
    out.ledger = UpdateLedger(std::move(initial), std::move(clients));
    const auto n_rounds = r.u32("round count");
    for (std::uint32_t t = 0; t < n_rounds; ++t) {
        const auto at = r.offset();
        const auto n = r.u32("participant count");
        if (n == 0 || n > n_clients) throw FormatError("bad participant count in round " + std::to_string(t), at);
        LedgerRound round;
        for (std::uint32_t k = 0; k < n; ++k) {
            ClientDelta cd;
            cd.client_id = static_cast<int>(r.u32("client id"));
            cd.delta = ParameterVector(shapes);
            r.f64s(cd.delta.values(), "delta values");
            round.deltas.push_back(std::move(cd));
        }
        try {
            out.ledger.append_round(std::move(round));
        } catch (const Error& e) {
            throw FormatError(std::string("inconsistent round: ") + e.what(), at);
        }
    }
    if (!r.at_end()) throw FormatError("trailing bytes after ledger", r.offset());
    return out;
}

inline void save_ledger(const UpdateLedger& ledger, const std::filesystem::path& path, std::uint64_t tag = 0) {
    io::write_file_atomic(path, encode_ledger(ledger, tag));
}

inline DecodedLedger load_ledger(const std::filesystem::path& path) { return decode_ledger(io::read_file(path)); }

// ---------------------------------------------------------------------------

struct RoundMetrics {
    std::size_t round = 0;
    double test_acc = 0.0;
    double attack_acc = 0.0;

    friend bool operator==(const RoundMetrics&, const RoundMetrics&) = default;
};

using TrainingHistory = std::vector<RoundMetrics>;

inline std::string history_csv(const TrainingHistory& h) {
    std::ostringstream os;
    os.precision(17);
    os << "round,test_acc,attack_acc\n";
    for (const auto& m : h) os << m.round << ',' << m.test_acc << ',' << m.attack_acc << '\n';
    return os.str();
}

/// Clients' data plus the evaluation sets used for per-round metrics.
struct Federation {
    std::vector<data::Dataset> shards;  // indexed by client id
    data::Dataset test_set;
    data::Dataset attack_set;
    data::BackdoorSpec spec;
};

struct RunOptions {
    std::size_t rounds = 0;
    LocalTrainConfig local;
    std::vector<int> excluded;     // dropped entirely; N_t shrinks
    std::vector<int> zeroed;       // still counted in N_t but submit zero deltas
    std::size_t first_round = 0;   // round index of the first round (seeds client streams)
    unsigned threads = 1;
    bool record_metrics = true;
};

struct TrainingResult {
    ParameterVector final_model;
    UpdateLedger ledger;
    TrainingHistory history;
};

/// FedAvg with full participation of the non-excluded clients. Every raw
/// delta lands in the ledger before it is aggregated. Client training may run
/// on several threads; aggregation always walks clients in id order.
inline TrainingResult run_training(const ParameterVector& initial_model, const Federation& fed,
                                   const RunOptions& opts) {
    auto contains = [](const std::vector<int>& v, int c) { return std::find(v.begin(), v.end(), c) != v.end(); };
    std::vector<int> participants;
    std::vector<int> all_clients;
    for (std::size_t c = 0; c < fed.shards.size(); ++c) {
        all_clients.push_back(static_cast<int>(c));
        if (!contains(opts.excluded, static_cast<int>(c))) participants.push_back(static_cast<int>(c));
    }
    if (opts.rounds > 0 && participants.empty()) throw ConfigurationError("no participating clients");

    TrainingResult result{initial_model, UpdateLedger(initial_model, all_clients), {}};
    std::vector<ParameterVector> deltas(participants.size());
    for (std::size_t t = 0; t < opts.rounds; ++t) {
        const std::size_t round = opts.first_round + t;
        const ParameterVector& global = result.final_model;
        auto train_one = [&](std::size_t k) {
            const int c = participants[k];
            deltas[k] = contains(opts.zeroed, c)
                            ? ParameterVector::zeros_like(global)
                            : local_train(global, fed.shards[static_cast<std::size_t>(c)], opts.local, round, c);
        };
        if (opts.threads > 1) {
            std::vector<std::future<void>> jobs;
            for (std::size_t k = 0; k < participants.size(); ++k) {
                jobs.push_back(std::async(std::launch::async, train_one, k));
                if (jobs.size() >= opts.threads) {
                    for (auto& j : jobs) j.get();
                    jobs.clear();
                }
            }
            for (auto& j : jobs) j.get();
        } else {
            for (std::size_t k = 0; k < participants.size(); ++k) train_one(k);
        }

        LedgerRound record;
        for (std::size_t k = 0; k < participants.size(); ++k) record.deltas.push_back({participants[k], deltas[k]});
        result.ledger.append_round(std::move(record));
        result.final_model = fedavg_aggregate(global, deltas);

        if (opts.record_metrics) {
            RoundMetrics m;
            m.round = round + 1;
            m.test_acc = eval::test_accuracy(result.final_model, fed.test_set);
            m.attack_acc = fed.attack_set.empty() ? 0.0 : eval::attack_success(result.final_model, fed.attack_set, fed.spec);
            result.history.push_back(m);
        }
    }
    return result;
}

}  // namespace fedunlearn::fed
