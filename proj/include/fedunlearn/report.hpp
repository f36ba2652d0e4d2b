#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedunlearn/binary_io.hpp"
#include "fedunlearn/config.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/evaluation.hpp"
#include "fedunlearn/federation.hpp"

namespace fedunlearn::report {

inline constexpr std::string_view kCsvHeader = "stage,test_acc,atk_acc,loss_ratio,skew_l2,wall_time_ms";

/// Per-epoch point on the distillation curve (epoch 0 is the subtracted model).
struct CurvePoint {
    int epoch = 0;
    double test_acc = 0.0;
    double atk_acc = 0.0;
    double loss_ratio = 1.0;

    friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

/// Series plotted in the SVG figure.
struct Series {
    fed::TrainingHistory training;
    std::vector<CurvePoint> distillation;
    fed::TrainingHistory post_training;
};

inline std::string fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

inline std::string to_csv(const std::vector<eval::StageReport>& reports, std::uint64_t config_hash) {
    std::ostringstream os;
    os << kCsvHeader << '\n';
    for (const auto& r : reports) {
        os << eval::stage_name(r.stage) << ',' << fixed(r.test_acc) << ',' << fixed(r.atk_acc) << ','
           << fixed(r.loss_ratio) << ',' << fixed(r.skew_l2) << ',' << r.wall_time_ms << '\n';
    }
    os << "# config_hash=" << config::hash_hex(config_hash) << '\n';
    return os.str();
}

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,test_acc,attack_acc,loss_ratio\n";
    for (const auto& p : curve) {
        os << p.epoch << ',' << p.test_acc << ',' << p.atk_acc << ',' << p.loss_ratio << '\n';
    }
    return os.str();
}

inline nlohmann::json config_json(const ExperimentConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& e : config::resolved_entries(cfg)) {
        if (e.section.empty()) {
            j[e.key] = e.value;
        } else {
            j[e.section][e.key] = e.value;
        }
    }
    return j;
}

inline nlohmann::json to_json(const std::vector<eval::StageReport>& reports, const ExperimentConfig& cfg,
                              std::uint64_t config_hash) {
    nlohmann::json j;
    j["config_hash"] = config::hash_hex(config_hash);
    j["config"] = config_json(cfg);
    j["reports"] = nlohmann::json::array();
    for (const auto& r : reports) {
        j["reports"].push_back({{"stage", eval::stage_name(r.stage)},
                                {"test_acc", r.test_acc},
                                {"atk_acc", r.atk_acc},
                                {"loss_ratio", r.loss_ratio},
                                {"skew_l2", r.skew_l2},
                                {"wall_time_ms", r.wall_time_ms}});
    }
    return j;
}

inline std::vector<eval::StageReport> reports_from_json(const nlohmann::json& j) {
    std::vector<eval::StageReport> out;
    try {
        for (const auto& item : j.at("reports")) {
            eval::StageReport r;
            r.stage = eval::parse_stage(item.at("stage").get<std::string>());
            r.test_acc = item.at("test_acc").get<double>();
            r.atk_acc = item.at("atk_acc").get<double>();
            r.loss_ratio = item.at("loss_ratio").get<double>();
            r.skew_l2 = item.at("skew_l2").get<double>();
            r.wall_time_ms = item.at("wall_time_ms").get<std::int64_t>();
            out.push_back(r);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed report JSON: ") + e.what(), 0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// SVG: left panel shows per-round accuracy and attack rate during training and
// post-training; right panel shows accuracy, attack rate and loss ratio per
// distillation epoch.

namespace detail {

struct Panel {
    double x0, y0, w, h;
    double xmax;
    double ymax = 1.0;

    double px(double x) const { return x0 + (xmax > 0 ? x / xmax : 0.0) * w; }
    double py(double y) const { return y0 + h - std::clamp(y / ymax, 0.0, 1.0) * h; }
};

inline void polyline(std::ostringstream& os, const Panel& p, const std::vector<std::pair<double, double>>& pts,
                     const char* color, const char* dash = nullptr) {
    if (pts.empty()) return;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"";
    if (dash) os << " stroke-dasharray=\"" << dash << "\"";
    os << " points=\"";
    for (const auto& [x, y] : pts) os << fixed(p.px(x), 2) << ',' << fixed(p.py(y), 2) << ' ';
    os << "\"/>\n";
}

inline void frame(std::ostringstream& os, const Panel& p, const std::string& title, const std::string& xlabel) {
    os << "<rect x=\"" << p.x0 << "\" y=\"" << p.y0 << "\" width=\"" << p.w << "\" height=\"" << p.h
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << p.x0 + p.w / 2 << "\" y=\"" << p.y0 - 10 << "\" text-anchor=\"middle\">" << title << "</text>\n";
    os << "<text x=\"" << p.x0 + p.w / 2 << "\" y=\"" << p.y0 + p.h + 30 << "\" text-anchor=\"middle\">" << xlabel
       << "</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = p.ymax * k / 4.0;
        os << "<text x=\"" << p.x0 - 6 << "\" y=\"" << fixed(p.py(v) + 4, 2) << "\" text-anchor=\"end\" font-size=\"11\">"
           << fixed(v, 2) << "</text>\n";
    }
}

inline void legend(std::ostringstream& os, double x, double y, const char* color, const char* label) {
    os << "<line x1=\"" << x << "\" y1=\"" << y << "\" x2=\"" << x + 20 << "\" y2=\"" << y << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"/><text x=\"" << x + 25 << "\" y=\"" << y + 4 << "\" font-size=\"12\">" << label
       << "</text>\n";
}

}  // namespace detail

inline std::string to_svg(const Series& s, std::uint64_t config_hash) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"960\" height=\"400\" font-family=\"sans-serif\">\n";
    os << "<!-- config_hash=" << config::hash_hex(config_hash) << " -->\n";
    os << "<rect width=\"960\" height=\"400\" fill=\"white\"/>\n";

    const double rounds = static_cast<double>(s.training.size() + s.post_training.size());
    detail::Panel left{60, 40, 380, 280, std::max(rounds, 1.0)};
    detail::frame(os, left, "Federated training and post-training", "round");
    std::vector<std::pair<double, double>> acc, atk, post_acc, post_atk;
    for (std::size_t i = 0; i < s.training.size(); ++i) {
        acc.emplace_back(static_cast<double>(i + 1), s.training[i].test_acc);
        atk.emplace_back(static_cast<double>(i + 1), s.training[i].attack_acc);
    }
    for (std::size_t i = 0; i < s.post_training.size(); ++i) {
        const double x = static_cast<double>(s.training.size() + i + 1);
        post_acc.emplace_back(x, s.post_training[i].test_acc);
        post_atk.emplace_back(x, s.post_training[i].attack_acc);
    }
    detail::polyline(os, left, acc, "#1f77b4");
    detail::polyline(os, left, atk, "#d62728");
    detail::polyline(os, left, post_acc, "#1f77b4", "5,4");
    detail::polyline(os, left, post_atk, "#d62728", "5,4");

    double ymax = 1.0;
    for (const auto& p : s.distillation) ymax = std::max(ymax, p.loss_ratio);
    const double epochs = s.distillation.empty() ? 1.0 : static_cast<double>(s.distillation.back().epoch);
    detail::Panel right{540, 40, 380, 280, std::max(epochs, 1.0), ymax};
    detail::frame(os, right, "Distillation remedy", "epoch");
    std::vector<std::pair<double, double>> d_acc, d_atk, d_ratio;
    for (const auto& p : s.distillation) {
        d_acc.emplace_back(p.epoch, p.test_acc);
        d_atk.emplace_back(p.epoch, p.atk_acc);
        d_ratio.emplace_back(p.epoch, p.loss_ratio);
    }
    detail::polyline(os, right, d_acc, "#1f77b4");
    detail::polyline(os, right, d_atk, "#d62728");
    detail::polyline(os, right, d_ratio, "#2ca02c");

    detail::legend(os, 60, 375, "#1f77b4", "test accuracy");
    detail::legend(os, 220, 375, "#d62728", "attack success");
    detail::legend(os, 380, 375, "#2ca02c", "loss ratio");
    os << "</svg>\n";
    return os.str();
}

// ---------------------------------------------------------------------------

enum class Format { Csv, Json, Svg };

inline Format parse_format(std::string_view f) {
    if (f == "csv") return Format::Csv;
    if (f == "json") return Format::Json;
    if (f == "svg") return Format::Svg;
    throw ConfigurationError("unknown report format '" + std::string(f) + "'");
}

inline std::string_view extension(Format f) {
    switch (f) {
        case Format::Csv: return "csv";
        case Format::Json: return "json";
        case Format::Svg: return "svg";
    }
    return "";
}

/// Writes one report file atomically.
inline void emit_report(const std::vector<eval::StageReport>& reports, Format format,
                        const std::filesystem::path& path, const ExperimentConfig& cfg, std::uint64_t config_hash,
                        const Series& series = {}) {
    if (reports.empty()) throw StateError("no stage reports to emit");
    std::string body;
    switch (format) {
        case Format::Csv: body = to_csv(reports, config_hash); break;
        case Format::Json: body = to_json(reports, cfg, config_hash).dump(2) + "\n"; break;
        case Format::Svg: body = to_svg(series, config_hash); break;
    }
    io::write_file_atomic(path, body);
}

}  // namespace fedunlearn::report
