#pragma once

// One train + eval per grid value of a single TrainConfig axis. A failing
// point records its error and the sweep moves on.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dac/eval.hpp"
#include "dac/train.hpp"

namespace dac {

enum class SweepAxis { quality_ratio, bag_size };

inline std::string_view sweep_axis_name(SweepAxis a) {
    return a == SweepAxis::quality_ratio ? "quality_ratio" : "bag_size";
}

inline SweepAxis parse_sweep_axis(std::string_view s) {
    if (s == "quality_ratio") return SweepAxis::quality_ratio;
    if (s == "bag_size") return SweepAxis::bag_size;
    throw Error("unknown sweep axis '" + std::string(s) + "' (expected quality_ratio or bag_size)");
}

struct SweepPoint {
    double value = 0.0;
    std::optional<PreferenceReport> report;
    std::optional<std::string> error;

    std::optional<double> metric() const {
        if (!report) return std::nullopt;
        return report->mean_accuracy();
    }
};

struct SweepResult {
    SweepAxis axis = SweepAxis::quality_ratio;
    std::vector<SweepPoint> points;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& p : points) {
            nlohmann::ordered_json row{{"value", p.value}};
            if (p.report) {
                row["mean_accuracy"] = *p.metric();
                row["report"] = p.report->to_json();
            } else {
                row["mean_accuracy"] = nullptr;
                row["error"] = *p.error;
            }
            rows.push_back(row);
        }
        return {{"axis", sweep_axis_name(axis)}, {"points", rows}};
    }

    // Tab-separated (value, mean accuracy) table for plotting.
    std::string table() const {
        std::string out = std::string(sweep_axis_name(axis)) + "\tmean_accuracy\n";
        for (const auto& p : points) {
            out += format_number(p.value) + "\t";
            out += p.report ? format_number(*p.metric()) : "error";
            out += "\n";
        }
        return out;
    }

private:
    static std::string format_number(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return buf;
    }
};

inline void apply_axis(TrainConfig& config, SweepAxis axis, double value) {
    if (axis == SweepAxis::quality_ratio) {
        config.quality_ratio = value;
    } else {
        if (value < 1.0 || value != static_cast<double>(static_cast<size_t>(value)))
            throw Error("bag size must be a positive integer, got " + std::to_string(value));
        config.bag_size = static_cast<size_t>(value);
    }
}

inline SweepResult sweep(SweepAxis axis, const std::vector<double>& grid, const std::vector<CaptionRecord>& records,
                         const World& world, const DualEncoder& base, const TrainConfig& config, const Lexicon& lexicon,
                         const std::vector<EvalItem>& items) {
    if (grid.empty()) throw Error("sweep grid is empty");
    if (!std::is_sorted(grid.begin(), grid.end())) throw Error("sweep grid must be sorted ascending");
    SweepResult result;
    result.axis = axis;
    for (double v : grid) {
        SweepPoint point;
        point.value = v;
        try {
            auto c = config;
            c.eval_each_epoch = false;
            apply_axis(c, axis, v);
            const auto trained = train(records, world, base, c, lexicon);
            point.report = preference_eval(trained.model, items);
        } catch (const std::exception& e) {
            point.error = e.what();
        }
        result.points.push_back(std::move(point));
    }
    return result;
}

} // namespace dac
