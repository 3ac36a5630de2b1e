#pragma once

#include <string>
#include <vector>

#include "residscope/errors.hpp"

namespace residscope {

enum class SweepAxis { layer, head, layer_head };

std::string sweep_axis_name(SweepAxis axis);
SweepAxis sweep_axis_from_name(const std::string& name);

struct MetricStat {
    std::string name;
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

struct SweepCell {
    int layer = -1;  // -1 when the axis has no layer coordinate
    int head = -1;   // -1 when the axis has no head coordinate
    int n = 0;
    bool significant = false;
    std::vector<MetricStat> metrics;
};

// One experiment's aggregate table: a row per swept coordinate, a (mean, CI)
// triple per metric. Serializes to CSV/JSON losslessly and to a single-series
// SVG line chart.
struct SweepResult {
    SweepAxis axis = SweepAxis::layer;
    std::vector<SweepCell> cells;

    void validate() const;  // n >= 1, lo <= mean <= hi, coordinates match axis
};

std::string sweep_to_csv(const SweepResult& r);
std::string sweep_to_json(const SweepResult& r);
std::string sweep_to_svg(const SweepResult& r);
SweepResult sweep_from_csv(const std::string& text);
SweepResult sweep_from_json(const std::string& text);

// format is one of csv|json|svg
void write_sweep(const SweepResult& r, const std::string& path, const std::string& format);
SweepResult read_sweep(const std::string& path, const std::string& format);

// 17-significant-digit float text, enough to round-trip any double
std::string format_double(double x);

}  // namespace residscope
