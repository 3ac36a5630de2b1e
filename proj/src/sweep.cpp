#include "residscope/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace residscope {

using nlohmann::json;

std::string sweep_axis_name(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::layer: return "layer";
        case SweepAxis::head: return "head";
        case SweepAxis::layer_head: return "layer_head";
    }
    throw ValidationError("sweep: unknown axis");
}

SweepAxis sweep_axis_from_name(const std::string& name) {
    if (name == "layer") return SweepAxis::layer;
    if (name == "head") return SweepAxis::head;
    if (name == "layer_head") return SweepAxis::layer_head;
    throw ValidationError("sweep: unknown axis '" + name + "'");
}

std::string format_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

void SweepResult::validate() const {
    const bool has_layer = axis != SweepAxis::head;
    const bool has_head = axis != SweepAxis::layer;
    for (const auto& cell : cells) {
        if (cell.n < 1) throw ValidationError("sweep: cell with n < 1");
        if (has_layer != (cell.layer >= 0) || has_head != (cell.head >= 0)) {
            throw ValidationError("sweep: cell coordinates do not match axis " +
                                  sweep_axis_name(axis));
        }
        for (const auto& m : cell.metrics) {
            if (m.name.empty()) throw ValidationError("sweep: unnamed metric");
            if (!(m.lo <= m.mean && m.mean <= m.hi)) {
                throw ValidationError("sweep: metric " + m.name +
                                      " has mean outside its interval");
            }
        }
    }
}

namespace {

std::vector<std::string> csv_columns(SweepAxis axis) {
    std::vector<std::string> cols;
    if (axis != SweepAxis::head) cols.push_back("layer");
    if (axis != SweepAxis::layer) cols.push_back("head");
    for (const char* c : {"metric", "mean", "ci_lo", "ci_hi", "significant", "n"}) {
        cols.push_back(c);
    }
    return cols;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

double parse_double(const std::string& s, int line_no) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') {
        throw ValidationError("sweep csv line " + std::to_string(line_no) + ": bad number '" +
                              s + "'");
    }
    return v;
}

int parse_int(const std::string& s, int line_no) {
    char* end = nullptr;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0') {
        throw ValidationError("sweep csv line " + std::to_string(line_no) + ": bad integer '" +
                              s + "'");
    }
    return static_cast<int>(v);
}

}  // namespace

std::string sweep_to_csv(const SweepResult& r) {
    r.validate();
    std::string out;
    const auto cols = csv_columns(r.axis);
    for (size_t i = 0; i < cols.size(); ++i) {
        if (i) out += ',';
        out += cols[i];
    }
    out += '\n';
    for (const auto& cell : r.cells) {
        for (const auto& m : cell.metrics) {
            std::string row;
            if (r.axis != SweepAxis::head) row += std::to_string(cell.layer) + ",";
            if (r.axis != SweepAxis::layer) row += std::to_string(cell.head) + ",";
            row += m.name + "," + format_double(m.mean) + "," + format_double(m.lo) + "," +
                   format_double(m.hi) + "," + (cell.significant ? "true" : "false") + "," +
                   std::to_string(cell.n);
            out += row + "\n";
        }
    }
    return out;
}

SweepResult sweep_from_csv(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    if (!std::getline(ss, line)) throw ValidationError("sweep csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);

    SweepResult r;
    const bool has_layer = !header.empty() && header[0] == "layer";
    const bool has_head =
        (has_layer && header.size() > 1 && header[1] == "head") ||
        (!has_layer && !header.empty() && header[0] == "head");
    if (has_layer && has_head) {
        r.axis = SweepAxis::layer_head;
    } else if (has_layer) {
        r.axis = SweepAxis::layer;
    } else if (has_head) {
        r.axis = SweepAxis::head;
    } else {
        throw ValidationError("sweep csv: header must start with layer and/or head");
    }
    const size_t expected = csv_columns(r.axis).size();
    if (header.size() != expected) {
        throw ValidationError("sweep csv: expected " + std::to_string(expected) +
                              " columns, got " + std::to_string(header.size()));
    }

    int line_no = 1;
    while (std::getline(ss, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != expected) {
            throw ValidationError("sweep csv line " + std::to_string(line_no) +
                                  ": wrong field count");
        }
        size_t i = 0;
        const int layer = has_layer ? parse_int(f[i++], line_no) : -1;
        const int head = has_head ? parse_int(f[i++], line_no) : -1;
        MetricStat m;
        m.name = f[i++];
        m.mean = parse_double(f[i++], line_no);
        m.lo = parse_double(f[i++], line_no);
        m.hi = parse_double(f[i++], line_no);
        const std::string& sig = f[i++];
        if (sig != "true" && sig != "false") {
            throw ValidationError("sweep csv line " + std::to_string(line_no) +
                                  ": significant must be true or false");
        }
        const int n = parse_int(f[i++], line_no);

        if (r.cells.empty() || r.cells.back().layer != layer || r.cells.back().head != head) {
            SweepCell cell;
            cell.layer = layer;
            cell.head = head;
            cell.n = n;
            cell.significant = (sig == "true");
            r.cells.push_back(cell);
        }
        auto& cell = r.cells.back();
        if (cell.n != n || cell.significant != (sig == "true")) {
            throw ValidationError("sweep csv line " + std::to_string(line_no) +
                                  ": cell-level fields disagree across the cell's rows");
        }
        cell.metrics.push_back(m);
    }
    r.validate();
    return r;
}

std::string sweep_to_json(const SweepResult& r) {
    r.validate();
    json cells = json::array();
    for (const auto& cell : r.cells) {
        json metrics = json::array();
        for (const auto& m : cell.metrics) {
            metrics.push_back(
                {{"name", m.name}, {"mean", m.mean}, {"ci_lo", m.lo}, {"ci_hi", m.hi}});
        }
        cells.push_back({{"layer", cell.layer},
                         {"head", cell.head},
                         {"n", cell.n},
                         {"significant", cell.significant},
                         {"metrics", metrics}});
    }
    json j{{"axis", sweep_axis_name(r.axis)}, {"cells", cells}};
    return j.dump(2) + "\n";
}

SweepResult sweep_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("sweep json: ") + e.what());
    }
    SweepResult r;
    try {
        r.axis = sweep_axis_from_name(j.at("axis").get<std::string>());
        for (const auto& jc : j.at("cells")) {
            SweepCell cell;
            cell.layer = jc.at("layer").get<int>();
            cell.head = jc.at("head").get<int>();
            cell.n = jc.at("n").get<int>();
            cell.significant = jc.at("significant").get<bool>();
            for (const auto& jm : jc.at("metrics")) {
                MetricStat m;
                m.name = jm.at("name").get<std::string>();
                m.mean = jm.at("mean").get<double>();
                m.lo = jm.at("ci_lo").get<double>();
                m.hi = jm.at("ci_hi").get<double>();
                cell.metrics.push_back(m);
            }
            r.cells.push_back(std::move(cell));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("sweep json: ") + e.what());
    }
    r.validate();
    return r;
}

namespace {

std::string svg_num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", x);
    return buf;
}

const char* kSeriesColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                               "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

std::string sweep_to_svg(const SweepResult& r) {
    r.validate();
    constexpr double kW = 640, kH = 400, kPad = 48;

    // collect series in first-seen metric order
    std::vector<std::string> names;
    for (const auto& cell : r.cells) {
        for (const auto& m : cell.metrics) {
            if (std::find(names.begin(), names.end(), m.name) == names.end()) {
                names.push_back(m.name);
            }
        }
    }
    double lo = 0.0, hi = 0.0;  // always include the zero line
    for (const auto& cell : r.cells) {
        for (const auto& m : cell.metrics) {
            lo = std::min(lo, m.lo);
            hi = std::max(hi, m.hi);
        }
    }
    if (hi == lo) hi = lo + 1.0;
    const double n_x = std::max<size_t>(r.cells.size(), 2) - 1.0;
    auto x_at = [&](size_t i) { return kPad + (kW - 2 * kPad) * (n_x ? i / n_x : 0.5); };
    auto y_at = [&](double v) { return kH - kPad - (kH - 2 * kPad) * (v - lo) / (hi - lo); };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(kW) + "\" height=\"" +
           svg_num(kH) + "\" viewBox=\"0 0 " + svg_num(kW) + " " + svg_num(kH) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<line x1=\"" + svg_num(kPad) + "\" y1=\"" + svg_num(y_at(0)) + "\" x2=\"" +
           svg_num(kW - kPad) + "\" y2=\"" + svg_num(y_at(0)) +
           "\" stroke=\"#999999\" stroke-dasharray=\"6 4\"/>\n";

    for (size_t s = 0; s < names.size(); ++s) {
        const char* color = kSeriesColors[s % (sizeof kSeriesColors / sizeof *kSeriesColors)];
        std::string points;
        for (size_t i = 0; i < r.cells.size(); ++i) {
            for (const auto& m : r.cells[i].metrics) {
                if (m.name != names[s]) continue;
                if (!points.empty()) points += ' ';
                points += svg_num(x_at(i)) + "," + svg_num(y_at(m.mean));
            }
        }
        if (!points.empty()) {
            out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
                   "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
        }
        out += "<text x=\"" + svg_num(kPad) + "\" y=\"" + svg_num(16.0 + 14.0 * s) +
               "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" + color + "\">" +
               names[s] + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

namespace {

std::string read_text_file(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(std::string(what) + ": cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text, const char* what) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(std::string(what) + ": cannot write " + path);
    out << text;
    if (!out) throw IoError(std::string(what) + ": write failed for " + path);
}

}  // namespace

void write_sweep(const SweepResult& r, const std::string& path, const std::string& format) {
    if (format == "csv") {
        write_text_file(path, sweep_to_csv(r), "sweep");
    } else if (format == "json") {
        write_text_file(path, sweep_to_json(r), "sweep");
    } else if (format == "svg") {
        write_text_file(path, sweep_to_svg(r), "sweep");
    } else {
        throw ValidationError("sweep: unknown format '" + format + "', want csv|json|svg");
    }
}

SweepResult read_sweep(const std::string& path, const std::string& format) {
    if (format == "csv") return sweep_from_csv(read_text_file(path, "sweep"));
    if (format == "json") return sweep_from_json(read_text_file(path, "sweep"));
    throw ValidationError("sweep: cannot read format '" + format + "'");
}

}  // namespace residscope
