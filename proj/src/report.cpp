#include "dualreg/report.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace dualreg {

using json = nlohmann::json;

namespace {

std::string fmt(Real v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string label_for(int region) { return "region_" + std::to_string(region); }

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

SliceReduction SliceReduction::parse(const std::string& text) {
    const auto colon = text.find(':');
    SliceReduction r;
    try {
        if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
        std::size_t used = 0;
        r.axis = std::stoi(text.substr(0, colon), &used);
        if (used != colon) throw std::invalid_argument("axis");
        const auto rest = text.substr(colon + 1);
        r.keep = std::stoll(rest, &used);
        if (used != rest.size()) throw std::invalid_argument("keep");
    } catch (const std::exception&) {
        throw std::invalid_argument("--reduce-slices expects AXIS:KEEP, got '" + text + "'");
    }
    if (r.axis < 0 || r.axis > 2) throw std::invalid_argument("--reduce-slices: axis must be 0, 1 or 2");
    if (r.keep < 2) throw std::invalid_argument("--reduce-slices: keep must be >= 2");
    return r;
}

std::string SliceReduction::str() const { return std::to_string(axis) + ":" + std::to_string(keep); }

EvalReport evaluate(const Checkpoint& ckpt, const std::vector<PairEntry>& pairs,
                    const std::optional<SliceReduction>& reduction) {
    if (pairs.empty()) throw DataError("evaluate: no pairs to evaluate");
    const auto net = network_from_checkpoint(ckpt);
    const auto& input_shape = ckpt.config.input_shape;

    struct Loaded {
        Volume moving, fixed;
        LabelMap moving_labels, fixed_labels;
    };
    std::vector<Loaded> data;
    std::set<int> ids;
    for (const auto& p : pairs) {
        if (p.moving_labels.empty() || p.fixed_labels.empty()) {
            throw DataError("evaluate: pair '" + p.id + "' has no label maps");
        }
        Loaded d{load_volume(p.moving), load_volume(p.fixed), load_labels(p.moving_labels), load_labels(p.fixed_labels)};
        require_same_shape(d.moving.shape(), input_shape, "evaluate (moving vs. model input)");
        require_same_shape(d.fixed.shape(), input_shape, "evaluate (fixed vs. model input)");
        require_same_shape(d.moving_labels.shape(), input_shape, "evaluate (moving labels)");
        require_same_shape(d.fixed_labels.shape(), input_shape, "evaluate (fixed labels)");
        for (int r : d.moving_labels.region_ids()) ids.insert(r);
        for (int r : d.fixed_labels.region_ids()) ids.insert(r);
        data.push_back(std::move(d));
    }

    EvalReport report;
    report.mode = to_string(ckpt.config.mode);
    report.config_digest = config_digest(ckpt.config);
    report.reduction = reduction;
    report.regions.assign(ids.begin(), ids.end());

    for (std::size_t i = 0; i < pairs.size(); ++i) {
        auto& d = data[i];
        Volume moving = d.moving;
        if (reduction) {
            if (reduction->keep > input_shape[reduction->axis]) {
                throw std::invalid_argument("--reduce-slices: keep exceeds the extent of axis " +
                                            std::to_string(reduction->axis));
            }
            moving = resample_to(reduce_slices(moving, reduction->axis, reduction->keep), input_shape);
        }
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = net.register_pair(moving, d.fixed);
        const auto t1 = std::chrono::steady_clock::now();
        if (!out.final_field.all_finite()) throw NumericError("evaluate: non-finite field for pair '" + pairs[i].id + "'");

        const auto warped_labels = warp_nearest(d.moving_labels, out.final_field);
        const auto after = dice(warped_labels, d.fixed_labels, report.regions);
        const auto before = dice(d.moving_labels, d.fixed_labels, report.regions);
        report.pairs.push_back({pairs[i].id, after.regions, after.average, before.average,
                                std::chrono::duration<Real>(t1 - t0).count()});
    }
    summarize(report);
    return report;
}

void summarize(EvalReport& r) {
    const auto n_regions = r.regions.size();
    r.region_means.assign(n_regions, 0.0);
    r.average = r.baseline_average = r.mean_seconds = 0.0;
    if (r.pairs.empty()) return;
    for (const auto& p : r.pairs) {
        if (p.regions.size() != n_regions) throw DataError("report: pair '" + p.id + "' region count mismatch");
        for (std::size_t k = 0; k < n_regions; ++k) r.region_means[k] += p.regions[k].score;
        r.average += p.average;
        r.baseline_average += p.baseline_average;
        r.mean_seconds += p.seconds;
    }
    const auto n = static_cast<Real>(r.pairs.size());
    for (auto& m : r.region_means) m /= n;
    r.average /= n;
    r.baseline_average /= n;
    r.mean_seconds /= n;
}

json to_json(const EvalReport& r) {
    json pairs = json::array();
    for (const auto& p : r.pairs) {
        json regions = json::array();
        for (const auto& d : p.regions) regions.push_back({{"region", d.region}, {"dice", d.score}, {"absent", d.absent}});
        pairs.push_back({{"id", p.id},
                         {"regions", std::move(regions)},
                         {"average", p.average},
                         {"baseline_average", p.baseline_average},
                         {"time_s", p.seconds}});
    }
    json means = json::object();
    for (std::size_t k = 0; k < r.regions.size(); ++k) means[std::to_string(r.regions[k])] = r.region_means[k];
    return json{{"mode", r.mode},
                {"config_digest", r.config_digest},
                {"reduce_slices", r.reduction ? json(r.reduction->str()) : json(nullptr)},
                {"regions", r.regions},
                {"pairs", std::move(pairs)},
                {"region_means", std::move(means)},
                {"average", r.average},
                {"baseline_average", r.baseline_average},
                {"mean_time_s", r.mean_seconds}};
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    try {
        r.mode = j.at("mode").get<std::string>();
        r.config_digest = j.value("config_digest", std::string());
        if (j.contains("reduce_slices") && !j.at("reduce_slices").is_null()) {
            r.reduction = SliceReduction::parse(j.at("reduce_slices").get<std::string>());
        }
        r.regions = j.at("regions").get<std::vector<int>>();
        for (const auto& p : j.at("pairs")) {
            PairEvaluation e;
            e.id = p.at("id").get<std::string>();
            for (const auto& d : p.at("regions")) {
                e.regions.push_back({d.at("region").get<int>(), d.at("dice").get<Real>(), d.value("absent", false)});
            }
            e.average = p.at("average").get<Real>();
            e.baseline_average = p.value("baseline_average", 0.0);
            e.seconds = p.value("time_s", 0.0);
            r.pairs.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed report: ") + e.what());
    }
    summarize(r);
    return r;
}

EvalReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open report '" + path.string() + "'");
    try {
        return report_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw DataError("'" + path.string() + "': " + e.what());
    }
}

void save_report(const EvalReport& r, const std::filesystem::path& json_path) {
    if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw DataError("cannot write '" + json_path.string() + "'");
    out << to_json(r).dump(2) << "\n";
    auto csv_path = json_path;
    csv_path.replace_extension(".csv");
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw DataError("cannot write '" + csv_path.string() + "'");
    csv << report_csv(r);
}

std::string report_csv(const EvalReport& r) {
    std::ostringstream s;
    s << "pair,region,dice,absent,time_s\n";
    for (const auto& p : r.pairs) {
        for (const auto& d : p.regions) {
            s << p.id << ',' << d.region << ',' << fmt(d.score) << ',' << (d.absent ? 1 : 0) << ',' << fmt(p.seconds)
              << '\n';
        }
        s << p.id << ",average," << fmt(p.average) << ",0," << fmt(p.seconds) << '\n';
    }
    return s.str();
}

PlotData plot_data(const std::vector<std::pair<std::string, EvalReport>>& reports) {
    if (reports.empty()) throw std::invalid_argument("plot: no reports given");
    std::set<int> ids;
    for (const auto& [name, r] : reports) ids.insert(r.regions.begin(), r.regions.end());
    PlotData d;
    for (int id : ids) d.groups.push_back(label_for(id));
    d.groups.push_back("average");
    for (const auto& [name, r] : reports) {
        d.series.push_back(name);
        std::vector<Real> row;
        for (int id : ids) {
            Real v = std::numeric_limits<Real>::quiet_NaN();
            for (std::size_t k = 0; k < r.regions.size(); ++k) {
                if (r.regions[k] == id) v = r.region_means[k];
            }
            row.push_back(v);
        }
        row.push_back(r.average);
        d.values.push_back(std::move(row));
    }
    return d;
}

std::string plot_csv(const PlotData& d) {
    std::ostringstream s;
    s << "series,group,value\n";
    for (std::size_t i = 0; i < d.series.size(); ++i) {
        for (std::size_t g = 0; g < d.groups.size(); ++g) {
            if (std::isnan(d.values[i][g])) continue;
            s << d.series[i] << ',' << d.groups[g] << ',' << fmt(d.values[i][g]) << '\n';
        }
    }
    return s.str();
}

std::string plot_svg(const PlotData& d) {
    static constexpr const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
    const double bar = 18.0;
    const double gap = 24.0;
    const double left = 60.0;
    const double top = 30.0;
    const double height = 240.0;
    const double group_width = bar * static_cast<double>(d.series.size()) + gap;
    const double width = left + group_width * static_cast<double>(d.groups.size()) + 160.0;
    const double total_height = top + height + 60.0;

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << total_height << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">Dice per region</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = t / 4.0;
        const double y = top + height * (1.0 - v);
        s << "<line x1=\"" << left << "\" x2=\"" << width - 160.0 << "\" y1=\"" << y << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/>\n";
        s << "<text x=\"" << left - 6 << "\" y=\"" << y + 4
          << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << v << "</text>\n";
    }
    for (std::size_t g = 0; g < d.groups.size(); ++g) {
        const double x0 = left + gap / 2 + group_width * static_cast<double>(g);
        for (std::size_t i = 0; i < d.series.size(); ++i) {
            const Real v = d.values[i][g];
            if (std::isnan(v)) continue;
            const double h = height * std::clamp(v, 0.0, 1.0);
            s << "<rect x=\"" << x0 + bar * static_cast<double>(i) << "\" y=\"" << top + height - h << "\" width=\""
              << bar - 2 << "\" height=\"" << h << "\" fill=\"" << kColors[i % 6] << "\"><title>"
              << xml_escape(d.series[i]) << " " << xml_escape(d.groups[g]) << ": " << fmt(v) << "</title></rect>\n";
        }
        s << "<text x=\"" << x0 + bar * static_cast<double>(d.series.size()) / 2 << "\" y=\"" << top + height + 16
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << xml_escape(d.groups[g])
          << "</text>\n";
    }
    for (std::size_t i = 0; i < d.series.size(); ++i) {
        const double y = top + 14.0 * static_cast<double>(i);
        const double x = width - 150.0;
        s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\"" << kColors[i % 6]
          << "\"/>\n";
        s << "<text x=\"" << x + 14 << "\" y=\"" << y + 9 << "\" font-family=\"sans-serif\" font-size=\"10\">"
          << xml_escape(d.series[i]) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace dualreg
