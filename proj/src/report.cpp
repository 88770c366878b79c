// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#include "mhgd/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "mhgd/common.hpp"
#include "mhgd/train.hpp"

namespace mhgd {

namespace fs = std::filesystem;

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string svg_chart(const std::vector<ReportSeries>& series, int max_epoch) {
    const double width = 640, height = 400;
    const double ml = 56, mr = 16, mt = 20, mb = 44;
    const double pw = width - ml - mr, ph = height - mt - mb;

    double lo = 1e9, hi = -1e9;
    for (const auto& s : series) {
        for (double a : s.acc_by_epoch) {
            lo = std::min(lo, a);
            hi = std::max(hi, a);
        }
    }
    if (lo > hi) {
        lo = 0;
        hi = 100;
    }
    if (hi - lo < 1.0) {
        hi += 1.0;
        lo -= 1.0;
    }
    lo = std::max(0.0, lo - 2.0);
    hi = std::min(100.0, hi + 2.0);

    auto xmap = [&](double epoch) {
        return ml + (max_epoch > 0 ? epoch / double(max_epoch) : 0.0) * pw;
    };
    auto ymap = [&](double acc) { return mt + (1.0 - (acc - lo) / (hi - lo)) * ph; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
        << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " " << height
        << "\">\n";
    svg << "<rect width=\"" << width << "\" height=\"" << height
        << "\" fill=\"white\"/>\n";
    // Axes: x spans exactly [0, max_epoch].
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw
        << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << mt + ph << "\" stroke=\"black\"/>\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\">0</text>", ml,
                  mt + ph + 16);
    svg << buf << "\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"end\">%d</text>",
                  ml + pw, mt + ph + 16, max_epoch);
    svg << buf << "\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"end\">%.1f</text>",
                  ml - 6, mt + ph, lo);
    svg << buf << "\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"end\">%.1f</text>",
                  ml - 6, mt + 10, hi);
    svg << buf << "\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\">epoch</text>",
                  ml + pw / 2 - 18, height - 8);
    svg << buf << "\n";
    std::snprintf(
        buf, sizeof(buf),
        "<text x=\"14\" y=\"%.1f\" font-size=\"12\" transform=\"rotate(-90 14 %.1f)\">"
        "test accuracy</text>",
        mt + ph / 2 + 40, mt + ph / 2 + 40);
    svg << buf << "\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
        std::ostringstream pts;
        for (std::size_t e = 0; e < series[s].acc_by_epoch.size(); ++e) {
            if (e) pts << ' ';
            pts << xmap(double(e)) << ',' << ymap(series[s].acc_by_epoch[e]);
        }
        svg << "<polyline fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"1.5\" points=\"" << pts.str() << "\"/>\n";
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" fill=\"%s\">%s</text>",
                      ml + 8, mt + 16 + 16 * double(s), color,
                      series[s].method.c_str());
        svg << buf << "\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace

std::vector<ReportSeries> emit_report(const std::string& run_dir, bool force,
                                      std::ostream& log) {
    if (!fs::exists(run_dir)) {
        throw FormatError("report: directory '" + run_dir + "' does not exist");
    }

    struct Run {
        RunMetrics metrics;
    };
    std::map<std::string, std::vector<Run>> by_method;
    std::set<std::string> hashes;
    std::size_t usable = 0;

    for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name.size() < 12 || name.substr(name.size() - 12) != "_metrics.csv")
            continue;
        const std::string meta =
            entry.path().parent_path() /
            (name.substr(0, name.size() - 12) + "_meta.json");
        RunMetrics metrics;
        try {
            metrics = RunMetrics::load(entry.path().string(), meta);
        } catch (const FormatError& e) {
            log << "warning: skipping '" << entry.path().string() << "': " << e.what()
                << "\n";
            continue;
        }
        if (metrics.method.empty()) metrics.method = "unknown";
        if (!metrics.config_hash.empty()) hashes.insert(metrics.config_hash);
        by_method[metrics.method].push_back({std::move(metrics)});
        ++usable;
    }

    if (usable == 0) {
        throw FormatError("report: no usable metrics files under '" + run_dir + "'");
    }
    if (hashes.size() > 1 && !force) {
        throw Error("report: runs carry " + std::to_string(hashes.size()) +
                    " different config hashes; pass --force to mix them");
    }

    std::vector<ReportSeries> series;
    int max_epoch = 0;
    for (const auto& [method, runs] : by_method) {
        // Only runs with test records chart (attention-stack logs have none).
        std::map<int, std::pair<double, int>> acc;
        std::vector<double> finals;
        for (const auto& run : runs) {
            int last_epoch = -1;
            double last_acc = 0.0;
            for (const auto& r : run.metrics.records) {
                if (r.split != "test") continue;
                acc[r.epoch].first += r.accuracy;
                acc[r.epoch].second += 1;
                if (r.epoch > last_epoch) {
                    last_epoch = r.epoch;
                    last_acc = r.accuracy;
                }
            }
            if (last_epoch >= 0) finals.push_back(last_acc);
        }
        if (acc.empty()) continue;
        ReportSeries s;
        s.method = method;
        s.runs = int(finals.size());
        for (const auto& [epoch, sum_count] : acc) {
            max_epoch = std::max(max_epoch, epoch);
            (void)epoch;
        }
        s.acc_by_epoch.resize(std::size_t(acc.rbegin()->first) + 1, 0.0);
        for (const auto& [epoch, sum_count] : acc) {
            s.acc_by_epoch[std::size_t(epoch)] =
                sum_count.first / double(sum_count.second);
        }
        double mean = 0.0, sd = 0.0;
        for (double f : finals) mean += f;
        mean /= double(std::max<std::size_t>(finals.size(), 1));
        for (double f : finals) sd += (f - mean) * (f - mean);
        sd = finals.size() > 1 ? std::sqrt(sd / double(finals.size() - 1)) : 0.0;
        s.final_acc_mean = mean;
        s.final_acc_std = sd;
        series.push_back(std::move(s));
    }

    if (series.empty()) {
        throw FormatError("report: no test-split records under '" + run_dir + "'");
    }

    {
        std::ofstream csv(run_dir + "/report.csv");
        csv << "method,runs,final_acc_mean,final_acc_std\n";
        for (const auto& s : series) {
            csv << s.method << ',' << s.runs << ',' << s.final_acc_mean << ','
                << s.final_acc_std << '\n';
        }
    }
    {
        std::ofstream txt(run_dir + "/report.txt");
        txt << "method        runs  final_acc_mean  final_acc_std\n";
        for (const auto& s : series) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%-13s %4d  %14.2f  %13.2f\n",
                          s.method.c_str(), s.runs, s.final_acc_mean, s.final_acc_std);
            txt << buf;
        }
    }
    {
        std::ofstream svg(run_dir + "/report.svg");
        svg << svg_chart(series, max_epoch);
    }
    log << "report: " << series.size() << " methods, " << usable
        << " metric files -> report.{txt,csv,svg}\n";
    return series;
}

}  // namespace mhgd
