// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Post-run reporting: scans a run directory for metrics files, groups them by
// method, and emits a comparison table (text + CSV) plus an SVG chart of test
// accuracy against epoch.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mhgd {

struct ReportSeries {
    std::string method;
    int runs = 0;
    double final_acc_mean = 0.0;
    double final_acc_std = 0.0;
    std::vector<double> acc_by_epoch;  // mean over runs
};

// Returns the series that made it into the report. Throws FormatError when no
// usable metrics exist and Error when config hashes disagree without force.
std::vector<ReportSeries> emit_report(const std::string& run_dir, bool force,
                                      std::ostream& log);

}  // namespace mhgd
