#pragma once

#include <optional>
#include <string>
#include <tuple>

#include "foba/core_types.hpp"

namespace foba {

// Evaluation summary. A value is absent when its defining ratio has a zero
// denominator (e.g. a corpus with no change pixels); consumers print "n/a"
// rather than a silent 0.
struct MetricReport {
    std::optional<double> iou_nc, iou_c, miou;
    std::optional<double> oa;
    std::optional<double> sek;
    std::optional<double> p_scd, r_scd, f_scd;

    // One "key value" line per metric, 4 decimal places, "n/a" when absent.
    std::string to_text() const;
    std::string to_json() const;
};

// Renders one metric value the way reports print it.
std::string format_metric(const std::optional<double>& v);

// Strict accessors: throw DegenerateMetric instead of returning a sentinel.
// miou returns (iou over unchanged, iou over changed, their mean).
std::tuple<double, double, double> miou(const SCDConfusionMatrix& cm);
double oa(const SCDConfusionMatrix& cm);
double sek(const SCDConfusionMatrix& cm);
// f_scd returns (precision, recall, F) computed over change rows/columns.
std::tuple<double, double, double> f_scd(const SCDConfusionMatrix& cm);

// Computes everything, mapping DegenerateMetric to absent fields.
MetricReport compute_metrics(const SCDConfusionMatrix& cm);

}  // namespace foba
