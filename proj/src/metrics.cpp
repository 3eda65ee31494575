#include "foba/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

#include "foba/errors.hpp"

namespace foba {

namespace {

double iou_nc_of(const SCDConfusionMatrix& cm) {
    const int n = cm.n_classes();
    const double q00 = static_cast<double>(cm.at(0, 0));
    int64_t col0 = 0, row0 = 0;
    for (int i = 0; i < n; ++i) {
        col0 += cm.at(i, 0);
        row0 += cm.at(0, i);
    }
    const double denom = static_cast<double>(col0 + row0) - q00;
    if (denom <= 0)
        throw DegenerateMetric("unchanged-class IoU: no pixels involve class 0");
    return q00 / denom;
}

double iou_c_of(const SCDConfusionMatrix& cm) {
    const int n = cm.n_classes();
    int64_t total = 0, change = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            total += cm.at(i, j);
            if (i >= 1 && j >= 1) change += cm.at(i, j);
        }
    const double denom = static_cast<double>(total - cm.at(0, 0));
    if (denom <= 0)
        throw DegenerateMetric("changed-class IoU: no pixels involve change classes");
    return static_cast<double>(change) / denom;
}

}  // namespace

std::tuple<double, double, double> miou(const SCDConfusionMatrix& cm) {
    const double iou_nc = iou_nc_of(cm);
    const double iou_c = iou_c_of(cm);
    return {iou_nc, iou_c, (iou_nc + iou_c) / 2.0};
}

double oa(const SCDConfusionMatrix& cm) {
    const int64_t total = cm.total();
    if (total <= 0) throw DegenerateMetric("overall accuracy: empty confusion matrix");
    int64_t diag = 0;
    for (int i = 0; i < cm.n_classes(); ++i) diag += cm.at(i, i);
    return static_cast<double>(diag) / static_cast<double>(total);
}

double sek(const SCDConfusionMatrix& cm) {
    const int n = cm.n_classes();
    // zeroing the (0,0) cell removes the dominant true-negative mass
    auto q = [&](int i, int j) -> int64_t {
        return (i == 0 && j == 0) ? 0 : cm.at(i, j);
    };
    int64_t total = 0, diag_change = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) total += q(i, j);
    if (total <= 0)
        throw DegenerateMetric("separated kappa: no off-(0,0) mass in the matrix");
    for (int i = 1; i < n; ++i) diag_change += q(i, i);
    const double t = static_cast<double>(total);
    const double rho = static_cast<double>(diag_change) / t;
    double eta_num = 0;
    for (int i = 1; i < n; ++i) {
        int64_t row = 0, col = 0;
        for (int j = 0; j < n; ++j) {
            row += q(i, j);
            col += q(j, i);
        }
        eta_num += static_cast<double>(row) * static_cast<double>(col);
    }
    const double eta = eta_num / (t * t);
    if (1.0 - eta < 1e-12)
        throw DegenerateMetric("separated kappa: chance agreement saturates (1-eta ~ 0)");
    const auto [iou_nc, iou_c, m] = miou(cm);
    (void)iou_nc;
    (void)m;
    return std::exp(iou_c - 1.0) * (rho - eta) / (1.0 - eta);
}

std::tuple<double, double, double> f_scd(const SCDConfusionMatrix& cm) {
    const int n = cm.n_classes();
    int64_t diag = 0, change_rows = 0, change_cols = 0;
    for (int i = 1; i < n; ++i) {
        diag += cm.at(i, i);
        for (int j = 0; j < n; ++j) {
            change_rows += cm.at(i, j);  // predicted-change mass
            change_cols += cm.at(j, i);  // ground-truth-change mass
        }
    }
    if (change_rows <= 0 && change_cols <= 0)
        throw DegenerateMetric("change score: no change mass in prediction or ground truth");
    // When exactly one side carries change mass the change diagonal is empty,
    // so the harmonic mean is zero regardless of the vacuous component; that
    // component is reported as zero rather than left undefined.
    const double p =
        change_rows > 0 ? static_cast<double>(diag) / static_cast<double>(change_rows) : 0.0;
    const double r =
        change_cols > 0 ? static_cast<double>(diag) / static_cast<double>(change_cols) : 0.0;
    if (p + r <= 0) return {p, r, 0.0};
    return {p, r, 2.0 * p * r / (p + r)};
}

MetricReport compute_metrics(const SCDConfusionMatrix& cm) {
    MetricReport rep;
    try {
        rep.iou_nc = iou_nc_of(cm);
    } catch (const DegenerateMetric&) {
    }
    try {
        rep.iou_c = iou_c_of(cm);
    } catch (const DegenerateMetric&) {
    }
    if (rep.iou_nc && rep.iou_c) rep.miou = (*rep.iou_nc + *rep.iou_c) / 2.0;
    try {
        rep.oa = oa(cm);
    } catch (const DegenerateMetric&) {
    }
    try {
        rep.sek = sek(cm);
    } catch (const DegenerateMetric&) {
    }
    try {
        auto [p, r, f] = f_scd(cm);
        rep.p_scd = p;
        rep.r_scd = r;
        rep.f_scd = f;
    } catch (const DegenerateMetric&) {
    }
    return rep;
}

std::string format_metric(const std::optional<double>& v) {
    if (!v) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", *v);
    return buf;
}

std::string MetricReport::to_text() const {
    std::ostringstream os;
    os << "miou " << format_metric(miou) << "\n"
       << "oa " << format_metric(oa) << "\n"
       << "sek " << format_metric(sek) << "\n"
       << "f_scd " << format_metric(f_scd) << "\n"
       << "iou_nc " << format_metric(iou_nc) << "\n"
       << "iou_c " << format_metric(iou_c) << "\n"
       << "p_scd " << format_metric(p_scd) << "\n"
       << "r_scd " << format_metric(r_scd) << "\n";
    return os.str();
}

std::string MetricReport::to_json() const {
    auto field = [](const std::optional<double>& v) {
        if (!v) return std::string("null");
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.12g", *v);
        return std::string(buf);
    };
    std::ostringstream os;
    os << "{\n"
       << "  \"miou\": " << field(miou) << ",\n"
       << "  \"oa\": " << field(oa) << ",\n"
       << "  \"sek\": " << field(sek) << ",\n"
       << "  \"f_scd\": " << field(f_scd) << ",\n"
       << "  \"iou_nc\": " << field(iou_nc) << ",\n"
       << "  \"iou_c\": " << field(iou_c) << ",\n"
       << "  \"p_scd\": " << field(p_scd) << ",\n"
       << "  \"r_scd\": " << field(r_scd) << "\n"
       << "}\n";
    return os.str();
}

}  // namespace foba
