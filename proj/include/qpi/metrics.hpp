#ifndef QPI_METRICS_HPP
#define QPI_METRICS_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qpi/cnn/model.hpp"
#include "qpi/error.hpp"

namespace qpi::metrics {

struct ScoredSample {
    std::string id;
    double score = 0.0;
    int truth = 0;  // 1 = positive class
};

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

inline void check_samples(const std::vector<ScoredSample>& s) {
    if (s.empty()) throw EmptyInputError("no scored samples");
    for (const auto& x : s) {
        if (!std::isfinite(x.score)) throw DomainError("non-finite score for sample '" + x.id + "'");
        if (x.truth != 0 && x.truth != 1) throw DomainError("truth label must be 0 or 1 for sample '" + x.id + "'");
    }
}

/// Positive iff score >= threshold.
inline ConfusionCounts confusion(const std::vector<ScoredSample>& samples, double threshold = 0.5) {
    check_samples(samples);
    ConfusionCounts c;
    for (const auto& s : samples) {
        const bool pred = s.score >= threshold;
        if (s.truth == 1)
            (pred ? c.tp : c.fn)++;
        else
            (pred ? c.fp : c.tn)++;
    }
    return c;
}

struct Rates {
    double sensitivity = 0.0;
    double specificity = 0.0;
    double accuracy = 0.0;
    double mcc = 0.0;
    bool mcc_degenerate = false;  // a marginal was zero; mcc set to 0
};

inline Rates rates(const ConfusionCounts& c) {
    if (c.total() == 0) throw EmptyInputError("confusion counts are all zero");
    if (c.tp + c.fn == 0) throw UndefinedRateError("sensitivity undefined: no positive samples");
    if (c.tn + c.fp == 0) throw UndefinedRateError("specificity undefined: no negative samples");
    const auto d = [](std::uint64_t v) { return static_cast<double>(v); };
    Rates r;
    r.sensitivity = d(c.tp) / d(c.tp + c.fn);
    r.specificity = d(c.tn) / d(c.tn + c.fp);
    r.accuracy = d(c.tp + c.tn) / d(c.total());
    const double den = d(c.tp + c.fp) * d(c.tp + c.fn) * d(c.tn + c.fp) * d(c.tn + c.fn);
    if (den == 0.0) {
        r.mcc = 0.0;
        r.mcc_degenerate = true;
    } else {
        r.mcc = (d(c.tp) * d(c.tn) - d(c.fp) * d(c.fn)) / std::sqrt(den);
    }
    return r;
}

struct RocPoint {
    double threshold = 0.0;  // +inf for the (0,0) origin
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0.0;
};

/// Sweeps every distinct score as a threshold (descending). Tied scores form a
/// single step, so the trapezoid credits a tied pos/neg pair with 1/2 and the
/// result equals the pair-counting statistic exactly.
inline RocCurve roc_auc(const std::vector<ScoredSample>& samples) {
    check_samples(samples);
    std::vector<std::pair<double, int>> s;
    s.reserve(samples.size());
    std::uint64_t pos = 0, neg = 0;
    for (const auto& x : samples) {
        s.emplace_back(x.score, x.truth);
        (x.truth ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) throw DegenerateRocError("ROC needs both classes present");
    std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

    RocCurve roc;
    roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::uint64_t tp = 0, fp = 0, twice_area = 0;  // area in units of 1/(2*pos*neg)
    for (std::size_t i = 0; i < s.size();) {
        const double thr = s[i].first;
        const std::uint64_t tp0 = tp, fp0 = fp;
        for (; i < s.size() && s[i].first == thr; ++i) (s[i].second ? tp : fp)++;
        twice_area += (fp - fp0) * (tp + tp0);
        roc.points.push_back({thr, static_cast<double>(fp) / static_cast<double>(neg),
                              static_cast<double>(tp) / static_cast<double>(pos)});
    }
    roc.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    return roc;
}

// --- timing ------------------------------------------------------------------

struct TimingStats {
    double median_ms = 0.0;
    double p95_ms = 0.0;
    std::size_t samples = 0;
};

inline TimingStats summarize_times(std::vector<double> ms) {
    if (ms.empty()) throw EmptyInputError("no timings");
    std::sort(ms.begin(), ms.end());
    const auto at = [&](double q) {
        const double pos = q * static_cast<double>(ms.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, ms.size() - 1);
        return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
    };
    return {at(0.5), at(0.95), ms.size()};
}

/// Single-image Eval forwards; one warm-up pass over the images is discarded.
template <typename T>
TimingStats time_inference(cnn::Model<T>& model, const std::vector<cnn::Tensor<T>>& images, std::size_t repeats) {
    if (repeats < 10) throw DomainError("timing needs at least 10 repeats");
    if (images.empty()) throw EmptyInputError("no images to time");
    for (const auto& im : images) model.forward(im, cnn::Mode::Eval);
    std::vector<double> ms;
    ms.reserve(repeats * images.size());
    for (std::size_t r = 0; r < repeats; ++r)
        for (const auto& im : images) {
            const auto t0 = std::chrono::steady_clock::now();
            model.forward(im, cnn::Mode::Eval);
            const auto t1 = std::chrono::steady_clock::now();
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
    return summarize_times(std::move(ms));
}

/// Amortised per-image time of Eval forwards on a whole batch.
template <typename T>
double time_batched_per_image(cnn::Model<T>& model, const cnn::Tensor<T>& batch, std::size_t repeats) {
    if (repeats == 0) throw DomainError("repeats must be positive");
    model.forward(batch, cnn::Mode::Eval);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < repeats; ++r) model.forward(batch, cnn::Mode::Eval);
    const double total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return total / static_cast<double>(repeats * batch.dim(0));
}

// --- text formats ------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string format_scores_csv(const std::vector<ScoredSample>& s) {
    std::ostringstream os;
    os << "sample_id,score,truth\n";
    for (const auto& x : s) {
        if (x.id.find_first_of(",\n") != std::string::npos)
            throw FormatError("sample id '" + x.id + "' contains a comma or newline");
        os << x.id << ',' << format_double(x.score) << ',' << x.truth << '\n';
    }
    return os.str();
}

inline std::vector<ScoredSample> parse_scores_csv(const std::string& text, const std::string& origin = "scores") {
    std::istringstream is(text);
    std::string line;
    std::vector<ScoredSample> out;
    std::size_t lineno = 0;
    bool header = true;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("sample_id", 0) == 0) continue;
        }
        const auto c1 = line.find(','), c2 = line.rfind(',');
        if (c1 == std::string::npos || c1 == c2)
            throw FormatError(origin + ":" + std::to_string(lineno) + ": expected sample_id,score,truth");
        ScoredSample s;
        s.id = line.substr(0, c1);
        try {
            std::size_t used = 0;
            const std::string score = line.substr(c1 + 1, c2 - c1 - 1);
            s.score = std::stod(score, &used);
            if (used != score.size()) throw std::invalid_argument("trailing");
            const std::string truth = line.substr(c2 + 1);
            if (truth != "0" && truth != "1") throw std::invalid_argument("truth");
            s.truth = truth == "1";
        } catch (const std::exception&) {
            throw FormatError(origin + ":" + std::to_string(lineno) + ": malformed score row '" + line + "'");
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline std::string format_roc_csv(const RocCurve& roc) {
    std::ostringstream os;
    os << "threshold,fpr,tpr\n";
    for (const auto& p : roc.points)
        os << (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) << ',' << format_double(p.fpr)
           << ',' << format_double(p.tpr) << '\n';
    return os.str();
}

inline RocCurve parse_roc_csv(const std::string& text, const std::string& origin = "roc") {
    std::istringstream is(text);
    std::string line;
    RocCurve roc;
    bool header = true;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("threshold", 0) == 0) continue;
        }
        RocPoint p;
        char a[64] = {};
        if (std::sscanf(line.c_str(), "%63[^,],%lf,%lf", a, &p.fpr, &p.tpr) != 3)
            throw FormatError(origin + ": malformed row '" + line + "'");
        p.threshold = std::string(a) == "inf" ? std::numeric_limits<double>::infinity() : std::strtod(a, nullptr);
        roc.points.push_back(p);
    }
    if (roc.points.size() < 2) throw FormatError(origin + ": fewer than two ROC points");
    for (std::size_t i = 1; i < roc.points.size(); ++i) {
        const auto &a = roc.points[i - 1], &b = roc.points[i];
        roc.auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    }
    return roc;
}

struct Report {
    std::string task;
    double threshold = 0.5;
    ConfusionCounts counts;
    std::optional<Rates> rates;
    std::optional<double> auc;
    std::vector<std::string> warnings;
};

inline Report evaluate_scores(const std::vector<ScoredSample>& samples, double threshold = 0.5, std::string task = {}) {
    Report r;
    r.task = std::move(task);
    r.threshold = threshold;
    r.counts = confusion(samples, threshold);
    try {
        r.rates = rates(r.counts);
        if (r.rates->mcc_degenerate) r.warnings.push_back("mcc denominator is zero; mcc reported as 0");
    } catch (const UndefinedRateError& e) {
        r.warnings.push_back(e.what());
    }
    try {
        r.auc = roc_auc(samples).auc;
    } catch (const DegenerateRocError& e) {
        r.warnings.push_back(e.what());
    }
    return r;
}

/// Machine-readable key=value form; contains no timing so reruns are byte-identical.
inline std::string format_report_kv(const Report& r) {
    std::ostringstream os;
    if (!r.task.empty()) os << "task=" << r.task << '\n';
    os << "threshold=" << format_double(r.threshold) << '\n';
    os << "tp=" << r.counts.tp << "\nfp=" << r.counts.fp << "\ntn=" << r.counts.tn << "\nfn=" << r.counts.fn << '\n';
    const auto opt = [](bool have, double v) { return have ? format_double(v) : std::string("undefined"); };
    os << "sensitivity=" << opt(r.rates.has_value(), r.rates ? r.rates->sensitivity : 0) << '\n';
    os << "specificity=" << opt(r.rates.has_value(), r.rates ? r.rates->specificity : 0) << '\n';
    os << "accuracy=" << format_double(static_cast<double>(r.counts.tp + r.counts.tn) / static_cast<double>(r.counts.total())) << '\n';
    os << "mcc=" << opt(r.rates.has_value(), r.rates ? r.rates->mcc : 0) << '\n';
    os << "auc=" << opt(r.auc.has_value(), r.auc.value_or(0)) << '\n';
    for (const auto& w : r.warnings) os << "warning=" << w << '\n';
    return os.str();
}

inline std::string format_report_table(const Report& r) {
    char buf[256];
    std::ostringstream os;
    const auto cell = [&](bool have, double v) {
        if (!have) return std::string("  n/a ");
        std::snprintf(buf, sizeof buf, "%6.3f", v);
        return std::string(buf);
    };
    os << "task        " << (r.task.empty() ? "-" : r.task) << "   threshold " << r.threshold << '\n';
    os << "            TP " << r.counts.tp << "  FP " << r.counts.fp << "  TN " << r.counts.tn << "  FN " << r.counts.fn
       << '\n';
    os << "Sensitivity Specificity Accuracy  MCC    AUC\n";
    const double acc = static_cast<double>(r.counts.tp + r.counts.tn) / static_cast<double>(r.counts.total());
    os << cell(r.rates.has_value(), r.rates ? r.rates->sensitivity : 0) << "      "
       << cell(r.rates.has_value(), r.rates ? r.rates->specificity : 0) << "      " << cell(true, acc) << "    "
       << cell(r.rates.has_value(), r.rates ? r.rates->mcc : 0) << " " << cell(r.auc.has_value(), r.auc.value_or(0))
       << '\n';
    for (const auto& w : r.warnings) os << "warning: " << w << '\n';
    return os.str();
}

/// Minimal standalone SVG of a ROC curve.
inline std::string roc_svg(const RocCurve& roc, const std::string& title = "ROC") {
    const double size = 400, m = 50;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * m << "\" height=\"" << size + 2 * m
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect x=\"" << m << "\" y=\"" << m << "\" width=\"" << size << "\" height=\"" << size
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << m << "\" y1=\"" << m + size << "\" x2=\"" << m + size << "\" y2=\"" << m
       << "\" stroke=\"#bbb\" stroke-dasharray=\"4 4\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double f = i / 4.0;
        os << "<text x=\"" << m + f * size << "\" y=\"" << m + size + 16 << "\" text-anchor=\"middle\">" << f
           << "</text>\n";
        os << "<text x=\"" << m - 6 << "\" y=\"" << m + size - f * size + 4 << "\" text-anchor=\"end\">" << f
           << "</text>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"#c03\" stroke-width=\"2\" points=\"";
    for (const auto& p : roc.points) os << m + p.fpr * size << ',' << m + size - p.tpr * size << ' ';
    os << "\"/>\n";
    char auc[64];
    std::snprintf(auc, sizeof auc, "AUC = %.4f", roc.auc);
    os << "<text x=\"" << m + size / 2 << "\" y=\"" << m - 18 << "\" text-anchor=\"middle\">" << title << "</text>\n";
    os << "<text x=\"" << m + size - 8 << "\" y=\"" << m + size - 10 << "\" text-anchor=\"end\">" << auc << "</text>\n";
    os << "<text x=\"" << m + size / 2 << "\" y=\"" << m + size + 36 << "\" text-anchor=\"middle\">false positive rate</text>\n";
    os << "<text transform=\"translate(" << m - 34 << "," << m + size / 2
       << ") rotate(-90)\" text-anchor=\"middle\">true positive rate</text>\n";
    os << "</svg>\n";
    return os.str();
}

}  // namespace qpi::metrics

#endif  // QPI_METRICS_HPP
