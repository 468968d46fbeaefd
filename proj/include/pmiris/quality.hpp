#pragma once

// Image-quality covariates used for the live vs post-mortem bias analysis:
// average intensity, histogram entropy (grayscale utilization) and sharpness
// as Laplacian-of-Gaussian response power, plus the Wilcoxon rank-sum test
// comparing the two classes per covariate.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmiris/common.hpp"
#include "pmiris/dataset.hpp"
#include "pmiris/image.hpp"
#include "pmiris/preprocess.hpp"

namespace pmiris {

struct QualityMetrics {
    double average_intensity = 0.0;  // [0,255]
    double entropy = 0.0;            // bits, [0,8]
    double sharpness = 0.0;          // LoG response power, >= 0
};

struct HistogramStats {
    std::array<std::uint64_t, 256> counts{};
    std::array<double, 256> p{};
};

inline HistogramStats histogram(const Image& im) {
    require(!im.empty(), ErrKind::Config, "histogram: empty image");
    HistogramStats h;
    for (std::uint8_t v : im.px) ++h.counts[v];
    const double n = double(im.size());
    for (int i = 0; i < 256; ++i) h.p[i] = double(h.counts[i]) / n;
    return h;
}

inline double average_intensity(const Image& im) {
    require(!im.empty(), ErrKind::Config, "average_intensity: empty image");
    std::uint64_t sum = 0;
    for (std::uint8_t v : im.px) sum += v;
    return double(sum) / double(im.size());
}

inline double grayscale_utilization(const Image& im) {
    HistogramStats h = histogram(im);
    double H = 0.0;
    for (int i = 0; i < 256; ++i)
        if (h.p[i] > 0.0) H -= h.p[i] * std::log2(h.p[i]);
    return H;
}

// Discrete LoG kernel, mean-subtracted so it is exactly orthogonal to
// constant patches. halfwidth < 0 picks the default round(4*sigma).
inline std::vector<double> log_kernel(double sigma, int halfwidth = -1, int* out_size = nullptr) {
    require(sigma > 0.0, ErrKind::Config, "log_kernel: sigma must be > 0");
    if (halfwidth < 0) halfwidth = int(std::lround(4.0 * sigma));
    require(halfwidth >= 1, ErrKind::Config, "log_kernel: halfwidth must be >= 1");
    const int size = 2 * halfwidth + 1;
    std::vector<double> k(std::size_t(size) * size);
    const double s2 = sigma * sigma;
    double sum = 0.0;
    for (int y = -halfwidth; y <= halfwidth; ++y) {
        for (int x = -halfwidth; x <= halfwidth; ++x) {
            const double r2 = double(x * x + y * y);
            const double v = (r2 - 2.0 * s2) / (s2 * s2) * std::exp(-r2 / (2.0 * s2));
            k[std::size_t(y + halfwidth) * size + (x + halfwidth)] = v;
            sum += v;
        }
    }
    const double mean = sum / double(k.size());
    for (double& v : k) v -= mean;
    if (out_size) *out_size = size;
    return k;
}

struct SharpnessParams {
    double sigma = 1.4;
    int kernel_halfwidth = -1;  // -1 -> round(4*sigma)
};

// Mean squared LoG response over the valid convolution region, computed on
// intensities scaled to [0,1]. The global image mean is subtracted before
// filtering; the kernel is orthogonal to constants, so this changes nothing
// mathematically but makes a flat field come out as exactly zero.
inline double sharpness(const Image& im, const SharpnessParams& params = {}) {
    int ksize = 0;
    std::vector<double> k = log_kernel(params.sigma, params.kernel_halfwidth, &ksize);
    require(im.rows >= ksize && im.cols >= ksize, ErrKind::Config,
            "sharpness: image smaller than the LoG kernel");
    const int half = ksize / 2;

    std::vector<double> x(im.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < im.size(); ++i) mean += double(im.px[i]);
    mean /= (255.0 * double(im.size()));
    for (std::size_t i = 0; i < im.size(); ++i) x[i] = double(im.px[i]) / 255.0 - mean;

    const int out_rows = im.rows - ksize + 1;
    const int out_cols = im.cols - ksize + 1;
    double acc = 0.0;
    for (int r = 0; r < out_rows; ++r) {
        for (int c = 0; c < out_cols; ++c) {
            double resp = 0.0;
            for (int kr = 0; kr < ksize; ++kr) {
                const double* xrow = &x[std::size_t(r + kr) * im.cols + c];
                const double* krow = &k[std::size_t(kr) * ksize];
                for (int kc = 0; kc < ksize; ++kc) resp += xrow[kc] * krow[kc];
            }
            acc += resp * resp;
        }
    }
    (void)half;
    return acc / (double(out_rows) * double(out_cols));
}

// ---------------------------------------------------------------------------
// Wilcoxon rank-sum. Exact enumeration of all C(n, n_a) rank assignments when
// n_a + n_b <= 12 and the pooled sample is tie-free; otherwise the normal
// approximation with midranks, tie correction and continuity correction.
// ---------------------------------------------------------------------------

enum class RankSumMethod { Exact, NormalApproximation };

struct RankSumResult {
    double statistic = 0.0;  // rank sum of sample_a (midranks under ties)
    double p_value = 1.0;
    RankSumMethod method = RankSumMethod::NormalApproximation;
};

namespace detail {

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// Walks all k-subsets of {1..n} accumulating how many have rank sum at least
// as far from the null mean as the observed one.
inline void count_extreme_subsets(int n, int k, double mu, double dev, std::uint64_t& extreme,
                                  std::uint64_t& total) {
    std::vector<int> idx(k);
    for (int i = 0; i < k; ++i) idx[i] = i + 1;
    while (true) {
        double w = 0.0;
        for (int v : idx) w += v;
        ++total;
        if (std::abs(w - mu) >= dev - 1e-12) ++extreme;
        int i = k - 1;
        while (i >= 0 && idx[i] == n - (k - 1 - i)) --i;
        if (i < 0) break;
        ++idx[i];
        for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
}

}  // namespace detail

inline RankSumResult wilcoxon_rank_sum(const std::vector<double>& sample_a,
                                       const std::vector<double>& sample_b) {
    require(!sample_a.empty() && !sample_b.empty(), ErrKind::Config,
            "wilcoxon_rank_sum: both samples must be non-empty");
    const int na = int(sample_a.size()), nb = int(sample_b.size()), n = na + nb;

    struct Entry {
        double v;
        bool is_a;
    };
    std::vector<Entry> pooled;
    pooled.reserve(std::size_t(n));
    for (double v : sample_a) pooled.push_back({v, true});
    for (double v : sample_b) pooled.push_back({v, false});
    std::stable_sort(pooled.begin(), pooled.end(),
                     [](const Entry& x, const Entry& y) { return x.v < y.v; });

    // midranks + tie bookkeeping
    std::vector<double> rank(std::size_t(n));
    bool has_ties = false;
    double tie_term = 0.0;  // sum of t^3 - t over tie groups
    for (int i = 0; i < n;) {
        int j = i;
        while (j < n && pooled[j].v == pooled[i].v) ++j;
        const int t = j - i;
        const double mid = 0.5 * double(i + 1 + j);  // average of ranks i+1..j
        for (int q = i; q < j; ++q) rank[q] = mid;
        if (t > 1) {
            has_ties = true;
            tie_term += double(t) * t * t - t;
        }
        i = j;
    }

    double w = 0.0;
    for (int i = 0; i < n; ++i)
        if (pooled[i].is_a) w += rank[i];

    RankSumResult res;
    res.statistic = w;
    const double mu = double(na) * double(n + 1) / 2.0;

    if (!has_ties && n <= 12) {
        std::uint64_t extreme = 0, total = 0;
        detail::count_extreme_subsets(n, na, mu, std::abs(w - mu), extreme, total);
        res.method = RankSumMethod::Exact;
        res.p_value = double(extreme) / double(total);
        return res;
    }

    double var = double(na) * nb / 12.0 *
                 (double(n + 1) - tie_term / (double(n) * double(n - 1)));
    res.method = RankSumMethod::NormalApproximation;
    if (var <= 0.0) {  // all observations tied
        res.p_value = 1.0;
        return res;
    }
    double z = std::abs(w - mu) - 0.5;  // continuity correction toward the mean
    if (z < 0.0) z = 0.0;
    z /= std::sqrt(var);
    res.p_value = std::min(1.0, 2.0 * detail::normal_sf(z));
    return res;
}

// ---------------------------------------------------------------------------
// Boxplot statistics (median in the middle, box from Q1 to Q3, whiskers at
// Q1-1.5*IQR and Q3+1.5*IQR, points beyond them listed as outliers).
// ---------------------------------------------------------------------------

struct BoxplotStats {
    std::size_t n = 0;
    double mean = 0.0;
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double whisker_lo = 0.0;
    double whisker_hi = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::vector<double> outliers;
};

// Linear-interpolation quantile on a sorted vector (position (n-1)*p).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    require(!sorted.empty(), ErrKind::Config, "quantile of an empty sample");
    if (sorted.size() == 1) return sorted[0];
    const double pos = p * double(sorted.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const double frac = pos - double(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline BoxplotStats boxplot_stats(std::vector<double> values) {
    require(!values.empty(), ErrKind::Config, "boxplot_stats: empty sample");
    std::sort(values.begin(), values.end());
    BoxplotStats b;
    b.n = values.size();
    b.min = values.front();
    b.max = values.back();
    double s = 0.0;
    for (double v : values) s += v;
    b.mean = s / double(values.size());
    b.median = quantile_sorted(values, 0.5);
    b.q1 = quantile_sorted(values, 0.25);
    b.q3 = quantile_sorted(values, 0.75);
    const double iqr = b.q3 - b.q1;
    b.whisker_lo = b.q1 - 1.5 * iqr;
    b.whisker_hi = b.q3 + 1.5 * iqr;
    for (double v : values)
        if (v < b.whisker_lo || v > b.whisker_hi) b.outliers.push_back(v);
    return b;
}

// ---------------------------------------------------------------------------
// Dataset-level report.
// ---------------------------------------------------------------------------

struct QualityReportOptions {
    bool preprocessed = false;   // compute on cropped_masked images
    double margin_factor = 1.2;  // crop margin when preprocessed
    SharpnessParams sharpness_params;
    double alpha = 0.05;  // significance level recorded alongside p-values
};

struct PerImageQuality {
    std::string image_path;
    std::string subject_id;
    Label label = Label::Live;
    double hours_post_mortem = 0.0;
    QualityMetrics metrics;
};

struct CovariateSummary {
    std::string covariate;
    BoxplotStats live;
    BoxplotStats post_mortem;
    std::optional<RankSumResult> rank_sum;  // absent for single-class datasets
};

struct QualityReport {
    std::string source_tag;
    bool preprocessed = false;
    double alpha = 0.05;
    double sharpness_sigma = 1.4;
    int sharpness_halfwidth = 6;
    std::vector<PerImageQuality> per_image;
    std::vector<CovariateSummary> summaries;  // AI, entropy, sharpness (when both classes present)
    std::vector<std::string> warnings;
};

namespace detail {

// Metrics restricted to the mask support of a cropped image: AI and entropy
// over nonzero pixels, sharpness over windows that fit inside the mask disc.
inline QualityMetrics metrics_on_cropped(const Image& cm, const SharpnessParams& sp) {
    QualityMetrics m;
    std::uint64_t sum = 0, nz = 0;
    std::array<std::uint64_t, 256> counts{};
    for (std::uint8_t v : cm.px) {
        if (v == 0) continue;
        sum += v;
        ++counts[v];
        ++nz;
    }
    if (nz == 0) return m;  // fully masked; all-zero metrics
    m.average_intensity = double(sum) / double(nz);
    for (int i = 1; i < 256; ++i) {
        if (!counts[i]) continue;
        const double p = double(counts[i]) / double(nz);
        m.entropy -= p * std::log2(p);
    }

    int ksize = 0;
    std::vector<double> k = log_kernel(sp.sigma, sp.kernel_halfwidth, &ksize);
    const int half = ksize / 2;
    const double mask_r = double(cm.cols) / 2.0;
    const double safe_r = mask_r - double(half) * std::sqrt(2.0);
    if (safe_r <= 0.0 || cm.rows < ksize || cm.cols < ksize) return m;

    std::vector<double> x(cm.size());
    double mean = double(sum) / (255.0 * double(cm.size()));
    for (std::size_t i = 0; i < cm.size(); ++i) x[i] = double(cm.px[i]) / 255.0 - mean;

    const double c0 = double(cm.cols / 2);
    double acc = 0.0;
    std::uint64_t nwin = 0;
    for (int r = half; r < cm.rows - half; ++r) {
        for (int c = half; c < cm.cols - half; ++c) {
            const double dy = double(r) - c0, dx = double(c) - c0;
            if (dx * dx + dy * dy > safe_r * safe_r) continue;
            double resp = 0.0;
            for (int kr = 0; kr < ksize; ++kr) {
                const double* xrow = &x[std::size_t(r - half + kr) * cm.cols + (c - half)];
                const double* krow = &k[std::size_t(kr) * ksize];
                for (int kc = 0; kc < ksize; ++kc) resp += xrow[kc] * krow[kc];
            }
            acc += resp * resp;
            ++nwin;
        }
    }
    if (nwin) m.sharpness = acc / double(nwin);
    return m;
}

}  // namespace detail

inline QualityReport quality_report(const Dataset& ds, const QualityReportOptions& opts = {}) {
    require(!ds.records.empty(), ErrKind::Config, "quality_report: empty dataset");
    QualityReport rep;
    rep.source_tag = ds.source_tag;
    rep.preprocessed = opts.preprocessed;
    rep.alpha = opts.alpha;
    rep.sharpness_sigma = opts.sharpness_params.sigma;
    rep.sharpness_halfwidth = opts.sharpness_params.kernel_halfwidth >= 0
                                  ? opts.sharpness_params.kernel_halfwidth
                                  : int(std::lround(4.0 * opts.sharpness_params.sigma));

    for (const auto& r : ds.records) {
        Image im = load_image_gray(r.image_path);
        PerImageQuality q;
        q.image_path = r.image_path;
        q.subject_id = r.subject_id;
        q.label = r.label;
        q.hours_post_mortem = r.hours_post_mortem;
        if (opts.preprocessed) {
            Image cm = crop_and_mask(im, r.annotation, opts.margin_factor);
            q.metrics = detail::metrics_on_cropped(cm, opts.sharpness_params);
        } else {
            q.metrics.average_intensity = average_intensity(im);
            q.metrics.entropy = grayscale_utilization(im);
            q.metrics.sharpness = sharpness(im, opts.sharpness_params);
        }
        rep.per_image.push_back(std::move(q));
    }

    std::vector<double> live_v[3], pm_v[3];
    for (const auto& q : rep.per_image) {
        auto* dst = q.label == Label::Live ? live_v : pm_v;
        dst[0].push_back(q.metrics.average_intensity);
        dst[1].push_back(q.metrics.entropy);
        dst[2].push_back(q.metrics.sharpness);
    }

    static const char* names[3] = {"average_intensity", "entropy", "sharpness"};
    if (live_v[0].empty() || pm_v[0].empty()) {
        rep.warnings.push_back(
            "dataset contains a single class; per-class comparison and rank-sum tests skipped");
        return rep;
    }
    for (int i = 0; i < 3; ++i) {
        CovariateSummary s;
        s.covariate = names[i];
        s.live = boxplot_stats(live_v[i]);
        s.post_mortem = boxplot_stats(pm_v[i]);
        s.rank_sum = wilcoxon_rank_sum(live_v[i], pm_v[i]);
        rep.summaries.push_back(std::move(s));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// JSON serialization.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const BoxplotStats& b) {
    return nlohmann::ordered_json{{"n", b.n},
                                  {"mean", b.mean},
                                  {"median", b.median},
                                  {"q1", b.q1},
                                  {"q3", b.q3},
                                  {"whisker_lo", b.whisker_lo},
                                  {"whisker_hi", b.whisker_hi},
                                  {"min", b.min},
                                  {"max", b.max},
                                  {"outliers", b.outliers}};
}

inline nlohmann::ordered_json to_json(const QualityReport& r) {
    nlohmann::ordered_json root;
    root["schema"] = "pmiris.quality_report.v1";
    root["source_tag"] = r.source_tag;
    root["preprocessed"] = r.preprocessed;
    root["alpha"] = r.alpha;
    root["sharpness"] = {{"sigma", r.sharpness_sigma}, {"kernel_halfwidth", r.sharpness_halfwidth}};
    root["per_image"] = nlohmann::ordered_json::array();
    for (const auto& q : r.per_image) {
        root["per_image"].push_back({{"image_path", q.image_path},
                                     {"subject_id", q.subject_id},
                                     {"label", to_string(q.label)},
                                     {"hours_post_mortem", q.hours_post_mortem},
                                     {"average_intensity", q.metrics.average_intensity},
                                     {"entropy", q.metrics.entropy},
                                     {"sharpness", q.metrics.sharpness}});
    }
    root["covariates"] = nlohmann::ordered_json::array();
    for (const auto& s : r.summaries) {
        nlohmann::ordered_json j;
        j["covariate"] = s.covariate;
        j["live"] = to_json(s.live);
        j["post_mortem"] = to_json(s.post_mortem);
        if (s.rank_sum) {
            j["rank_sum"] = {{"statistic", s.rank_sum->statistic},
                             {"p_value", s.rank_sum->p_value},
                             {"method", s.rank_sum->method == RankSumMethod::Exact
                                            ? "exact"
                                            : "normal_approximation"}};
        }
        root["covariates"].push_back(std::move(j));
    }
    root["warnings"] = r.warnings;
    return root;
}

inline void save_quality_report(const QualityReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail(ErrKind::Io, "cannot write quality report: " + path);
    out << to_json(r).dump(2) << "\n";
}

}  // namespace pmiris
