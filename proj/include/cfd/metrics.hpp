#pragma once

// Segmentation and detection metrics, significance testing and lesion-measure
// stratification.

#include <optional>
#include <string>
#include <vector>

#include "cfd/common.hpp"

namespace cfd {

/// 2|g & p| / (|g| + |p|); 1 when both are empty.
double dice(const Mask& g, const Mask& p);

/// tau in {0.10, 0.15, ..., 0.90}.
std::vector<double> tau_grid();

/// Pixels with score >= tau.
Mask binarize(const Image& scores, double tau);

struct OptimalDice {
    double dsc = 0;
    double tau = 0;
};
/// Best Dice over tau_grid(); the lowest tau wins ties.
OptimalDice optimal_dice(const Mask& g, const Image& scores);

/// Positive pixels with at least one non-positive 4-neighbour (outside counts as background).
std::vector<int> boundary_pixels(const Mask& m);

/// Symmetric 95th-percentile boundary distance in pixels. One empty mask gives the
/// image diagonal, both empty give 0.
double hd95(const Mask& g, const Mask& p);

/// Linear-interpolated percentile of unsorted values (q in [0, 100]).
double percentile(std::vector<double> values, double q);

/// Discrete-sum area under the precision-recall curve; ties rank negatives first.
/// Empty when g has no positive pixel.
std::optional<double> auprc(const Mask& g, const Image& scores);

struct LesionSet {
    Grid2D<int> labels;                    // 0 background, 1..K by raster order of first pixel
    std::vector<std::vector<int>> pixels;  // flat indices per component, raster order
    std::size_t size() const noexcept { return pixels.size(); }
};

/// 8-connected components.
LesionSet connected_components(const Mask& m);

/// Fraction of ground-truth lesions matched (greedy one-to-one by descending IoU)
/// with IoU >= iou_threshold. Empty when g has no lesion.
std::optional<double> detection_sensitivity(const Mask& g, const Mask& p, double iou_threshold = 0.5);

struct WilcoxonResult {
    double p_value = 1;
    double w_plus = 0;
    int n = 0;  // non-zero differences
    bool exact = false;
    bool degenerate = false;
};

/// Two-sided paired signed-rank test; exact enumeration for n <= 12.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

double bonferroni(double alpha, int comparisons);

struct MetricRecord {
    std::string slice_id;
    double dsc_opt = 0;
    double tau_star = 0;
    double hd95 = 0;
    double auprc = 0;  // NaN when skipped (lesion-free slice)
    double sensitivity = 0;  // NaN when skipped
    int lesion_pixels = 0;
    double normalized_size = 0;  // lesion_pixels / max over the evaluated set
    double suv_mean = 0;
    double suv_sum = 0;

    double measure(const std::string& axis) const;
    double metric(const std::string& name) const;
};

/// Metrics of one slice. `pixels` and `raw_max` de-normalize the lesion measures.
MetricRecord evaluate_slice(const std::string& slice_id, const Mask& g, const Image& scores, const Image& pixels,
                            double raw_max);

/// Fills normalized_size relative to the largest lesion pixel count.
void normalize_lesion_sizes(std::vector<MetricRecord>& records);

struct StratBin {
    double lower = 0, upper = 0;
    double mean = 0, sem = 0;
    int count = 0;
    bool empty = true;
};

/// Equal-width bins of `axis` over the observed range (or [range_lo, range_hi) when given),
/// with mean and standard error of `metric` per bin.
std::vector<StratBin> stratified_report(const std::vector<MetricRecord>& records, const std::string& axis,
                                        int bins, const std::string& metric = "dsc_opt",
                                        std::optional<std::pair<double, double>> range = std::nullopt);

/// Same binning over plain (measure, value) pairs.
std::vector<StratBin> stratify(const std::vector<std::pair<double, double>>& samples, int bins,
                               std::optional<std::pair<double, double>> range = std::nullopt);

std::string metric_csv(const std::vector<MetricRecord>& records);
std::string strat_csv(const std::string& axis, const std::vector<StratBin>& bins);

}  // namespace cfd
