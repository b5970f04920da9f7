#pragma once

// Glue shared by the command-line tool and the end-to-end checks: phantom
// cohorts with patient-level splits, and per-slice evaluation of anomaly maps.

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "cfd/data.hpp"
#include "cfd/guidance.hpp"
#include "cfd/metrics.hpp"

namespace cfd {

struct CohortConfig {
    int patients = 200;
    PhantomSpec phantom{};
    PreprocessConfig preprocess{};
    std::array<double, 3> ratios{0.7, 0.1, 0.2};
    std::uint64_t split_seed = 17;
};

struct Patient {
    std::string id;
    Volume image;  // preprocessed and normalized
    Volume mask;
};

struct Cohort {
    std::vector<Patient> patients;
    Split split;
    std::vector<SliceRecord> train, val, test;

    double unhealthy_fraction() const;
};

/// Patient i is drawn from Rng(derive_seed(phantom.seed, i)) and named P0000, P0001, ...
Patient make_patient(const CohortConfig& cfg, int index);
Cohort make_cohort(const CohortConfig& cfg);
/// Slices of the given patients, split into the partitions named by `split`.
void assign_slices(Cohort& cohort);

/// Unhealthy slices (label 2 with a mask) of a set.
std::vector<SliceRecord> unhealthy_slices(const std::vector<SliceRecord>& set);

using MapFn = std::function<Image(const SliceRecord&)>;

/// Metric records for each slice under the map produced by `fn`; lesion sizes normalized over the set.
std::vector<MetricRecord> evaluate_method(const std::vector<SliceRecord>& slices, const MapFn& fn);

/// Thresholding baseline as a binary score map.
Image threshold_map(const SliceRecord& r, double fraction = 0.41);

double mean_of(const std::vector<MetricRecord>& records, const std::string& metric);

/// Mean score inside the mask minus mean score outside.
double inside_minus_outside(const Image& scores, const Mask& mask);

struct SweepCell {
    int D = 0;
    double w = 0;
    double mean_dsc = 0;
    int n = 0;
};

struct SweepResult {
    std::vector<SweepCell> cells;  // D-major, grid order
    std::size_t best = 0;          // index of the selected cell
};

/// Mean optimal Dice of the counterfactual maps over the unhealthy `slices` for every (D, w) pair.
/// The latent for each (slice, D) is computed once and decoded for every w. Ties in the
/// argmax go to the smallest D, then the smallest w.
SweepResult run_sweep(const std::vector<SliceRecord>& slices, const NoiseFn& eps, const ScheduleTable& schedule,
                      const std::vector<int>& D_grid, const std::vector<double>& w_grid, int stride,
                      ClassLabel target = ClassLabel::Healthy);

/// Index of the selected cell under the tie rule.
std::size_t select_cell(const std::vector<SweepCell>& cells);

std::string sweep_csv(const SweepResult& r);

}  // namespace cfd
