#include "cfd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace cfd {

double Cohort::unhealthy_fraction() const {
    std::size_t n = 0, u = 0;
    for (const auto* set : {&train, &val, &test})
        for (const auto& r : *set) {
            ++n;
            u += r.label == 2;
        }
    return n ? static_cast<double>(u) / static_cast<double>(n) : 0.0;
}

Patient make_patient(const CohortConfig& cfg, int index) {
    char id[16];
    std::snprintf(id, sizeof id, "P%04d", index);
    Rng rng(derive_seed(cfg.phantom.seed, static_cast<std::uint64_t>(index)));
    Phantom ph = generate_phantom(cfg.phantom, rng, id);
    Patient p;
    p.id = id;
    p.image = preprocess_volume(ph.image, cfg.preprocess, false);
    p.mask = preprocess_volume(ph.mask, cfg.preprocess, true);
    p.image.patient_id = p.mask.patient_id = id;
    return p;
}

void assign_slices(Cohort& c) {
    const std::set<std::string> tr(c.split.train.begin(), c.split.train.end());
    const std::set<std::string> va(c.split.val.begin(), c.split.val.end());
    c.train.clear();
    c.val.clear();
    c.test.clear();
    for (const auto& p : c.patients) {
        auto recs = slices_of(p.image, &p.mask);
        auto& dst = tr.count(p.id) ? c.train : va.count(p.id) ? c.val : c.test;
        for (auto& r : recs) dst.push_back(std::move(r));
    }
}

Cohort make_cohort(const CohortConfig& cfg) {
    require(cfg.patients >= 1, "cohort needs at least one patient");
    Cohort c;
    c.patients.resize(cfg.patients);
    std::vector<std::string> ids;
    for (int i = 0; i < cfg.patients; ++i) {
        c.patients[i] = make_patient(cfg, i);
        ids.push_back(c.patients[i].id);
    }
    c.split = split_by_patient(ids, cfg.ratios, cfg.split_seed);
    assign_slices(c);
    return c;
}

std::vector<SliceRecord> unhealthy_slices(const std::vector<SliceRecord>& set) {
    std::vector<SliceRecord> out;
    for (const auto& r : set)
        if (r.label == 2 && r.mask) out.push_back(r);
    return out;
}

std::vector<MetricRecord> evaluate_method(const std::vector<SliceRecord>& slices, const MapFn& fn) {
    std::vector<MetricRecord> out;
    out.reserve(slices.size());
    for (const auto& s : slices) {
        require(s.mask.has_value(), "evaluation needs a ground-truth mask for " + s.id());
        out.push_back(evaluate_slice(s.id(), *s.mask, fn(s), s.pixels, s.raw_max));
    }
    normalize_lesion_sizes(out);
    return out;
}

Image threshold_map(const SliceRecord& r, double fraction) {
    const Mask m = threshold_baseline(r, fraction);
    Image out(m.height, m.width);
    for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = m.data[i] ? 1.0f : 0.0f;
    return out;
}

double mean_of(const std::vector<MetricRecord>& records, const std::string& metric) {
    double s = 0;
    int n = 0;
    for (const auto& r : records) {
        const double v = r.metric(metric);
        if (std::isnan(v)) continue;
        s += v;
        ++n;
    }
    return n ? s / n : std::nan("");
}

double inside_minus_outside(const Image& scores, const Mask& mask) {
    double in = 0, out = 0;
    std::size_t ni = 0, no = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data[i]) {
            in += scores.data[i];
            ++ni;
        } else {
            out += scores.data[i];
            ++no;
        }
    }
    require(ni > 0 && no > 0, "inside_minus_outside needs pixels on both sides of the mask");
    return in / ni - out / no;
}

std::size_t select_cell(const std::vector<SweepCell>& cells) {
    require(!cells.empty(), "sweep grid is empty");
    std::size_t best = 0;
    for (std::size_t i = 1; i < cells.size(); ++i) {
        const auto& a = cells[i];
        const auto& b = cells[best];
        if (a.mean_dsc > b.mean_dsc || (a.mean_dsc == b.mean_dsc && (a.D < b.D || (a.D == b.D && a.w < b.w))))
            best = i;
    }
    return best;
}

SweepResult run_sweep(const std::vector<SliceRecord>& slices, const NoiseFn& eps, const ScheduleTable& schedule,
                      const std::vector<int>& D_grid, const std::vector<double>& w_grid, int stride,
                      ClassLabel target) {
    require(!D_grid.empty() && !w_grid.empty(), "sweep grids must be nonempty");
    for (const auto& s : slices) require(s.mask.has_value(), "sweep slices need masks");
    // DSC is only scored where there is a lesion
    const auto scored = unhealthy_slices(slices);
    require(!scored.empty(), "sweep needs at least one unhealthy slice");
    SweepResult r;
    for (int D : D_grid) {
        std::vector<double> sums(w_grid.size(), 0.0);
        for (const auto& s : scored) {
            GuidanceConfig g;
            g.D = D;
            g.stride = stride;
            g.target_class = target;
            const SliceState latent = encode({s.pixels, 0, 0}, g, eps, schedule);
            for (std::size_t k = 0; k < w_grid.size(); ++k) {
                g.w = w_grid[k];
                const Image cf = decode(latent, g, eps, schedule).pixels;
                Image scores(cf.height, cf.width);
                for (std::size_t i = 0; i < cf.size(); ++i)
                    scores.data[i] = std::abs(s.pixels.data[i] - std::clamp(cf.data[i], 0.0f, 1.0f));
                sums[k] += optimal_dice(*s.mask, scores).dsc;
            }
        }
        for (std::size_t k = 0; k < w_grid.size(); ++k)
            r.cells.push_back({D, w_grid[k], sums[k] / static_cast<double>(scored.size()),
                               static_cast<int>(scored.size())});
    }
    r.best = select_cell(r.cells);
    return r;
}

std::string sweep_csv(const SweepResult& r) {
    std::string out = "D,w,mean_dsc,n,selected\n";
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
        const auto& c = r.cells[i];
        out += std::to_string(c.D) + "," + fmt9(c.w) + "," + fmt9(c.mean_dsc) + "," + std::to_string(c.n) + "," +
               (i == r.best ? "1" : "0") + "\n";
    }
    return out;
}

}  // namespace cfd
