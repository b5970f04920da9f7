// cfdiff command-line tool: phantom, train, counterfactual, evaluate, sweep.
//
// Every subcommand accepts --config <file.json>. Keys mirror the long flag names,
// either at top level or under an object named after the subcommand; flags given
// on the command line win. Exit codes: 0 ok, 1 usage, 2 data or schema error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "cfd/binary_io.hpp"
#include "cfd/manifest.hpp"
#include "cfd/pipeline.hpp"
#include "cfd/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace cfd;

namespace {

constexpr const char* kToolVersion = "cfdiff 0.1.0";

/// Data-side failure that maps to exit code 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- config merging

bool flag_present(const std::vector<std::string>& args, const std::string& key) {
    const std::string f = "--" + key;
    for (const auto& a : args)
        if (a == f || a.rfind(f + "=", 0) == 0) return true;
    return false;
}

std::string scalar_text(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
}

/// Returns argv with config-file values spliced in after the subcommand name.
std::vector<std::string> merge_config(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    if (args.size() < 2) return args;
    std::string path;
    for (std::size_t i = 2; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;
    json cfg;
    try {
        cfg = json::parse(io::read_text(path));
    } catch (const std::exception& e) {
        throw CLI::ValidationError("--config", std::string("cannot read config: ") + e.what());
    }
    if (!cfg.is_object()) throw CLI::ValidationError("--config", "config must be a JSON object");
    const std::string sub = args[1];
    const json& scope = cfg.contains(sub) && cfg[sub].is_object() ? cfg[sub] : cfg;
    std::vector<std::string> extra;
    for (const auto& [key, value] : scope.items()) {
        if (key == "config" || key.empty() || key[0] == '_' || value.is_object()) continue;
        if (flag_present(args, key)) continue;
        extra.push_back("--" + key);
        if (value.is_array()) {
            for (const auto& v : value) extra.push_back(scalar_text(v));
        } else {
            extra.push_back(scalar_text(value));
        }
    }
    args.insert(args.begin() + 2, extra.begin(), extra.end());
    return args;
}

std::string manifest_hash(const std::string& path) {
    const auto bytes = io::read_file(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

/// Resolved options of a subcommand plus provenance, in a form --config accepts back.
void write_snapshot(const CLI::App* sub, const std::string& dir, const json& inputs) {
    json opts = json::object();
    for (const CLI::Option* opt : sub->get_options()) {
        const auto& names = opt->get_lnames();
        if (names.empty() || names[0] == "help" || names[0] == "config") continue;
        if (opt->get_items_expected_max() > 1) {
            json arr = json::array();
            for (const auto& r : opt->results()) arr.push_back(r);
            opts[names[0]] = arr;
        } else {
            opts[names[0]] = opt->count() ? opt->results().back() : opt->get_default_str();
        }
    }
    json j;
    j[sub->get_name()] = opts;
    j["_tool"] = kToolVersion;
    j["_inputs"] = inputs;
    io::write_text((fs::path(dir) / "config.json").string(), j.dump(2) + "\n");
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
    std::vector<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::istringstream is(item);
        T v{};
        if (!(is >> v) || !is.eof()) throw ParameterError(what + ": cannot parse '" + item + "'");
        out.push_back(v);
    }
    return out;
}

template <typename T, std::size_t N>
std::array<T, N> parse_array(const std::string& text, const std::string& what) {
    const auto v = parse_list<T>(text, what);
    require(v.size() == N, what + " needs " + std::to_string(N) + " comma-separated values");
    std::array<T, N> a{};
    std::copy(v.begin(), v.end(), a.begin());
    return a;
}

void log(const std::string& msg) { std::cerr << msg << "\n"; }

// ---------------------------------------------------------------- phantom

struct PhantomOpts {
    std::string out;
    int patients = 20;
    std::uint64_t seed = 1, split_seed = 17;
    std::string ratios = "0.7,0.1,0.2";
    std::string dims = "96,96,144", spacing = "4,4,6";
    std::string target_spacing = "2,2,3", crop = "192,192,288", output = "64,64,96";
    double lesion_rate = PhantomSpec{}.lesion_rate;
    int max_lesions = PhantomSpec{}.max_lesions;
    std::string lesion_radius = "8,18";
    double healthy_fraction = PhantomSpec{}.healthy_patient_fraction;
    double noise = PhantomSpec{}.noise;
};

int cmd_phantom(const PhantomOpts& o, const CLI::App* sub) {
    CohortConfig cc;
    cc.patients = o.patients;
    cc.split_seed = o.split_seed;
    cc.ratios = parse_array<double, 3>(o.ratios, "--ratios");
    const auto d = parse_array<int, 3>(o.dims, "--dims");
    cc.phantom.nx = d[0];
    cc.phantom.ny = d[1];
    cc.phantom.nz = d[2];
    cc.phantom.spacing = parse_array<double, 3>(o.spacing, "--spacing");
    cc.phantom.seed = o.seed;
    cc.phantom.lesion_rate = o.lesion_rate;
    cc.phantom.max_lesions = o.max_lesions;
    cc.phantom.lesion_radius_mm = parse_array<double, 2>(o.lesion_radius, "--lesion-radius");
    cc.phantom.healthy_patient_fraction = o.healthy_fraction;
    cc.phantom.noise = o.noise;
    cc.preprocess.spacing = parse_array<double, 3>(o.target_spacing, "--target-spacing");
    cc.preprocess.crop = parse_array<int, 3>(o.crop, "--crop");
    cc.preprocess.output = parse_array<int, 3>(o.output, "--output");
    require(cc.patients >= 1, "--patients must be >= 1");
    cc.phantom.validate();

    const fs::path out(o.out);
    fs::create_directories(out / "volumes");
    std::vector<ManifestRow> rows;
    std::vector<std::string> ids;
    std::vector<Patient> patients;
    for (int i = 0; i < cc.patients; ++i) {
        Patient p = make_patient(cc, i);
        save_volume(p.image, (out / "volumes" / (p.id + ".json")).string());
        save_volume(p.mask, (out / "volumes" / (p.id + "_mask.json")).string());
        ids.push_back(p.id);
        // keep only the label information
        p.image.voxels.clear();
        patients.push_back(std::move(p));
    }
    const Split split = split_by_patient(ids, cc.ratios, cc.split_seed);
    std::map<std::string, std::string> part;
    for (const auto& id : split.train) part[id] = "train";
    for (const auto& id : split.val) part[id] = "val";
    for (const auto& id : split.test) part[id] = "test";
    std::size_t unhealthy = 0;
    std::map<std::string, std::size_t> per_split;
    for (const auto& p : patients) {
        for (int z = 0; z < p.mask.nz; ++z) {
            bool any = false;
            for (int y = 0; y < p.mask.ny && !any; ++y)
                for (int x = 0; x < p.mask.nx && !any; ++x) any = p.mask.at(x, y, z) > 0.5f;
            rows.push_back({p.id, z, any ? 2 : 1, part[p.id], "volumes/" + p.id + ".json",
                            "volumes/" + p.id + "_mask.json"});
            unhealthy += any;
            ++per_split[part[p.id]];
        }
    }
    const std::string manifest = (out / "manifest.csv").string();
    write_manifest(rows, manifest);

    const double frac = static_cast<double>(unhealthy) / static_cast<double>(rows.size());
    const auto band = cc.phantom.unhealthy_slice_band;
    json s;
    s["patients"] = cc.patients;
    s["slices"] = rows.size();
    s["unhealthy_slices"] = unhealthy;
    s["unhealthy_fraction"] = std::stod(fmt9(frac));
    s["band"] = {band[0], band[1]};
    s["in_band"] = frac >= band[0] && frac <= band[1];
    s["split_patients"] = {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}};
    s["split_slices"] = {{"train", per_split["train"]}, {"val", per_split["val"]}, {"test", per_split["test"]}};
    io::write_text((out / "summary.json").string(), s.dump(2) + "\n");
    write_snapshot(sub, o.out, {{"manifest_hash", manifest_hash(manifest)}});
    log("wrote " + std::to_string(rows.size()) + " slices from " + std::to_string(cc.patients) +
        " patients; unhealthy fraction " + fmt9(frac));
    if (!s["in_band"].get<bool>())
        log("warning: unhealthy fraction outside [" + fmt9(band[0]) + ", " + fmt9(band[1]) + "]");
    return 0;
}

// ---------------------------------------------------------------- train

struct TrainOpts {
    std::string manifest, out;
    std::string variant = "011";
    int channels = 64, head_channels = 16, embed_dim = 64, group_channels = 8, ff_mult = 4, blocks = 1;
    double lr = TrainingConfig{}.learning_rate;
    int epochs = TrainingConfig{}.epochs, batch = TrainingConfig{}.batch_size, max_batches = 0, T = 1000;
    double p_uncond = TrainingConfig{}.p_uncond;
    std::uint64_t seed = 0;
    bool augment = true;
    double max_translation = AugmentConfig{}.max_translation;
    double clip = 0;
    int val_limit = 0;
    bool resume = false;
};

int cmd_train(const TrainOpts& o, const CLI::App* sub) {
    auto train = load_slices(o.manifest, "train");
    auto val = load_slices(o.manifest, "val");
    if (train.empty()) throw DataError("manifest has no train slices");
    if (val.empty()) throw DataError("manifest has no val slices");
    if (o.val_limit > 0 && static_cast<int>(val.size()) > o.val_limit) val.resize(o.val_limit);

    DenoiserConfig dc;
    dc.channels = o.channels;
    dc.head_channels = o.head_channels;
    dc.embed_dim = o.embed_dim;
    dc.group_channels = o.group_channels;
    dc.ff_mult = o.ff_mult;
    dc.blocks_per_level = o.blocks;
    dc.variant = AttentionVariant::parse(o.variant);
    dc.height = train.front().pixels.height;
    dc.width = train.front().pixels.width;
    dc.validate();

    TrainingConfig tc;
    tc.learning_rate = o.lr;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch;
    tc.max_batches_per_epoch = o.max_batches;
    tc.T = o.T;
    tc.p_uncond = o.p_uncond;
    tc.seed = o.seed;
    tc.augment.enabled = o.augment;
    tc.augment.max_translation = o.max_translation;
    tc.clip_grad_norm = o.clip;
    tc.validate();

    const fs::path out(o.out);
    fs::create_directories(out / "checkpoints");
    const std::string state_path = (out / "state.bin").string();
    TrainState state;
    if (o.resume && fs::exists(state_path)) {
        state = load_train_state(state_path);
        if (!(state.params.config == dc))
            throw SchemaError("saved training state was built for a different model config");
        log("resuming at epoch " + std::to_string(state.epoch));
    } else {
        state = make_train_state(dc, derive_seed(tc.seed, 0x494e4954u));
    }
    write_snapshot(sub, o.out, {{"manifest", o.manifest}, {"manifest_hash", manifest_hash(o.manifest)}});
    const auto vset = make_validation_set(val, tc.T, derive_seed(tc.seed, 0x56414cu));

    auto write_losses = [&](const TrainState& s) {
        std::string csv = "epoch,train_mse,val_mse\n";
        for (const auto& h : s.history)
            csv += std::to_string(h.epoch) + "," + fmt9(h.train_mse) + "," + fmt9(h.val_mse) + "\n";
        io::write_text((out / "loss.csv").string(), csv);
    };
    const auto t0 = std::chrono::steady_clock::now();
    try {
        fit(state, train, vset, tc, [&](const TrainState& s, const EpochRecord& r) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04d.ckpt", r.epoch);
            save_checkpoint(s.params, (out / "checkpoints" / name).string());
            save_train_state(s, state_path);
            write_losses(s);
            if (s.best_epoch == r.epoch) {
                save_checkpoint(s.best_params, (out / "best.ckpt").string());
                json b;
                b["epoch"] = s.best_epoch;
                b["checkpoint"] = std::string("checkpoints/") + name;
                b["val_mse"] = fmt9(s.best_val_mse);
                io::write_text((out / "best.json").string(), b.dump(2) + "\n");
            }
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log("epoch " + std::to_string(r.epoch) + " train " + fmt9(r.train_mse) + " val " + fmt9(r.val_mse) +
                " (" + std::to_string(static_cast<int>(secs)) + " s)");
        });
    } catch (const NonFiniteLoss& e) {
        json d;
        d["error"] = e.what();
        d["t"] = e.t;
        d["label"] = e.label;
        d["max_abs_xt"] = e.max_abs_xt;
        d["epoch"] = state.epoch + 1;
        d["step"] = state.step;
        d["hint"] = "rerun with --clip 1.0 or a lower --lr";
        io::write_text((out / "nonfinite.json").string(), d.dump(2) + "\n");
        throw;
    }
    write_losses(state);
    log("best epoch " + std::to_string(state.best_epoch) + " val " + fmt9(state.best_val_mse));
    return 0;
}

// ---------------------------------------------------------------- counterfactual

DenoiserParams load_model(const std::string& path) {
    const fs::path p(path);
    return load_checkpoint(fs::is_directory(p) ? (p / "best.ckpt").string() : path);
}

void check_model_matches(const DenoiserParams& params, const std::vector<SliceRecord>& slices,
                         const std::string& variant) {
    if (!variant.empty() && !(params.config.variant == AttentionVariant::parse(variant)))
        throw SchemaError("checkpoint variant " + params.config.variant.str() + " does not match --variant " + variant);
    for (const auto& s : slices)
        if (s.pixels.height != params.config.height || s.pixels.width != params.config.width)
            throw SchemaError("checkpoint expects " + std::to_string(params.config.height) + "x" +
                              std::to_string(params.config.width) + " slices, manifest has " +
                              std::to_string(s.pixels.height) + "x" + std::to_string(s.pixels.width));
}

std::string map_stem(const SliceRecord& s) { return s.patient_id + "_" + std::to_string(s.slice_index); }

struct CfOpts {
    std::string manifest, checkpoint, out, split = "test", variant;
    int D = 400, stride = 1, target = 1, limit = 0;
    double w = 3.0;
    bool pgm = false;
};

int cmd_counterfactual(const CfOpts& o, const CLI::App* sub) {
    const auto all = load_slices(o.manifest, o.split);
    std::vector<SliceRecord> slices;
    std::size_t skipped = 0;
    for (const auto& s : all) {
        if (s.label == 2 && s.mask) {
            slices.push_back(s);
        } else {
            ++skipped;
        }
    }
    if (o.limit > 0 && static_cast<int>(slices.size()) > o.limit) slices.resize(o.limit);
    const DenoiserParams params = load_model(o.checkpoint);
    check_model_matches(params, slices, o.variant);
    GuidanceConfig g;
    g.D = o.D;
    g.w = o.w;
    g.stride = o.stride;
    g.target_class = class_label_from_int(o.target);
    const ScheduleTable schedule = make_linear_schedule(1000);
    g.validate(schedule.steps());

    const fs::path out(o.out);
    fs::create_directories(out / "maps");
    write_snapshot(sub, o.out, {{"manifest", o.manifest}, {"manifest_hash", manifest_hash(o.manifest)},
                                {"checkpoint_hash", hex64(checkpoint_hash(params))}});
    const Denoiser<float> net(params.config);
    const NoiseFn eps = denoiser_fn(net, params);
    std::string index = "slice_id,stem\n";
    for (const auto& s : slices) {
        const AnomalyMap m = anomaly_pipeline(s.pixels, g, eps, schedule, s.id(), params.config.variant);
        write_anomaly_map(m, (out / "maps" / map_stem(s)).string(), checkpoint_hash(params), o.pgm);
        index += s.id() + ",maps/" + map_stem(s) + "\n";
    }
    io::write_text((out / "maps.csv").string(), index);
    log("wrote " + std::to_string(slices.size()) + " maps; skipped " + std::to_string(skipped) + " healthy slices");
    return 0;
}

// ---------------------------------------------------------------- evaluate

struct EvalOpts {
    std::string manifest, out, split = "test";
    std::vector<std::string> maps;  // name=dir
    bool baseline = false;
    double threshold = 0.41;
    int bins = 5;
    double alpha = 0.05;
    int comparisons = 0;
};

std::map<std::string, std::string> read_map_index(const fs::path& dir) {
    std::istringstream in(io::read_text((dir / "maps.csv").string()));
    std::string line;
    std::getline(in, line);
    std::map<std::string, std::string> idx;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        idx[line.substr(0, comma)] = (dir / line.substr(comma + 1)).string();
    }
    return idx;
}

int cmd_evaluate(const EvalOpts& o, const CLI::App* sub) {
    require(o.baseline || !o.maps.empty(), "select at least one of --maps or --baseline");
    require(o.bins >= 1, "--bins must be >= 1");
    const auto slices = unhealthy_slices(load_slices(o.manifest, o.split));
    if (slices.empty()) throw DataError("no unhealthy slices in split '" + o.split + "'");

    std::vector<std::pair<std::string, std::vector<MetricRecord>>> methods;
    for (const auto& spec : o.maps) {
        const auto eq = spec.find('=');
        const std::string name = eq == std::string::npos ? fs::path(spec).filename().string() : spec.substr(0, eq);
        const fs::path dir = eq == std::string::npos ? spec : spec.substr(eq + 1);
        const auto idx = read_map_index(dir);
        std::vector<std::string> missing;
        for (const auto& s : slices)
            if (!idx.count(s.id())) missing.push_back(s.id());
        if (!missing.empty()) {
            std::string list;
            for (std::size_t i = 0; i < missing.size(); ++i) list += (i ? ", " : "") + missing[i];
            throw DataError("method '" + name + "' has no map for slices: " + list);
        }
        methods.emplace_back(name, evaluate_method(slices, [&](const SliceRecord& s) {
                                 const LoadedMap m = read_anomaly_map(idx.at(s.id()));
                                 if (!m.scores.same_shape(s.pixels)) throw DataError("map shape differs for " + s.id());
                                 return m.scores;
                             }));
    }
    if (o.baseline)
        methods.emplace_back("threshold", evaluate_method(slices, [&](const SliceRecord& s) {
                                 return threshold_map(s, o.threshold);
                             }));

    const fs::path out(o.out);
    fs::create_directories(out);
    write_snapshot(sub, o.out, {{"manifest", o.manifest}, {"manifest_hash", manifest_hash(o.manifest)}});
    json summary = json::object();
    for (const auto& [name, recs] : methods) {
        io::write_text((out / ("metrics_" + name + ".csv")).string(), metric_csv(recs));
        for (const char* axis : {"normalized_size", "suv_mean", "suv_sum"})
            io::write_text((out / ("strat_" + name + "_" + axis + ".csv")).string(),
                           strat_csv(axis, stratified_report(recs, axis, o.bins)));
        json m;
        for (const char* metric : {"dsc_opt", "hd95", "auprc", "sensitivity"}) m[metric] = fmt9(mean_of(recs, metric));
        m["slices"] = recs.size();
        summary[name] = m;
    }

    const int pairs = static_cast<int>(methods.size() * (methods.size() - 1) / 2);
    const int comparisons = o.comparisons > 0 ? o.comparisons : std::max(1, pairs);
    const double alpha_corr = bonferroni(o.alpha, comparisons);
    std::string csv = "method_a,method_b,metric,n,w_plus,p_value,exact,degenerate,alpha_corrected,significant\n";
    for (std::size_t a = 0; a < methods.size(); ++a)
        for (std::size_t b = a + 1; b < methods.size(); ++b)
            for (const char* metric : {"dsc_opt", "hd95", "auprc"}) {
                std::vector<double> va, vb;
                for (std::size_t i = 0; i < slices.size(); ++i) {
                    const double x = methods[a].second[i].metric(metric), y = methods[b].second[i].metric(metric);
                    if (std::isnan(x) || std::isnan(y)) continue;
                    va.push_back(x);
                    vb.push_back(y);
                }
                std::string row = methods[a].first + "," + methods[b].first + "," + metric + ",";
                try {
                    const auto w = wilcoxon_signed_rank(va, vb);
                    row += std::to_string(w.n) + "," + fmt9(w.w_plus) + "," + fmt9(w.p_value) + "," +
                           (w.exact ? "1" : "0") + "," + (w.degenerate ? "1" : "0") + "," + fmt9(alpha_corr) + "," +
                           (w.p_value < alpha_corr ? "1" : "0");
                } catch (const ParameterError&) {
                    // too few non-zero differences for the test
                    row += std::to_string(va.size()) + ",,,,," + fmt9(alpha_corr) + ",0";
                }
                csv += row + "\n";
            }
    io::write_text((out / "wilcoxon.csv").string(), csv);
    summary["_comparisons"] = comparisons;
    summary["_alpha_corrected"] = fmt9(alpha_corr);
    io::write_text((out / "summary.json").string(), summary.dump(2) + "\n");
    for (const auto& [name, recs] : methods) log(name + ": mean dsc_opt " + fmt9(mean_of(recs, "dsc_opt")));
    return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepOpts {
    std::string manifest, checkpoint, out, split = "val";
    std::string D_grid = "100,200,300,400", w_grid = "1,2,3,4";
    int stride = 20, limit = 0;
};

int cmd_sweep(const SweepOpts& o, const CLI::App* sub) {
    const auto Ds = parse_list<int>(o.D_grid, "--D-grid");
    const auto ws = parse_list<double>(o.w_grid, "--w-grid");
    require(!Ds.empty() && !ws.empty(), "sweep grids must be nonempty");
    auto slices = unhealthy_slices(load_slices(o.manifest, o.split));
    if (slices.empty()) throw DataError("no unhealthy slices in split '" + o.split + "'");
    if (o.limit > 0 && static_cast<int>(slices.size()) > o.limit) slices.resize(o.limit);
    const DenoiserParams params = load_model(o.checkpoint);
    check_model_matches(params, slices, "");
    const ScheduleTable schedule = make_linear_schedule(1000);
    for (int D : Ds) require(D >= 0 && D <= schedule.steps(), "D grid values must lie in [0, 1000]");
    for (double w : ws) require(w >= 0, "w grid values must be >= 0");

    const fs::path out(o.out);
    fs::create_directories(out);
    write_snapshot(sub, o.out, {{"manifest", o.manifest}, {"manifest_hash", manifest_hash(o.manifest)},
                                {"checkpoint_hash", hex64(checkpoint_hash(params))}});
    const Denoiser<float> net(params.config);
    const auto r = run_sweep(slices, denoiser_fn(net, params), schedule, Ds, ws, o.stride);
    io::write_text((out / "sweep.csv").string(), sweep_csv(r));
    const auto& best = r.cells[r.best];
    const bool has_default =
        std::find(Ds.begin(), Ds.end(), 400) != Ds.end() && std::find(ws.begin(), ws.end(), 3.0) != ws.end();
    json s;
    s["D"] = best.D;
    s["w"] = best.w;
    s["mean_dsc"] = fmt9(best.mean_dsc);
    s["slices"] = best.n;
    s["documented_default"] = {{"D", 400}, {"w", 3.0}, {"in_grid", has_default}};
    io::write_text((out / "selected.json").string(), s.dump(2) + "\n");
    log("selected D=" + std::to_string(best.D) + " w=" + fmt9(best.w) + " mean dsc " + fmt9(best.mean_dsc));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Counterfactual diffusion anomaly localization on slice images"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    std::string config;

    PhantomOpts po;
    auto* ph = app.add_subcommand("phantom", "generate a synthetic cohort, its volumes and a manifest");
    ph->add_option("--config", config, "JSON config file");
    ph->add_option("--out", po.out, "output directory")->required();
    ph->add_option("--patients", po.patients, "number of patients");
    ph->add_option("--seed", po.seed, "phantom seed");
    ph->add_option("--split-seed", po.split_seed, "patient split seed");
    ph->add_option("--ratios", po.ratios, "train,val,test ratios");
    ph->add_option("--dims", po.dims, "phantom grid nx,ny,nz");
    ph->add_option("--spacing", po.spacing, "phantom voxel spacing in mm");
    ph->add_option("--target-spacing", po.target_spacing, "resampling spacing in mm");
    ph->add_option("--crop", po.crop, "central crop after resampling");
    ph->add_option("--output", po.output, "final grid after resizing");
    ph->add_option("--lesion-rate", po.lesion_rate, "mean lesions per unhealthy patient");
    ph->add_option("--max-lesions", po.max_lesions, "lesion cap per patient");
    ph->add_option("--lesion-radius", po.lesion_radius, "lesion radius range in mm");
    ph->add_option("--healthy-fraction", po.healthy_fraction, "fraction of lesion-free patients");
    ph->add_option("--noise", po.noise, "multiplicative speckle level");

    TrainOpts to;
    auto* tr = app.add_subcommand("train", "train the class-conditional denoiser");
    tr->add_option("--config", config, "JSON config file");
    tr->add_option("--manifest", to.manifest, "dataset manifest")->required();
    tr->add_option("--out", to.out, "run directory")->required();
    tr->add_option("--variant", to.variant, "attention levels, e.g. 000, 001, 011");
    tr->add_option("--channels", to.channels, "channels per level");
    tr->add_option("--head-channels", to.head_channels, "attention head width");
    tr->add_option("--embed-dim", to.embed_dim, "class embedding size");
    tr->add_option("--group-channels", to.group_channels, "channels per norm group");
    tr->add_option("--ff-mult", to.ff_mult, "feed-forward width multiplier");
    tr->add_option("--blocks", to.blocks, "ResNet blocks per level");
    tr->add_option("--lr", to.lr, "Adam learning rate");
    tr->add_option("--epochs", to.epochs, "total epochs");
    tr->add_option("--batch", to.batch, "batch size");
    tr->add_option("--max-batches", to.max_batches, "batches per epoch, 0 for a full pass");
    tr->add_option("--T", to.T, "diffusion steps");
    tr->add_option("--p-uncond", to.p_uncond, "label dropout probability");
    tr->add_option("--seed", to.seed, "training seed");
    tr->add_option("--augment", to.augment, "enable augmentation");
    tr->add_option("--max-translation", to.max_translation, "translation range in pixels");
    tr->add_option("--clip", to.clip, "gradient norm clip, 0 disables");
    tr->add_option("--val-limit", to.val_limit, "cap on validation slices, 0 for all");
    tr->add_option("--resume", to.resume, "continue from state.bin in the run directory");

    CfOpts co;
    auto* cf = app.add_subcommand("counterfactual", "write healthy counterfactuals and anomaly maps");
    cf->add_option("--config", config, "JSON config file");
    cf->add_option("--manifest", co.manifest, "dataset manifest")->required();
    cf->add_option("--checkpoint", co.checkpoint, "checkpoint file or run directory")->required();
    cf->add_option("--out", co.out, "output directory")->required();
    cf->add_option("--split", co.split, "manifest split to process");
    cf->add_option("--variant", co.variant, "expected attention variant of the checkpoint");
    cf->add_option("--D", co.D, "noise level");
    cf->add_option("--w", co.w, "guidance scale");
    cf->add_option("--stride", co.stride, "DDIM timestep stride");
    cf->add_option("--target", co.target, "target class (1 healthy)");
    cf->add_option("--limit", co.limit, "cap on slices, 0 for all");
    cf->add_option("--pgm", co.pgm, "also write PGM images");

    EvalOpts eo;
    auto* ev = app.add_subcommand("evaluate", "score anomaly maps and the thresholding baseline");
    ev->add_option("--config", config, "JSON config file");
    ev->add_option("--manifest", eo.manifest, "dataset manifest")->required();
    ev->add_option("--out", eo.out, "report directory")->required();
    ev->add_option("--maps", eo.maps, "name=dir of a counterfactual output (repeatable)");
    ev->add_option("--baseline", eo.baseline, "include the SUVmax-fraction threshold");
    ev->add_option("--threshold", eo.threshold, "baseline fraction of the maximum");
    ev->add_option("--split", eo.split, "manifest split to evaluate");
    ev->add_option("--bins", eo.bins, "stratification bins");
    ev->add_option("--alpha", eo.alpha, "family-wise significance level");
    ev->add_option("--comparisons", eo.comparisons, "Bonferroni divisor, 0 for the pairs present");

    SweepOpts so;
    auto* sw = app.add_subcommand("sweep", "grid search over noise level and guidance scale");
    sw->add_option("--config", config, "JSON config file");
    sw->add_option("--manifest", so.manifest, "dataset manifest")->required();
    sw->add_option("--checkpoint", so.checkpoint, "checkpoint file or run directory")->required();
    sw->add_option("--out", so.out, "output directory")->required();
    sw->add_option("--split", so.split, "manifest split to use");
    sw->add_option("--D-grid", so.D_grid, "comma-separated noise levels");
    sw->add_option("--w-grid", so.w_grid, "comma-separated guidance scales");
    sw->add_option("--stride", so.stride, "DDIM timestep stride");
    sw->add_option("--limit", so.limit, "cap on slices, 0 for all");

    try {
        const auto args = merge_config(argc, argv);
        std::vector<const char*> cargs;
        for (const auto& a : args) cargs.push_back(a.c_str());
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::Error& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*ph) return cmd_phantom(po, ph);
        if (*tr) return cmd_train(to, tr);
        if (*cf) return cmd_counterfactual(co, cf);
        if (*ev) return cmd_evaluate(eo, ev);
        if (*sw) return cmd_sweep(so, sw);
    } catch (const ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
