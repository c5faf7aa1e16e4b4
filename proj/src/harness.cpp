#include "fodshift/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "fodshift/csd.hpp"
#include "fodshift/rng.hpp"

namespace fodshift {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void say(const Logger& log, const std::string& msg) {
    if (log) log(msg);
}

struct Cohort {
    SitePreset preset;
    std::vector<Subject> subjects;
    std::vector<int> six;
    std::vector<const Subject*> train, val, test;
};

Cohort make_cohort(const ExperimentSpec& spec, const std::string& site, const std::string& label,
                   std::pair<double, double> ages) {
    CohortConfig cfg;
    cfg.preset = preset_by_name(site);
    cfg.label = label;
    cfg.n_subjects = spec.n_subjects;
    cfg.age_lo = ages.first;
    cfg.age_hi = ages.second;
    cfg.grid = spec.grid;
    cfg.seed = derive_seed(spec.seed, "cohort/" + label);
    cfg.lmax = spec.lmax;

    Cohort c;
    c.preset = cfg.preset;
    c.subjects = build_cohort(cfg);
    c.six = six_direction_indices(c.subjects.front().gradients, c.preset.protocol.six_direction_b);
    const SplitSizes sz = split_sizes(spec.n_subjects, spec.split);
    for (int i = 0; i < spec.n_subjects; ++i) {
        const Subject* s = &c.subjects[static_cast<std::size_t>(i)];
        if (i < sz.train) c.train.push_back(s);
        else if (i < sz.train + sz.val) c.val.push_back(s);
        else c.test.push_back(s);
    }
    return c;
}

std::vector<std::string> ids_of(std::span<const Subject* const> subjects) {
    std::vector<std::string> ids;
    for (const auto* s : subjects) ids.push_back(s->id);
    return ids;
}

std::vector<const Subject*> first_n(std::span<const Subject* const> subjects, int n) {
    return {subjects.begin(), subjects.begin() + n};
}

template <class... Spans>
std::vector<std::string> concat_ids(const Spans&... groups) {
    std::vector<std::string> out;
    (
        [&] {
            const auto ids = ids_of(groups);
            out.insert(out.end(), ids.begin(), ids.end());
        }(),
        ...);
    return out;
}

TrainResult train_model(const ExperimentSpec& spec, const std::string& name, std::span<const Subject* const> train_set,
                        std::span<const Subject* const> val_set, std::span<const int> six) {
    const EstimatorModel init = make_estimator(derive_seed(spec.seed, "init/" + name), spec.hidden, spec.dropout, spec.lmax);
    TrainConfig cfg = spec.train;
    cfg.seed = derive_seed(derive_seed(spec.seed, "train/" + name), spec.train.seed);
    return train(init, make_dataset(train_set, six), make_dataset(val_set, six), cfg);
}

TrainResult finetune_model(const ExperimentSpec& spec, const std::string& name, const EstimatorModel& model,
                           std::span<const Subject* const> target, std::span<const int> six) {
    TrainConfig cfg = spec.finetune;
    cfg.seed = derive_seed(derive_seed(spec.seed, "finetune/" + name), spec.finetune.seed);
    return fine_tune(model, make_dataset(target, six), cfg);
}

MetricsReport evaluate_model(const ExperimentSpec& spec, const EstimatorModel& model,
                             std::span<const Subject* const> test, std::span<const int> six) {
    std::vector<MetricsReport> reports;
    for (const auto* s : test) reports.push_back(evaluate_fods(predict_volume(model, *s, six), s->gt_fod, s->wm_mask, spec.eval));
    return pool_reports(reports);
}

MetricsReport evaluate_mom(const ExperimentSpec& spec, const EstimatorModel& model, const MomMapping& mapping,
                           std::span<const Subject* const> test, std::span<const int> six) {
    std::vector<MetricsReport> reports;
    for (const auto* s : test) {
        const Subject h = harmonize_subject(*s, six, mapping, spec.mom.floor_at_zero);
        reports.push_back(evaluate_fods(predict_volume(model, h, six), s->gt_fod, s->wm_mask, spec.eval));
    }
    return pool_reports(reports);
}

RunRecord new_record(const ExperimentSpec& spec) {
    spec.validate();
    RunRecord r;
    r.kind = to_string(spec.kind);
    r.spec_hash = spec_hash(spec);
    r.spec = spec_to_json(spec);
    r.spec.erase("output_dir");
    return r;
}

std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_from(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

json pair_json(const std::pair<double, double>& p) { return json::array({p.first, p.second}); }

}  // namespace

// ---- names ----

std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::IntraBaseline: return "intra_baseline";
        case ExperimentKind::AgeSplit: return "age_split";
        case ExperimentKind::InterSite: return "inter_site";
    }
    return "?";
}

std::string to_string(Method m) {
    switch (m) {
        case Method::ControlCross: return "control_cross";
        case Method::ControlSelf: return "control_self";
        case Method::Mom: return "mom";
        case Method::Finetune: return "finetune";
        case Method::ScratchAblation: return "scratch_ablation";
    }
    return "?";
}

ExperimentKind experiment_kind_from_string(std::string_view s) {
    for (auto k : {ExperimentKind::IntraBaseline, ExperimentKind::AgeSplit, ExperimentKind::InterSite})
        if (to_string(k) == s) return k;
    throw InvalidArgument("unknown experiment kind '" + std::string(s) + "'");
}

Method method_from_string(std::string_view s) {
    for (auto m : {Method::ControlCross, Method::ControlSelf, Method::Mom, Method::Finetune, Method::ScratchAblation})
        if (to_string(m) == s) return m;
    throw InvalidArgument("unknown method '" + std::string(s) + "'");
}

// ---- spec ----

SplitSizes split_sizes(int n, const SplitFractions& f) {
    SplitSizes s;
    s.val = static_cast<int>(std::floor(n * f.val + 1e-9));
    s.test = static_cast<int>(std::floor(n * f.test + 1e-9));
    s.train = n - s.val - s.test;
    return s;
}

bool ExperimentSpec::has_method(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

void ExperimentSpec::validate() const {
    preset_by_name(source_site);
    preset_by_name(target_site);
    if (split.train < 0 || split.val < 0 || split.test < 0 || std::abs(split.train + split.val + split.test - 1.0) > 1e-9)
        throw InvalidArgument("split fractions must be non-negative and sum to 1");
    if (grid.nx <= 0 || grid.ny <= 0 || grid.nz <= 0) throw InvalidArgument("grid dimensions must be positive");
    const SplitSizes sz = split_sizes(n_subjects, split);
    if (sz.train < 1 || sz.val < 1 || sz.test < 1)
        throw InvalidArgument("every split needs at least one subject; have " + std::to_string(sz.train) + "/" +
                              std::to_string(sz.val) + "/" + std::to_string(sz.test));
    if (kind == ExperimentKind::InterSite) {
        if (methods.empty()) throw InvalidArgument("no methods requested");
        for (int n : n_target_subjects)
            if (n < 1 || n > sz.train)
                throw InvalidArgument("n_target_subjects " + std::to_string(n) + " outside [1, " + std::to_string(sz.train) + "]");
        if (has_method(Method::ScratchAblation) && (scratch_subjects < 1 || scratch_subjects > sz.train))
            throw InvalidArgument("scratch_subjects outside the target training split");
    }
    if (kind == ExperimentKind::AgeSplit && (age_finetune_subjects < 1 || age_finetune_subjects > sz.train))
        throw InvalidArgument("age_finetune_subjects outside the training split");
    for (const auto& ages : {young_ages, old_ages})
        if (ages && !(ages->second >= ages->first)) throw InvalidArgument("age window is reversed");
    if (hidden.empty()) throw InvalidArgument("need at least one hidden layer");
    for (int h : hidden)
        if (h < 1) throw InvalidArgument("hidden widths must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must lie in [0, 1)");
    if (lmax < 2 || lmax % 2) throw InvalidArgument("lmax must be even and >= 2");
    train.validate();
    finetune.validate();
}

json spec_to_json(const ExperimentSpec& s) {
    json methods = json::array();
    for (auto m : s.methods) methods.push_back(to_string(m));
    json j{
        {"kind", to_string(s.kind)},
        {"source_site", s.source_site},
        {"target_site", s.target_site},
        {"n_subjects", s.n_subjects},
        {"grid", {s.grid.nx, s.grid.ny, s.grid.nz}},
        {"split", {{"train", s.split.train}, {"val", s.split.val}, {"test", s.split.test}}},
        {"n_target_subjects", s.n_target_subjects},
        {"methods", methods},
        {"age_finetune_subjects", s.age_finetune_subjects},
        {"scratch_subjects", s.scratch_subjects},
        {"gold_standard", s.gold_standard},
        {"seed", s.seed},
        {"train", train_config_to_json(s.train)},
        {"finetune", train_config_to_json(s.finetune)},
        {"hidden", s.hidden},
        {"dropout", s.dropout},
        {"lmax", s.lmax},
        {"mom",
         {{"sigma_vox", s.mom.sigma_vox},
          {"eps", s.mom.eps},
          {"alpha_min", s.mom.alpha_min},
          {"alpha_max", s.mom.alpha_max},
          {"floor_at_zero", s.mom.floor_at_zero}}},
        {"eval",
         {{"abs_threshold", s.eval.peaks.abs_threshold},
          {"min_separation_deg", s.eval.peaks.min_separation_deg},
          {"max_peaks", s.eval.peaks.max_peaks},
          {"match_gate_deg", s.eval.match_gate_deg},
          {"tessellation_level", s.eval.tessellation_level}}},
        {"output_dir", s.output_dir},
    };
    if (s.young_ages) j["young_ages"] = pair_json(*s.young_ages);
    if (s.old_ages) j["old_ages"] = pair_json(*s.old_ages);
    return j;
}

ExperimentSpec spec_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("experiment spec must be a JSON object");
    ExperimentSpec s;
    const auto ages = [](const json& v) {
        const auto a = v.get<std::vector<double>>();
        if (a.size() != 2) throw InvalidArgument("age windows need two values");
        return std::make_pair(a[0], a[1]);
    };
    const auto sub_object = [](const json& v, const std::string& key, std::initializer_list<const char*> allowed) {
        if (!v.is_object()) throw InvalidArgument("'" + key + "' must be an object");
        for (const auto& [k, _] : v.items())
            if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }))
                throw InvalidArgument("unknown key '" + key + "." + k + "'");
    };
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "kind") s.kind = experiment_kind_from_string(v.get<std::string>());
            else if (key == "source_site") s.source_site = v.get<std::string>();
            else if (key == "target_site") s.target_site = v.get<std::string>();
            else if (key == "n_subjects") s.n_subjects = v.get<int>();
            else if (key == "grid") {
                const auto g = v.get<std::vector<int>>();
                if (g.size() != 3) throw InvalidArgument("grid needs three values");
                s.grid = Dims{g[0], g[1], g[2]};
            } else if (key == "split") {
                sub_object(v, key, {"train", "val", "test"});
                s.split.train = v.value("train", s.split.train);
                s.split.val = v.value("val", s.split.val);
                s.split.test = v.value("test", s.split.test);
            } else if (key == "n_target_subjects") s.n_target_subjects = v.get<std::vector<int>>();
            else if (key == "methods") {
                s.methods.clear();
                for (const auto& m : v) s.methods.push_back(method_from_string(m.get<std::string>()));
            } else if (key == "age_finetune_subjects") s.age_finetune_subjects = v.get<int>();
            else if (key == "scratch_subjects") s.scratch_subjects = v.get<int>();
            else if (key == "gold_standard") s.gold_standard = v.get<bool>();
            else if (key == "young_ages") s.young_ages = ages(v);
            else if (key == "old_ages") s.old_ages = ages(v);
            else if (key == "seed") s.seed = v.get<std::uint64_t>();
            else if (key == "train") s.train = train_config_from_json(v, s.train);
            else if (key == "finetune") s.finetune = train_config_from_json(v, s.finetune);
            else if (key == "hidden") s.hidden = v.get<std::vector<int>>();
            else if (key == "dropout") s.dropout = v.get<double>();
            else if (key == "lmax") s.lmax = v.get<int>();
            else if (key == "mom") {
                sub_object(v, key, {"sigma_vox", "eps", "alpha_min", "alpha_max", "floor_at_zero"});
                s.mom.sigma_vox = v.value("sigma_vox", s.mom.sigma_vox);
                s.mom.eps = v.value("eps", s.mom.eps);
                s.mom.alpha_min = v.value("alpha_min", s.mom.alpha_min);
                s.mom.alpha_max = v.value("alpha_max", s.mom.alpha_max);
                s.mom.floor_at_zero = v.value("floor_at_zero", s.mom.floor_at_zero);
            } else if (key == "eval") {
                sub_object(v, key, {"abs_threshold", "min_separation_deg", "max_peaks", "match_gate_deg", "tessellation_level"});
                s.eval.peaks.abs_threshold = v.value("abs_threshold", s.eval.peaks.abs_threshold);
                s.eval.peaks.min_separation_deg = v.value("min_separation_deg", s.eval.peaks.min_separation_deg);
                s.eval.peaks.max_peaks = v.value("max_peaks", s.eval.peaks.max_peaks);
                s.eval.match_gate_deg = v.value("match_gate_deg", s.eval.match_gate_deg);
                s.eval.tessellation_level = v.value("tessellation_level", s.eval.tessellation_level);
            } else if (key == "output_dir") s.output_dir = v.get<std::string>();
            else throw InvalidArgument("unknown spec key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("invalid experiment spec: ") + e.what());
    }
    s.validate();
    return s;
}

void write_spec(const fs::path& path, const ExperimentSpec& spec) { write_json(path, spec_to_json(spec)); }

ExperimentSpec read_spec(const fs::path& path) { return spec_from_json(read_json(path)); }

std::string spec_hash(const ExperimentSpec& spec) {
    json j = spec_to_json(spec);
    j.erase("output_dir");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(mix64(fnv1a64(j.dump()))));
    return buf;
}

// ---- records ----

const MethodResult& RunRecord::find(std::string_view experiment, std::string_view method, int n_target) const {
    for (const auto& r : results)
        if (r.experiment == experiment && r.method == method && (n_target < 0 || r.n_target_subjects == n_target)) return r;
    throw InvalidArgument("no result for " + std::string(experiment) + "/" + std::string(method) +
                          (n_target >= 0 ? " n=" + std::to_string(n_target) : ""));
}

std::vector<std::string> leakage_audit(const RunRecord& record) {
    std::set<std::string> seen;
    for (const auto& r : record.results) {
        seen.insert(r.data.train.begin(), r.data.train.end());
        seen.insert(r.data.val.begin(), r.data.val.end());
        seen.insert(r.data.reference.begin(), r.data.reference.end());
    }
    std::set<std::string> leaked;
    for (const auto& r : record.results)
        for (const auto& id : r.data.test)
            if (seen.count(id)) leaked.insert(id);
    return {leaked.begin(), leaked.end()};
}

// ---- experiments ----

RunRecord run_intra_baseline(const ExperimentSpec& spec, const Logger& log) {
    RunRecord rec = new_record(spec);
    const std::string site = spec.source_site;

    auto t0 = Clock::now();
    say(log, "building " + site + " cohort");
    const Cohort c = make_cohort(spec, site, site, preset_by_name(site).baseline_ages);
    rec.timing_s["cohort"] = seconds_since(t0);

    t0 = Clock::now();
    say(log, "training on " + std::to_string(c.train.size()) + " subjects");
    const TrainResult dl = train_model(spec, "dl", c.train, c.val, c.six);
    rec.timing_s["train"] = seconds_since(t0);

    t0 = Clock::now();
    MethodResult r{site, rec.kind, "dl", 0, evaluate_model(spec, dl.model, c.test, c.six),
                   DataUse{ids_of(c.train), ids_of(c.val), {}, ids_of(c.test)}};
    rec.results.push_back(std::move(r));
    rec.timing_s["evaluate"] = seconds_since(t0);

    if (spec.gold_standard) {
        t0 = Clock::now();
        say(log, "gold-standard split-half CSD on " + std::to_string(c.test.size()) + " subjects");
        std::vector<MetricsReport> reports;
        for (const auto* s : c.test) {
            const auto [a, b] = gold_standard_split(*s, derive_seed(spec.seed, "gs/" + s->id), spec.lmax);
            reports.push_back(evaluate_fods(a, b, s->wm_mask, spec.eval));
        }
        rec.results.push_back(MethodResult{site, rec.kind, "gs", 0, pool_reports(reports), DataUse{{}, {}, {}, ids_of(c.test)}});
        rec.timing_s["gold_standard"] = seconds_since(t0);
    }
    return rec;
}

RunRecord run_age_split(const ExperimentSpec& spec, const Logger& log) {
    RunRecord rec = new_record(spec);
    const std::string site = spec.source_site;
    const SitePreset preset = preset_by_name(site);
    const auto young_ages = spec.young_ages.value_or(preset.young_ages);
    const auto old_ages = spec.old_ages.value_or(preset.old_ages);

    auto t0 = Clock::now();
    say(log, "building " + site + " young and old cohorts");
    const Cohort young = make_cohort(spec, site, site + "-young", young_ages);
    const Cohort old = make_cohort(spec, site, site + "-old", old_ages);
    rec.timing_s["cohort"] = seconds_since(t0);

    t0 = Clock::now();
    say(log, "training young and old models");
    const TrainResult dl_y = train_model(spec, "dl_young", young.train, young.val, young.six);
    const TrainResult dl_o = train_model(spec, "dl_old", old.train, old.val, old.six);
    rec.timing_s["train"] = seconds_since(t0);

    t0 = Clock::now();
    say(log, "fine-tuning across age groups with " + std::to_string(spec.age_finetune_subjects) + " subjects");
    const auto ft_young = first_n(young.train, spec.age_finetune_subjects);
    const auto ft_old = first_n(old.train, spec.age_finetune_subjects);
    const TrainResult dl_o_ft = finetune_model(spec, "old_to_young", dl_o.model, ft_young, young.six);
    const TrainResult dl_y_ft = finetune_model(spec, "young_to_old", dl_y.model, ft_old, old.six);
    rec.timing_s["finetune"] = seconds_since(t0);

    t0 = Clock::now();
    const auto add = [&](const Cohort& test_group, const std::string& group, const std::string& method,
                         const EstimatorModel& model, DataUse use) {
        use.test = ids_of(test_group.test);
        rec.results.push_back(MethodResult{site, rec.kind + "/" + group, method, 0,
                                           evaluate_model(spec, model, test_group.test, test_group.six), std::move(use)});
    };
    add(young, "young", "self", dl_y.model, {ids_of(young.train), ids_of(young.val), {}, {}});
    add(young, "young", "cross", dl_o.model, {ids_of(old.train), ids_of(old.val), {}, {}});
    add(young, "young", "cross_ft", dl_o_ft.model,
        {concat_ids(old.train, ft_young), concat_ids(old.val, ft_young), {}, {}});
    rec.results.back().n_target_subjects = spec.age_finetune_subjects;
    add(old, "old", "self", dl_o.model, {ids_of(old.train), ids_of(old.val), {}, {}});
    add(old, "old", "cross", dl_y.model, {ids_of(young.train), ids_of(young.val), {}, {}});
    add(old, "old", "cross_ft", dl_y_ft.model, {concat_ids(young.train, ft_old), concat_ids(young.val, ft_old), {}, {}});
    rec.results.back().n_target_subjects = spec.age_finetune_subjects;
    rec.timing_s["evaluate"] = seconds_since(t0);

    t0 = Clock::now();
    std::vector<std::pair<double, double>> points;
    for (const auto* group : {&young, &old})
        for (const auto& s : group->subjects) points.emplace_back(s.age, mean_wm_fa(s));
    GrowthFit g;
    g.site = site;
    g.n_subjects = static_cast<int>(points.size());
    g.age_mid = 0.5 * (std::min(young_ages.first, old_ages.first) + std::max(young_ages.second, old_ages.second));
    try {
        g.fit = fit_arctan(points, arctan_initial_guess(points));
    } catch (const FitFailure& e) {
        say(log, std::string("growth fit: ") + e.what() + "; keeping the best iterate");
        g.fit = e.best();
    }
    g.slope_per_month = g.fit.slope(g.age_mid) / preset.months_per_age_unit;
    rec.growth.push_back(g);
    rec.timing_s["growth_fit"] = seconds_since(t0);
    return rec;
}

RunRecord run_inter_site(const ExperimentSpec& spec, const Logger& log) {
    RunRecord rec = new_record(spec);
    const std::string src_site = spec.source_site, tgt_site = spec.target_site;

    auto t0 = Clock::now();
    say(log, "building source (" + src_site + ") and target (" + tgt_site + ") cohorts");
    const Cohort src = make_cohort(spec, src_site, "source-" + src_site, preset_by_name(src_site).baseline_ages);
    const Cohort tgt = make_cohort(spec, tgt_site, "target-" + tgt_site, preset_by_name(tgt_site).baseline_ages);
    rec.timing_s["cohort"] = seconds_since(t0);

    const bool need_source = spec.has_method(Method::ControlCross) || spec.has_method(Method::Mom) ||
                             spec.has_method(Method::Finetune);
    const auto test_ids = ids_of(tgt.test);
    const auto add = [&](const std::string& method, int n, MetricsReport m, DataUse use) {
        use.test = test_ids;
        rec.results.push_back(MethodResult{tgt_site, rec.kind, method, n, std::move(m), std::move(use)});
    };

    std::optional<TrainResult> source;
    if (need_source) {
        t0 = Clock::now();
        say(log, "training source model");
        source = train_model(spec, "source", src.train, src.val, src.six);
        rec.timing_s["train_source"] = seconds_since(t0);
    }
    if (spec.has_method(Method::ControlCross)) {
        add(to_string(Method::ControlCross), 0, evaluate_model(spec, source->model, tgt.test, tgt.six),
            {ids_of(src.train), ids_of(src.val), {}, {}});
    }
    if (spec.has_method(Method::ControlSelf)) {
        t0 = Clock::now();
        say(log, "training target model");
        const TrainResult self = train_model(spec, "target", tgt.train, tgt.val, tgt.six);
        rec.timing_s["train_target"] = seconds_since(t0);
        add(to_string(Method::ControlSelf), static_cast<int>(tgt.train.size()),
            evaluate_model(spec, self.model, tgt.test, tgt.six), {ids_of(tgt.train), ids_of(tgt.val), {}, {}});
    }
    for (int n : spec.n_target_subjects) {
        const auto refs = first_n(tgt.train, n);
        if (spec.has_method(Method::Mom)) {
            t0 = Clock::now();
            say(log, "MoM with " + std::to_string(n) + " target reference subjects");
            const MomMapping mapping = fit_mom(src.train, src.six, refs, tgt.six, spec.mom);
            add(to_string(Method::Mom), n, evaluate_mom(spec, source->model, mapping, tgt.test, tgt.six),
                {ids_of(src.train), ids_of(src.val), concat_ids(src.train, refs), {}});
            rec.timing_s["mom_n" + std::to_string(n)] = seconds_since(t0);
        }
        if (spec.has_method(Method::Finetune)) {
            t0 = Clock::now();
            say(log, "fine-tuning on " + std::to_string(n) + " target subjects");
            const TrainResult ft = finetune_model(spec, "n" + std::to_string(n), source->model, refs, tgt.six);
            add(to_string(Method::Finetune), n, evaluate_model(spec, ft.model, tgt.test, tgt.six),
                {concat_ids(src.train, refs), concat_ids(src.val, refs), {}, {}});
            rec.timing_s["finetune_n" + std::to_string(n)] = seconds_since(t0);
        }
    }
    if (spec.has_method(Method::ScratchAblation)) {
        t0 = Clock::now();
        say(log, "training from scratch on " + std::to_string(spec.scratch_subjects) + " target subjects");
        const auto subset = first_n(tgt.train, spec.scratch_subjects);
        const TrainResult scratch = train_model(spec, "scratch", subset, tgt.val, tgt.six);
        add(to_string(Method::ScratchAblation), spec.scratch_subjects, evaluate_model(spec, scratch.model, tgt.test, tgt.six),
            {ids_of(subset), ids_of(tgt.val), {}, {}});
        rec.timing_s["scratch"] = seconds_since(t0);
    }
    return rec;
}

RunRecord run_experiment(const ExperimentSpec& spec, const Logger& log) {
    switch (spec.kind) {
        case ExperimentKind::IntraBaseline: return run_intra_baseline(spec, log);
        case ExperimentKind::AgeSplit: return run_age_split(spec, log);
        case ExperimentKind::InterSite: return run_inter_site(spec, log);
    }
    throw InvalidArgument("unknown experiment kind");
}

// ---- serialization ----

json record_to_json(const RunRecord& rec) {
    json results = json::array();
    for (const auto& r : rec.results) {
        json classes = json::array();
        for (const auto& c : r.metrics.classes)
            classes.push_back({{"fiber_class", c.fiber_class},
                               {"ar", num(c.ar)},
                               {"ae", num(c.ae)},
                               {"n_voxels", c.n_voxels},
                               {"n_matched_voxels", c.n_matched_voxels}});
        results.push_back({{"site", r.site},
                           {"experiment", r.experiment},
                           {"method", r.method},
                           {"n_target_subjects", r.n_target_subjects},
                           {"metrics", {{"classes", classes}, {"delta_afd", num(r.metrics.delta_afd)}, {"n_mask_voxels", r.metrics.n_mask_voxels}}},
                           {"data", {{"train", r.data.train}, {"val", r.data.val}, {"reference", r.data.reference}, {"test", r.data.test}}}});
    }
    json growth = json::array();
    for (const auto& g : rec.growth)
        growth.push_back({{"site", g.site},
                          {"a", num(g.fit.a)},
                          {"b", num(g.fit.b)},
                          {"c", num(g.fit.c)},
                          {"t0", num(g.fit.t0)},
                          {"residual_rms", num(g.fit.residual_rms)},
                          {"iterations", g.fit.iterations},
                          {"converged", g.fit.converged},
                          {"age_mid", g.age_mid},
                          {"slope_per_month", num(g.slope_per_month)},
                          {"n_subjects", g.n_subjects}});
    return {{"kind", rec.kind}, {"spec_hash", rec.spec_hash}, {"spec", rec.spec}, {"results", results}, {"growth", growth}};
}

RunRecord record_from_json(const json& j) {
    RunRecord rec;
    try {
        rec.kind = j.at("kind").get<std::string>();
        rec.spec_hash = j.at("spec_hash").get<std::string>();
        rec.spec = j.at("spec");
        for (const auto& r : j.at("results")) {
            MethodResult m;
            m.site = r.at("site").get<std::string>();
            m.experiment = r.at("experiment").get<std::string>();
            m.method = r.at("method").get<std::string>();
            m.n_target_subjects = r.at("n_target_subjects").get<int>();
            const auto& mj = r.at("metrics");
            for (const auto& c : mj.at("classes"))
                m.metrics.classes.push_back(ClassMetrics{c.at("fiber_class").get<int>(), num_from(c.at("ar")), num_from(c.at("ae")),
                                                         c.at("n_voxels").get<int>(), c.at("n_matched_voxels").get<int>()});
            m.metrics.delta_afd = num_from(mj.at("delta_afd"));
            m.metrics.n_mask_voxels = mj.at("n_mask_voxels").get<int>();
            const auto& d = r.at("data");
            m.data = DataUse{d.at("train").get<std::vector<std::string>>(), d.at("val").get<std::vector<std::string>>(),
                             d.at("reference").get<std::vector<std::string>>(), d.at("test").get<std::vector<std::string>>()};
            rec.results.push_back(std::move(m));
        }
        for (const auto& g : j.at("growth")) {
            GrowthFit f;
            f.site = g.at("site").get<std::string>();
            f.fit.a = num_from(g.at("a"));
            f.fit.b = num_from(g.at("b"));
            f.fit.c = num_from(g.at("c"));
            f.fit.t0 = num_from(g.at("t0"));
            f.fit.residual_rms = num_from(g.at("residual_rms"));
            f.fit.iterations = g.at("iterations").get<int>();
            f.fit.converged = g.at("converged").get<bool>();
            f.age_mid = g.at("age_mid").get<double>();
            f.slope_per_month = num_from(g.at("slope_per_month"));
            f.n_subjects = g.at("n_subjects").get<int>();
            rec.growth.push_back(f);
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("invalid run record: ") + e.what());
    }
    return rec;
}

std::string render_csv(std::span<const RunRecord> records) {
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& rec : records)
        for (const auto& r : rec.results)
            for (const auto& c : r.metrics.classes) {
                out += r.site + "," + r.experiment + "," + r.method + "," + std::to_string(r.n_target_subjects) + "," +
                       std::to_string(c.fiber_class) + "," + fmt2(c.ar) + "," + fmt2(c.ae) + "," + fmt2(r.metrics.delta_afd) +
                       "," + std::to_string(c.n_voxels) + "\n";
            }
    return out;
}

std::string render_markdown(std::span<const RunRecord> records) {
    std::string out = "# Results\n";
    for (const auto& rec : records) {
        out += "\n## " + rec.kind + " (spec " + rec.spec_hash + ")\n\n";
        out += "| site | experiment | method | n | 1-F AR | 1-F AE | 2-F AR | 2-F AE | 3-F AR | 3-F AE | dAFD |\n";
        out += "|---|---|---|---:|---:|---:|---:|---:|---:|---:|---:|\n";
        for (const auto& r : rec.results) {
            out += "| " + r.site + " | " + r.experiment + " | " + r.method + " | " + std::to_string(r.n_target_subjects);
            for (int k = 1; k <= 3; ++k) {
                const auto& c = r.metrics.of_class(k);
                out += " | " + fmt2(c.ar) + " | " + fmt2(c.ae);
            }
            out += " | " + fmt2(r.metrics.delta_afd) + " |\n";
        }
        if (!rec.growth.empty()) {
            out += "\nFA growth fit, FA(t) = a + b atan(c (t - t0)):\n\n";
            out += "| site | a | b | c | t0 | age mid | slope/month at mid | n |\n";
            out += "|---|---:|---:|---:|---:|---:|---:|---:|\n";
            for (const auto& g : rec.growth)
                out += "| " + g.site + " | " + fmt_g(g.fit.a) + " | " + fmt_g(g.fit.b) + " | " + fmt_g(g.fit.c) + " | " +
                       fmt_g(g.fit.t0) + " | " + fmt_g(g.age_mid) + " | " + fmt_g(g.slope_per_month) + " | " +
                       std::to_string(g.n_subjects) + " |\n";
        }
    }
    return out;
}

void write_run(const fs::path& dir, const RunRecord& record) {
    fs::create_directories(dir);
    const std::span<const RunRecord> one(&record, 1);
    write_json(dir / "record.json", record_to_json(record));
    atomic_write(dir / "metrics.csv", render_csv(one));
    atomic_write(dir / "report.md", render_markdown(one));
    json t = json::object();
    for (const auto& [k, v] : record.timing_s) t[k] = v;
    write_json(dir / "timing.json", t);
}

std::vector<RunRecord> read_runs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw InvalidArgument(dir.string() + " is not a directory");
    std::vector<fs::path> files;
    if (fs::exists(dir / "record.json")) files.push_back(dir / "record.json");
    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::exists(e.path() / "record.json")) subdirs.push_back(e.path() / "record.json");
    std::sort(subdirs.begin(), subdirs.end());
    files.insert(files.end(), subdirs.begin(), subdirs.end());
    std::vector<RunRecord> out;
    for (const auto& f : files) out.push_back(record_from_json(read_json(f)));
    return out;
}

}  // namespace fodshift
