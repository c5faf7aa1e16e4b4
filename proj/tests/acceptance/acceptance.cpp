// Acceptance suite: one PASS/FAIL line per criterion, each timed against its budget.
//
//   fodshift_acceptance [--out DIR] [criterion ...]
//
// With no criterion numbers every criterion runs. Exit status is nonzero when
// any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fodshift/csd.hpp"
#include "fodshift/estimator.hpp"
#include "fodshift/geometry.hpp"
#include "fodshift/harmonize.hpp"
#include "fodshift/harness.hpp"
#include "fodshift/io.hpp"
#include "fodshift/metrics.hpp"
#include "fodshift/phantom.hpp"
#include "fodshift/rng.hpp"

using namespace fodshift;

namespace {

// Collects named checks; the criterion passes when all of them hold.
class Checks {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok) failures_.push_back(what);
        ++count_;
    }
    void note(const std::string& line) { notes_.push_back(line); }
    bool ok() const { return failures_.empty(); }
    int count() const { return count_; }
    const std::vector<std::string>& failures() const { return failures_; }
    const std::vector<std::string>& notes() const { return notes_; }

private:
    std::vector<std::string> failures_;
    std::vector<std::string> notes_;
    int count_ = 0;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

fs::path g_out_dir;
std::vector<RunRecord> g_records;  // every harness run, audited by criterion 7

RunRecord run_and_keep(const ExperimentSpec& spec, const std::string& name) {
    RunRecord r = run_experiment(spec);
    if (!g_out_dir.empty()) write_run(g_out_dir / name, r);
    g_records.push_back(r);
    return r;
}

double ar1(const MethodResult& r) { return r.metrics.of_class(1).ar; }

// ---- criterion 1: numerics ----

double loss_at(const Mlp<double>& m, const Mlp<double>::Matrix& x, const Mlp<double>::Matrix& y) {
    return loss_mse<double>(forward<double>(m, x, false), y);
}

// Norm-wise relative error of backprop against central differences.
double gradient_rel_error(Mlp<double> m, const Mlp<double>::Matrix& x, const Mlp<double>::Matrix& y) {
    const Gradients<double> g = backward<double>(m, x, y);
    const double h = 1e-5;
    double diff2 = 0.0, ref2 = 0.0;
    auto probe = [&](double& p, double analytic) {
        const double saved = p;
        p = saved + h;
        const double up = loss_at(m, x, y);
        p = saved - h;
        const double down = loss_at(m, x, y);
        p = saved;
        const double fd = (up - down) / (2 * h);
        diff2 += (fd - analytic) * (fd - analytic);
        ref2 += std::max(fd * fd, analytic * analytic);
    };
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        for (Eigen::Index i = 0; i < m.weights[l].size(); ++i) probe(m.weights[l].data()[i], g.weights[l].data()[i]);
        for (Eigen::Index i = 0; i < m.biases[l].size(); ++i) probe(m.biases[l].data()[i], g.biases[l].data()[i]);
    }
    return std::sqrt(diff2 / std::max(ref2, 1e-300));
}

void criterion_numerics(Checks& c) {
    // SH round trip through a dense sampling.
    const SphereTessellation t4 = make_tessellation(4);
    double worst_rt = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        for (int lmax : {2, 4, 6, 8}) {
            ShCoeffs sh(lmax);
            for (Eigen::Index i = 0; i < sh.coeffs.size(); ++i) sh.coeffs(i) = rng.normal();
            const DirectionSet dirs(t4.points, 1000.0);
            const ShCoeffs back = fit_sh(eval_sh(sh, dirs), dirs, lmax);
            worst_rt = std::max(worst_rt, (back.coeffs - sh.coeffs).cwiseAbs().maxCoeff());
        }
    }
    c.note("SH round trip max error " + fmt("%.2e", worst_rt));
    c.expect(worst_rt <= 1e-8, "SH round trip within 1e-8");

    double worst_y00 = 0.0;
    Rng rng(77);
    for (int i = 0; i < 100; ++i)
        worst_y00 = std::max(worst_y00,
                             std::abs(sh_basis(0, 0, Direction::from(rng.normal(), rng.normal(), rng.normal())) - 0.2820948));
    c.expect(worst_y00 < 5e-8, "Y_00 equals 0.2820948");

    const std::size_t n0 = make_tessellation(0).points.size(), n1 = make_tessellation(1).points.size();
    c.note("tessellation points " + std::to_string(n0) + "/" + std::to_string(n1) + "/" + std::to_string(t4.points.size()));
    c.expect(n0 == 12 && n1 == 42 && t4.points.size() == 2562, "tessellation counts 12/42/2562");

    const double fa = fa_of_tensor(1.7e-3, 0.2e-3);
    c.note("FA(1.7e-3, 0.2e-3) = " + fmt("%.6f", fa));
    c.expect(std::abs(fa - 0.8704) <= 1e-3, "FA of (1.7e-3, 0.2e-3) is 0.8704");

    // Gradient check over seeded toy networks.
    double worst_grad = 0.0;
    int n_models = 0;
    for (std::uint64_t seed = 1; seed <= 24; ++seed) {
        Rng r(seed * 31);
        const std::vector<int> dims = seed % 2 ? std::vector<int>{5, 7, 3} : std::vector<int>{4, 6, 5, 2};
        Mlp<double> m = make_mlp<double>(dims, 0.0, seed);
        for (auto& b : m.biases)
            for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.1 * r.normal();
        Mlp<double>::Matrix x(dims.front(), 6), y(dims.back(), 6);
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = r.normal();
        for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = r.normal();
        worst_grad = std::max(worst_grad, gradient_rel_error(m, x, y));
        ++n_models;
    }
    c.note("MLP gradient check on " + std::to_string(n_models) + " models, worst relative error " + fmt("%.2e", worst_grad));
    c.expect(n_models >= 20 && worst_grad < 1e-4, "MLP gradients match central differences");

    // Adam: two steps against a scalar reference implementation.
    {
        Mlp<double> m = make_mlp<double>({3, 4, 2}, 0.0, 9);
        const Mlp<double> start = m;
        TrainConfig cfg;
        cfg.lr = 1e-2;
        cfg.weight_decay = 1e-3;
        auto state = AdamState<double>::zeros_like(m);
        Rng r(10);
        std::vector<Gradients<double>> steps(2);
        for (auto& g : steps) {
            for (std::size_t l = 0; l < m.weights.size(); ++l) {
                g.weights.push_back(Mlp<double>::Matrix::Zero(m.weights[l].rows(), m.weights[l].cols()));
                g.biases.push_back(Mlp<double>::Vector::Zero(m.biases[l].size()));
                for (Eigen::Index i = 0; i < g.weights[l].size(); ++i) g.weights[l].data()[i] = r.normal();
                for (Eigen::Index i = 0; i < g.biases[l].size(); ++i) g.biases[l].data()[i] = r.normal();
            }
            adam_step(m, g, state, cfg);
        }
        double worst_adam = 0.0;
        for (std::size_t l = 0; l < m.weights.size(); ++l)
            for (Eigen::Index i = 0; i < m.weights[l].size(); ++i) {
                double p = start.weights[l].data()[i], mo = 0.0, ve = 0.0;
                for (int s = 1; s <= 2; ++s) {
                    const double g = steps[s - 1].weights[l].data()[i];
                    mo = cfg.adam_beta1 * mo + (1 - cfg.adam_beta1) * g;
                    ve = cfg.adam_beta2 * ve + (1 - cfg.adam_beta2) * g * g;
                    const double mh = mo / (1 - std::pow(cfg.adam_beta1, s));
                    const double vh = ve / (1 - std::pow(cfg.adam_beta2, s));
                    p -= cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps);
                    p *= 1 - cfg.lr * cfg.weight_decay;
                }
                worst_adam = std::max(worst_adam, std::abs(p - m.weights[l].data()[i]));
            }
        c.note("Adam two-step deviation from reference " + fmt("%.2e", worst_adam));
        c.expect(worst_adam < 1e-12, "Adam matches the reference update");
    }

    // MoM worked example.
    const Dims one{1, 1, 1};
    const MomMapping map = derive_mapping(MomentMaps{Volume<double>(one, 1, 100.0), Volume<double>(one, 1, 25.0)},
                                          MomentMaps{Volume<double>(one, 1, 120.0), Volume<double>(one, 1, 100.0)});
    c.note("MoM example alpha " + fmt("%.17g", map.alpha(0)) + " beta " + fmt("%.17g", map.beta(0)));
    c.expect(map.alpha(0) == 2.0 && map.beta(0) == -80.0, "MoM worked example gives alpha 2, beta -80");
}

// ---- criterion 2: CSD oracles ----

VoxelModel fiber_voxel(const std::vector<Direction>& dirs, double iso_fraction) {
    VoxelModel v;
    for (const auto& d : dirs)
        v.fibers.push_back(FiberCompartment{d, (1.0 - iso_fraction) / static_cast<double>(dirs.size()), 1.7e-3, 0.2e-3});
    v.iso_fraction = iso_fraction;
    v.iso_diffusivity = 3e-3;
    v.s0 = 1.0;
    return v;
}

// Local maxima above frac * max on a level-5 sphere, one point per antipodal pair.
std::vector<Direction> dense_peaks(const ShCoeffs& c, double frac) {
    static const SphereTessellation t = make_tessellation(5);
    const Eigen::VectorXd v = eval_sh(c, t.points);
    const double top = v.maxCoeff();
    std::vector<Direction> out;
    for (std::size_t i = 0; i < t.points.size(); ++i) {
        if (!(canonical_hemisphere(t.points[i]) == t.points[i]) || v(static_cast<Eigen::Index>(i)) < frac * top) continue;
        bool is_max = true;
        for (int j : t.neighbors[i]) is_max = is_max && v(static_cast<Eigen::Index>(i)) > v(j);
        if (is_max) out.push_back(t.points[i]);
    }
    return out;
}

Eigen::Matrix3d random_frame(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return q.normalized().toRotationMatrix();
}

void criterion_csd(Checks& c) {
    const DirectionSet dirs = protocol_directions(dhcp_like().protocol);
    const ResponseFunction resp = response_from_tensor(1.7e-3, 0.2e-3, distinct_shells(dirs), 3e-3, 8);
    const SphereTessellation tess = make_tessellation(4);
    const CsdSolver solver(dirs, resp, 8, tess);
    Rng rng(2024);

    double worst_single = 0.0;
    bool single_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        const Direction u = Direction::from(rng.normal(), rng.normal(), rng.normal());
        const auto peaks = dense_peaks(solver.fit(simulate_signal(fiber_voxel({u}, 0.1 + 0.02 * trial), dirs)).fod, 0.5);
        single_ok = single_ok && peaks.size() == 1;
        for (const auto& p : peaks) worst_single = std::max(worst_single, axial_angle_deg(p, u));
    }
    c.note("single fiber worst peak error " + fmt("%.3f", worst_single) + " deg");
    c.expect(single_ok && worst_single < 2.0, "noiseless single fiber peak within 2 deg");

    double worst_cross = 0.0;
    bool cross_ok = true;
    for (int trial = 0; trial < 10; ++trial) {
        const auto fibers = region_fiber_directions(RegionKind::Cross60, random_frame(rng));
        const auto peaks = dense_peaks(solver.fit(simulate_signal(fiber_voxel(fibers, 0.3), dirs)).fod, 0.3);
        cross_ok = cross_ok && peaks.size() == 2;
        for (const auto& u : fibers) {
            double best = 180.0;
            for (const auto& p : peaks) best = std::min(best, axial_angle_deg(p, u));
            worst_cross = std::max(worst_cross, best);
        }
    }
    c.note("60 deg crossing worst peak error " + fmt("%.3f", worst_cross) + " deg");
    c.expect(cross_ok && worst_cross < 5.0, "60 deg crossing peaks within 5 deg");

    double worst_violation = 0.0;
    for (int trial = 0; trial < 30; ++trial) {
        const RegionKind kinds[] = {RegionKind::Single, RegionKind::Cross60, RegionKind::Cross90, RegionKind::Triple};
        const VoxelModel v = fiber_voxel(region_fiber_directions(kinds[trial % 4], random_frame(rng)), 0.25);
        const Eigen::VectorXd sig = add_rician_noise(simulate_signal(v, dirs), 1.0, 8.0, rng);
        const CsdResult r = solver.fit(sig);
        worst_violation = std::max(worst_violation, std::max(0.0, -eval_sh(r.fod, tess.points).minCoeff()));
        worst_violation = std::max(worst_violation, std::max(0.0, -r.iso));
    }
    c.note("worst constraint violation " + fmt("%.2e", worst_violation));
    c.expect(worst_violation <= 1e-8, "constraint violation at most 1e-8");

    double worst_scale = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const VoxelModel v = fiber_voxel(region_fiber_directions(RegionKind::Cross90, random_frame(rng)), 0.2);
        const Eigen::VectorXd sig = add_rician_noise(simulate_signal(v, dirs), 1.0, 15.0, rng);
        const CsdResult base = solver.fit(sig);
        for (double k : {1e-3, 0.37, 7.5, 1300.0}) {
            const CsdResult r = solver.fit(k * sig);
            worst_scale = std::max(worst_scale, (r.fod.coeffs - k * base.fod.coeffs).norm() / (k * base.fod.coeffs.norm()));
        }
    }
    c.note("scaling homogeneity worst relative deviation " + fmt("%.2e", worst_scale));
    c.expect(worst_scale <= 1e-9, "signal scaling homogeneity within 1e-9");
}

// ---- criterion 3: MoM properties ----

void criterion_mom(Checks& c) {
    // The inter-site harness setting: source training split as references,
    // ten target subjects mapped onto them.
    CohortConfig sc;
    sc.preset = bcp_like();
    sc.label = "acc-src";
    sc.n_subjects = 14;
    sc.age_lo = sc.preset.baseline_ages.first;
    sc.age_hi = sc.preset.baseline_ages.second;
    sc.grid = Dims{12, 12, 12};
    sc.seed = 31;
    CohortConfig tc = sc;
    tc.preset = dhcp_like();
    tc.label = "acc-tgt";
    tc.n_subjects = 10;
    tc.age_lo = tc.preset.baseline_ages.first;
    tc.age_hi = tc.preset.baseline_ages.second;
    tc.seed = 32;
    const auto src = build_cohort(sc), tgt = build_cohort(tc);
    std::vector<const Subject*> sp, tp;
    for (const auto& s : src) sp.push_back(&s);
    for (const auto& s : tgt) tp.push_back(&s);
    const auto s6 = six_direction_indices(src[0].gradients, 1000.0);
    const auto t6 = six_direction_indices(tgt[0].gradients, 1000.0);
    const MomOptions opt;

    const MomMapping self = fit_mom(sp, s6, sp, s6, opt);
    double worst_a = 0.0, worst_b = 0.0;
    for (std::size_t v = 0; v < self.alpha.voxels(); ++v) {
        worst_a = std::max(worst_a, std::abs(self.alpha(v) - 1.0));
        worst_b = std::max(worst_b, std::abs(self.beta(v)));
    }
    c.note("self harmonization |alpha-1| " + fmt("%.1e", worst_a) + ", |beta| " + fmt("%.1e", worst_b));
    c.expect(worst_a <= 1e-9 && worst_b <= 1e-9, "self harmonization is the identity");

    const MomMapping m = fit_mom(sp, s6, tp, t6, opt);
    std::vector<Subject> mapped;
    for (const auto& s : tgt) mapped.push_back(harmonize_subject(s, t6, m, opt.floor_at_zero));
    std::vector<const Subject*> mp;
    for (const auto& s : mapped) mp.push_back(&s);
    const MomentMaps after = reference_moments(mp, t6, opt.sigma_vox);
    const MomentMaps ref = reference_moments(sp, s6, opt.sigma_vox);

    // Matched voxels: white matter in both phantoms, alpha not clamped and no
    // channel of any subject floored.
    std::vector<Volume<float>> six_in;
    for (const auto& s : tgt) six_in.push_back(normalized_six(s, t6));
    int n = 0, good = 0, argmax_checked = 0, argmax_kept = 0;
    double worst_mean = 0.0, worst_var = 0.0;
    for (std::size_t v = 0; v < ref.mean.voxels(); ++v) {
        bool floored = false;
        for (const auto& six : six_in)
            for (int ch = 0; ch < 6; ++ch) floored = floored || m.alpha(v) * six(v, ch) + m.beta(v) <= 0.0;
        const bool clamped = m.alpha(v) <= opt.alpha_min || m.alpha(v) >= opt.alpha_max;

        if (!floored) {
            for (std::size_t i = 0; i < tgt.size(); ++i) {
                int a = 0, b = 0;
                for (int ch = 1; ch < 6; ++ch) {
                    if (tgt[i].dwi(v, t6[ch]) > tgt[i].dwi(v, t6[a])) a = ch;
                    if (mapped[i].dwi(v, t6[ch]) > mapped[i].dwi(v, t6[b])) b = ch;
                }
                ++argmax_checked;
                argmax_kept += a == b;
            }
        }
        if (floored || clamped || !tgt[0].wm_mask(v) || !src[0].wm_mask(v)) continue;
        ++n;
        const double em = std::abs(after.mean(v) - ref.mean(v)) / ref.mean(v);
        const double ev = std::abs(after.var(v) - ref.var(v)) / ref.var(v);
        worst_mean = std::max(worst_mean, em);
        worst_var = std::max(worst_var, ev);
        good += em <= 0.1 && ev <= 0.1;
    }
    c.note("moments within 10% on " + std::to_string(good) + "/" + std::to_string(n) + " matched voxels, worst relative error mean " +
           fmt("%.3f", worst_mean) + ", var " + fmt("%.3f", worst_var));
    c.expect(n > 100 && good == n, "harmonized moments match the source median within 10%");
    c.note("argmax kept in " + std::to_string(argmax_kept) + "/" + std::to_string(argmax_checked) + " unfloored voxels");
    c.expect(argmax_checked > 1000 && argmax_kept == argmax_checked, "argmax direction preserved without flooring");
}

// ---- criterion 4: intra-site ----

void criterion_intra(Checks& c) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        ExperimentSpec spec;
        spec.kind = ExperimentKind::IntraBaseline;
        spec.seed = seed;
        const RunRecord r = run_and_keep(spec, "intra_seed" + std::to_string(seed));
        const auto& dl = r.find("intra_baseline", "dl");
        const auto& gs = r.find("intra_baseline", "gs");
        const double dl1 = ar1(dl), dl2 = dl.metrics.of_class(2).ar, gs1 = ar1(gs);
        const std::string s = "seed " + std::to_string(seed);
        c.note(s + ": GS 1-F " + fmt("%.2f", gs1) + ", DL 1-F " + fmt("%.2f", dl1) + ", DL 2-F " + fmt("%.2f", dl2));
        c.expect(gs1 > dl1, s + ": GS 1-F AR > DL 1-F AR");
        c.expect(dl1 > 70.0, s + ": DL 1-F AR > 70");
        c.expect(dl2 < dl1, s + ": DL 2-F AR < DL 1-F AR");
    }
}

// ---- criterion 5: age effects ----

ExperimentSpec age_spec(const std::string& site, std::uint64_t seed) {
    ExperimentSpec spec;
    spec.kind = ExperimentKind::AgeSplit;
    spec.source_site = site;
    spec.n_subjects = 14;
    spec.train.epochs = 100;
    spec.finetune.epochs = 50;
    spec.seed = seed;
    return spec;
}

void criterion_age(Checks& c) {
    struct SiteStats {
        double drop = 0.0;  // mean of self - cross 1-F AR over groups and seeds
        std::vector<double> slopes;
    };
    std::map<std::string, SiteStats> stats;
    // Per site and age group, summed over seeds.
    std::map<std::string, double> ar_cross, ar_ft, afd_cross, afd_ft;
    const int n_seeds = 3;
    for (const std::string site : {"dhcp", "bcp"}) {
        for (std::uint64_t seed = 1; seed <= n_seeds; ++seed) {
            const RunRecord r = run_and_keep(age_spec(site, seed), "age_" + site + "_seed" + std::to_string(seed));
            for (const std::string group : {"young", "old"}) {
                const std::string e = "age_split/" + group;
                const auto &self = r.find(e, "self"), &cross = r.find(e, "cross"), &ft = r.find(e, "cross_ft");
                stats[site].drop += (ar1(self) - ar1(cross)) / (2.0 * n_seeds);
                const std::string key = site + "/" + group;
                ar_cross[key] += ar1(cross) / n_seeds;
                ar_ft[key] += ar1(ft) / n_seeds;
                afd_cross[key] += cross.metrics.delta_afd / n_seeds;
                afd_ft[key] += ft.metrics.delta_afd / n_seeds;
                c.note(site + " seed " + std::to_string(seed) + " " + group + ": self " + fmt("%.2f", ar1(self)) +
                       ", cross " + fmt("%.2f", ar1(cross)) + ", cross_ft " + fmt("%.2f", ar1(ft)) + ", dAFD cross " +
                       fmt("%.4f", cross.metrics.delta_afd) + " ft " + fmt("%.4f", ft.metrics.delta_afd));
            }
            stats[site].slopes.push_back(r.growth.at(0).slope_per_month);
        }
    }
    c.note("mean cross-age 1-F AR drop: dhcp " + fmt("%.2f", stats["dhcp"].drop) + ", bcp " + fmt("%.2f", stats["bcp"].drop));
    c.expect(stats["dhcp"].drop > stats["bcp"].drop, "dHCP-like cross-age AR drop exceeds BCP-like");
    for (int i = 0; i < n_seeds; ++i) {
        const double d = stats["dhcp"].slopes[i], b = stats["bcp"].slopes[i];
        c.note("seed " + std::to_string(i + 1) + " FA slope per month at midpoint: dhcp " + fmt("%.5f", d) + ", bcp " +
               fmt("%.5f", b) + ", ratio " + fmt("%.1f", d / b));
        c.expect(d > 0 && d >= 4.0 * std::abs(b), "seed " + std::to_string(i + 1) + ": dHCP-like slope >= 4x BCP-like");
    }
    for (const auto& [key, cross] : ar_cross) {
        c.note(key + " over seeds: cross " + fmt("%.2f", cross) + " -> cross_ft " + fmt("%.2f", ar_ft[key]) +
               ", dAFD " + fmt("%.4f", afd_cross[key]) + " -> " + fmt("%.4f", afd_ft[key]));
        c.expect(ar_ft[key] >= cross - 1.0, key + ": fine-tuning does not lower 1-F AR by more than 1");
        c.expect(afd_ft[key] <= afd_cross[key] * 1.01 + 1e-4, key + ": fine-tuning does not raise dAFD");
    }
}

// ---- criterion 6: inter-site ----

void criterion_inter(Checks& c) {
    ExperimentSpec spec;
    spec.kind = ExperimentKind::InterSite;
    spec.source_site = "bcp";
    spec.target_site = "dhcp";
    spec.seed = 1;
    const RunRecord r = run_and_keep(spec, "inter_bcp_to_dhcp");
    const double lo = ar1(r.find("inter_site", "control_cross"));
    const double hi = ar1(r.find("inter_site", "control_self"));
    c.note("control_cross " + fmt("%.2f", lo) + ", control_self " + fmt("%.2f", hi));
    for (const char* m : {"mom", "finetune"})
        for (int n : {1, 2, 5, 10}) {
            const double a = ar1(r.find("inter_site", m, n));
            const std::string what = std::string(m) + " n=" + std::to_string(n);
            c.note(what + ": " + fmt("%.2f", a));
            c.expect(lo <= a && a <= hi + 2.0, what + " within [control_cross, control_self + 2]");
        }
    const double ft1 = ar1(r.find("inter_site", "finetune", 1)), ft2 = ar1(r.find("inter_site", "finetune", 2));
    const double ft10 = ar1(r.find("inter_site", "finetune", 10));
    const double scratch = ar1(r.find("inter_site", "scratch_ablation"));
    c.note("scratch_ablation " + fmt("%.2f", scratch));
    c.expect(ft1 - lo >= 5.0, "FT(n=1) - control_cross >= 5");
    c.expect(ft10 - ft2 <= ft2 - lo, "FT(n=10) - FT(n=2) <= FT(n=2) - control_cross");
    c.expect(scratch < ft10, "scratch_ablation AR < FT(n=10) AR");

    // Bound sanity over further seeds: at most one seed may invert the bounds.
    int inverted = hi >= lo ? 0 : 1;
    for (std::uint64_t seed = 2; seed <= 5; ++seed) {
        ExperimentSpec b = spec;
        b.seed = seed;
        b.methods = {Method::ControlCross, Method::ControlSelf};
        const RunRecord rb = run_and_keep(b, "inter_bounds_seed" + std::to_string(seed));
        const double l = ar1(rb.find("inter_site", "control_cross")), h = ar1(rb.find("inter_site", "control_self"));
        c.note("seed " + std::to_string(seed) + ": control_cross " + fmt("%.2f", l) + ", control_self " + fmt("%.2f", h));
        inverted += h >= l ? 0 : 1;
    }
    c.expect(inverted <= 1, "control_self >= control_cross in all but at most one of 5 seeds");
}

// ---- criterion 7: determinism and leakage ----

void criterion_determinism(Checks& c) {
    std::vector<ExperimentSpec> specs;
    for (ExperimentKind kind : {ExperimentKind::IntraBaseline, ExperimentKind::AgeSplit, ExperimentKind::InterSite}) {
        ExperimentSpec s;
        s.kind = kind;
        s.source_site = kind == ExperimentKind::InterSite ? "bcp" : "dhcp";
        s.n_subjects = 14;
        s.grid = Dims{8, 8, 8};
        s.hidden = {64, 64};
        s.train.epochs = 8;
        s.train.lr = 1e-3;
        s.finetune.epochs = 4;
        s.seed = 11;
        specs.push_back(s);
    }
    const fs::path tmp = fs::temp_directory_path() / ("fodshift_acceptance_" + std::to_string(::getpid()));
    for (const auto& s : specs) {
        const std::string kind = to_string(s.kind);
        const RunRecord a = run_experiment(s), b = run_experiment(s);
        write_run(tmp / (kind + "_a"), a);
        write_run(tmp / (kind + "_b"), b);
        bool same = true;
        for (const char* f : {"record.json", "metrics.csv", "report.md"})
            same = same && read_file(tmp / (kind + "_a") / f) == read_file(tmp / (kind + "_b") / f);
        c.note(kind + ": " + std::to_string(a.results.size()) + " results, rerun " + (same ? "byte-identical" : "differs"));
        c.expect(same, kind + " rerun is byte-identical");
        g_records.push_back(a);
    }
    fs::remove_all(tmp);

    std::size_t audited = 0;
    for (const auto& r : g_records) {
        const auto leaked = leakage_audit(r);
        audited += r.results.size();
        for (const auto& id : leaked) c.expect(false, "test subject " + id + " used for training or reference in " + r.kind);
        // Independent recount: no test id in any other role of the same result.
        for (const auto& res : r.results)
            for (const auto& id : res.data.test) {
                const auto in = [&](const std::vector<std::string>& v) { return std::find(v.begin(), v.end(), id) != v.end(); };
                c.expect(!in(res.data.train) && !in(res.data.val) && !in(res.data.reference),
                         "test subject " + id + " isolated in " + res.experiment + "/" + res.method);
            }
    }
    c.note("leakage audit over " + std::to_string(g_records.size()) + " records, " + std::to_string(audited) + " results");
    c.expect(audited > 0, "audit saw results");
}

struct Criterion {
    int number;
    const char* name;
    double budget_s;
    std::function<void(Checks&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--out" && i + 1 < argc) {
            g_out_dir = argv[++i];
        } else {
            try {
                selected.insert(std::stoi(a));
            } catch (const std::exception&) {
                std::fprintf(stderr, "usage: %s [--out DIR] [criterion ...]\n", argv[0]);
                return 2;
            }
        }
    }

    const std::vector<Criterion> criteria{
        {1, "numerics", 60, criterion_numerics},
        {2, "CSD oracles", 300, criterion_csd},
        {3, "MoM properties", 120, criterion_mom},
        {4, "intra-site reproduction", 900, criterion_intra},
        {5, "age-effect reproduction", 1200, criterion_age},
        {6, "inter-site reproduction", 1800, criterion_inter},
        {7, "determinism and leakage", 600, criterion_determinism},
    };

    int failed = 0;
    for (const auto& cr : criteria) {
        if (!selected.empty() && !selected.count(cr.number)) continue;
        Checks checks;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            cr.run(checks);
        } catch (const std::exception& e) {
            checks.expect(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs <= cr.budget_s;
        const bool pass = checks.ok() && in_time;
        for (const auto& n : checks.notes()) std::printf("    %s\n", n.c_str());
        for (const auto& f : checks.failures()) std::printf("    failed: %s\n", f.c_str());
        if (!in_time) std::printf("    failed: over the time budget\n");
        std::printf("criterion %d %s: %s (%d checks, %.1f s of %.0f s)\n", cr.number, cr.name, pass ? "PASS" : "FAIL",
                    checks.count(), secs, cr.budget_s);
        std::fflush(stdout);
        failed += pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
