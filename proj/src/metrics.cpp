#include "fodshift/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace fodshift {

// ---- tensor ----

TensorFit tensor_fit(const Eigen::VectorXd& signal, const DirectionSet& dirs, double max_b) {
    if (signal.size() != static_cast<Eigen::Index>(dirs.size()))
        throw InvalidArgument("signal length does not match the gradient table");
    std::vector<int> rows;
    for (std::size_t i = 0; i < dirs.size(); ++i)
        if (dirs.b_values[i] <= max_b + 1.0) rows.push_back(static_cast<int>(i));
    TensorFit out;
    if (rows.size() < 7) return out;

    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), 7);
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int i = rows[r];
        const double s = signal(i);
        if (!(s > 0.0) || !std::isfinite(s)) return out;
        const double b = dirs.b_values[static_cast<std::size_t>(i)];
        const Direction& g = dirs.directions[static_cast<std::size_t>(i)];
        const auto ri = static_cast<Eigen::Index>(r);
        x.row(ri) << 1.0, -b * g.x * g.x, -b * g.y * g.y, -b * g.z * g.z, -2 * b * g.x * g.y, -2 * b * g.x * g.z,
            -2 * b * g.y * g.z;
        y(ri) = std::log(s);
    }
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    if (qr.rank() < 7) return out;
    const Eigen::VectorXd p = qr.solve(y);
    Eigen::Matrix3d d;
    d << p(1), p(4), p(5), p(4), p(2), p(6), p(5), p(6), p(3);
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(d);
    Eigen::Vector3d ev = es.eigenvalues().reverse().cwiseMax(0.0);
    out.eigenvalues = ev;
    out.md = ev.mean();
    const double norm2 = ev.squaredNorm();
    out.fa = norm2 > 0.0 ? std::sqrt(1.5 * (ev.array() - out.md).square().sum() / norm2) : 0.0;
    out.valid = true;
    return out;
}

TensorMaps tensor_maps(const Subject& subject, double max_b) {
    TensorMaps m{Volume<double>(subject.dims, 1), Volume<double>(subject.dims, 1), Mask(subject.dims, 1)};
    const int n = subject.dwi.channels();
    Eigen::VectorXd sig(n);
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        const auto in = subject.dwi.voxel(v);
        for (int i = 0; i < n; ++i) sig(i) = in[static_cast<std::size_t>(i)];
        const TensorFit t = tensor_fit(sig, subject.gradients, max_b);
        m.fa(v) = t.fa;
        m.md(v) = t.md;
        m.valid(v) = t.valid ? 1 : 0;
    }
    return m;
}

bool wm_rule(const std::string& preset_name, double fa, double md) {
    if (preset_name == "dhcp") return fa > 0.3;
    if (preset_name == "bcp") return fa > 0.4 || (fa > 0.15 && md > 0.0011);
    throw InvalidArgument("no white-matter rule for preset '" + preset_name + "'");
}

Mask wm_mask(const Subject& subject, const SitePreset& preset) {
    const TensorMaps t = tensor_maps(subject);
    Mask m(subject.dims, 1);
    const bool known = !subject.fiber_class.empty();
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        const bool rule = t.valid(v) && wm_rule(preset.name, t.fa(v), t.md(v));
        m(v) = (rule || (known && subject.fiber_class(v) > 0)) ? 1 : 0;
    }
    return m;
}

// ---- peaks ----

PeakFinder::PeakFinder(const SphereTessellation& tess, int lmax, PeakOptions options)
    : tess_(&tess), lmax_(lmax), options_(options), basis_(sh_basis_matrix(tess.points, lmax)) {
    if (options.max_peaks < 1 || options.refine_iterations < 0 || !(options.refine_step > 0.0))
        throw InvalidArgument("invalid peak options");
}

PeakSet PeakFinder::find(const ShCoeffs& fod) const {
    if (fod.lmax != lmax_) throw InvalidArgument("FOD order does not match the peak finder");
    return find_impl(fod.coeffs);
}

PeakSet PeakFinder::find(std::span<const float> coeffs) const {
    if (static_cast<int>(coeffs.size()) != sh_n_coeffs(lmax_)) throw InvalidArgument("FOD length does not match the peak finder");
    Eigen::VectorXd c(static_cast<Eigen::Index>(coeffs.size()));
    for (std::size_t i = 0; i < coeffs.size(); ++i) c(static_cast<Eigen::Index>(i)) = coeffs[i];
    return find_impl(c);
}

namespace {

double eval_at(const Eigen::VectorXd& c, const Eigen::Vector3d& u, int lmax) {
    return sh_basis_row(Direction{u.x(), u.y(), u.z()}, lmax).dot(c);
}

std::pair<Eigen::Vector3d, Eigen::Vector3d> tangent_basis(const Eigen::Vector3d& u) {
    const Eigen::Vector3d ref = std::abs(u.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
    const Eigen::Vector3d e1 = u.cross(ref).normalized();
    return {e1, u.cross(e1)};
}

}  // namespace

PeakSet PeakFinder::find_impl(const Eigen::VectorXd& c) const {
    const SphereTessellation& t = *tess_;
    const Eigen::VectorXd vals = basis_ * c;
    std::vector<Peak> cand;
    for (std::size_t i = 0; i < t.points.size(); ++i) {
        if (t.antipode[i] < static_cast<int>(i)) continue;
        const double vi = vals(static_cast<Eigen::Index>(i));
        if (!(vi > 0.0)) continue;
        bool is_max = true;
        for (int j : t.neighbors[i])
            if (!(vi > vals(j))) {
                is_max = false;
                break;
            }
        if (!is_max) continue;

        // Ascent on log f keeps the refinement independent of the FOD scale.
        Eigen::Vector3d u = t.points[i].vec();
        double f = vi, step = options_.refine_step;
        const double h = 1e-5;
        for (int it = 0; it < options_.refine_iterations; ++it) {
            const auto [e1, e2] = tangent_basis(u);
            const double g1 = (eval_at(c, (u + h * e1).normalized(), lmax_) - eval_at(c, (u - h * e1).normalized(), lmax_)) / (2 * h);
            const double g2 = (eval_at(c, (u + h * e2).normalized(), lmax_) - eval_at(c, (u - h * e2).normalized(), lmax_)) / (2 * h);
            const Eigen::Vector3d grad = (g1 * e1 + g2 * e2) / f;
            const Eigen::Vector3d next = (u + step * grad).normalized();
            const double fn = eval_at(c, next, lmax_);
            if (fn > f) {
                u = next;
                f = fn;
            } else {
                step *= 0.5;
            }
        }
        cand.push_back(Peak{canonical_hemisphere(Direction{u.x(), u.y(), u.z()}), f});
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Peak& a, const Peak& b) { return a.amplitude > b.amplitude; });

    PeakSet out;
    for (const Peak& p : cand) {
        if (p.amplitude < options_.abs_threshold) break;
        bool separated = true;
        for (const Peak& q : out.peaks)
            if (axial_angle_deg(p.direction, q.direction) < options_.min_separation_deg) {
                separated = false;
                break;
            }
        if (!separated) continue;
        out.peaks.push_back(p);
        if (static_cast<int>(out.peaks.size()) == options_.max_peaks) break;
    }
    return out;
}

std::vector<PeakSet> PeakFinder::find_volume(const Volume<float>& fods, const Mask& mask) const {
    if (fods.dims() != mask.dims()) throw InvalidArgument("FOD volume and mask differ in size");
    std::vector<PeakSet> out(fods.voxels());
    for (std::size_t v = 0; v < fods.voxels(); ++v)
        if (mask(v)) out[v] = find(fods.voxel(v));
    return out;
}

PeakSet extract_peaks(const ShCoeffs& fod, const SphereTessellation& tess, double abs_threshold, int max_peaks) {
    PeakOptions o;
    o.abs_threshold = abs_threshold;
    o.max_peaks = max_peaks;
    return PeakFinder(tess, fod.lmax, o).find(fod);
}

std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
    const int rows = static_cast<int>(cost.rows()), cols = static_cast<int>(cost.cols());
    if (rows == 0 || cols == 0) return std::vector<int>(static_cast<std::size_t>(rows), -1);
    if (rows > cols) {
        const std::vector<int> t = hungarian(cost.transpose());
        std::vector<int> out(static_cast<std::size_t>(rows), -1);
        for (int j = 0; j < cols; ++j)
            if (t[static_cast<std::size_t>(j)] >= 0) out[static_cast<std::size_t>(t[static_cast<std::size_t>(j)])] = j;
        return out;
    }
    // Shortest augmenting paths with potentials; 1-based with a virtual column 0.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(rows + 1), 0.0), v(static_cast<std::size_t>(cols + 1), 0.0);
    std::vector<int> p(static_cast<std::size_t>(cols + 1), 0), way(static_cast<std::size_t>(cols + 1), 0);
    for (int i = 1; i <= rows; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(cols + 1), inf);
        std::vector<char> used(static_cast<std::size_t>(cols + 1), 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= cols; ++j) {
                const auto sj = static_cast<std::size_t>(j);
                if (used[sj]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[sj];
                if (cur < minv[sj]) {
                    minv[sj] = cur;
                    way[sj] = j0;
                }
                if (minv[sj] < delta) {
                    delta = minv[sj];
                    j1 = j;
                }
            }
            for (int j = 0; j <= cols; ++j) {
                const auto sj = static_cast<std::size_t>(j);
                if (used[sj]) {
                    u[static_cast<std::size_t>(p[sj])] += delta;
                    v[sj] -= delta;
                } else {
                    minv[sj] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> out(static_cast<std::size_t>(rows), -1);
    for (int j = 1; j <= cols; ++j)
        if (p[static_cast<std::size_t>(j)] > 0) out[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return out;
}

std::vector<PeakMatch> match_peaks(const PeakSet& pred, const PeakSet& gt, double gate_deg) {
    std::vector<PeakMatch> out;
    if (pred.size() == 0 || gt.size() == 0) return out;
    Eigen::MatrixXd cost(static_cast<Eigen::Index>(pred.size()), static_cast<Eigen::Index>(gt.size()));
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (std::size_t j = 0; j < gt.size(); ++j)
            cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                axial_angle_deg(pred.peaks[i].direction, gt.peaks[j].direction);
    const std::vector<int> assign = hungarian(cost);
    for (std::size_t i = 0; i < assign.size(); ++i) {
        if (assign[i] < 0) continue;
        const double a = cost(static_cast<Eigen::Index>(i), assign[i]);
        if (a <= gate_deg) out.push_back(PeakMatch{static_cast<int>(i), assign[i], a});
    }
    return out;
}

// ---- volume metrics ----

namespace {

void check_sizes(std::size_t pred, std::size_t gt, const Mask& mask) {
    if (pred != gt || pred != mask.voxels()) throw InvalidArgument("peak volumes and mask differ in size");
}

}  // namespace

double agreement_rate(std::span<const PeakSet> pred, std::span<const PeakSet> gt, const Mask& mask, int k) {
    check_sizes(pred.size(), gt.size(), mask);
    long total = 0, agree = 0;
    for (std::size_t v = 0; v < gt.size(); ++v) {
        if (!mask(v) || static_cast<int>(gt[v].size()) != k) continue;
        ++total;
        if (static_cast<int>(pred[v].size()) == k) ++agree;
    }
    return total ? 100.0 * static_cast<double>(agree) / static_cast<double>(total) : std::numeric_limits<double>::quiet_NaN();
}

namespace {

// Sum of per-voxel mean angles and the number of voxels contributing.
std::pair<double, int> angular_sum(std::span<const PeakSet> pred, std::span<const PeakSet> gt, const Mask& mask, int k,
                                   double gate_deg) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t v = 0; v < gt.size(); ++v) {
        if (!mask(v) || static_cast<int>(gt[v].size()) != k) continue;
        const auto m = match_peaks(pred[v], gt[v], gate_deg);
        if (m.empty()) continue;
        double s = 0.0;
        for (const auto& p : m) s += p.angle_deg;
        sum += s / static_cast<double>(m.size());
        ++n;
    }
    return {sum, n};
}

}  // namespace

double angular_error(std::span<const PeakSet> pred, std::span<const PeakSet> gt, const Mask& mask, int k, double gate_deg) {
    check_sizes(pred.size(), gt.size(), mask);
    const auto [sum, n] = angular_sum(pred, gt, mask, k, gate_deg);
    return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

double afd(const ShCoeffs& fod) { return 2.0 * std::sqrt(std::numbers::pi) * fod.coeffs(0); }
double afd(std::span<const float> coeffs) { return 2.0 * std::sqrt(std::numbers::pi) * static_cast<double>(coeffs[0]); }

double afd_error(const Volume<float>& pred, const Volume<float>& gt, const Mask& mask) {
    if (pred.dims() != gt.dims() || pred.dims() != mask.dims()) throw InvalidArgument("volumes differ in size");
    double sum = 0.0;
    long n = 0;
    for (std::size_t v = 0; v < gt.voxels(); ++v) {
        if (!mask(v)) continue;
        sum += std::abs(afd(pred.voxel(v)) - afd(gt.voxel(v)));
        ++n;
    }
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

const ClassMetrics& MetricsReport::of_class(int k) const {
    for (const auto& c : classes)
        if (c.fiber_class == k) return c;
    throw InvalidArgument("no metrics for fiber class " + std::to_string(k));
}

MetricsReport evaluate_fods(const Volume<float>& pred, const Volume<float>& gt, const Mask& mask, const EvalOptions& options) {
    if (pred.dims() != gt.dims() || pred.channels() != gt.channels())
        throw InvalidArgument("predicted and reference FOD volumes differ in shape");
    int lmax = 0;
    while (sh_n_coeffs(lmax) < gt.channels()) lmax += 2;
    if (sh_n_coeffs(lmax) != gt.channels()) throw InvalidArgument("channel count is not an SH coefficient count");
    const SphereTessellation tess = make_tessellation(options.tessellation_level);
    const PeakFinder finder(tess, lmax, options.peaks);
    const auto pp = finder.find_volume(pred, mask), gp = finder.find_volume(gt, mask);

    MetricsReport r;
    for (std::size_t v = 0; v < mask.voxels(); ++v) r.n_mask_voxels += mask(v) ? 1 : 0;
    for (int k = 1; k <= 3; ++k) {
        ClassMetrics c;
        c.fiber_class = k;
        for (std::size_t v = 0; v < gp.size(); ++v) c.n_voxels += (mask(v) && static_cast<int>(gp[v].size()) == k) ? 1 : 0;
        c.ar = agreement_rate(pp, gp, mask, k);
        const auto [sum, n] = angular_sum(pp, gp, mask, k, options.match_gate_deg);
        c.ae = n ? sum / n : std::numeric_limits<double>::quiet_NaN();
        c.n_matched_voxels = n;
        r.classes.push_back(c);
    }
    r.delta_afd = afd_error(pred, gt, mask);
    return r;
}

MetricsReport pool_reports(std::span<const MetricsReport> reports) {
    MetricsReport out;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (int k = 1; k <= 3; ++k) {
        ClassMetrics c;
        c.fiber_class = k;
        double ar = 0.0, ae = 0.0;
        for (const auto& r : reports) {
            const ClassMetrics& rc = r.of_class(k);
            if (rc.n_voxels > 0) ar += rc.ar * rc.n_voxels;
            if (rc.n_matched_voxels > 0) ae += rc.ae * rc.n_matched_voxels;
            c.n_voxels += rc.n_voxels;
            c.n_matched_voxels += rc.n_matched_voxels;
        }
        c.ar = c.n_voxels ? ar / c.n_voxels : nan;
        c.ae = c.n_matched_voxels ? ae / c.n_matched_voxels : nan;
        out.classes.push_back(c);
    }
    double afd_sum = 0.0;
    for (const auto& r : reports) {
        if (r.n_mask_voxels > 0) afd_sum += r.delta_afd * r.n_mask_voxels;
        out.n_mask_voxels += r.n_mask_voxels;
    }
    out.delta_afd = out.n_mask_voxels ? afd_sum / out.n_mask_voxels : nan;
    return out;
}

// ---- FA growth ----

double mean_wm_fa(const Subject& subject, double max_b) {
    const TensorMaps t = tensor_maps(subject, max_b);
    double sum = 0.0;
    long n = 0;
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        if (!subject.wm_mask(v) || !t.valid(v)) continue;
        sum += t.fa(v);
        ++n;
    }
    if (n == 0) throw InvalidArgument("subject has no valid white-matter voxels");
    return sum / static_cast<double>(n);
}

double ArctanFit::operator()(double t) const { return a + b * std::atan(c * (t - t0)); }
double ArctanFit::slope(double t) const {
    const double z = c * (t - t0);
    return b * c / (1.0 + z * z);
}

ArctanFit arctan_initial_guess(std::span<const std::pair<double, double>> points) {
    if (points.empty()) throw InvalidArgument("no points to fit");
    auto lo = points[0], hi = points[0];
    double mean = 0.0;
    for (const auto& p : points) {
        if (p.first < lo.first) lo = p;
        if (p.first > hi.first) hi = p;
        mean += p.second;
    }
    ArctanFit f;
    f.a = mean / static_cast<double>(points.size());
    f.t0 = 0.5 * (lo.first + hi.first);
    const double range = hi.first - lo.first;
    f.c = range > 0.0 ? 4.0 / range : 1.0;
    const double span = std::atan(f.c * (hi.first - f.t0)) - std::atan(f.c * (lo.first - f.t0));
    f.b = span != 0.0 ? (hi.second - lo.second) / span : 0.0;
    return f;
}

ArctanFit fit_arctan(std::span<const std::pair<double, double>> points, const ArctanFit& init, int max_iterations) {
    if (points.size() < 4) throw InvalidArgument("an arctan fit needs at least 4 points");
    for (const auto& p : points)
        if (!std::isfinite(p.first) || !std::isfinite(p.second)) throw InvalidArgument("non-finite point");
    const auto n = static_cast<Eigen::Index>(points.size());

    auto residuals = [&](const Eigen::Vector4d& q) {
        Eigen::VectorXd r(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& pt = points[static_cast<std::size_t>(i)];
            r(i) = q(0) + q(1) * std::atan(q(2) * (pt.first - q(3))) - pt.second;
        }
        return r;
    };
    auto jacobian = [&](const Eigen::Vector4d& q) {
        Eigen::MatrixXd j(n, 4);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double dt = points[static_cast<std::size_t>(i)].first - q(3);
            const double z = q(2) * dt, w = 1.0 / (1.0 + z * z);
            j.row(i) << 1.0, std::atan(z), q(1) * dt * w, -q(1) * q(2) * w;
        }
        return j;
    };

    Eigen::Vector4d p(init.a, init.b, init.c, init.t0);
    Eigen::VectorXd r = residuals(p);
    double cost = r.squaredNorm();
    double lambda = 1e-3;
    ArctanFit out;
    for (int it = 1; it <= max_iterations; ++it) {
        const Eigen::MatrixXd j = jacobian(p);
        const Eigen::Matrix4d jtj = j.transpose() * j;
        const Eigen::Vector4d g = j.transpose() * r;
        Eigen::Matrix4d lhs = jtj;
        for (int k = 0; k < 4; ++k) lhs(k, k) += lambda * std::max(jtj(k, k), 1e-12);
        const Eigen::Vector4d step = lhs.ldlt().solve(-g);
        out.iterations = it;
        if (!step.allFinite()) break;
        const Eigen::Vector4d trial = p + step;
        const Eigen::VectorXd rt = residuals(trial);
        const double ct = rt.squaredNorm();
        if (ct <= cost) {
            p = trial;
            r = rt;
            cost = ct;
            lambda = std::max(lambda / 10.0, 1e-12);
        } else {
            lambda = std::min(lambda * 10.0, 1e12);
        }
        if (step.norm() < 1e-10) {
            out.converged = true;
            break;
        }
    }
    out.a = p(0);
    out.b = p(1);
    out.c = p(2);
    out.t0 = p(3);
    out.residual_rms = std::sqrt(cost / static_cast<double>(n));
    if (!out.converged) throw FitFailure("arctan fit did not converge", out);
    return out;
}

}  // namespace fodshift
