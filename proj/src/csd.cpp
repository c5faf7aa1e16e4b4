#include "fodshift/csd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/special_functions/legendre.hpp>

#include "fodshift/error.hpp"
#include "fodshift/rng.hpp"

namespace fodshift {

namespace {

constexpr double kPi = std::numbers::pi;

// Violations below this fraction of the unconstrained solution size are
// treated as satisfied; keeps the active set independent of signal scale.
constexpr double kFeasTol = 1e-13;
constexpr double kKktTol = 1e-6;

double shell_tolerance(double b) { return std::max(1.0, 0.01 * b); }

}  // namespace

int ResponseFunction::shell_of(double b) const {
    for (std::size_t k = 0; k < b_values.size(); ++k)
        if (std::abs(b_values[k] - b) <= shell_tolerance(b_values[k])) return static_cast<int>(k);
    return -1;
}

ResponseFunction response_from_tensor(double lambda_parallel, double lambda_perp, const std::vector<double>& shells,
                                      double iso_diffusivity, int lmax) {
    if (lmax < 0 || lmax % 2 != 0) throw InvalidArgument("lmax must be even and nonnegative");
    if (!(lambda_perp > 0.0) || lambda_parallel < lambda_perp)
        throw InvalidArgument("response needs lambda_parallel >= lambda_perp > 0");
    if (!(iso_diffusivity >= 0.0)) throw InvalidArgument("isotropic diffusivity must be nonnegative");
    ResponseFunction r;
    r.lmax = lmax;
    for (double b : shells) {
        if (b < 0.0) throw InvalidArgument("negative b-value");
        Eigen::VectorXd rl(lmax / 2 + 1);
        for (int l = 0; l <= lmax; l += 2) {
            const double norm = std::sqrt((2.0 * l + 1.0) / (4.0 * kPi));
            auto f = [&](double x) {
                return std::exp(-b * (lambda_perp + (lambda_parallel - lambda_perp) * x * x)) * norm *
                       boost::math::legendre_p(l, x);
            };
            rl(l / 2) = 2.0 * kPi * boost::math::quadrature::gauss<double, 64>::integrate(f, -1.0, 1.0);
        }
        if (b == 0.0) rl.tail(rl.size() - 1).setZero();
        r.b_values.push_back(b);
        r.wm.push_back(rl);
        r.iso.push_back(std::exp(-b * iso_diffusivity));
    }
    return r;
}

std::vector<double> distinct_shells(const DirectionSet& dirs) {
    std::vector<double> out;
    for (double b : dirs.b_values) {
        const bool seen = std::any_of(out.begin(), out.end(), [&](double s) { return std::abs(s - b) <= shell_tolerance(s); });
        if (!seen) out.push_back(b);
    }
    std::sort(out.begin(), out.end());
    return out;
}

ResponseFunction response_for_subject(const Subject& subject, int lmax) {
    return response_from_tensor(subject.tissue.lambda_parallel, subject.tissue.lambda_perp, distinct_shells(subject.gradients),
                                subject.tissue.free_water_diffusivity, lmax);
}

CsdSolver::CsdSolver(const DirectionSet& dirs, const ResponseFunction& response, int lmax, const SphereTessellation& tess)
    : lmax_(lmax) {
    if (lmax < 0 || lmax % 2 != 0 || lmax > response.lmax) throw InvalidArgument("lmax must be even and at most the response lmax");
    if (dirs.empty()) throw InvalidArgument("empty gradient table");
    int weighted_shells = 0;
    for (double b : distinct_shells(dirs))
        if (b > 0.0) ++weighted_shells;
    if (weighted_shells < 2) throw InvalidArgument("two-compartment deconvolution needs at least two weighted shells");

    const int nc = sh_n_coeffs(lmax);
    const int n = nc + 1;
    const Eigen::MatrixXd basis = sh_basis_matrix(dirs, lmax);
    a_.resize(static_cast<Eigen::Index>(dirs.size()), n);
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const int k = response.shell_of(dirs.b_values[i]);
        if (k < 0) throw InvalidArgument("no response for b=" + std::to_string(dirs.b_values[i]));
        const auto ri = static_cast<Eigen::Index>(i);
        for (int j = 0; j < nc; ++j) {
            const int l = sh_degree(j);
            a_(ri, j) = basis(ri, j) * std::sqrt(4.0 * kPi / (2.0 * l + 1.0)) * response.wm[static_cast<std::size_t>(k)](l / 2);
        }
        a_(ri, nc) = response.iso[static_cast<std::size_t>(k)];
    }

    // One constraint per antipodal pair of tessellation points.
    std::vector<Direction> half;
    for (std::size_t i = 0; i < tess.points.size(); ++i)
        if (static_cast<std::size_t>(tess.antipode[i]) > i) half.push_back(tess.points[i]);
    c_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(half.size()) + 1, n);
    c_.topLeftCorner(static_cast<Eigen::Index>(half.size()), nc) = sh_basis_matrix(half, lmax);
    c_(c_.rows() - 1, nc) = 1.0;
    c_norms_ = c_.rowwise().norm();

    g_ = a_.transpose() * a_;
    g_llt_.compute(g_);
    if (g_llt_.info() != Eigen::Success) throw IllConditioned("deconvolution design is rank deficient");
    // Reject designs whose normal matrix is numerically singular.
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(g_, Eigen::EigenvaluesOnly).eigenvalues();
    if (ev(0) <= 1e-12 * ev(ev.size() - 1)) throw IllConditioned("deconvolution design is rank deficient");
    h_ = g_llt_.solve(c_.transpose());
    q_ = c_ * h_;
    max_iterations_ = 10 * static_cast<int>(c_.rows() + n);
}

CsdResult CsdSolver::fit(const Eigen::VectorXd& signal) const {
    if (signal.size() != a_.rows()) throw InvalidArgument("signal length does not match the gradient table");
    if (!signal.allFinite()) throw InvalidArgument("signal contains non-finite values");

    const Eigen::VectorXd d = a_.transpose() * signal;
    Eigen::VectorXd x = g_llt_.solve(d);
    const double xscale = x.norm();
    auto objective = [&](const Eigen::VectorXd& v) { return 0.5 * v.dot(g_ * v) - d.dot(v); };

    CsdResult res;
    std::vector<int> act;
    std::vector<double> u;
    std::vector<char> in_act(static_cast<std::size_t>(c_.rows()), 0);
    res.objective_trace.push_back(objective(x));
    int iter = 0;
    // Cholesky factor of C_A G^-1 C_A^T for the active rows, updated in place.
    const Eigen::Index nmax = c_.cols();
    Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(nmax, nmax);

    for (;;) {
        // Most violated inactive constraint.
        const Eigen::VectorXd s = c_ * x;
        int p = -1;
        double worst = -kFeasTol * xscale;
        for (Eigen::Index i = 0; i < s.size(); ++i) {
            if (in_act[static_cast<std::size_t>(i)]) continue;
            const double v = s(i) / c_norms_(i);
            if (v < worst) {
                worst = v;
                p = static_cast<int>(i);
            }
        }
        if (p < 0) break;

        double up = 0.0;
        for (;;) {
            if (++iter > max_iterations_)
                throw NumericalFailure("constrained deconvolution did not converge", std::abs(worst));
            const Eigen::VectorXd np = c_.row(p).transpose();
            const Eigen::VectorXd hp = h_.col(p);
            const auto na = static_cast<Eigen::Index>(act.size());
            Eigen::VectorXd z = hp, r, y;
            if (na > 0) {
                Eigen::VectorXd rhs(na);
                for (Eigen::Index j = 0; j < na; ++j) rhs(j) = q_(act[static_cast<std::size_t>(j)], p);
                const auto l = chol.topLeftCorner(na, na).triangularView<Eigen::Lower>();
                y = l.solve(rhs);
                r = l.transpose().solve(y);
                for (Eigen::Index j = 0; j < na; ++j) z -= r(j) * h_.col(act[static_cast<std::size_t>(j)]);
            }
            const double znp = z.dot(np);
            const bool dependent = !(znp > 1e-12 * hp.dot(np)) || na == nmax;

            double t1 = std::numeric_limits<double>::infinity();
            int drop = -1;
            for (Eigen::Index j = 0; j < na; ++j) {
                if (r(j) > 0.0) {
                    const double t = u[static_cast<std::size_t>(j)] / r(j);
                    if (t < t1) {
                        t1 = t;
                        drop = static_cast<int>(j);
                    }
                }
            }
            const double t2 = dependent ? std::numeric_limits<double>::infinity() : -np.dot(x) / znp;
            if (dependent && drop < 0) throw NumericalFailure("constraints are inconsistent", std::abs(worst));

            const double t = std::min(t1, t2);
            if (!dependent) x += t * z;
            for (Eigen::Index j = 0; j < na; ++j) u[static_cast<std::size_t>(j)] -= t * r(j);
            up += t;
            res.objective_trace.push_back(objective(x));

            if (t2 <= t1) {
                // New factor row: [y^T, sqrt(q_pp - y^T y)], and q_pp - y^T y = znp.
                if (na > 0) chol.row(na).head(na) = y.transpose();
                chol(na, na) = std::sqrt(znp);
                act.push_back(p);
                u.push_back(up);
                in_act[static_cast<std::size_t>(p)] = 1;
                break;
            }
            // Delete row `drop`, then restore the triangle with Givens rotations.
            for (Eigen::Index i = drop; i + 1 < na; ++i) chol.row(i).head(na) = chol.row(i + 1).head(na);
            chol.row(na - 1).setZero();
            for (Eigen::Index j = drop; j + 1 < na; ++j) {
                const double a = chol(j, j), b = chol(j, j + 1);
                const double rr = std::hypot(a, b), cs = a / rr, sn = b / rr;
                for (Eigen::Index i = j; i + 1 < na; ++i) {
                    const double x1 = chol(i, j), x2 = chol(i, j + 1);
                    chol(i, j) = cs * x1 + sn * x2;
                    chol(i, j + 1) = -sn * x1 + cs * x2;
                }
            }
            chol.col(na - 1).setZero();
            in_act[static_cast<std::size_t>(act[static_cast<std::size_t>(drop)])] = 0;
            act.erase(act.begin() + drop);
            u.erase(u.begin() + drop);
        }
    }

    // Polish: solve the equality problem of the final active set directly.
    if (!act.empty()) {
        const auto na = static_cast<Eigen::Index>(act.size());
        Eigen::MatrixXd cact(na, c_.cols()), hact(c_.cols(), na), m(na, na);
        for (Eigen::Index j = 0; j < na; ++j) {
            const int aj = act[static_cast<std::size_t>(j)];
            cact.row(j) = c_.row(aj);
            hact.col(j) = h_.col(aj);
            for (Eigen::Index k = 0; k < na; ++k) m(j, k) = q_(aj, act[static_cast<std::size_t>(k)]);
        }
        const Eigen::VectorXd x0 = g_llt_.solve(d);
        const Eigen::VectorXd up = m.completeOrthogonalDecomposition().solve(-(cact * x0));
        if (up.minCoeff() >= 0.0 && up.allFinite()) {
            x = x0 + hact * up;
            for (Eigen::Index j = 0; j < na; ++j) u[static_cast<std::size_t>(j)] = up(j);
        }
    }

    // KKT residual: stationarity, primal and dual feasibility, complementarity.
    Eigen::VectorXd grad = g_ * x - d;
    for (std::size_t j = 0; j < act.size(); ++j) grad -= u[j] * c_.row(act[j]).transpose();
    const double dscale = std::max(d.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
    const double uscale = std::max(dscale, 1.0e-300);
    const Eigen::VectorXd s = c_ * x;
    double resid = grad.cwiseAbs().maxCoeff() / dscale;
    const double sscale = std::max(xscale, std::numeric_limits<double>::min());
    resid = std::max(resid, std::max(0.0, -(s.cwiseQuotient(c_norms_)).minCoeff()) / sscale);
    for (std::size_t j = 0; j < act.size(); ++j) {
        resid = std::max(resid, std::max(0.0, -u[j]) / uscale);
        resid = std::max(resid, std::abs(u[j] * s(act[j])) / (uscale * sscale));
    }
    if (d.isZero(0.0)) resid = 0.0;
    if (!(resid <= kKktTol)) throw NumericalFailure("constrained deconvolution KKT residual too large", resid);

    const int nc = sh_n_coeffs(lmax_);
    res.fod = ShCoeffs(lmax_, x.head(nc));
    res.iso = x(nc);
    res.kkt_residual = resid;
    res.iterations = iter;
    res.active = act;
    res.multipliers = u;
    return res;
}

CsdResult csd_fit(const Eigen::VectorXd& signal, const DirectionSet& dirs, const ResponseFunction& response, int lmax,
                  const SphereTessellation& tess) {
    return CsdSolver(dirs, response, lmax, tess).fit(signal);
}

std::pair<std::vector<int>, std::vector<int>> split_half_indices(const DirectionSet& gradients, std::uint64_t rng_seed) {
    Rng rng(derive_seed(rng_seed, "split-half"));
    std::vector<int> a, b;
    for (double shell : distinct_shells(gradients)) {
        const auto idx = gradients.shell_indices(shell, shell_tolerance(shell));
        const std::size_t n = idx.size();
        const std::size_t start = rng.below(n);
        std::vector<int> rotated(n);
        for (std::size_t i = 0; i < n; ++i) rotated[i] = idx[(start + i) % n];
        std::vector<int> order(n);
        if (shell == 0.0) {
            for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
        } else {
            std::vector<Direction> dirs;
            for (int i : rotated) dirs.push_back(gradients.directions[static_cast<std::size_t>(i)]);
            order = electrostatic_order(dirs);
        }
        for (std::size_t i = 0; i < n; ++i) (i % 2 == 0 ? a : b).push_back(rotated[static_cast<std::size_t>(order[i])]);
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return {a, b};
}

namespace {

Volume<float> fit_volume(const Subject& subject, const std::vector<int>& rows, const ResponseFunction& response, int lmax,
                         const SphereTessellation& tess) {
    const DirectionSet dirs = subject.gradients.subset(rows);
    const auto b0 = dirs.shell_indices(0.0);
    if (b0.empty()) throw InvalidArgument("measurement subset has no b=0 rows");
    const CsdSolver solver(dirs, response, lmax, tess);
    const int nc = sh_n_coeffs(lmax);
    Volume<float> out(subject.dims, nc);
    Eigen::VectorXd sig(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        if (!subject.wm_mask(v)) continue;
        const auto full = subject.dwi.voxel(v);
        for (std::size_t i = 0; i < rows.size(); ++i) sig(static_cast<Eigen::Index>(i)) = full[static_cast<std::size_t>(rows[i])];
        double s0 = 0.0;
        for (int i : b0) s0 += sig(i);
        s0 /= static_cast<double>(b0.size());
        if (!(s0 > 0.0)) continue;
        const CsdResult r = solver.fit(sig / s0);
        auto o = out.voxel(v);
        for (int j = 0; j < nc; ++j) o[static_cast<std::size_t>(j)] = static_cast<float>(r.fod.coeffs(j));
    }
    return out;
}

}  // namespace

std::pair<Volume<float>, Volume<float>> gold_standard_split(const Subject& subject, std::uint64_t rng_seed, int lmax) {
    const auto [ha, hb] = split_half_indices(subject.gradients, rng_seed);
    const int need = sh_n_coeffs(lmax) + 1;
    for (const auto* h : {&ha, &hb}) {
        const DirectionSet d = subject.gradients.subset(*h);
        const int weighted = static_cast<int>(h->size() - d.shell_indices(0.0).size());
        if (weighted < need)
            throw InvalidArgument("split half has " + std::to_string(weighted) + " weighted directions, needs at least " +
                                  std::to_string(need));
    }
    const ResponseFunction response = response_for_subject(subject, lmax);
    const SphereTessellation tess = make_tessellation(4);
    return {fit_volume(subject, ha, response, lmax, tess), fit_volume(subject, hb, response, lmax, tess)};
}

Volume<float> csd_volume(const Subject& subject, int lmax) {
    std::vector<int> all(subject.gradients.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return fit_volume(subject, all, response_for_subject(subject, lmax), lmax, make_tessellation(4));
}

}  // namespace fodshift
