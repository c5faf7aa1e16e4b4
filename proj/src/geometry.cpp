#include "fodshift/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "fodshift/error.hpp"

namespace fodshift {

namespace {

constexpr double kPi = std::numbers::pi;

void require_even_lmax(int lmax) {
    if (lmax < 0 || lmax % 2 != 0)
        throw InvalidArgument("lmax must be a non-negative even integer, got " + std::to_string(lmax));
}

// Orthonormalised associated Legendre values N_l^m P_l^m(x) for 0 <= m <= l <= lmax,
// stored at [l * (lmax + 1) + m].
std::vector<double> normalized_legendre(int lmax, double x) {
    const int stride = lmax + 1;
    std::vector<double> p(static_cast<std::size_t>(stride * stride), 0.0);
    const double s = std::sqrt(std::max(0.0, 1.0 - x * x));
    // Seed P_m^m in normalised form and recur upwards in l.
    double pmm = std::sqrt(1.0 / (4.0 * kPi));
    for (int m = 0; m <= lmax; ++m) {
        if (m > 0) pmm *= s * std::sqrt((2.0 * m + 1.0) / (2.0 * m));
        p[static_cast<std::size_t>(m * stride + m)] = pmm;
        if (m + 1 <= lmax) p[static_cast<std::size_t>((m + 1) * stride + m)] = x * std::sqrt(2.0 * m + 3.0) * pmm;
        for (int l = m + 2; l <= lmax; ++l) {
            const double a = std::sqrt((4.0 * l * l - 1.0) / (static_cast<double>(l * l) - m * m));
            const double b = std::sqrt(((l - 1.0) * (l - 1.0) - m * m) / (4.0 * (l - 1.0) * (l - 1.0) - 1.0));
            p[static_cast<std::size_t>(l * stride + m)] =
                a * (x * p[static_cast<std::size_t>((l - 1) * stride + m)] - b * p[static_cast<std::size_t>((l - 2) * stride + m)]);
        }
    }
    return p;
}

double binomial(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Row6 = Eigen::Matrix<double, 1, 6>;

double condition_from_gram(const Mat6& gram) {
    Eigen::SelfAdjointEigenSolver<Mat6> es(gram, Eigen::EigenvaluesOnly);
    const auto& ev = es.eigenvalues();
    const double lo = ev(0), hi = ev(5);
    if (!(hi > 0.0) || lo <= hi * 1e-24) return std::numeric_limits<double>::infinity();
    return std::sqrt(hi / lo);
}

// -1 when a is better-conditioned than b, 0 on a tie, +1 when worse.
int compare_condition(double a, double b) {
    const bool a_inf = std::isinf(a), b_inf = std::isinf(b);
    if (a_inf || b_inf) return a_inf == b_inf ? 0 : (a_inf ? 1 : -1);
    const double tol = 1e-9 * std::max(a, b);
    if (a < b - tol) return -1;
    if (a > b + tol) return 1;
    return 0;
}

}  // namespace

Direction Direction::from(double x, double y, double z) {
    const double n = std::sqrt(x * x + y * y + z * z);
    if (!(n > 0.0) || !std::isfinite(n)) throw InvalidArgument("direction must be a finite nonzero vector");
    return {x / n, y / n, z / n};
}

double axial_angle_deg(const Direction& a, const Direction& b) {
    const double c = std::min(1.0, std::abs(a.dot(b)));
    return std::acos(c) * 180.0 / kPi;
}

Direction canonical_hemisphere(const Direction& d) {
    if (d.z > 0.0) return d;
    if (d.z < 0.0) return d.flipped();
    if (d.y > 0.0) return d;
    if (d.y < 0.0) return d.flipped();
    return d.x >= 0.0 ? d : d.flipped();
}

DirectionSet::DirectionSet(std::vector<Direction> dirs, std::vector<double> bvals)
    : directions(std::move(dirs)), b_values(std::move(bvals)) {
    if (directions.size() != b_values.size()) throw InvalidArgument("direction and b-value counts differ");
    for (double b : b_values)
        if (!(b >= 0.0)) throw InvalidArgument("b-values must be non-negative");
}

DirectionSet::DirectionSet(std::vector<Direction> dirs, double b)
    : DirectionSet(dirs, std::vector<double>(dirs.size(), b)) {}

DirectionSet DirectionSet::subset(std::span<const int> indices) const {
    DirectionSet out;
    for (int i : indices) {
        if (i < 0 || static_cast<std::size_t>(i) >= size()) throw InvalidArgument("direction index out of range");
        out.push_back(directions[static_cast<std::size_t>(i)], b_values[static_cast<std::size_t>(i)]);
    }
    return out;
}

std::vector<int> DirectionSet::shell_indices(double b, double tol) const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < size(); ++i)
        if (std::abs(b_values[i] - b) <= tol) idx.push_back(static_cast<int>(i));
    return idx;
}

int sh_n_coeffs(int lmax) { return (lmax + 1) * (lmax + 2) / 2; }

int sh_index(int l, int m) { return l * (l - 1) / 2 + l + m; }

int sh_degree(int index) {
    int l = 0;
    while (sh_index(l, l) < index) l += 2;
    return l;
}

ShCoeffs::ShCoeffs(int lmax_) : lmax(lmax_) {
    require_even_lmax(lmax_);
    coeffs = Eigen::VectorXd::Zero(sh_n_coeffs(lmax_));
}

ShCoeffs::ShCoeffs(int lmax_, Eigen::VectorXd c) : lmax(lmax_), coeffs(std::move(c)) {
    require_even_lmax(lmax_);
    if (coeffs.size() != sh_n_coeffs(lmax_))
        throw InvalidArgument("coefficient count does not match lmax " + std::to_string(lmax_));
}

double& ShCoeffs::operator()(int l, int m) { return coeffs(sh_index(l, m)); }
double ShCoeffs::operator()(int l, int m) const { return coeffs(sh_index(l, m)); }

Eigen::VectorXd sh_basis_row(const Direction& d, int lmax) {
    require_even_lmax(lmax);
    const auto p = normalized_legendre(lmax, std::clamp(d.z, -1.0, 1.0));
    const double phi = std::atan2(d.y, d.x);
    Eigen::VectorXd row(sh_n_coeffs(lmax));
    const int stride = lmax + 1;
    for (int l = 0; l <= lmax; l += 2) {
        row(sh_index(l, 0)) = p[static_cast<std::size_t>(l * stride)];
        for (int m = 1; m <= l; ++m) {
            const double v = std::numbers::sqrt2 * p[static_cast<std::size_t>(l * stride + m)];
            row(sh_index(l, m)) = v * std::cos(m * phi);
            row(sh_index(l, -m)) = v * std::sin(m * phi);
        }
    }
    return row;
}

double sh_basis(int l, int m, const Direction& d) {
    if (l < 0 || l % 2 != 0 || std::abs(m) > l) throw InvalidArgument("invalid (l, m)");
    return sh_basis_row(d, l)(sh_index(l, m));
}

Eigen::MatrixXd sh_basis_matrix(std::span<const Direction> dirs, int lmax) {
    require_even_lmax(lmax);
    if (dirs.empty()) throw InvalidArgument("basis matrix needs at least one direction");
    Eigen::MatrixXd b(static_cast<Eigen::Index>(dirs.size()), sh_n_coeffs(lmax));
    for (std::size_t i = 0; i < dirs.size(); ++i) b.row(static_cast<Eigen::Index>(i)) = sh_basis_row(dirs[i], lmax).transpose();
    return b;
}

Eigen::MatrixXd sh_basis_matrix(const DirectionSet& dirs, int lmax) { return sh_basis_matrix(dirs.directions, lmax); }

Eigen::MatrixXd sh_fit_matrix(const DirectionSet& dirs, int lmax, double regularization) {
    if (regularization < 0.0) throw InvalidArgument("regularization must be non-negative");
    const Eigen::MatrixXd b = sh_basis_matrix(dirs, lmax);
    if (regularization == 0.0) {
        if (b.rows() < b.cols()) throw IllConditioned("fewer directions than SH coefficients");
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& sv = svd.singularValues();
        if (sv(sv.size() - 1) <= sv(0) * 1e-12) throw IllConditioned("SH design matrix is rank deficient");
        return svd.matrixV() * sv.cwiseInverse().asDiagonal() * svd.matrixU().transpose();
    }
    Eigen::MatrixXd normal = b.transpose() * b;
    normal.diagonal().array() += regularization;
    return normal.ldlt().solve(b.transpose());
}

ShCoeffs fit_sh(const Eigen::VectorXd& signal, const DirectionSet& dirs, int lmax, double regularization) {
    if (signal.size() != static_cast<Eigen::Index>(dirs.size()))
        throw InvalidArgument("signal length does not match direction count");
    return ShCoeffs(lmax, sh_fit_matrix(dirs, lmax, regularization) * signal);
}

Eigen::VectorXd eval_sh(const ShCoeffs& coeffs, std::span<const Direction> dirs) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(dirs.size()));
    for (std::size_t i = 0; i < dirs.size(); ++i)
        out(static_cast<Eigen::Index>(i)) = sh_basis_row(dirs[i], coeffs.lmax).dot(coeffs.coeffs);
    return out;
}

Eigen::VectorXd eval_sh(const ShCoeffs& coeffs, const DirectionSet& dirs) { return eval_sh(coeffs, dirs.directions); }

double eval_sh(const ShCoeffs& coeffs, const Direction& d) { return sh_basis_row(d, coeffs.lmax).dot(coeffs.coeffs); }

SphereTessellation make_tessellation(int level) {
    if (level < 0) throw InvalidArgument("subdivision level must be >= 0");
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Eigen::Vector3d> v = {
        {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
        {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
        {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1},
    };
    for (auto& p : v) p.normalize();
    std::vector<std::array<int, 3>> faces = {
        {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11},
        {1, 5, 9}, {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
        {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8}, {3, 8, 9},
        {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1},
    };
    for (int it = 0; it < level; ++it) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto found = midpoint.find(key);
            if (found != midpoint.end()) return found->second;
            v.push_back((v[static_cast<std::size_t>(a)] + v[static_cast<std::size_t>(b)]).normalized());
            const int idx = static_cast<int>(v.size()) - 1;
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<std::array<int, 3>> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            const int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
            next.push_back({f[0], a, c});
            next.push_back({f[1], b, a});
            next.push_back({f[2], c, b});
            next.push_back({a, b, c});
        }
        faces = std::move(next);
    }

    SphereTessellation tess;
    tess.points.reserve(v.size());
    for (const auto& p : v) tess.points.push_back({p.x(), p.y(), p.z()});
    tess.neighbors.assign(v.size(), {});
    auto link = [&](int a, int b) {
        auto& na = tess.neighbors[static_cast<std::size_t>(a)];
        if (std::find(na.begin(), na.end(), b) == na.end()) na.push_back(b);
    };
    for (const auto& f : faces) {
        for (int e = 0; e < 3; ++e) {
            link(f[static_cast<std::size_t>(e)], f[static_cast<std::size_t>((e + 1) % 3)]);
            link(f[static_cast<std::size_t>((e + 1) % 3)], f[static_cast<std::size_t>(e)]);
        }
    }
    for (auto& n : tess.neighbors) std::sort(n.begin(), n.end());

    // The subdivided icosahedron is centrally symmetric; pair points by rounded coordinates.
    auto key = [](const Direction& d) {
        auto q = [](double c) { return static_cast<long long>(std::llround(c * 1e9)); };
        return std::array<long long, 3>{q(d.x), q(d.y), q(d.z)};
    };
    std::map<std::array<long long, 3>, int> lookup;
    for (std::size_t i = 0; i < tess.points.size(); ++i) lookup.emplace(key(tess.points[i]), static_cast<int>(i));
    tess.antipode.resize(tess.points.size());
    for (std::size_t i = 0; i < tess.points.size(); ++i) {
        auto it = lookup.find(key(tess.points[i].flipped()));
        if (it == lookup.end()) throw NumericalFailure("tessellation is not centrally symmetric", 0.0);
        tess.antipode[i] = it->second;
    }
    return tess;
}

double max_neighbor_angle_deg(const SphereTessellation& tess) {
    double worst = 0.0;
    for (std::size_t i = 0; i < tess.points.size(); ++i) {
        double nearest = 180.0;
        for (int j : tess.neighbors[i]) {
            const double c = std::clamp(tess.points[i].dot(tess.points[static_cast<std::size_t>(j)]), -1.0, 1.0);
            nearest = std::min(nearest, std::acos(c) * 180.0 / kPi);
        }
        worst = std::max(worst, nearest);
    }
    return worst;
}

double order2_condition_number(std::span<const Direction> dirs) {
    if (dirs.empty()) return std::numeric_limits<double>::infinity();
    const Eigen::MatrixXd b = sh_basis_matrix(dirs, 2);
    return condition_from_gram(b.transpose() * b);
}

double electrostatic_energy(std::span<const Direction> dirs) {
    double e = 0.0;
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        for (std::size_t j = i + 1; j < dirs.size(); ++j) {
            const Eigen::Vector3d a = dirs[i].vec(), b = dirs[j].vec();
            const double dm = (a - b).norm(), dp = (a + b).norm();
            e += (dm > 0.0 ? 1.0 / dm : std::numeric_limits<double>::infinity());
            e += (dp > 0.0 ? 1.0 / dp : std::numeric_limits<double>::infinity());
        }
    }
    return e;
}

DirectionSet select_optimal_directions(const DirectionSet& candidates, int k, double exhaustive_limit) {
    const int n = static_cast<int>(candidates.size());
    if (k < 1) throw InvalidArgument("k must be positive");
    if (k > n) throw InvalidArgument("k = " + std::to_string(k) + " exceeds candidate count " + std::to_string(n));

    std::vector<Row6> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = sh_basis_row(candidates.directions[static_cast<std::size_t>(i)], 2).transpose();

    auto score_of = [&](const std::vector<int>& subset) {
        Mat6 gram = Mat6::Zero();
        for (int i : subset) gram.noalias() += rows[static_cast<std::size_t>(i)].transpose() * rows[static_cast<std::size_t>(i)];
        return condition_from_gram(gram);
    };
    auto energy_of = [&](const std::vector<int>& subset) {
        std::vector<Direction> d;
        d.reserve(subset.size());
        for (int i : subset) d.push_back(candidates.directions[static_cast<std::size_t>(i)]);
        return electrostatic_energy(d);
    };

    // Energy is evaluated only when a subset is at least tied on conditioning.
    struct Best {
        std::vector<int> subset;
        double cond = std::numeric_limits<double>::infinity();
        double energy = std::numeric_limits<double>::infinity();
    };
    Best best;
    auto offer = [&](const std::vector<int>& trial, double trial_cond) {
        const int c = best.subset.empty() ? -1 : compare_condition(trial_cond, best.cond);
        if (c > 0) return false;
        const double e = energy_of(trial);
        if (c == 0 && !(e < best.energy - 1e-12 * std::abs(best.energy))) return false;
        best.subset = trial;
        best.cond = trial_cond;
        best.energy = e;
        return true;
    };
    if (binomial(n, k) <= exhaustive_limit) {
        std::vector<int> idx(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
        while (true) {
            offer(idx, score_of(idx));
            int i = k - 1;
            while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) --i;
            if (i < 0) break;
            ++idx[static_cast<std::size_t>(i)];
            for (int j = i + 1; j < k; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
        }
    } else {
        const auto order = electrostatic_order(candidates.directions);
        std::vector<int> start(order.begin(), order.begin() + k);
        offer(start, score_of(start));
        bool improved = true;
        while (improved) {
            // Best-improvement single swaps against the subset fixed at the start of the pass.
            const std::vector<int> current = best.subset;
            improved = false;
            for (int pos = 0; pos < k; ++pos) {
                for (int cand = 0; cand < n; ++cand) {
                    if (std::find(current.begin(), current.end(), cand) != current.end()) continue;
                    auto trial = current;
                    trial[static_cast<std::size_t>(pos)] = cand;
                    improved |= offer(trial, score_of(trial));
                }
            }
        }
    }

    if (k >= 6 && std::isinf(best.cond))
        throw IllConditioned("every candidate subset gives a rank-deficient order-2 design matrix");
    auto chosen = best.subset;
    std::sort(chosen.begin(), chosen.end());
    return candidates.subset(chosen);
}

std::vector<Direction> spread_directions(int n, unsigned rotation_seed) {
    if (n < 1) throw InvalidArgument("direction count must be positive");
    // Golden-spiral start on the upper hemisphere.
    std::vector<Eigen::Vector3d> p(static_cast<std::size_t>(n));
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
        const double z = 1.0 - (i + 0.5) / n;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double t = golden * i + 0.7 * rotation_seed;
        p[static_cast<std::size_t>(i)] = {r * std::cos(t), r * std::sin(t), z};
    }
    if (rotation_seed != 0) {
        const Eigen::Matrix3d rot = (Eigen::AngleAxisd(0.37 * rotation_seed, Eigen::Vector3d::UnitX()) *
                                     Eigen::AngleAxisd(0.23 * rotation_seed, Eigen::Vector3d::UnitY()))
                                        .toRotationMatrix();
        for (auto& q : p) q = rot * q;
    }
    const double base_step = 0.3 / n;
    for (int it = 0; it < 300; ++it) {
        std::vector<Eigen::Vector3d> force(p.size(), Eigen::Vector3d::Zero());
        for (std::size_t i = 0; i < p.size(); ++i) {
            for (std::size_t j = i + 1; j < p.size(); ++j) {
                const Eigen::Vector3d dm = p[i] - p[j], dp = p[i] + p[j];
                const Eigen::Vector3d f = dm / std::pow(dm.squaredNorm() + 1e-12, 1.5) + dp / std::pow(dp.squaredNorm() + 1e-12, 1.5);
                const Eigen::Vector3d g = dm / std::pow(dm.squaredNorm() + 1e-12, 1.5) - dp / std::pow(dp.squaredNorm() + 1e-12, 1.5);
                force[i] += f;
                force[j] -= g;
            }
        }
        double fmax = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            force[i] -= force[i].dot(p[i]) * p[i];
            fmax = std::max(fmax, force[i].norm());
        }
        if (fmax <= 0.0) break;
        const double step = base_step * (1.0 - 0.9 * it / 300.0) / fmax;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = (p[i] + step * force[i]).normalized();
    }
    std::vector<Direction> out;
    out.reserve(p.size());
    for (const auto& q : p) out.push_back(canonical_hemisphere(Direction::from(q)));
    return out;
}

std::vector<int> electrostatic_order(std::span<const Direction> dirs) {
    const std::size_t n = dirs.size();
    std::vector<int> order;
    if (n == 0) return order;
    std::vector<double> potential(n, 0.0);
    std::vector<char> placed(n, 0);
    std::size_t next = 0;
    for (std::size_t step = 0; step < n; ++step) {
        order.push_back(static_cast<int>(next));
        placed[next] = 1;
        const Eigen::Vector3d a = dirs[next].vec();
        for (std::size_t j = 0; j < n; ++j) {
            if (placed[j]) continue;
            const Eigen::Vector3d b = dirs[j].vec();
            potential[j] += 1.0 / std::max((a - b).norm(), 1e-12) + 1.0 / std::max((a + b).norm(), 1e-12);
        }
        double lowest = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (!placed[j] && potential[j] < lowest) {
                lowest = potential[j];
                next = j;
            }
        }
    }
    return order;
}

}  // namespace fodshift
