#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace fodshift {

/// Unit vector on the sphere. Antipodal equivalence is left to consumers.
struct Direction {
    double x = 0.0, y = 0.0, z = 1.0;

    /// Normalizes (x, y, z); throws InvalidArgument on a zero vector.
    static Direction from(double x, double y, double z);
    static Direction from(const Eigen::Vector3d& v) { return from(v.x(), v.y(), v.z()); }

    Eigen::Vector3d vec() const { return {x, y, z}; }
    Direction flipped() const { return {-x, -y, -z}; }
    double dot(const Direction& o) const { return x * o.x + y * o.y + z * o.z; }

    friend bool operator==(const Direction&, const Direction&) = default;
};

/// Axial angle in degrees, i.e. min(theta, 180 - theta).
double axial_angle_deg(const Direction& a, const Direction& b);

/// Flip to the upper hemisphere (z > 0, ties broken on y then x).
Direction canonical_hemisphere(const Direction& d);

/// Gradient directions with one b-value (s/mm^2) per direction.
struct DirectionSet {
    std::vector<Direction> directions;
    std::vector<double> b_values;

    DirectionSet() = default;
    DirectionSet(std::vector<Direction> dirs, std::vector<double> bvals);
    /// All directions share one b-value.
    DirectionSet(std::vector<Direction> dirs, double b);

    std::size_t size() const noexcept { return directions.size(); }
    bool empty() const noexcept { return directions.empty(); }
    void push_back(const Direction& d, double b) {
        directions.push_back(d);
        b_values.push_back(b);
    }
    /// Subset by index, preserving the given order.
    DirectionSet subset(std::span<const int> indices) const;
    /// Indices of entries whose b-value lies within `tol` of `b`.
    std::vector<int> shell_indices(double b, double tol = 1.0) const;
};

/// Real symmetric spherical-harmonic coefficients, even degrees only.
///
/// Index of (l, m) is l(l-1)/2 + l + m: l ascends over even values, and m runs
/// from -l to l inside each degree. The basis is
///   m < 0 : sqrt(2) N_l^|m| P_l^|m|(cos theta) sin(|m| phi)
///   m = 0 : N_l^0 P_l^0(cos theta)
///   m > 0 : sqrt(2) N_l^m P_l^m(cos theta) cos(m phi)
/// with orthonormal N and no Condon-Shortley phase.
struct ShCoeffs {
    int lmax = 0;
    Eigen::VectorXd coeffs;

    ShCoeffs() : coeffs(Eigen::VectorXd::Zero(1)) {}
    explicit ShCoeffs(int lmax);
    ShCoeffs(int lmax, Eigen::VectorXd c);

    double& operator()(int l, int m);
    double operator()(int l, int m) const;
};

int sh_n_coeffs(int lmax);
int sh_index(int l, int m);
/// Degree l of the coefficient at `index`.
int sh_degree(int index);

/// Basis function (l, m) at one direction.
double sh_basis(int l, int m, const Direction& d);
/// All basis functions up to lmax at one direction, in coefficient order.
Eigen::VectorXd sh_basis_row(const Direction& d, int lmax);

Eigen::MatrixXd sh_basis_matrix(std::span<const Direction> dirs, int lmax);
Eigen::MatrixXd sh_basis_matrix(const DirectionSet& dirs, int lmax);

/// Damped least-squares projection of a sampled signal onto the basis.
/// With zero regularization the design matrix must have full column rank.
ShCoeffs fit_sh(const Eigen::VectorXd& signal, const DirectionSet& dirs, int lmax, double regularization = 0.0);

/// Linear operator (n_coeffs x n_dirs) that fit_sh applies to a signal.
Eigen::MatrixXd sh_fit_matrix(const DirectionSet& dirs, int lmax, double regularization = 0.0);

Eigen::VectorXd eval_sh(const ShCoeffs& coeffs, std::span<const Direction> dirs);
Eigen::VectorXd eval_sh(const ShCoeffs& coeffs, const DirectionSet& dirs);
double eval_sh(const ShCoeffs& coeffs, const Direction& d);

/// Subdivided icosahedron with symmetric edge adjacency.
struct SphereTessellation {
    std::vector<Direction> points;
    std::vector<std::vector<int>> neighbors;
    /// Index of the antipode of each point.
    std::vector<int> antipode;
};

/// Icosahedral subdivision; level L has 10*4^L + 2 points.
SphereTessellation make_tessellation(int subdivision_level);

/// Largest nearest-neighbour angle in degrees.
double max_neighbor_angle_deg(const SphereTessellation& tess);

/// Condition number (sigma_max / sigma_min) of the order-2 SH design matrix;
/// +inf when rank deficient.
double order2_condition_number(std::span<const Direction> dirs);

/// Antipodally symmetric Coulomb energy, sum over pairs of 1/|u-v| + 1/|u+v|.
double electrostatic_energy(std::span<const Direction> dirs);

/// Subset of size k minimizing the order-2 design-matrix condition number,
/// ties broken by lower electrostatic energy. Exhaustive when the number of
/// subsets is at most `exhaustive_limit`, otherwise a greedy start refined by
/// single swaps until no swap improves.
DirectionSet select_optimal_directions(const DirectionSet& candidates, int k,
                                       double exhaustive_limit = 2.0e6);

/// `n` well-spread directions on the half sphere by antipodal electrostatic
/// repulsion, deterministic for a given (n, rotation_seed).
std::vector<Direction> spread_directions(int n, unsigned rotation_seed = 0);

/// Greedy ordering where each prefix is as spread as possible: starts at
/// index 0 and repeatedly appends the direction with the lowest energy
/// against those already placed.
std::vector<int> electrostatic_order(std::span<const Direction> dirs);

}  // namespace fodshift
