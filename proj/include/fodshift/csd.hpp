#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fodshift/geometry.hpp"
#include "fodshift/phantom.hpp"
#include "fodshift/volume.hpp"

namespace fodshift {

/// Per-shell single-fiber kernel (m = 0 rotational harmonics, one entry per
/// even degree) and isotropic signal, both for unit s0.
struct ResponseFunction {
    int lmax = 8;
    std::vector<double> b_values;
    std::vector<Eigen::VectorXd> wm;  // length lmax/2 + 1 per shell
    std::vector<double> iso;

    /// Index of the shell within 1% (or 1 s/mm^2) of b, or -1.
    int shell_of(double b) const;
};

/// Analytic response of an axially symmetric tensor, by 64-point
/// Gauss-Legendre quadrature over cos(theta).
ResponseFunction response_from_tensor(double lambda_parallel, double lambda_perp, const std::vector<double>& shells,
                                      double iso_diffusivity, int lmax = 8);

/// Response matching the tissue a subject was simulated with, on its shells.
ResponseFunction response_for_subject(const Subject& subject, int lmax);

/// Distinct b-values of a gradient table, ascending.
std::vector<double> distinct_shells(const DirectionSet& dirs);

struct CsdResult {
    ShCoeffs fod;
    double iso = 0.0;  // isotropic compartment weight, in signal units
    double kkt_residual = 0.0;
    int iterations = 0;
    std::vector<int> active;             // active constraint rows; the last row is iso >= 0
    std::vector<double> multipliers;     // one per active row
    std::vector<double> objective_trace; // objective after every solver step
};

/// Non-negativity constrained deconvolution for one gradient table. The design
/// and its factorization are built once and reused across voxels.
class CsdSolver {
public:
    CsdSolver(const DirectionSet& dirs, const ResponseFunction& response, int lmax, const SphereTessellation& tess);

    CsdResult fit(const Eigen::VectorXd& signal) const;

    const Eigen::MatrixXd& design() const { return a_; }
    /// Constraint rows: FOD amplitude on the tessellation half sphere, then iso.
    const Eigen::MatrixXd& constraints() const { return c_; }
    int lmax() const { return lmax_; }

private:
    int lmax_;
    Eigen::MatrixXd a_;
    Eigen::MatrixXd c_;
    Eigen::LLT<Eigen::MatrixXd> g_llt_;
    Eigen::MatrixXd g_;
    Eigen::MatrixXd h_;  // G^-1 C^T
    Eigen::MatrixXd q_;  // C G^-1 C^T
    Eigen::VectorXd c_norms_;
    int max_iterations_;
};

CsdResult csd_fit(const Eigen::VectorXd& signal, const DirectionSet& dirs, const ResponseFunction& response, int lmax,
                  const SphereTessellation& tess);

/// Two disjoint halves of the gradient table. Each shell (b0 included) is put in
/// electrostatic order from a seed-chosen start and dealt alternately.
std::pair<std::vector<int>, std::vector<int>> split_half_indices(const DirectionSet& gradients, std::uint64_t rng_seed);

/// Gold-standard FOD volumes from the two halves of a subject's measurements,
/// each normalized by its own mean b0. Voxels outside the WM mask are zero.
std::pair<Volume<float>, Volume<float>> gold_standard_split(const Subject& subject, std::uint64_t rng_seed, int lmax = 8);

/// CSD on all measurements of a subject, b0-normalized, WM voxels only.
Volume<float> csd_volume(const Subject& subject, int lmax = 8);

}  // namespace fodshift
