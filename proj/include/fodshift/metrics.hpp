#pragma once

#include <array>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fodshift/error.hpp"
#include "fodshift/geometry.hpp"
#include "fodshift/phantom.hpp"
#include "fodshift/volume.hpp"

namespace fodshift {

// ---- tensor ----

struct TensorFit {
    double fa = 0.0;
    double md = 0.0;
    Eigen::Vector3d eigenvalues = Eigen::Vector3d::Zero();  // descending, clamped at 0
    bool valid = false;
};

/// Log-linear least-squares diffusion tensor over the measurements with
/// b <= max_b. Invalid when a used signal is not positive or the design is
/// rank deficient.
TensorFit tensor_fit(const Eigen::VectorXd& signal, const DirectionSet& dirs,
                     double max_b = std::numeric_limits<double>::infinity());

/// Shells used for tensor maps: b0 and weighted shells up to this b-value.
inline constexpr double kTensorMaxB = 1000.0;

struct TensorMaps {
    Volume<double> fa;
    Volume<double> md;
    Mask valid;
};

TensorMaps tensor_maps(const Subject& subject, double max_b = kTensorMaxB);

/// Site rule: dHCP-like FA > 0.3; BCP-like FA > 0.4 or (FA > 0.15 and
/// MD > 0.0011); both OR-ed with the voxels of known fiber regions.
Mask wm_mask(const Subject& subject, const SitePreset& preset);
bool wm_rule(const std::string& preset_name, double fa, double md);

// ---- peaks ----

struct Peak {
    Direction direction;
    double amplitude = 0.0;
};

/// At most max_peaks peaks, descending amplitude, upper-hemisphere directions.
struct PeakSet {
    std::vector<Peak> peaks;
    std::size_t size() const { return peaks.size(); }
};

struct PeakOptions {
    double abs_threshold = 0.1;
    double min_separation_deg = 15.0;
    int max_peaks = 3;
    int refine_iterations = 10;
    double refine_step = 0.05;  // radians per unit of grad(log f)
};

/// Sampling of a tessellation reused across voxels.
class PeakFinder {
public:
    PeakFinder(const SphereTessellation& tess, int lmax, PeakOptions options = {});

    PeakSet find(const ShCoeffs& fod) const;
    PeakSet find(std::span<const float> coeffs) const;
    /// One PeakSet per voxel; voxels outside `mask` get an empty set.
    std::vector<PeakSet> find_volume(const Volume<float>& fods, const Mask& mask) const;

    const PeakOptions& options() const { return options_; }

private:
    PeakSet find_impl(const Eigen::VectorXd& c) const;

    const SphereTessellation* tess_;
    int lmax_;
    PeakOptions options_;
    Eigen::MatrixXd basis_;
};

PeakSet extract_peaks(const ShCoeffs& fod, const SphereTessellation& tess, double abs_threshold = 0.1,
                      int max_peaks = 3);

struct PeakMatch {
    int pred = -1;
    int gt = -1;
    double angle_deg = 0.0;
};

/// Minimum-cost rectangular assignment; returns for each row its column or -1.
std::vector<int> hungarian(const Eigen::MatrixXd& cost);

/// Minimum-total-angle matching; pairs above gate_deg are dropped afterwards.
std::vector<PeakMatch> match_peaks(const PeakSet& pred, const PeakSet& gt, double gate_deg = 45.0);

// ---- volume metrics ----

/// Percentage of masked voxels with k GT peaks that also have k predicted
/// peaks; NaN when there are none.
double agreement_rate(std::span<const PeakSet> pred, std::span<const PeakSet> gt, const Mask& mask, int k);

/// Mean over voxels with k GT peaks and at least one match of the voxel's mean
/// matched angle; NaN when no voxel qualifies.
double angular_error(std::span<const PeakSet> pred, std::span<const PeakSet> gt, const Mask& mask, int k,
                     double gate_deg = 45.0);

/// Total FOD integral 2 sqrt(pi) c00.
double afd(const ShCoeffs& fod);
double afd(std::span<const float> coeffs);

/// Mean absolute AFD difference over the mask.
double afd_error(const Volume<float>& pred, const Volume<float>& gt, const Mask& mask);

struct ClassMetrics {
    int fiber_class = 1;
    double ar = 0.0;  // percent
    double ae = 0.0;  // degrees
    int n_voxels = 0;
    int n_matched_voxels = 0;
};

struct MetricsReport {
    std::vector<ClassMetrics> classes;  // fiber classes 1, 2, 3
    double delta_afd = 0.0;
    int n_mask_voxels = 0;

    const ClassMetrics& of_class(int k) const;
};

struct EvalOptions {
    PeakOptions peaks;
    double match_gate_deg = 45.0;
    int tessellation_level = 4;
};

/// Compares predicted FODs with reference FODs over the mask.
MetricsReport evaluate_fods(const Volume<float>& pred, const Volume<float>& gt, const Mask& mask,
                            const EvalOptions& options = {});

/// Voxel-count-weighted pooling of several subjects' reports.
MetricsReport pool_reports(std::span<const MetricsReport> reports);

// ---- FA growth ----

double mean_wm_fa(const Subject& subject, double max_b = kTensorMaxB);

/// FA(t) = a + b atan(c (t - t0)).
struct ArctanFit {
    double a = 0.0, b = 0.0, c = 0.0, t0 = 0.0;
    double residual_rms = 0.0;
    int iterations = 0;
    bool converged = false;

    double operator()(double t) const;
    double slope(double t) const;
};

class FitFailure : public Error {
public:
    FitFailure(const std::string& what, ArctanFit best) : Error(what), best_(best) {}
    const ArctanFit& best() const noexcept { return best_; }

private:
    ArctanFit best_;
};

/// Starting point from the data: a = mean, b and c from the spread, t0 = mid age.
ArctanFit arctan_initial_guess(std::span<const std::pair<double, double>> points);

/// Levenberg-Marquardt; converged once the step norm falls below 1e-10.
/// Throws FitFailure after max_iterations, InvalidArgument for fewer than 4 points.
ArctanFit fit_arctan(std::span<const std::pair<double, double>> points, const ArctanFit& init,
                     int max_iterations = 200);

}  // namespace fodshift
