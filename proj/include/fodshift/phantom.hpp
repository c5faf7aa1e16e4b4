#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fodshift/geometry.hpp"
#include "fodshift/rng.hpp"
#include "fodshift/volume.hpp"

namespace fodshift {

struct Shell {
    double b_value = 0.0;  // s/mm^2
    int n_directions = 0;
};

/// Acquisition site: shells, noise level and geometry.
struct Protocol {
    std::string site_label;
    std::vector<Shell> shells;
    double snr = 30.0;           // b0 signal-to-noise
    double voxel_size_mm = 1.5;  // isotropic
    double s0 = 1000.0;          // b0 intensity of tissue
    double six_direction_b = 1000.0;

    void validate() const;
    int total_measurements() const;
    int weighted_measurements() const;
};

/// Gradient table of a protocol: b0 rows first, then each shell in order.
/// Shell directions come from spread_directions(n, shell index + 1).
DirectionSet protocol_directions(const Protocol& protocol);

struct FiberCompartment {
    Direction direction;
    double volume_fraction = 1.0;
    double lambda_parallel = 1.7e-3;  // mm^2/s
    double lambda_perp = 0.2e-3;      // mm^2/s
};

struct VoxelModel {
    std::vector<FiberCompartment> fibers;  // at most three
    double iso_fraction = 0.0;
    double iso_diffusivity = 3.0e-3;  // mm^2/s
    double s0 = 1.0;

    void validate() const;
    double fiber_fraction() const;
};

/// FA(t) = a + b * atan(c * (t - t0)).
struct AgeFaModel {
    double a = 0.5, b = 0.1, c = 0.1, t0 = 0.0;

    double operator()(double t) const;
    double slope(double t) const;
};

/// Multi-tensor forward model, S(g, b) = s0 [f_iso exp(-b d_iso) + sum_i f_i exp(-b g'D_i g)].
Eigen::VectorXd simulate_signal(const VoxelModel& voxel, const DirectionSet& dirs);

/// Rician magnitude noise with sigma = s0 / snr.
Eigen::VectorXd add_rician_noise(const Eigen::VectorXd& signal, double s0, double snr, std::uint64_t rng_seed);
Eigen::VectorXd add_rician_noise(const Eigen::VectorXd& signal, double s0, double snr, Rng& rng);

/// Default heat-kernel apodization of the ground-truth FOD, h_l = exp(-k l(l+1)).
inline constexpr double kDefaultFodApodization = 0.025;

/// Band-limited FOD of the voxel's fibers: c_lm = sum_i f_i h_l Y_lm(u_i), with
/// h_0 = 1 so that the integral 2 sqrt(pi) c_00 equals the fiber fraction.
ShCoeffs gt_fod(const VoxelModel& voxel, int lmax, double apodization = kDefaultFodApodization);

/// FA of the axially symmetric tensor diag(l_par, l_perp, l_perp).
double fa_of_tensor(double lambda_parallel, double lambda_perp);

/// Inverse of fa_of_tensor at fixed mean diffusivity; returns (l_par, l_perp).
std::pair<double, double> solve_lambdas(double fa_target, double md_target);

enum class RegionKind : unsigned char { Isotropic = 0, Single = 1, Cross60 = 2, Cross90 = 3, Triple = 4 };

int fiber_count(RegionKind kind);
const char* region_name(RegionKind kind);

struct Region {
    RegionKind kind = RegionKind::Isotropic;
    Eigen::Matrix3d frame = Eigen::Matrix3d::Identity();  // columns: fiber axes
};

/// Block layout of tissue regions shared by every subject built from it.
struct Layout {
    Dims dims;
    std::vector<int> region_of_voxel;
    std::vector<Region> regions;
};

/// Fractions of blocks per region kind; single-fiber blocks take the rest.
struct LayoutShares {
    double isotropic = 0.20;
    double cross60 = 0.22;
    double cross90 = 0.22;
    double triple = 0.11;
};

Layout make_layout(Dims dims, std::uint64_t layout_seed, int block = 4, const LayoutShares& shares = {});

/// Fiber directions of a region with a given frame.
std::vector<Direction> region_fiber_directions(RegionKind kind, const Eigen::Matrix3d& frame);

/// Tissue properties of a site that are not part of the acquisition.
struct TissueParams {
    double fiber_md = 1.0e-3;          // mean diffusivity of each fiber tensor
    double iso_fraction = 0.25;        // free-water fraction in fiber voxels
    double free_water_diffusivity = 3.0e-3;
    double background_diffusivity = 1.0e-3;  // isotropic (non-fiber) regions
    double fa_noise_sd = 0.02;
    bool random_frames = true;             // every subject draws its own region frames
    double orientation_jitter_deg = 10.0;  // otherwise: per-subject rotation of the layout frames
};

/// Named site configuration: protocol, tissue, age curve and cohort age windows.
struct SitePreset {
    std::string name;
    Protocol protocol;
    TissueParams tissue;
    AgeFaModel age_fa;
    std::string age_unit;
    double months_per_age_unit = 1.0;
    std::pair<double, double> baseline_ages;
    std::pair<double, double> young_ages;
    std::pair<double, double> old_ages;
};

SitePreset dhcp_like();
SitePreset bcp_like();
/// "dhcp" or "bcp"; throws InvalidArgument otherwise.
SitePreset preset_by_name(const std::string& name);

/// Diffusivities shared by every fiber of one subject.
struct SubjectTissue {
    double fiber_fa = 0.0;
    double lambda_parallel = 0.0;
    double lambda_perp = 0.0;
    double free_water_diffusivity = 0.0;
    double iso_fraction = 0.0;
};

struct Subject {
    std::string id;
    double age = 0.0;
    std::string site_label;
    std::uint64_t seed = 0;
    int lmax = 8;
    double voxel_size_mm = 1.5;
    Dims dims;
    DirectionSet gradients;
    Volume<float> dwi;                // one channel per gradient row
    Volume<float> gt_fod;             // sh_n_coeffs(lmax) channels
    Mask wm_mask;
    Volume<unsigned char> fiber_class;  // number of fibers per voxel
    SubjectTissue tissue;
    std::vector<VoxelModel> voxels;   // empty for subjects loaded from disk
};

struct CohortConfig {
    SitePreset preset;
    std::string label;  // prefix of subject ids
    int n_subjects = 20;
    double age_lo = 0.0, age_hi = 1.0;
    Dims grid{12, 12, 12};
    std::uint64_t seed = 1;
    std::uint64_t layout_seed = 7;
    LayoutShares layout_shares;
    int lmax = 8;
    double apodization = kDefaultFodApodization;
};

/// Builds a cohort. Subject i is generated from derive_seed(seed, i) alone, so
/// results do not depend on generation order.
std::vector<Subject> build_cohort(const CohortConfig& config);
Subject build_subject(const CohortConfig& config, const Layout& layout, int index);

/// Indices (into the gradient table) of the six optimal directions on the
/// protocol's matched shell.
std::vector<int> six_direction_indices(const DirectionSet& gradients, double shell_b);

/// Per-voxel mean of the b0 measurements.
Eigen::VectorXd mean_b0(const Subject& subject);

}  // namespace fodshift
