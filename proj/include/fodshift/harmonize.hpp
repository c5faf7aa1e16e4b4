#pragma once

#include <span>
#include <vector>

#include "fodshift/phantom.hpp"
#include "fodshift/volume.hpp"

namespace fodshift {

/// Per-voxel mean and population variance over the six selected directions.
struct MomentMaps {
    Volume<double> mean;
    Volume<double> var;

    const Dims& dims() const { return mean.dims(); }
};

/// Per-voxel affine map S -> alpha S + beta.
struct MomMapping {
    Volume<double> alpha;
    Volume<double> beta;
};

struct MomOptions {
    double sigma_vox = 1.0;
    double eps = 1e-6;
    double alpha_min = 0.1;
    double alpha_max = 10.0;
    bool floor_at_zero = true;
};

MomentMaps spherical_moments(const Volume<float>& six);

/// Voxel-wise median across subjects, each moment separately.
MomentMaps median_moment_images(std::span<const MomentMaps> maps);

/// Separable Gaussian, truncated at ceil(3 sigma). Near the border the weights
/// are renormalized over in-bounds voxels.
Volume<double> gaussian_smooth(const Volume<double>& map, double sigma_vox);

/// alpha = sqrt(var_src / max(var_tgt, eps)) clamped to [alpha_min, alpha_max],
/// beta = mean_src - alpha mean_tgt.
MomMapping derive_mapping(const MomentMaps& target_ref, const MomentMaps& source_ref, double eps = 1e-6,
                          double alpha_min = 0.1, double alpha_max = 10.0);

Volume<float> apply_mapping(const Volume<float>& six, const MomMapping& mapping, bool floor_at_zero = true);

/// The six matched-shell channels of a subject divided by its per-voxel mean
/// b0 (zero where b0 is not positive).
Volume<float> normalized_six(const Subject& subject, std::span<const int> six_indices);

/// Smoothed median moments of a group of subjects.
MomentMaps reference_moments(std::span<const Subject* const> subjects, std::span<const int> six_indices,
                             double sigma_vox);

/// Full pipeline: mapping from a target group onto a source group. Each group
/// uses its own site's six directions.
MomMapping fit_mom(std::span<const Subject* const> source_ref, std::span<const int> source_six,
                   std::span<const Subject* const> target_ref, std::span<const int> target_six, const MomOptions& options);

/// Copy of `subject` whose six matched-shell channels are harmonized in the
/// b0-normalized domain and scaled back by the voxel's b0.
Subject harmonize_subject(const Subject& subject, std::span<const int> six_indices, const MomMapping& mapping,
                          bool floor_at_zero = true);

}  // namespace fodshift
