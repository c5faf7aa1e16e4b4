#include "fodshift/harmonize.hpp"

#include <algorithm>
#include <cmath>

#include "fodshift/error.hpp"

namespace fodshift {

MomentMaps spherical_moments(const Volume<float>& six) {
    if (six.channels() != 6) throw InvalidArgument("moments need exactly six channels");
    MomentMaps m{Volume<double>(six.dims(), 1), Volume<double>(six.dims(), 1)};
    for (std::size_t v = 0; v < six.voxels(); ++v) {
        const auto s = six.voxel(v);
        double mean = 0.0;
        for (float x : s) mean += x;
        mean /= 6.0;
        double var = 0.0;
        for (float x : s) var += (x - mean) * (x - mean);
        m.mean(v) = mean;
        m.var(v) = var / 6.0;
    }
    return m;
}

MomentMaps median_moment_images(std::span<const MomentMaps> maps) {
    if (maps.empty()) throw InvalidArgument("median of zero subjects");
    const Dims dims = maps.front().dims();
    for (const auto& m : maps)
        if (!(m.dims() == dims) || !(m.var.dims() == dims)) throw InvalidArgument("moment maps have different dimensions");
    MomentMaps out{Volume<double>(dims, 1), Volume<double>(dims, 1)};
    std::vector<double> buf(maps.size());
    auto median = [&]() {
        const std::size_t n = buf.size(), h = n / 2;
        std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(h), buf.end());
        const double hi = buf[h];
        if (n % 2 == 1) return hi;
        const double lo = *std::max_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(h));
        return 0.5 * (lo + hi);
    };
    for (std::size_t v = 0; v < dims.voxels(); ++v) {
        for (std::size_t i = 0; i < maps.size(); ++i) buf[i] = maps[i].mean(v);
        out.mean(v) = median();
        for (std::size_t i = 0; i < maps.size(); ++i) buf[i] = maps[i].var(v);
        out.var(v) = median();
    }
    return out;
}

Volume<double> gaussian_smooth(const Volume<double>& map, double sigma_vox) {
    if (!(sigma_vox >= 0.0)) throw InvalidArgument("smoothing sigma must be nonnegative");
    if (map.channels() != 1) throw InvalidArgument("smoothing expects a scalar map");
    if (sigma_vox == 0.0) return map;
    const int r = static_cast<int>(std::ceil(3.0 * sigma_vox));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    for (int i = -r; i <= r; ++i) k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma_vox * sigma_vox));

    const Dims d = map.dims();
    Volume<double> cur = map;
    for (int axis = 0; axis < 3; ++axis) {
        Volume<double> next(d, 1);
        const int n = axis == 0 ? d.nx : axis == 1 ? d.ny : d.nz;
        for (int z = 0; z < d.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x) {
                    const int c = axis == 0 ? x : axis == 1 ? y : z;
                    double acc = 0.0, wsum = 0.0;
                    for (int o = std::max(-r, -c); o <= std::min(r, n - 1 - c); ++o) {
                        const double w = k[static_cast<std::size_t>(o + r)];
                        const double val = axis == 0 ? cur.at(x + o, y, z) : axis == 1 ? cur.at(x, y + o, z) : cur.at(x, y, z + o);
                        acc += w * val;
                        wsum += w;
                    }
                    next.at(x, y, z) = acc / wsum;
                }
        cur = std::move(next);
    }
    return cur;
}

MomMapping derive_mapping(const MomentMaps& target_ref, const MomentMaps& source_ref, double eps, double alpha_min,
                          double alpha_max) {
    if (!(target_ref.dims() == source_ref.dims())) throw InvalidArgument("moment maps have different dimensions");
    if (!(eps >= 0.0)) throw InvalidArgument("eps must be nonnegative");
    if (!(alpha_min > 0.0) || !(alpha_max >= alpha_min)) throw InvalidArgument("invalid alpha clamp range");
    const Dims dims = target_ref.dims();
    MomMapping m{Volume<double>(dims, 1), Volume<double>(dims, 1)};
    for (std::size_t v = 0; v < dims.voxels(); ++v) {
        const double vt = std::max(target_ref.var(v), 0.0), vs = std::max(source_ref.var(v), 0.0);
        // eps only guards near-zero target variance; equal moments give alpha = 1 exactly.
        double a = 1.0;
        if (vs != vt) a = std::max(vt, eps) > 0.0 ? std::sqrt(vs / std::max(vt, eps)) : alpha_max;
        a = std::clamp(a, alpha_min, alpha_max);
        m.alpha(v) = a;
        m.beta(v) = source_ref.mean(v) - a * target_ref.mean(v);
    }
    return m;
}

Volume<float> apply_mapping(const Volume<float>& six, const MomMapping& mapping, bool floor_at_zero) {
    if (!(six.dims() == mapping.alpha.dims()) || !(six.dims() == mapping.beta.dims()))
        throw InvalidArgument("mapping and signal volumes have different dimensions");
    Volume<float> out(six.dims(), six.channels());
    for (std::size_t v = 0; v < six.voxels(); ++v) {
        const auto in = six.voxel(v);
        auto o = out.voxel(v);
        for (std::size_t c = 0; c < in.size(); ++c) {
            double y = mapping.alpha(v) * in[c] + mapping.beta(v);
            if (floor_at_zero) y = std::max(y, 0.0);
            o[c] = static_cast<float>(y);
        }
    }
    return out;
}

Volume<float> normalized_six(const Subject& subject, std::span<const int> six_indices) {
    if (six_indices.size() != 6) throw InvalidArgument("expected six direction indices");
    const Eigen::VectorXd b0 = mean_b0(subject);
    Volume<float> out(subject.dims, 6);
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        const double s0 = b0(static_cast<Eigen::Index>(v));
        if (!(s0 > 0.0)) continue;
        const auto sig = subject.dwi.voxel(v);
        for (int c = 0; c < 6; ++c)
            out(v, c) = static_cast<float>(sig[static_cast<std::size_t>(six_indices[static_cast<std::size_t>(c)])] / s0);
    }
    return out;
}

MomentMaps reference_moments(std::span<const Subject* const> subjects, std::span<const int> six_indices, double sigma_vox) {
    if (subjects.empty()) throw InvalidArgument("reference group is empty");
    std::vector<MomentMaps> maps;
    for (const Subject* s : subjects) maps.push_back(spherical_moments(normalized_six(*s, six_indices)));
    MomentMaps med = median_moment_images(maps);
    return MomentMaps{gaussian_smooth(med.mean, sigma_vox), gaussian_smooth(med.var, sigma_vox)};
}

MomMapping fit_mom(std::span<const Subject* const> source_ref, std::span<const int> source_six,
                   std::span<const Subject* const> target_ref, std::span<const int> target_six, const MomOptions& options) {
    const MomentMaps src = reference_moments(source_ref, source_six, options.sigma_vox);
    const MomentMaps tgt = reference_moments(target_ref, target_six, options.sigma_vox);
    return derive_mapping(tgt, src, options.eps, options.alpha_min, options.alpha_max);
}

Subject harmonize_subject(const Subject& subject, std::span<const int> six_indices, const MomMapping& mapping,
                          bool floor_at_zero) {
    const Volume<float> mapped = apply_mapping(normalized_six(subject, six_indices), mapping, floor_at_zero);
    const Eigen::VectorXd b0 = mean_b0(subject);
    Subject out = subject;
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        const double s0 = b0(static_cast<Eigen::Index>(v));
        if (!(s0 > 0.0)) continue;
        for (int c = 0; c < 6; ++c)
            out.dwi(v, six_indices[static_cast<std::size_t>(c)]) = static_cast<float>(s0 * mapped(v, c));
    }
    return out;
}

}  // namespace fodshift
