#include "fodshift/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fodshift/error.hpp"

namespace fodshift {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

Eigen::Matrix3d random_rotation(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q.toRotationMatrix();
}

Eigen::Matrix3d small_rotation(Rng& rng, double sd_deg) {
    const Eigen::Vector3d axis = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    const double angle = rng.normal(0.0, sd_deg * kDegToRad);
    return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

}  // namespace

void Protocol::validate() const {
    if (!(snr > 0.0)) throw InvalidArgument("protocol SNR must be positive");
    if (!(s0 > 0.0)) throw InvalidArgument("protocol s0 must be positive");
    bool has_six = false, has_b0 = false, has_matched = false;
    for (const auto& s : shells) {
        if (s.n_directions < 1 || s.b_value < 0.0) throw InvalidArgument("invalid shell in protocol " + site_label);
        if (s.b_value > 0.0 && s.n_directions >= 6) has_six = true;
        if (s.b_value == 0.0) has_b0 = true;
        if (std::abs(s.b_value - six_direction_b) < 1.0 && s.n_directions >= 6) has_matched = true;
    }
    if (!has_six) throw InvalidArgument("protocol needs a weighted shell with at least six directions");
    if (!has_b0) throw InvalidArgument("protocol needs b=0 measurements");
    if (!has_matched) throw InvalidArgument("protocol has no shell at the six-direction b-value");
}

int Protocol::total_measurements() const {
    int n = 0;
    for (const auto& s : shells) n += s.n_directions;
    return n;
}

int Protocol::weighted_measurements() const {
    int n = 0;
    for (const auto& s : shells)
        if (s.b_value > 0.0) n += s.n_directions;
    return n;
}

DirectionSet protocol_directions(const Protocol& protocol) {
    protocol.validate();
    DirectionSet out;
    for (const auto& s : protocol.shells)
        if (s.b_value == 0.0)
            for (int i = 0; i < s.n_directions; ++i) out.push_back(Direction{0.0, 0.0, 1.0}, 0.0);
    unsigned shell_no = 0;
    for (const auto& s : protocol.shells) {
        ++shell_no;
        if (s.b_value == 0.0) continue;
        for (const auto& d : spread_directions(s.n_directions, shell_no)) out.push_back(d, s.b_value);
    }
    return out;
}

void VoxelModel::validate() const {
    if (fibers.size() > 3) throw InvalidArgument("a voxel holds at most three fibers");
    if (iso_fraction < 0.0 || iso_fraction > 1.0) throw InvalidArgument("iso fraction outside [0, 1]");
    for (const auto& f : fibers) {
        if (f.volume_fraction < 0.0 || f.volume_fraction > 1.0) throw InvalidArgument("fiber fraction outside [0, 1]");
        if (!(f.lambda_perp > 0.0) || f.lambda_parallel < f.lambda_perp)
            throw InvalidArgument("fiber diffusivities need lambda_parallel >= lambda_perp > 0");
    }
    if (std::abs(iso_fraction + fiber_fraction() - 1.0) > 1e-9) throw InvalidArgument("volume fractions do not sum to one");
}

double VoxelModel::fiber_fraction() const {
    double f = 0.0;
    for (const auto& c : fibers) f += c.volume_fraction;
    return f;
}

double AgeFaModel::operator()(double t) const { return a + b * std::atan(c * (t - t0)); }

double AgeFaModel::slope(double t) const {
    const double u = c * (t - t0);
    return b * c / (1.0 + u * u);
}

Eigen::VectorXd simulate_signal(const VoxelModel& voxel, const DirectionSet& dirs) {
    Eigen::VectorXd s(static_cast<Eigen::Index>(dirs.size()));
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const double b = dirs.b_values[i];
        if (b == 0.0) {
            s(static_cast<Eigen::Index>(i)) = voxel.s0;
            continue;
        }
        double v = voxel.iso_fraction * std::exp(-b * voxel.iso_diffusivity);
        for (const auto& f : voxel.fibers) {
            const double c = dirs.directions[i].dot(f.direction);
            v += f.volume_fraction * std::exp(-b * (f.lambda_perp + (f.lambda_parallel - f.lambda_perp) * c * c));
        }
        s(static_cast<Eigen::Index>(i)) = voxel.s0 * v;
    }
    return s;
}

Eigen::VectorXd add_rician_noise(const Eigen::VectorXd& signal, double s0, double snr, Rng& rng) {
    if (!(snr > 0.0)) throw InvalidArgument("SNR must be positive");
    const double sigma = std::isinf(snr) ? 0.0 : s0 / snr;
    Eigen::VectorXd out(signal.size());
    for (Eigen::Index i = 0; i < signal.size(); ++i) {
        const double n1 = rng.normal(), n2 = rng.normal();
        if (sigma == 0.0) {
            out(i) = std::abs(signal(i));
            continue;
        }
        const double re = signal(i) + sigma * n1, im = sigma * n2;
        out(i) = std::sqrt(re * re + im * im);
    }
    return out;
}

Eigen::VectorXd add_rician_noise(const Eigen::VectorXd& signal, double s0, double snr, std::uint64_t rng_seed) {
    Rng rng(rng_seed);
    return add_rician_noise(signal, s0, snr, rng);
}

ShCoeffs gt_fod(const VoxelModel& voxel, int lmax, double apodization) {
    ShCoeffs out(lmax);
    Eigen::VectorXd taper(out.coeffs.size());
    for (int j = 0; j < taper.size(); ++j) {
        const int l = sh_degree(j);
        taper(j) = std::exp(-apodization * l * (l + 1));
    }
    for (const auto& f : voxel.fibers) {
        // Even degrees only, so Y(u) = Y(-u) and the antipodal average is Y(u).
        out.coeffs += f.volume_fraction * sh_basis_row(f.direction, lmax).cwiseProduct(taper);
    }
    return out;
}

double fa_of_tensor(double lambda_parallel, double lambda_perp) {
    if (!(lambda_parallel > 0.0) || !(lambda_perp > 0.0)) throw InvalidArgument("tensor eigenvalues must be positive");
    const double d = lambda_parallel - lambda_perp;
    return std::abs(d) / std::sqrt(lambda_parallel * lambda_parallel + 2.0 * lambda_perp * lambda_perp);
}

std::pair<double, double> solve_lambdas(double fa_target, double md_target) {
    if (!(fa_target >= 0.0 && fa_target < 1.0)) throw InvalidArgument("FA target must lie in [0, 1)");
    if (!(md_target > 0.0)) throw InvalidArgument("MD target must be positive");
    // With l_par = md (1 + 2x), l_perp = md (1 - x): FA = 3x / sqrt(3 + 6x^2).
    const double x = fa_target / std::sqrt(3.0 - 2.0 * fa_target * fa_target);
    return {md_target * (1.0 + 2.0 * x), md_target * (1.0 - x)};
}

int fiber_count(RegionKind kind) {
    switch (kind) {
        case RegionKind::Isotropic: return 0;
        case RegionKind::Single: return 1;
        case RegionKind::Cross60:
        case RegionKind::Cross90: return 2;
        case RegionKind::Triple: return 3;
    }
    return 0;
}

const char* region_name(RegionKind kind) {
    switch (kind) {
        case RegionKind::Isotropic: return "isotropic";
        case RegionKind::Single: return "single";
        case RegionKind::Cross60: return "cross60";
        case RegionKind::Cross90: return "cross90";
        case RegionKind::Triple: return "triple";
    }
    return "?";
}

Layout make_layout(Dims dims, std::uint64_t layout_seed, int block, const LayoutShares& shares) {
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw InvalidArgument("grid dimensions must be positive");
    if (block < 1) throw InvalidArgument("block size must be positive");
    const int bx = (dims.nx + block - 1) / block, by = (dims.ny + block - 1) / block, bz = (dims.nz + block - 1) / block;
    const int n_blocks = bx * by * bz;

    std::vector<RegionKind> kinds;
    if (n_blocks >= 5) {
        auto share = [&](double f) { return std::max(1, static_cast<int>(std::lround(f * n_blocks))); };
        const int n_iso = share(shares.isotropic), n_60 = share(shares.cross60), n_90 = share(shares.cross90),
                  n_tri = share(shares.triple);
        if (n_iso + n_60 + n_90 + n_tri > n_blocks) throw InvalidArgument("layout shares exceed the number of blocks");
        kinds.insert(kinds.end(), static_cast<std::size_t>(n_iso), RegionKind::Isotropic);
        kinds.insert(kinds.end(), static_cast<std::size_t>(n_60), RegionKind::Cross60);
        kinds.insert(kinds.end(), static_cast<std::size_t>(n_90), RegionKind::Cross90);
        kinds.insert(kinds.end(), static_cast<std::size_t>(n_tri), RegionKind::Triple);
        kinds.resize(static_cast<std::size_t>(n_blocks), RegionKind::Single);
    } else {
        const RegionKind small[] = {RegionKind::Single, RegionKind::Cross90, RegionKind::Isotropic, RegionKind::Single};
        for (int i = 0; i < n_blocks; ++i) kinds.push_back(small[i % 4]);
    }

    Rng rng(derive_seed(layout_seed, "layout"));
    rng.shuffle(kinds);
    Layout layout;
    layout.dims = dims;
    for (int i = 0; i < n_blocks; ++i) layout.regions.push_back(Region{kinds[static_cast<std::size_t>(i)], random_rotation(rng)});
    layout.region_of_voxel.resize(dims.voxels());
    for (int z = 0; z < dims.nz; ++z)
        for (int y = 0; y < dims.ny; ++y)
            for (int x = 0; x < dims.nx; ++x)
                layout.region_of_voxel[dims.index(x, y, z)] = (x / block) + bx * ((y / block) + by * (z / block));
    return layout;
}

std::vector<Direction> region_fiber_directions(RegionKind kind, const Eigen::Matrix3d& frame) {
    const Eigen::Vector3d e1 = frame.col(0), e2 = frame.col(1), e3 = frame.col(2);
    switch (kind) {
        case RegionKind::Isotropic: return {};
        case RegionKind::Single: return {Direction::from(e1)};
        case RegionKind::Cross90: return {Direction::from(e1), Direction::from(e2)};
        case RegionKind::Cross60: {
            const double c = std::cos(30.0 * kDegToRad), s = std::sin(30.0 * kDegToRad);
            return {Direction::from(c * e1 + s * e2), Direction::from(c * e1 - s * e2)};
        }
        case RegionKind::Triple: return {Direction::from(e1), Direction::from(e2), Direction::from(e3)};
    }
    return {};
}

SitePreset dhcp_like() {
    SitePreset p;
    p.name = "dhcp";
    p.protocol.site_label = "dhcp";
    p.protocol.shells = {{0.0, 20}, {400.0, 64}, {1000.0, 88}, {2600.0, 148}};
    p.protocol.snr = 30.0;
    p.protocol.s0 = 1000.0;
    p.tissue.fiber_md = 1.1e-3;
    p.tissue.iso_fraction = 0.30;
    // Steep stretch of the curve: FA rises quickly around term age.
    p.age_fa = AgeFaModel{0.50, 0.12, 0.15, 36.0};
    p.age_unit = "weeks_pma";
    p.months_per_age_unit = 1.0 / 4.345;
    p.baseline_ages = {29.3, 44.3};
    p.young_ages = {26.7, 35.0};
    p.old_ages = {40.0, 44.4};
    return p;
}

SitePreset bcp_like() {
    SitePreset p;
    p.name = "bcp";
    p.protocol.site_label = "bcp";
    p.protocol.shells = {{0.0, 7}, {500.0, 24}, {1000.0, 24}, {1500.0, 24}, {2000.0, 24}, {2500.0, 24}, {3000.0, 24}};
    p.protocol.snr = 20.0;
    p.protocol.s0 = 1300.0;
    p.tissue.fiber_md = 0.8e-3;
    p.tissue.iso_fraction = 0.20;
    // Plateau: most of the rise happens in the first months.
    p.age_fa = AgeFaModel{0.68, 0.05, 0.30, 2.0};
    p.age_unit = "months";
    p.months_per_age_unit = 1.0;
    p.baseline_ages = {1.5, 60.0};
    p.young_ages = {0.5, 11.0};
    p.old_ages = {20.0, 36.0};
    return p;
}

SitePreset preset_by_name(const std::string& name) {
    if (name == "dhcp") return dhcp_like();
    if (name == "bcp") return bcp_like();
    throw InvalidArgument("unknown site preset '" + name + "' (expected dhcp or bcp)");
}

Subject build_subject(const CohortConfig& config, const Layout& layout, int index) {
    const SitePreset& preset = config.preset;
    const TissueParams& tissue = preset.tissue;
    const std::uint64_t seed = derive_seed(config.seed, static_cast<std::uint64_t>(index));
    Rng rng(seed);

    Subject s;
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "-%03d", index);
    s.id = config.label + suffix;
    s.seed = seed;
    s.site_label = preset.protocol.site_label;
    s.lmax = config.lmax;
    s.voxel_size_mm = preset.protocol.voxel_size_mm;
    s.dims = config.grid;
    s.gradients = protocol_directions(preset.protocol);
    s.age = rng.uniform(config.age_lo, config.age_hi);

    const double fa = std::clamp(preset.age_fa(s.age) + rng.normal(0.0, tissue.fa_noise_sd), 0.05, 0.95);
    const auto [lpar, lperp] = solve_lambdas(fa, tissue.fiber_md);
    s.tissue = SubjectTissue{fa, lpar, lperp, tissue.free_water_diffusivity, tissue.iso_fraction};

    std::vector<Eigen::Matrix3d> frames;
    for (const auto& r : layout.regions)
        frames.push_back(tissue.random_frames ? random_rotation(rng)
                                              : Eigen::Matrix3d(small_rotation(rng, tissue.orientation_jitter_deg) * r.frame));

    const int n_meas = static_cast<int>(s.gradients.size());
    const int n_coeffs = sh_n_coeffs(config.lmax);
    s.dwi = Volume<float>(s.dims, n_meas);
    s.gt_fod = Volume<float>(s.dims, n_coeffs);
    s.wm_mask = Mask(s.dims, 1);
    s.fiber_class = Volume<unsigned char>(s.dims, 1);
    s.voxels.resize(s.dims.voxels());

    Rng noise(derive_seed(seed, "noise"));
    for (std::size_t v = 0; v < s.dims.voxels(); ++v) {
        const int r = layout.region_of_voxel[v];
        const RegionKind kind = layout.regions[static_cast<std::size_t>(r)].kind;
        VoxelModel vm;
        vm.s0 = preset.protocol.s0;
        if (kind == RegionKind::Isotropic) {
            vm.iso_fraction = 1.0;
            vm.iso_diffusivity = tissue.background_diffusivity;
        } else {
            const auto dirs = region_fiber_directions(kind, frames[static_cast<std::size_t>(r)]);
            vm.iso_fraction = tissue.iso_fraction;
            vm.iso_diffusivity = tissue.free_water_diffusivity;
            const double share = (1.0 - tissue.iso_fraction) / static_cast<double>(dirs.size());
            for (const auto& d : dirs) vm.fibers.push_back(FiberCompartment{d, share, lpar, lperp});
            s.wm_mask(v) = 1;
        }
        s.fiber_class(v) = static_cast<unsigned char>(vm.fibers.size());

        const Eigen::VectorXd noisy = add_rician_noise(simulate_signal(vm, s.gradients), vm.s0, preset.protocol.snr, noise);
        auto out = s.dwi.voxel(v);
        for (int i = 0; i < n_meas; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(noisy(i));
        const ShCoeffs fod = gt_fod(vm, config.lmax, config.apodization);
        auto fout = s.gt_fod.voxel(v);
        for (int i = 0; i < n_coeffs; ++i) fout[static_cast<std::size_t>(i)] = static_cast<float>(fod.coeffs(i));
        s.voxels[v] = std::move(vm);
    }
    return s;
}

std::vector<Subject> build_cohort(const CohortConfig& config) {
    if (config.n_subjects < 1) throw InvalidArgument("cohort needs at least one subject");
    if (!(config.age_hi >= config.age_lo)) throw InvalidArgument("age range is reversed");
    config.preset.protocol.validate();
    const Layout layout = make_layout(config.grid, config.layout_seed, 4, config.layout_shares);
    std::vector<Subject> out;
    out.reserve(static_cast<std::size_t>(config.n_subjects));
    for (int i = 0; i < config.n_subjects; ++i) out.push_back(build_subject(config, layout, i));
    return out;
}

std::vector<int> six_direction_indices(const DirectionSet& gradients, double shell_b) {
    const auto shell = gradients.shell_indices(shell_b, std::max(1.0, 0.01 * shell_b));
    if (shell.size() < 6) throw InvalidArgument("fewer than six directions on the b=" + std::to_string(shell_b) + " shell");
    const DirectionSet candidates = gradients.subset(shell);
    const DirectionSet chosen = select_optimal_directions(candidates, 6);
    std::vector<int> out;
    for (const auto& d : chosen.directions) {
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            if (candidates.directions[i] == d) {
                out.push_back(shell[i]);
                break;
            }
        }
    }
    return out;
}

Eigen::VectorXd mean_b0(const Subject& subject) {
    const auto b0 = subject.gradients.shell_indices(0.0, 1.0);
    if (b0.empty()) throw InvalidArgument("subject " + subject.id + " has no b=0 measurements");
    Eigen::VectorXd out(static_cast<Eigen::Index>(subject.dims.voxels()));
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        const auto sig = subject.dwi.voxel(v);
        double acc = 0.0;
        for (int i : b0) acc += sig[static_cast<std::size_t>(i)];
        out(static_cast<Eigen::Index>(v)) = acc / static_cast<double>(b0.size());
    }
    return out;
}

}  // namespace fodshift
