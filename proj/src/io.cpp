#include "fodshift/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace fodshift {

namespace {

using json = nlohmann::json;

constexpr char kVolumeMagic[4] = {'F', 'O', 'D', 'S'};
constexpr char kModelMagic[4] = {'F', 'O', 'D', 'M'};

// Little-endian encoding independent of the host byte order.
template <class T>
void put(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T get(const char* what) {
        if (pos_ + sizeof(T) > bytes_.size()) throw ParseError(std::string("truncated ") + what, pos_);
        unsigned char b[sizeof(T)];
        std::memcpy(b, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
        T value;
        std::memcpy(&value, b, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }
    void expect_magic(const char (&magic)[4], const char* what) {
        if (bytes_.size() < 4 || std::memcmp(bytes_.data(), magic, 4) != 0)
            throw ParseError(std::string("bad magic, not a ") + what + " file", 0);
        pos_ = 4;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

// ---- files ----

void atomic_write(const fs::path& path, std::string_view bytes) {
    const fs::path dir = path.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            fs::remove(tmp);
            throw Error("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw Error("cannot rename onto " + path.string() + ": " + ec.message());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

// ---- raw volumes ----

std::size_t dtype_size(DType t) {
    switch (t) {
        case DType::U8: return 1;
        case DType::F32: return 4;
        case DType::F64: return 8;
    }
    throw InvalidArgument("unknown dtype");
}

std::size_t VolumeHeader::payload_bytes() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz) *
           static_cast<std::size_t>(nc) * dtype_size(dtype);
}

void VolumeHeader::validate() const {
    if (nx <= 0 || ny <= 0 || nz <= 0 || nc <= 0) throw InvalidArgument("volume dimensions must be positive");
    if (!(voxel_size_mm > 0.0) || !std::isfinite(voxel_size_mm)) throw InvalidArgument("voxel size must be positive");
    dtype_size(dtype);
}

template <class T>
std::string encode_volume(const Volume<T>& vol, double voxel_size_mm) {
    VolumeHeader h;
    h.nx = vol.dims().nx;
    h.ny = vol.dims().ny;
    h.nz = vol.dims().nz;
    h.nc = vol.channels();
    h.dtype = dtype_of<T>();
    h.voxel_size_mm = voxel_size_mm;
    h.validate();

    std::string out;
    out.reserve(kVolumeHeaderBytes + h.payload_bytes());
    out.append(kVolumeMagic, 4);
    put(out, h.version);
    put(out, h.nx);
    put(out, h.ny);
    put(out, h.nz);
    put(out, h.nc);
    put(out, static_cast<std::uint32_t>(h.dtype));
    put(out, h.voxel_size_mm);
    const std::size_t n = vol.voxels();
    for (int c = 0; c < h.nc; ++c)
        for (std::size_t v = 0; v < n; ++v) put(out, vol(v, c));
    return out;
}

VolumeHeader decode_volume_header(std::string_view bytes) {
    Reader r(bytes);
    r.expect_magic(kVolumeMagic, "volume");
    VolumeHeader h;
    h.version = r.get<std::uint32_t>("header");
    if (h.version != kVolumeVersion) throw ParseError("unsupported volume version " + std::to_string(h.version), 4);
    const std::size_t dims_at = r.pos();
    h.nx = r.get<std::int32_t>("header");
    h.ny = r.get<std::int32_t>("header");
    h.nz = r.get<std::int32_t>("header");
    h.nc = r.get<std::int32_t>("header");
    if (h.nx <= 0 || h.ny <= 0 || h.nz <= 0 || h.nc <= 0) throw ParseError("non-positive volume dimensions", dims_at);
    const std::size_t dtype_at = r.pos();
    const auto code = r.get<std::uint32_t>("header");
    if (code < 1 || code > 3) throw ParseError("unknown dtype code " + std::to_string(code), dtype_at);
    h.dtype = static_cast<DType>(code);
    const std::size_t vs_at = r.pos();
    h.voxel_size_mm = r.get<double>("header");
    if (!(h.voxel_size_mm > 0.0) || !std::isfinite(h.voxel_size_mm)) throw ParseError("invalid voxel size", vs_at);
    return h;
}

template <class T>
Volume<T> decode_volume(std::string_view bytes, VolumeHeader* header) {
    const VolumeHeader h = decode_volume_header(bytes);
    if (h.dtype != dtype_of<T>()) throw ParseError("unexpected dtype code " + std::to_string(static_cast<unsigned>(h.dtype)), 24);
    const std::size_t need = kVolumeHeaderBytes + h.payload_bytes();
    if (bytes.size() < need) throw ParseError("truncated payload", bytes.size());
    if (bytes.size() > need) throw ParseError("trailing bytes after payload", need);

    Volume<T> vol(Dims{h.nx, h.ny, h.nz}, h.nc);
    Reader r(bytes.substr(kVolumeHeaderBytes));
    const std::size_t n = vol.voxels();
    for (int c = 0; c < h.nc; ++c)
        for (std::size_t v = 0; v < n; ++v) vol(v, c) = r.get<T>("payload");
    if (header) *header = h;
    return vol;
}

template <class T>
void write_volume(const fs::path& path, const Volume<T>& vol, double voxel_size_mm) {
    atomic_write(path, encode_volume(vol, voxel_size_mm));
}

template <class T>
Volume<T> read_volume(const fs::path& path, VolumeHeader* header) {
    const std::string bytes = read_file(path);
    try {
        return decode_volume<T>(bytes, header);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.detail(), e.offset(), e.is_line());
    }
}

#define FODSHIFT_VOLUME_IO(T)                                                            \
    template std::string encode_volume<T>(const Volume<T>&, double);                    \
    template Volume<T> decode_volume<T>(std::string_view, VolumeHeader*);               \
    template void write_volume<T>(const fs::path&, const Volume<T>&, double);           \
    template Volume<T> read_volume<T>(const fs::path&, VolumeHeader*);
FODSHIFT_VOLUME_IO(unsigned char)
FODSHIFT_VOLUME_IO(float)
FODSHIFT_VOLUME_IO(double)
#undef FODSHIFT_VOLUME_IO

// ---- gradient tables ----

DirectionSet parse_gradient_table(std::string_view text) {
    DirectionSet out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        ++line_no;
        start = end + 1;

        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string_view::npos || line[first] == '#') {
            if (end == text.size()) break;
            continue;
        }

        double v[4];
        int count = 0;
        std::size_t p = first;
        while (p < line.size()) {
            const auto q = line.find_first_of(" \t", p);
            const std::string_view tok = line.substr(p, (q == std::string_view::npos ? line.size() : q) - p);
            if (count == 4) throw ParseError("expected 4 values", line_no, true);
            double x = 0.0;
            const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
            if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size() || !std::isfinite(x))
                throw ParseError("malformed number '" + std::string(tok) + "'", line_no, true);
            v[count++] = x;
            if (q == std::string_view::npos) break;
            p = line.find_first_not_of(" \t", q);
            if (p == std::string_view::npos) break;
        }
        if (count != 4) throw ParseError("expected 4 values", line_no, true);
        if (v[3] < 0.0) throw ParseError("negative b-value", line_no, true);

        const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        Direction d;
        if (norm == 0.0) {
            if (v[3] != 0.0) throw ParseError("zero direction with b > 0", line_no, true);
        } else if (std::abs(norm - 1.0) <= 1e-12) {
            d = Direction{v[0], v[1], v[2]};
        } else {
            d = Direction{v[0] / norm, v[1] / norm, v[2] / norm};
        }
        out.push_back(d, v[3]);
        if (end == text.size()) break;
    }
    return out;
}

std::string format_gradient_table(const DirectionSet& dirs) {
    std::string out = "# gx gy gz b\n";
    char buf[128];
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const auto& d = dirs.directions[i];
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g\n", d.x, d.y, d.z, dirs.b_values[i]);
        out += buf;
    }
    return out;
}

void write_gradient_table(const fs::path& path, const DirectionSet& dirs) {
    atomic_write(path, format_gradient_table(dirs));
}

DirectionSet read_gradient_table(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return parse_gradient_table(text);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.detail(), e.offset(), e.is_line());
    }
}

// ---- models ----

std::string encode_model(const EstimatorModel& model) {
    model.validate();
    std::string out;
    out.append(kModelMagic, 4);
    put(out, kModelVersion);
    put(out, static_cast<std::uint32_t>(model.layer_dims.size()));
    for (int d : model.layer_dims) put(out, static_cast<std::int32_t>(d));
    put(out, model.dropout);
    put(out, model.seed);
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        const auto& w = model.weights[l];
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) put(out, w(i, j));
        for (Eigen::Index i = 0; i < model.biases[l].size(); ++i) put(out, model.biases[l](i));
    }
    return out;
}

EstimatorModel decode_model(std::string_view bytes) {
    Reader r(bytes);
    r.expect_magic(kModelMagic, "model");
    const auto version = r.get<std::uint32_t>("header");
    if (version != kModelVersion) throw ParseError("unsupported model version " + std::to_string(version), 4);
    const std::size_t count_at = r.pos();
    const auto n = r.get<std::uint32_t>("header");
    if (n < 2 || n > 64) throw ParseError("invalid layer count " + std::to_string(n), count_at);

    EstimatorModel m;
    std::size_t params = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::size_t at = r.pos();
        const auto d = r.get<std::int32_t>("header");
        if (d <= 0) throw ParseError("non-positive layer width", at);
        if (i > 0) params += static_cast<std::size_t>(d) * (static_cast<std::size_t>(m.layer_dims.back()) + 1);
        m.layer_dims.push_back(d);
    }
    const std::size_t dropout_at = r.pos();
    m.dropout = r.get<double>("header");
    if (!(m.dropout >= 0.0 && m.dropout < 1.0)) throw ParseError("dropout outside [0, 1)", dropout_at);
    m.seed = r.get<std::uint64_t>("header");

    if (r.remaining() < params * sizeof(float)) throw ParseError("truncated parameters", bytes.size());
    if (r.remaining() > params * sizeof(float)) throw ParseError("trailing bytes after parameters", r.pos() + params * sizeof(float));
    for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
        EstimatorModel::Matrix w(m.layer_dims[l + 1], m.layer_dims[l]);
        EstimatorModel::Vector b(m.layer_dims[l + 1]);
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = r.get<float>("parameters");
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = r.get<float>("parameters");
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    return m;
}

void write_model(const fs::path& path, const EstimatorModel& model) { atomic_write(path, encode_model(model)); }

EstimatorModel read_model(const fs::path& path) {
    const std::string bytes = read_file(path);
    try {
        return decode_model(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.detail(), e.offset(), e.is_line());
    }
}

// ---- MoM mappings ----

void write_mapping(const fs::path& path, const MomMapping& mapping, double voxel_size_mm) {
    if (mapping.alpha.dims() != mapping.beta.dims() || mapping.alpha.channels() != 1 || mapping.beta.channels() != 1)
        throw InvalidArgument("alpha and beta must be single-channel maps of equal size");
    Volume<double> both(mapping.alpha.dims(), 2);
    for (std::size_t v = 0; v < both.voxels(); ++v) {
        both(v, 0) = mapping.alpha(v);
        both(v, 1) = mapping.beta(v);
    }
    write_volume(path, both, voxel_size_mm);
}

MomMapping read_mapping(const fs::path& path) {
    const auto both = read_volume<double>(path);
    if (both.channels() != 2) throw ParseError(path.string() + ": mapping needs 2 channels", 20);
    MomMapping m{Volume<double>(both.dims(), 1), Volume<double>(both.dims(), 1)};
    for (std::size_t v = 0; v < both.voxels(); ++v) {
        m.alpha(v) = both(v, 0);
        m.beta(v) = both(v, 1);
    }
    return m;
}

// ---- JSON ----

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

void write_json(const fs::path& path, const json& j) { atomic_write(path, dump_json(j)); }

json read_json(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), e.byte);
    }
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},         {"lr", c.lr},
                {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
                {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},     {"seed", c.seed},
                {"val_fraction", c.val_fraction}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    if (!j.is_object()) throw InvalidArgument("training config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") c.epochs = value.get<int>();
        else if (key == "lr") c.lr = value.get<double>();
        else if (key == "weight_decay") c.weight_decay = value.get<double>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
        else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
        else if (key == "adam_eps") c.adam_eps = value.get<double>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "val_fraction") c.val_fraction = value.get<double>();
        else throw InvalidArgument("unknown training config key '" + key + "'");
    }
    c.validate();
    return c;
}

// ---- subjects and cohorts ----

void write_subject(const fs::path& dir, const Subject& s) {
    fs::create_directories(dir);
    write_volume(dir / "dwi.raw", s.dwi, s.voxel_size_mm);
    write_volume(dir / "fod.raw", s.gt_fod, s.voxel_size_mm);
    write_volume(dir / "mask.raw", s.wm_mask, s.voxel_size_mm);
    if (!s.fiber_class.empty()) write_volume(dir / "class.raw", s.fiber_class, s.voxel_size_mm);
    write_gradient_table(dir / "grad.txt", s.gradients);
    const json meta{
        {"id", s.id},
        {"age", s.age},
        {"site_label", s.site_label},
        {"seed", s.seed},
        {"lmax", s.lmax},
        {"voxel_size_mm", s.voxel_size_mm},
        {"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
        {"tissue",
         {{"fiber_fa", s.tissue.fiber_fa},
          {"lambda_parallel", s.tissue.lambda_parallel},
          {"lambda_perp", s.tissue.lambda_perp},
          {"free_water_diffusivity", s.tissue.free_water_diffusivity},
          {"iso_fraction", s.tissue.iso_fraction}}},
    };
    write_json(dir / "meta.json", meta);
}

Subject read_subject(const fs::path& dir) {
    const json meta = read_json(dir / "meta.json");
    Subject s;
    try {
        s.id = meta.at("id").get<std::string>();
        s.age = meta.at("age").get<double>();
        s.site_label = meta.at("site_label").get<std::string>();
        s.seed = meta.at("seed").get<std::uint64_t>();
        s.lmax = meta.at("lmax").get<int>();
        s.voxel_size_mm = meta.at("voxel_size_mm").get<double>();
        const auto d = meta.at("dims").get<std::vector<int>>();
        if (d.size() != 3) throw InvalidArgument("dims needs 3 entries");
        s.dims = Dims{d[0], d[1], d[2]};
        if (meta.contains("tissue")) {
            const auto& t = meta.at("tissue");
            s.tissue = SubjectTissue{t.at("fiber_fa").get<double>(), t.at("lambda_parallel").get<double>(),
                                     t.at("lambda_perp").get<double>(), t.at("free_water_diffusivity").get<double>(),
                                     t.at("iso_fraction").get<double>()};
        }
    } catch (const json::exception& e) {
        throw InvalidArgument((dir / "meta.json").string() + ": " + e.what());
    }

    s.gradients = read_gradient_table(dir / "grad.txt");
    s.dwi = read_volume<float>(dir / "dwi.raw");
    s.gt_fod = read_volume<float>(dir / "fod.raw");
    s.wm_mask = read_volume<unsigned char>(dir / "mask.raw");
    if (fs::exists(dir / "class.raw")) s.fiber_class = read_volume<unsigned char>(dir / "class.raw");

    const auto check = [&](const Dims& d, const char* what) {
        if (d != s.dims) throw InvalidArgument(dir.string() + ": " + what + " dimensions differ from meta.json");
    };
    check(s.dwi.dims(), "dwi.raw");
    check(s.gt_fod.dims(), "fod.raw");
    check(s.wm_mask.dims(), "mask.raw");
    if (!s.fiber_class.empty()) check(s.fiber_class.dims(), "class.raw");
    if (static_cast<std::size_t>(s.dwi.channels()) != s.gradients.size())
        throw InvalidArgument(dir.string() + ": dwi.raw channels differ from grad.txt rows");
    if (s.gt_fod.channels() != sh_n_coeffs(s.lmax))
        throw InvalidArgument(dir.string() + ": fod.raw channels do not match lmax");
    return s;
}

void write_cohort(const fs::path& dir, const std::vector<Subject>& subjects) {
    fs::create_directories(dir);
    json ids = json::array();
    for (const auto& s : subjects) {
        write_subject(dir / s.id, s);
        ids.push_back(s.id);
    }
    write_json(dir / "cohort.json", json{{"subjects", ids}});
}

std::vector<Subject> read_cohort(const fs::path& dir) {
    const json j = read_json(dir / "cohort.json");
    std::vector<Subject> out;
    for (const auto& id : j.at("subjects")) out.push_back(read_subject(dir / id.get<std::string>()));
    return out;
}

}  // namespace fodshift
