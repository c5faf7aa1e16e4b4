#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fodshift/estimator.hpp"
#include "fodshift/geometry.hpp"
#include "fodshift/harmonize.hpp"
#include "fodshift/phantom.hpp"
#include "fodshift/volume.hpp"

namespace fodshift {

namespace fs = std::filesystem;

// ---- raw volumes ----

enum class DType : std::uint32_t { U8 = 1, F32 = 2, F64 = 3 };

std::size_t dtype_size(DType t);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<unsigned char>() { return DType::U8; }
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 36;

/// "FODS", version, nx, ny, nz, nc, dtype, voxel size; little-endian.
struct VolumeHeader {
    std::uint32_t version = kVolumeVersion;
    std::int32_t nx = 0, ny = 0, nz = 0, nc = 0;
    DType dtype = DType::F32;
    double voxel_size_mm = 1.0;

    std::size_t payload_bytes() const;
    void validate() const;
    friend bool operator==(const VolumeHeader&, const VolumeHeader&) = default;
};

/// Header followed by the payload, channel by channel, x fastest within a channel.
template <class T>
std::string encode_volume(const Volume<T>& vol, double voxel_size_mm = 1.0);

/// Parses the header only; throws ParseError with the byte offset of the problem.
VolumeHeader decode_volume_header(std::string_view bytes);

template <class T>
Volume<T> decode_volume(std::string_view bytes, VolumeHeader* header = nullptr);

template <class T>
void write_volume(const fs::path& path, const Volume<T>& vol, double voxel_size_mm = 1.0);
template <class T>
Volume<T> read_volume(const fs::path& path, VolumeHeader* header = nullptr);

// ---- gradient tables ----

/// One "gx gy gz b" line per row; '#' starts a comment line. Directions of
/// b = 0 rows may be zero and are then stored as +z; other directions are
/// normalized unless already unit length.
DirectionSet parse_gradient_table(std::string_view text);
std::string format_gradient_table(const DirectionSet& dirs);

void write_gradient_table(const fs::path& path, const DirectionSet& dirs);
DirectionSet read_gradient_table(const fs::path& path);

// ---- models ----

inline constexpr std::uint32_t kModelVersion = 1;

/// "FODM", version, layer count, layer dims, dropout, seed, then per layer the
/// weights row by row and the biases, as 32-bit floats.
std::string encode_model(const EstimatorModel& model);
EstimatorModel decode_model(std::string_view bytes);

void write_model(const fs::path& path, const EstimatorModel& model);
EstimatorModel read_model(const fs::path& path);

// ---- MoM mappings ----

/// Two-channel float64 volume: alpha, beta.
void write_mapping(const fs::path& path, const MomMapping& mapping, double voxel_size_mm = 1.0);
MomMapping read_mapping(const fs::path& path);

// ---- JSON ----

/// Two-space indented, keys sorted, trailing newline.
std::string dump_json(const nlohmann::json& j);
void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

nlohmann::json train_config_to_json(const TrainConfig& c);
/// Missing keys keep their value in `base`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// ---- subjects and cohorts ----

/// dwi.raw, fod.raw, mask.raw, class.raw, grad.txt and meta.json in `dir`.
void write_subject(const fs::path& dir, const Subject& subject);
Subject read_subject(const fs::path& dir);

/// cohort.json with the subject ids in order, one subdirectory per subject.
void write_cohort(const fs::path& dir, const std::vector<Subject>& subjects);
std::vector<Subject> read_cohort(const fs::path& dir);

// ---- files ----

/// Writes to a temporary file in the same directory and renames it over `path`.
void atomic_write(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

}  // namespace fodshift
