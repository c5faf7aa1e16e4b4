#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "fodshift/error.hpp"

namespace fodshift {

struct Dims {
    int nx = 0, ny = 0, nz = 0;

    std::size_t voxels() const noexcept {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
    }
    std::size_t index(int x, int y, int z) const noexcept {
        return static_cast<std::size_t>(x) + static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
    }
    bool contains(int x, int y, int z) const noexcept {
        return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
    }
    std::array<int, 3> coords(std::size_t v) const noexcept {
        const int x = static_cast<int>(v % static_cast<std::size_t>(nx));
        const int y = static_cast<int>((v / static_cast<std::size_t>(nx)) % static_cast<std::size_t>(ny));
        const int z = static_cast<int>(v / (static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny)));
        return {x, y, z};
    }
    friend bool operator==(const Dims&, const Dims&) = default;
};

/// Dense voxel grid with `channels` values per voxel. In memory the channels of
/// one voxel are contiguous and voxels run x-fastest; the on-disk layout is
/// handled by io.
template <class T>
class Volume {
public:
    Volume() = default;
    Volume(Dims dims, int channels, T fill = T{})
        : dims_(dims), channels_(channels), data_(dims.voxels() * static_cast<std::size_t>(channels), fill) {
        if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0 || channels <= 0)
            throw InvalidArgument("volume dimensions must be positive");
    }

    const Dims& dims() const noexcept { return dims_; }
    int channels() const noexcept { return channels_; }
    std::size_t voxels() const noexcept { return dims_.voxels(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> voxel(std::size_t v) noexcept {
        return {data_.data() + v * static_cast<std::size_t>(channels_), static_cast<std::size_t>(channels_)};
    }
    std::span<const T> voxel(std::size_t v) const noexcept {
        return {data_.data() + v * static_cast<std::size_t>(channels_), static_cast<std::size_t>(channels_)};
    }

    T& operator()(std::size_t v, int c = 0) noexcept { return data_[v * static_cast<std::size_t>(channels_) + static_cast<std::size_t>(c)]; }
    const T& operator()(std::size_t v, int c = 0) const noexcept { return data_[v * static_cast<std::size_t>(channels_) + static_cast<std::size_t>(c)]; }

    T& at(int x, int y, int z, int c = 0) noexcept { return (*this)(dims_.index(x, y, z), c); }
    const T& at(int x, int y, int z, int c = 0) const noexcept { return (*this)(dims_.index(x, y, z), c); }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    friend bool operator==(const Volume&, const Volume&) = default;

private:
    Dims dims_;
    int channels_ = 0;
    std::vector<T> data_;
};

using Mask = Volume<unsigned char>;

}  // namespace fodshift
