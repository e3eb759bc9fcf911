#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pdit/errors.hpp"
#include "pdit/tensor.hpp"

namespace pdit {

// Checkpoint file layout:
//   "PDIT"                      4 magic bytes
//   format version              u32 LE (1 = float payload, 2 = double payload)
//   repeated until end of file:
//     name length               u64 LE
//     name                      UTF-8 bytes
//     rank                      u64 LE
//     extents                   rank x u64 LE
//     payload                   numel x scalar, little-endian
// Round-trips are bit-exact.

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace detail {

template <typename T>
constexpr std::uint32_t checkpoint_version() {
    return sizeof(T) == 4 ? 1u : 2u;
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    os.write(b, 8);
}

inline std::uint32_t read_u32(std::istream& is) {
    char b[4];
    if (!is.read(b, 4)) throw IoError("checkpoint: truncated file (u32 field)");
    std::uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    char b[8];
    if (!is.read(b, 8)) throw IoError("checkpoint: truncated file (u64 field)");
    std::uint64_t v;
    std::memcpy(&v, b, 8);
    return v;
}

}  // namespace detail

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
    os.write("PDIT", 4);
    detail::write_u32(os, detail::checkpoint_version<T>());
    for (const auto& [name, tensor] : params) {
        detail::write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u64(os, tensor.rank());
        for (std::size_t e : tensor.shape()) detail::write_u64(os, e);
        os.write(reinterpret_cast<const char*>(tensor.value().data()),
                 static_cast<std::streamsize>(tensor.size() * sizeof(T)));
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

template <typename T>
NamedTensors<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "PDIT", 4) != 0) {
        throw ParseError("checkpoint: bad magic bytes in " + path);
    }
    const std::uint32_t version = detail::read_u32(is);
    if (version != detail::checkpoint_version<T>()) {
        throw ParseError("checkpoint: version " + std::to_string(version) +
                         " does not match expected " +
                         std::to_string(detail::checkpoint_version<T>()) +
                         " (scalar width mismatch)");
    }
    NamedTensors<T> params;
    while (true) {
        is.peek();
        if (is.eof()) break;
        const std::uint64_t name_len = detail::read_u64(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(name_len))) {
            throw IoError("checkpoint: truncated name in " + path);
        }
        const std::uint64_t rank = detail::read_u64(is);
        std::vector<std::size_t> shape(rank);
        std::uint64_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            shape[i] = detail::read_u64(is);
            count *= shape[i];
        }
        std::vector<T> data(count);
        if (!is.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(count * sizeof(T)))) {
            throw IoError("checkpoint: truncated payload for '" + name + "' in " + path);
        }
        params.emplace_back(std::move(name), Tensor<T>::from_data(std::move(shape), std::move(data)));
    }
    return params;
}

// Copies checkpoint values into an existing named parameter set. Names and
// shapes must match exactly (no extras, no missing entries).
template <typename T>
void restore_into(const NamedTensors<T>& loaded,
                  const std::vector<std::pair<std::string, Tensor<T>*>>& live) {
    if (loaded.size() != live.size()) {
        throw ContractError("checkpoint: parameter count mismatch: file has " +
                            std::to_string(loaded.size()) + ", model has " +
                            std::to_string(live.size()));
    }
    for (std::size_t i = 0; i < live.size(); ++i) {
        const auto& [name, tensor] = loaded[i];
        if (name != live[i].first) {
            throw ContractError("checkpoint: parameter '" + name + "' does not match model's '" +
                                live[i].first + "' at position " + std::to_string(i));
        }
        if (tensor.shape() != live[i].second->shape()) {
            throw ShapeError("checkpoint: parameter '" + name + "' has shape " +
                             shape_string(tensor.shape()) + ", model expects " +
                             shape_string(live[i].second->shape()));
        }
        live[i].second->value() = tensor.value();
    }
}

}  // namespace pdit
