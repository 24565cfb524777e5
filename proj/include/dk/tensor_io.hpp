#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "dk/tensor.hpp"

namespace dk {

// .tsr file: one JSON header line {dims, dtype, byte_order:"little"}
// followed by the flat little-endian float payload.

namespace detail {

inline bool host_is_little_endian() {
    const std::uint16_t probe = 1;
    std::uint8_t byte;
    std::memcpy(&byte, &probe, 1);
    return byte == 1;
}

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<double>() { return "f64"; }
template <>
inline const char* dtype_name<float>() { return "f32"; }

}  // namespace detail

template <typename T>
void save_tsr(const Tensor<T>& t, const std::string& path) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    if (!detail::host_is_little_endian())
        throw std::runtime_error("save_tsr: big-endian hosts unsupported");
    nlohmann::json header = {
        {"dims", {t.n(), t.c(), t.h(), t.w()}},
        {"dtype", detail::dtype_name<T>()},
        {"byte_order", "little"},
    };
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tsr: cannot open " + path);
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!out) throw std::runtime_error("save_tsr: write failed: " + path);
}

template <typename T>
Tensor<T> load_tsr(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tsr: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_tsr: missing header");
    const nlohmann::json header = nlohmann::json::parse(line);
    const auto dims = header.at("dims");
    if (dims.size() != 4) throw std::runtime_error("load_tsr: bad dims");
    if (header.at("byte_order") != "little")
        throw std::runtime_error("load_tsr: unsupported byte order");
    const std::string dtype = header.at("dtype");
    if (dtype != detail::dtype_name<T>())
        throw std::runtime_error("load_tsr: dtype is " + dtype + ", expected " +
                                 detail::dtype_name<T>());
    Tensor<T> t(dims[0], dims[1], dims[2], dims[3]);
    in.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (static_cast<std::size_t>(in.gcount()) != t.size() * sizeof(T))
        throw std::runtime_error("load_tsr: truncated payload");
    if (!t.all_finite())
        throw std::runtime_error("load_tsr: non-finite values in " + path);
    return t;
}

}  // namespace dk
