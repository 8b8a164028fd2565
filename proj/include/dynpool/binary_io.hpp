#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian primitives for the on-disk formats.

namespace dynpool::io {

template <class U>
void write_le(std::ostream& os, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    char bytes[sizeof(U)];
    std::memcpy(bytes, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    os.write(bytes, sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
    char bytes[sizeof(U)];
    if (!is.read(bytes, sizeof(U))) throw std::runtime_error("unexpected end of file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U v;
    std::memcpy(&v, bytes, sizeof(U));
    return v;
}

template <class U>
void write_array(std::ostream& os, const U* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data), std::streamsize(n * sizeof(U)));
    } else {
        for (std::size_t i = 0; i < n; ++i) write_le(os, data[i]);
    }
}

template <class U>
void read_array(std::istream& is, U* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        if (!is.read(reinterpret_cast<char*>(data), std::streamsize(n * sizeof(U))))
            throw std::runtime_error("unexpected end of file");
    } else {
        for (std::size_t i = 0; i < n; ++i) data[i] = read_le<U>(is);
    }
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint32_t>(os, std::uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t limit = std::size_t{1} << 30) {
    const auto n = read_le<std::uint32_t>(is);
    if (n > limit) throw std::runtime_error("string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw std::runtime_error("unexpected end of file");
    return s;
}

}  // namespace dynpool::io
