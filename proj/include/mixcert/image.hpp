#pragma once

// Binary PPM (P6, maxval 255) images.

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "mixcert/error.hpp"

namespace mixcert {

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    Image() = default;
    Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

    bool empty() const noexcept { return width == 0 || height == 0; }
    std::uint8_t* pixel(std::size_t row, std::size_t col) { return &rgb[(row * width + col) * 3]; }
    const std::uint8_t* pixel(std::size_t row, std::size_t col) const { return &rgb[(row * width + col) * 3]; }
};

namespace detail {

inline std::size_t read_ppm_number(std::istream& in) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF || !std::isdigit(c)) throw InvalidArgument("malformed PPM header");
    std::size_t value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + static_cast<std::size_t>(c - '0');
        c = in.get();
    }
    // exactly one whitespace byte terminates each header field
    if (c == EOF || !std::isspace(c)) throw InvalidArgument("malformed PPM header");
    return value;
}

}  // namespace detail

inline Image read_ppm(std::istream& in) {
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6') throw InvalidArgument("not a binary PPM (P6) image");
    const std::size_t w = detail::read_ppm_number(in);
    const std::size_t h = detail::read_ppm_number(in);
    const std::size_t maxval = detail::read_ppm_number(in);
    if (maxval != 255) throw InvalidArgument("only 8-bit PPM (maxval 255) is supported");
    Image img(w, h);
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (static_cast<std::size_t>(in.gcount()) != img.rgb.size()) throw InvalidArgument("truncated PPM pixel data");
    return img;
}

inline Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open image: " + path);
    return read_ppm(in);
}

inline void write_ppm(std::ostream& out, const Image& img) {
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write image: " + path);
    write_ppm(out, img);
}

}  // namespace mixcert
