#pragma once

// Minimal PNG codec over zlib: 8-bit grayscale or RGB, no interlace, no
// palette. Enough for dataset image files; anything else is rejected.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sadi {

struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;  // row-major, interleaved

    std::uint8_t at(int y, int x, int c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    std::uint8_t& at(int y, int x, int c) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
};

namespace detail {

inline void png_put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

inline std::uint32_t png_get_u32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void png_chunk(std::string& out, const char type[4], const std::string& data) {
    png_put_u32(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    const auto crc = ::crc32(0, reinterpret_cast<const Bytef*>(body.data()),
                             static_cast<uInt>(body.size()));
    png_put_u32(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

inline std::string png_encode(const Image8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("png_encode: only 1 or 3 channels supported");
    const int stride = img.width * img.channels;
    std::string raw;
    raw.reserve(static_cast<std::size_t>((stride + 1) * img.height));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back('\0');  // filter 0 (none)
        raw.append(reinterpret_cast<const char*>(img.pixels.data() +
                                                 static_cast<std::size_t>(y) * stride),
                   static_cast<std::size_t>(stride));
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::string comp(comp_len, '\0');
    if (compress2(reinterpret_cast<Bytef*>(comp.data()), &comp_len,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  6) != Z_OK)
        throw std::runtime_error("png_encode: deflate failed");
    comp.resize(comp_len);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::png_put_u32(ihdr, static_cast<std::uint32_t>(img.width));
    detail::png_put_u32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(img.channels == 1 ? '\0' : '\x02');   // color type 0 or 2
    ihdr.push_back('\0');                                // compression
    ihdr.push_back('\0');                                // filter
    ihdr.push_back('\0');                                // no interlace
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", comp);
    detail::png_chunk(out, "IEND", "");
    return out;
}

inline Image8 png_decode(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 8 || std::memcmp(p, "\x89PNG\r\n\x1a\n", 8) != 0)
        throw std::invalid_argument("png_decode: not a PNG file");
    Image8 img;
    std::string idat;
    std::size_t off = 8;
    int bit_depth = 0, color_type = 0, interlace = 0;
    while (off + 8 <= bytes.size()) {
        const std::uint32_t len = detail::png_get_u32(p + off);
        const std::string type(bytes, off + 4, 4);
        if (off + 12 + len > bytes.size())
            throw std::invalid_argument("png_decode: truncated chunk " + type);
        const unsigned char* data = p + off + 8;
        if (type == "IHDR") {
            img.width = static_cast<int>(detail::png_get_u32(data));
            img.height = static_cast<int>(detail::png_get_u32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
        } else if (type == "IDAT") {
            idat.append(reinterpret_cast<const char*>(data), len);
        } else if (type == "IEND") {
            break;
        }
        off += 12 + len;
    }
    if (bit_depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0)
        throw std::invalid_argument(
            "png_decode: unsupported format (need 8-bit gray or RGB, no interlace)");
    img.channels = color_type == 0 ? 1 : 3;
    const int stride = img.width * img.channels;
    const std::size_t raw_len = static_cast<std::size_t>((stride + 1) * img.height);
    std::vector<unsigned char> raw(raw_len);
    uLongf out_len = static_cast<uLongf>(raw_len);
    if (uncompress(raw.data(), &out_len, reinterpret_cast<const Bytef*>(idat.data()),
                   static_cast<uLong>(idat.size())) != Z_OK ||
        out_len != raw_len)
        throw std::invalid_argument("png_decode: inflate failed");

    img.pixels.assign(static_cast<std::size_t>(stride) * img.height, 0);
    const int bpp = img.channels;
    for (int y = 0; y < img.height; ++y) {
        const unsigned char filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const unsigned char* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
        std::uint8_t* dst = img.pixels.data() + static_cast<std::size_t>(y) * stride;
        const std::uint8_t* up = y > 0 ? dst - stride : nullptr;
        for (int i = 0; i < stride; ++i) {
            const int a = i >= bpp ? dst[i - bpp] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= bpp) ? up[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default:
                    throw std::invalid_argument("png_decode: bad filter byte");
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

inline void png_save(const Image8& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("png_save: cannot open " + path);
    const std::string bytes = png_encode(img);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Image8 png_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("png_load: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return png_decode(ss.str());
}

}  // namespace sadi
