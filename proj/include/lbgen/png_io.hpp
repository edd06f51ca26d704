#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lbgen/errors.hpp"
#include "lbgen/types.hpp"

namespace lbgen {

// Minimal PNG codec for 8-bit RGB images. The writer always emits filter 0
// scanlines; the reader handles all five standard filters so files from
// other writers load too. Pixels quantise as round(v * 255) on write and
// byte / 255 on read.

namespace png_detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) |
           (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void append_chunk(std::vector<unsigned char>& out, const char tag[4],
                         const std::vector<unsigned char>& data) {
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    std::size_t crc_start = out.size();
    out.insert(out.end(), tag, tag + 4);
    out.insert(out.end(), data.begin(), data.end());
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + data.size())));
    put_u32(out, crc);
}

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace png_detail

inline std::uint8_t quantize_channel(double v) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<std::uint8_t>(c * 255.0 + 0.5);
}

inline std::vector<unsigned char> encode_png(const ToyImage& img) {
    require(img.height > 0 && img.width > 0, "png: empty image");
    require(img.pixels.size() == img.height * img.width * 3, "png: pixel buffer size mismatch");
    std::size_t stride = img.width * 3;
    std::vector<unsigned char> raw;
    raw.reserve(img.height * (stride + 1));
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                raw.push_back(quantize_channel(img.at(y, x, c)));
    }

    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> compressed(bound);
    int rc = ::compress2(compressed.data(), &bound, raw.data(),
                         static_cast<uLong>(raw.size()), 9);
    require(rc == Z_OK, "png: zlib compression failed");
    compressed.resize(bound);

    std::vector<unsigned char> out;
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.insert(out.end(), sig, sig + 8);
    std::vector<unsigned char> ihdr;
    png_detail::put_u32(ihdr, static_cast<std::uint32_t>(img.width));
    png_detail::put_u32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    png_detail::append_chunk(out, "IHDR", ihdr);
    png_detail::append_chunk(out, "IDAT", compressed);
    png_detail::append_chunk(out, "IEND", {});
    return out;
}

inline ToyImage decode_png(const std::vector<unsigned char>& bytes,
                           const std::string& origin = "<memory>") {
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    require(bytes.size() >= 8 && std::memcmp(bytes.data(), sig, 8) == 0,
            "png: bad signature in " + origin);

    std::size_t pos = 8;
    std::uint32_t width = 0, height = 0;
    bool saw_ihdr = false, saw_iend = false;
    std::vector<unsigned char> idat;
    while (pos + 12 <= bytes.size()) {
        std::uint32_t len = png_detail::get_u32(bytes.data() + pos);
        require(pos + 12 + len <= bytes.size(), "png: truncated chunk in " + origin);
        const unsigned char* tag = bytes.data() + pos + 4;
        const unsigned char* data = bytes.data() + pos + 8;
        std::uint32_t want_crc = png_detail::get_u32(data + len);
        std::uint32_t got_crc = static_cast<std::uint32_t>(
            ::crc32(0L, bytes.data() + pos + 4, static_cast<uInt>(4 + len)));
        require(want_crc == got_crc, "png: chunk crc mismatch in " + origin);
        if (std::memcmp(tag, "IHDR", 4) == 0) {
            require(len == 13, "png: bad IHDR in " + origin);
            width = png_detail::get_u32(data);
            height = png_detail::get_u32(data + 4);
            require(data[8] == 8 && data[9] == 2,
                    "png: only 8-bit RGB supported, " + origin);
            require(data[12] == 0, "png: interlaced files unsupported, " + origin);
            saw_ihdr = true;
        } else if (std::memcmp(tag, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(tag, "IEND", 4) == 0) {
            saw_iend = true;
            break;
        }
        pos += 12 + len;
    }
    require(saw_ihdr, "png: missing IHDR in " + origin);
    require(saw_iend, "png: missing IEND in " + origin);
    require(width > 0 && height > 0, "png: zero dimensions in " + origin);

    std::size_t stride = static_cast<std::size_t>(width) * 3;
    std::size_t raw_size = static_cast<std::size_t>(height) * (stride + 1);
    std::vector<unsigned char> raw(raw_size);
    uLongf dest_len = static_cast<uLongf>(raw_size);
    int rc = ::uncompress(raw.data(), &dest_len, idat.data(), static_cast<uLong>(idat.size()));
    require(rc == Z_OK && dest_len == raw_size, "png: corrupt image data in " + origin);

    // Unfilter in place into the output rows.
    std::vector<unsigned char> pix(static_cast<std::size_t>(height) * stride, 0);
    for (std::size_t y = 0; y < height; ++y) {
        unsigned char filter = raw[y * (stride + 1)];
        const unsigned char* src = raw.data() + y * (stride + 1) + 1;
        unsigned char* dst = pix.data() + y * stride;
        const unsigned char* up = y > 0 ? pix.data() + (y - 1) * stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            int a = i >= 3 ? dst[i - 3] : 0;          // left
            int b = up ? up[i] : 0;                   // above
            int c = (up && i >= 3) ? up[i - 3] : 0;   // upper-left
            int x = src[i];
            switch (filter) {
                case 0: dst[i] = static_cast<unsigned char>(x); break;
                case 1: dst[i] = static_cast<unsigned char>((x + a) & 0xFF); break;
                case 2: dst[i] = static_cast<unsigned char>((x + b) & 0xFF); break;
                case 3: dst[i] = static_cast<unsigned char>((x + (a + b) / 2) & 0xFF); break;
                case 4:
                    dst[i] = static_cast<unsigned char>((x + png_detail::paeth(a, b, c)) & 0xFF);
                    break;
                default:
                    throw DomainError("png: unknown filter type in " + origin);
            }
        }
    }

    ToyImage img(height, width);
    for (std::size_t i = 0; i < pix.size(); ++i)
        img.pixels[i] = static_cast<double>(pix[i]) / 255.0;
    return img;
}

inline void write_png(const ToyImage& img, const std::filesystem::path& path) {
    auto bytes = encode_png(img);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "png: cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        require(out.good(), "png: short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline ToyImage read_png(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "png: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return decode_png(bytes, path.string());
}

// Round-trip through 8-bit quantisation without touching disk; synthesis
// scores images on exactly what a reader of the written file will see.
inline ToyImage quantized_view(const ToyImage& img) {
    ToyImage out(img.height, img.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        out.pixels[i] = static_cast<double>(quantize_channel(img.pixels[i])) / 255.0;
    return out;
}

}  // namespace lbgen
