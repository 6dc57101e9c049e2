#include "memfof/flowio.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace memfof::flowio {

namespace {

constexpr float kFloMagic = 202021.25f;
constexpr int kMaxDim = 1 << 20;

std::string lower_ext(const std::string& path) {
    const std::size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext;
}

void read_exact(std::ifstream& in, void* dst, std::size_t bytes, const std::string& path) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in.gcount()) != bytes)
        throw FormatError("truncated file: " + path);
}

// --- color wheel ---------------------------------------------------------

struct ColorWheel {
    static constexpr int kCols = 55;
    float rgb[kCols][3];

    ColorWheel() {
        const int ry = 15, yg = 6, gc = 4, cb = 11, bm = 13, mr = 6;
        int k = 0;
        for (int i = 0; i < ry; ++i, ++k) set(k, 255, 255.0f * i / ry, 0);
        for (int i = 0; i < yg; ++i, ++k) set(k, 255 - 255.0f * i / yg, 255, 0);
        for (int i = 0; i < gc; ++i, ++k) set(k, 0, 255, 255.0f * i / gc);
        for (int i = 0; i < cb; ++i, ++k) set(k, 0, 255 - 255.0f * i / cb, 255);
        for (int i = 0; i < bm; ++i, ++k) set(k, 255.0f * i / bm, 0, 255);
        for (int i = 0; i < mr; ++i, ++k) set(k, 255, 0, 255 - 255.0f * i / mr);
    }
    void set(int k, float r, float g, float b) {
        rgb[k][0] = r / 255.0f;
        rgb[k][1] = g / 255.0f;
        rgb[k][2] = b / 255.0f;
    }
};

// --- PNM -----------------------------------------------------------------

int pnm_token(std::ifstream& in, const std::string& path) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw FormatError("malformed PNM header: " + path);
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        if (value > 0x7fffff) throw FormatError("PNM header value out of range: " + path);
        c = in.get();
    }
    return value;
}

Tensor read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) throw FormatError("not a binary PNM: " + path);
    const int channels = m1 == '6' ? 3 : 1;
    const int w = pnm_token(in, path);
    const int h = pnm_token(in, path);
    const int maxval = pnm_token(in, path);
    if (w <= 0 || h <= 0 || w > kMaxDim || h > kMaxDim)
        throw FormatError("bad PNM dimensions: " + path);
    if (maxval != 255) throw FormatError("only 8-bit PNM supported: " + path);
    // pnm_token already consumed the single whitespace after maxval.

    std::vector<unsigned char> row(static_cast<std::size_t>(w) * channels);
    Tensor out({3, h, w});
    for (int y = 0; y < h; ++y) {
        read_exact(in, row.data(), row.size(), path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(c, y, x) = row[static_cast<std::size_t>(x) * channels +
                                      (channels == 3 ? c : 0)] /
                                  255.0f;
    }
    return out;
}

void write_pnm(const std::string& path, const Tensor& image) {
    const int ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    out << (ch == 3 ? "P6\n" : "P5\n") << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c) {
                const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
                row[static_cast<std::size_t>(x) * ch + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw FormatError("short write: " + path);
}

// --- PNG -----------------------------------------------------------------

struct PngFile {
    std::FILE* fp = nullptr;
    explicit PngFile(const std::string& path, const char* mode) : fp(std::fopen(path.c_str(), mode)) {}
    ~PngFile() {
        if (fp) std::fclose(fp);
    }
};

Tensor read_png(const std::string& path) {
    PngFile file(path, "rb");
    if (!file.fp) throw FormatError("cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("PNG reader init failed");
    }

    std::vector<unsigned char> pixels;
    std::vector<png_bytep> rows;
    int w = 0, h = 0;
    bool sixteen = false;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG: " + path);
    }

    png_init_io(png, file.fp);
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    sixteen = png_get_bit_depth(png, info) == 16;
    if (!sixteen && w > 0 && h > 0 && w <= kMaxDim && h <= kMaxDim) {
        const png_byte color = png_get_color_type(png, info);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
            png_set_expand_gray_1_2_4_to_8(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
            png_set_gray_to_rgb(png);
        png_set_strip_alpha(png);
        png_read_update_info(png, info);
        if (png_get_rowbytes(png, info) == static_cast<std::size_t>(w) * 3) {
            pixels.assign(static_cast<std::size_t>(w) * h * 3, 0);
            rows.resize(static_cast<std::size_t>(h));
            for (int y = 0; y < h; ++y)
                rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * w * 3;
            png_read_image(png, rows.data());
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);

    if (sixteen) throw FormatError("16-bit PNG not supported: " + path);
    if (w <= 0 || h <= 0 || w > kMaxDim || h > kMaxDim)
        throw FormatError("bad PNG dimensions: " + path);
    if (pixels.empty()) throw FormatError("unsupported PNG layout: " + path);

    Tensor out({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(c, y, x) = pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
    return out;
}

void write_png(const std::string& path, const Tensor& image) {
    const int ch = image.dim(0), h = image.dim(1), w = image.dim(2);

    std::vector<unsigned char> pixels(static_cast<std::size_t>(w) * h * ch);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c) {
                const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
                pixels[(static_cast<std::size_t>(y) * w + x) * ch + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * w * ch;

    PngFile file(path, "wb");
    if (!file.fp) throw FormatError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        throw FormatError("PNG writer init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("PNG write failed: " + path);
    }
    png_init_io(png, file.fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 ch == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

Tensor read_flo(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    float magic = 0;
    std::int32_t w = 0, h = 0;
    read_exact(in, &magic, sizeof(magic), path);
    if (magic != kFloMagic) throw FormatError("not a .flo file (bad magic): " + path);
    read_exact(in, &w, sizeof(w), path);
    read_exact(in, &h, sizeof(h), path);
    if (w < 0 || h < 0 || w > kMaxDim || h > kMaxDim)
        throw FormatError("bad .flo dimensions: " + path);

    Tensor flow({2, h, w});
    const long long np = static_cast<long long>(h) * w;
    std::vector<float> row(static_cast<std::size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        read_exact(in, row.data(), row.size() * sizeof(float), path);
        for (int x = 0; x < w; ++x) {
            flow[static_cast<long long>(y) * w + x] = row[static_cast<std::size_t>(x) * 2];
            flow[np + static_cast<long long>(y) * w + x] = row[static_cast<std::size_t>(x) * 2 + 1];
        }
    }
    return flow;
}

void write_flo(const std::string& path, const Tensor& flow) {
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("write_flo: flow must be (2,H,W)");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    const std::int32_t w = flow.dim(2), h = flow.dim(1);
    const float magic = kFloMagic;
    out.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
    out.write(reinterpret_cast<const char*>(&w), sizeof(w));
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const long long np = static_cast<long long>(h) * w;
    std::vector<float> row(static_cast<std::size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            row[static_cast<std::size_t>(x) * 2] = flow[static_cast<long long>(y) * w + x];
            row[static_cast<std::size_t>(x) * 2 + 1] = flow[np + static_cast<long long>(y) * w + x];
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) throw FormatError("short write: " + path);
}

Tensor colorize(const Tensor& flow, float max_mag) {
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("colorize: flow must be (2,H,W)");
    static const ColorWheel wheel;
    const int h = flow.dim(1), w = flow.dim(2);
    const long long np = static_cast<long long>(h) * w;

    double scale = max_mag;
    if (scale <= 0) {
        for (long long i = 0; i < np; ++i) {
            const float u = flow[i], v = flow[np + i];
            if (!std::isfinite(u) || !std::isfinite(v)) continue;
            scale = std::max(scale, std::hypot(static_cast<double>(u), static_cast<double>(v)));
        }
    }
    if (scale <= 0) scale = 1.0;

    Tensor out({3, h, w});
    for (long long i = 0; i < np; ++i) {
        const float u = flow[i], v = flow[np + i];
        if (!std::isfinite(u) || !std::isfinite(v)) continue;  // stays black
        const double rad = std::hypot(static_cast<double>(u), static_cast<double>(v)) / scale;
        const double a = std::atan2(-static_cast<double>(v), -static_cast<double>(u)) / M_PI;
        const double fk = (a + 1.0) / 2.0 * (ColorWheel::kCols - 1);
        const int k0 = static_cast<int>(std::floor(fk)) % ColorWheel::kCols;
        const int k1 = (k0 + 1) % ColorWheel::kCols;
        const double f = fk - std::floor(fk);
        for (int c = 0; c < 3; ++c) {
            double col = (1.0 - f) * wheel.rgb[k0][c] + f * wheel.rgb[k1][c];
            if (rad <= 1.0)
                col = 1.0 - rad * (1.0 - col);
            else
                col *= 0.75;
            out[static_cast<long long>(c) * np + i] = static_cast<float>(col);
        }
    }
    return out;
}

Tensor read_image(const std::string& path) {
    const std::string ext = lower_ext(path);
    if (ext == "png") return read_png(path);
    if (ext == "ppm" || ext == "pgm" || ext == "pnm") return read_pnm(path);
    throw FormatError("unsupported image format: " + path);
}

void write_image(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
        throw ShapeError("write_image: image must be (3,H,W) or (1,H,W)");
    const std::string ext = lower_ext(path);
    if (ext == "png") {
        write_png(path, image);
        return;
    }
    if (ext == "ppm" || ext == "pgm" || ext == "pnm") {
        write_pnm(path, image);
        return;
    }
    throw FormatError("unsupported image format: " + path);
}

}  // namespace memfof::flowio
