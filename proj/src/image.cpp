#include "crowdsplat/image.hpp"

#include "crowdsplat/fs_util.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace crowdsplat {

std::string_view to_string(ImageRole role) {
    switch (role) {
        case ImageRole::rgb: return "rgb";
        case ImageRole::alpha: return "alpha";
        case ImageRole::mask: return "mask";
        case ImageRole::normal: return "normal";
    }
    return "unknown";
}

ImageBuffer::ImageBuffer(int width, int height, int channels, ImageRole role, double fill)
    : width_(width), height_(height), channels_(channels), role_(role) {
    if (width < 0 || height < 0) throw ValidationError("image dimensions must be non-negative");
    if (channels != 1 && channels != 3 && channels != 4)
        throw ValidationError("image channels must be 1, 3 or 4, got " + std::to_string(channels));
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, std::string_view what) {
    if (!a.same_shape(b)) {
        throw ValidationError(std::string(what) + ": image shape mismatch (" + std::to_string(a.width()) + "x"
                              + std::to_string(a.height()) + "x" + std::to_string(a.channels()) + " vs "
                              + std::to_string(b.width()) + "x" + std::to_string(b.height()) + "x"
                              + std::to_string(b.channels()) + ")");
    }
}

void require_finite(const ImageBuffer& image, std::string_view what) {
    for (std::size_t i = 0; i < image.size(); ++i) {
        if (!std::isfinite(image.data()[i]))
            throw ValidationError(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
    }
}

ImageBuffer hconcat(const std::vector<ImageBuffer>& images) {
    if (images.empty()) return {};
    const int h = images.front().height();
    const int c = images.front().channels();
    int w = 0;
    for (const auto& im : images) {
        if (im.height() != h || im.channels() != c) throw ValidationError("hconcat: height/channel mismatch");
        w += im.width();
    }
    ImageBuffer out(w, h, c, images.front().role());
    int x0 = 0;
    for (const auto& im : images) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < im.width(); ++x)
                for (int k = 0; k < c; ++k) out.at(x0 + x, y, k) = im.at(x, y, k);
        x0 += im.width();
    }
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

int png_color_type(int channels) {
    switch (channels) {
        case 1: return PNG_COLOR_TYPE_GRAY;
        case 3: return PNG_COLOR_TYPE_RGB;
        default: return PNG_COLOR_TYPE_RGB_ALPHA;
    }
}

}  // namespace

void write_png(const std::filesystem::path& path, const ImageBuffer& image, int bit_depth) {
    if (bit_depth != 8 && bit_depth != 16) throw ValidationError("PNG bit depth must be 8 or 16");
    if (image.width() == 0 || image.height() == 0) throw ValidationError("cannot write empty image " + path.string());

    const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
    const int bytes_per_sample = bit_depth / 8;
    const std::size_t row_bytes = static_cast<std::size_t>(image.width()) * image.channels() * bytes_per_sample;
    std::vector<unsigned char> rows(row_bytes * image.height());
    for (int y = 0; y < image.height(); ++y) {
        unsigned char* row = rows.data() + row_bytes * y;
        for (int x = 0; x < image.width(); ++x) {
            for (int c = 0; c < image.channels(); ++c) {
                const double v = std::clamp(image.at(x, y, c), 0.0, 1.0);
                const auto q = static_cast<unsigned>(std::lround(v * max_value));
                const std::size_t i = static_cast<std::size_t>(x) * image.channels() + c;
                if (bytes_per_sample == 1) {
                    row[i] = static_cast<unsigned char>(q);
                } else {
                    row[2 * i] = static_cast<unsigned char>(q >> 8);
                    row[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
                }
            }
        }
    }

    // Written into a sibling temp file, then renamed.
    write_atomically(path, [&](const std::filesystem::path& tmp) {
        std::unique_ptr<std::FILE, FileCloser> file(std::fopen(tmp.c_str(), "wb"));
        if (!file) throw Error("cannot open " + tmp.string() + " for writing");
        png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        png_infop info = png ? png_create_info_struct(png) : nullptr;
        if (!png || !info) {
            png_destroy_write_struct(&png, &info);
            throw Error("libpng initialisation failed");
        }
        if (setjmp(png_jmpbuf(png))) {
            png_destroy_write_struct(&png, &info);
            throw Error("libpng error while writing " + path.string());
        }
        png_init_io(png, file.get());
        png_set_IHDR(png, info, image.width(), image.height(), bit_depth, png_color_type(image.channels()),
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        // Fixed zlib settings so identical images give identical bytes.
        png_set_compression_level(png, 6);
        png_write_info(png, info);
        for (int y = 0; y < image.height(); ++y) png_write_row(png, rows.data() + row_bytes * y);
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
    });
}

ImageBuffer read_png(const std::filesystem::path& path, ImageRole role) {
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
    if (!file) throw ValidationError("cannot open PNG " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("libpng initialisation failed");
    }
    std::vector<unsigned char> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValidationError("malformed PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const int color_type = png_get_color_type(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int channels = png_get_channels(png, info);
    const int depth = png_get_bit_depth(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    rows.resize(row_bytes * height);
    std::vector<png_bytep> row_ptrs(height);
    for (int y = 0; y < height; ++y) row_ptrs[y] = rows.data() + row_bytes * y;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    if (channels != 1 && channels != 3 && channels != 4)
        throw ValidationError("unsupported PNG channel count in " + path.string());
    const double max_value = depth == 16 ? 65535.0 : 255.0;
    ImageBuffer image(width, height, channels, role);
    for (int y = 0; y < height; ++y) {
        const unsigned char* row = rows.data() + row_bytes * y;
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < channels; ++c) {
                const std::size_t i = static_cast<std::size_t>(x) * channels + c;
                const unsigned q = depth == 16 ? (static_cast<unsigned>(row[2 * i]) << 8) | row[2 * i + 1] : row[i];
                image.at(x, y, c) = q / max_value;
            }
        }
    }
    return image;
}

}  // namespace crowdsplat
