#pragma once

#include "crowdsplat/common.hpp"

#include <filesystem>
#include <string_view>

namespace crowdsplat {

enum class ImageRole { rgb, alpha, mask, normal };

std::string_view to_string(ImageRole role);

/// Row-major interleaved float image. Values are nominally in [0, 1].
class ImageBuffer {
public:
    ImageBuffer() = default;
    ImageBuffer(int width, int height, int channels, ImageRole role, double fill = 0.0);

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    ImageRole role() const { return role_; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
    std::size_t size() const { return data_.size(); }

    double& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const ImageBuffer& other) const {
        return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
    }

    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    bool operator==(const ImageBuffer& other) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    int channels_ = 0;
    ImageRole role_ = ImageRole::rgb;
    std::vector<double> data_;
};

void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, std::string_view what);

// Throws ValidationError if any value is non-finite.
void require_finite(const ImageBuffer& image, std::string_view what);

// Places images left to right on a shared canvas; heights and channels must match.
ImageBuffer hconcat(const std::vector<ImageBuffer>& images);

// PNG IO. Values are linear (no gamma), quantized by round(v * max) after clamping to [0, 1].
void write_png(const std::filesystem::path& path, const ImageBuffer& image, int bit_depth = 8);
ImageBuffer read_png(const std::filesystem::path& path, ImageRole role = ImageRole::rgb);

}  // namespace crowdsplat
