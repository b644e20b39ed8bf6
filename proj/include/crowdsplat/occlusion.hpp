#pragma once

#include "crowdsplat/common.hpp"
#include "crowdsplat/image.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>

namespace crowdsplat {

struct EllipseSpec {
    Vec2 center = Vec2::Zero();
    double a_x = 0.0;
    double a_y = 0.0;
    double angle = 0.0;  // radians
};

struct BezierSpec {
    Vec2 c0 = Vec2::Zero(), c1 = Vec2::Zero(), c2 = Vec2::Zero();
    double thickness = 0.0;
};

struct LineCutSpec {
    Vec2 p1 = Vec2::Zero(), p2 = Vec2::Zero();
    int side = 1;  // +1 keeps L > 0, -1 keeps L < 0 (before the area rule)
};

struct MaskSpec {
    std::vector<EllipseSpec> ellipses;
    std::vector<BezierSpec> beziers;
    std::optional<LineCutSpec> line_cut;
    std::uint64_t seed = 0;
};

struct OcclusionConfig {
    int width = 512;
    int height = 512;
    int k_max = 5;
    double axis_min = 30.0, axis_max = 100.0;      // px
    int n_b_min = 0, n_b_max = 5;
    double thickness_min = 20.0, thickness_max = 60.0;  // px
    double line_prob = 0.5;
    double max_line_area = 0.70;
    int morph_kernel = 5;
    int close_iters = 1;
    int dilate_iters = 3;
    Vec3 fill_color = Vec3::Ones();

    void validate() const;
};

// Every pixel is 1 iff, in the frame rotated by -angle about the center,
// u^2/a_x^2 + v^2/a_y^2 <= 1.
ImageBuffer ellipse_mask(const Vec2& center, double a_x, double a_y, double angle, int width, int height);

// Quadratic Bezier sampled at 65 uniform t (64 segments) and thickened to
// thickness/2 on both sides: each segment fills the band of pixels that
// project onto it within that distance (boundary included) and interior
// samples add a disc of the same radius so bends stay closed. Ends are
// flat. Coincident control points give an empty mask and a logged warning.
ImageBuffer bezier_mask(const Vec2& c0, const Vec2& c1, const Vec2& c2, double thickness, int width, int height);

Vec2 bezier_point(const Vec2& c0, const Vec2& c1, const Vec2& c2, double t);

// L(x, y) = (y - y1)(x2 - x1) - (x - x1)(y2 - y1). Masks pixels whose sign
// of L equals `preferred_side`; if that covers more than max_area of the
// image, the strictly opposite side is returned instead. L = 0 is never masked.
ImageBuffer line_cut_mask(const Vec2& p1, const Vec2& p2, int preferred_side, int width, int height, double max_area);

// Square structuring element of odd size; pixels outside the image count as 0.
ImageBuffer morph_dilate(const ImageBuffer& mask, int kernel, int iterations = 1);
ImageBuffer morph_erode(const ImageBuffer& mask, int kernel, int iterations = 1);
ImageBuffer morph_close(const ImageBuffer& mask, int kernel, int iterations = 1);

ImageBuffer mask_union(const ImageBuffer& a, const ImageBuffer& b);
double mask_fraction(const ImageBuffer& mask);

/// Samples a MaskSpec from `seed`. Draw order on one CounterRng stream:
///   1. ellipse count uniform in {0..k_max} (zero ellipses when no keypoints)
///   2. per ellipse: keypoint index, a_x, a_y, angle in [0, 2pi)
///   3. Bezier count uniform in {n_b_min..n_b_max}
///   4. per curve: C0.x, C0.y, C1.x, C1.y, C2.x, C2.y, thickness
///   5. line-cut coin with probability line_prob
///   6. if cut: p1.x, p1.y, p2.x, p2.y, side coin (+1 when < 0.5)
MaskSpec sample_mask_spec(const std::vector<Vec2>& keypoints, const OcclusionConfig& cfg, std::uint64_t seed);

// Union of every component in the spec, before morphology.
ImageBuffer render_mask_components(const MaskSpec& spec, const OcclusionConfig& cfg);

struct SynthesizedMask {
    MaskSpec spec;
    ImageBuffer mask;
};

// Union, close (close_iters) then dilate (dilate_iters). The raw component
// union is OR-ed back in at the end since closing is not extensive at the
// image border.
ImageBuffer mask_from_spec(const MaskSpec& spec, const OcclusionConfig& cfg);

// sample_mask_spec followed by mask_from_spec.
SynthesizedMask synthesize_mask(const std::vector<Vec2>& keypoints, const OcclusionConfig& cfg, std::uint64_t seed);

// fill where mask == 1, the input elsewhere.
ImageBuffer apply_mask(const ImageBuffer& image, const ImageBuffer& mask, const Vec3& fill);

nlohmann::json mask_spec_to_json(const MaskSpec& spec);
MaskSpec mask_spec_from_json(const nlohmann::json& doc);
nlohmann::json occlusion_config_to_json(const OcclusionConfig& cfg);
OcclusionConfig occlusion_config_from_json(const nlohmann::json& doc);

}  // namespace crowdsplat
