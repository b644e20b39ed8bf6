#include "crowdsplat/occlusion.hpp"

#include "crowdsplat/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace crowdsplat {

void OcclusionConfig::validate() const {
    ValidationErrors errs;
    if (width <= 0 || height <= 0) errs.add("mask size must be positive");
    if (k_max < 0) errs.add("k_max must be >= 0");
    if (!(axis_min > 0.0) || !(axis_max >= axis_min)) errs.add("axis range must satisfy 0 < min <= max");
    if (n_b_min < 0 || n_b_max < n_b_min) errs.add("Bezier count range must satisfy 0 <= min <= max");
    if (!(thickness_min > 0.0) || !(thickness_max >= thickness_min)) errs.add("thickness range must satisfy 0 < min <= max");
    if (!(line_prob >= 0.0 && line_prob <= 1.0)) errs.add("line_prob must be in [0, 1]");
    if (!(max_line_area > 0.0 && max_line_area < 1.0)) errs.add("max_line_area must be in (0, 1)");
    if (morph_kernel < 1 || morph_kernel % 2 == 0) errs.add("morph_kernel must be odd and >= 1");
    if (close_iters < 0 || dilate_iters < 0) errs.add("morphology iteration counts must be >= 0");
    errs.throw_if_any("invalid occlusion config");
}

ImageBuffer ellipse_mask(const Vec2& center, double a_x, double a_y, double angle, int width, int height) {
    if (!(a_x > 0.0) || !(a_y > 0.0)) throw ValidationError("ellipse semi-axes must be > 0");
    ImageBuffer mask(width, height, 1, ImageRole::mask);
    const double c = std::cos(angle), s = std::sin(angle);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double dx = x - center.x(), dy = y - center.y();
            const double u = c * dx + s * dy;
            const double v = -s * dx + c * dy;
            if (u * u / (a_x * a_x) + v * v / (a_y * a_y) <= 1.0) mask.at(x, y) = 1.0;
        }
    }
    return mask;
}

Vec2 bezier_point(const Vec2& c0, const Vec2& c1, const Vec2& c2, double t) {
    const double u = 1.0 - t;
    return u * u * c0 + 2.0 * u * t * c1 + t * t * c2;
}

namespace {

constexpr int kBezierSegments = 64;

struct PixelBox {
    int x0, x1, y0, y1;
};

PixelBox clip_box(double min_x, double max_x, double min_y, double max_y, int width, int height) {
    return {std::max(0, static_cast<int>(std::ceil(min_x))), std::min(width - 1, static_cast<int>(std::floor(max_x))),
            std::max(0, static_cast<int>(std::ceil(min_y))), std::min(height - 1, static_cast<int>(std::floor(max_y)))};
}

}  // namespace

ImageBuffer bezier_mask(const Vec2& c0, const Vec2& c1, const Vec2& c2, double thickness, int width, int height) {
    if (!(thickness > 0.0)) throw ValidationError("Bezier thickness must be > 0");
    ImageBuffer mask(width, height, 1, ImageRole::mask);

    std::array<Vec2, kBezierSegments + 1> pts;
    for (int k = 0; k <= kBezierSegments; ++k) pts[k] = bezier_point(c0, c1, c2, static_cast<double>(k) / kBezierSegments);
    double length = 0.0;
    for (int k = 0; k < kBezierSegments; ++k) length += (pts[k + 1] - pts[k]).norm();
    if (length < 1e-9) {
        spdlog::warn("Bezier curve with coincident control points produces an empty mask");
        return mask;
    }

    const double half = 0.5 * thickness;
    // Each segment contributes the rectangle of points that project onto it
    // within distance `half` (edges included).
    for (int k = 0; k < kBezierSegments; ++k) {
        const Vec2& p = pts[k];
        const Vec2 d = pts[k + 1] - p;
        const double len2 = d.squaredNorm();
        if (len2 == 0.0) continue;
        const double len = std::sqrt(len2);
        const PixelBox box = clip_box(std::min(p.x(), pts[k + 1].x()) - half, std::max(p.x(), pts[k + 1].x()) + half,
                                      std::min(p.y(), pts[k + 1].y()) - half, std::max(p.y(), pts[k + 1].y()) + half,
                                      width, height);
        for (int y = box.y0; y <= box.y1; ++y)
            for (int x = box.x0; x <= box.x1; ++x) {
                const Vec2 r(x - p.x(), y - p.y());
                const double t = r.dot(d) / len2;
                if (t < 0.0 || t > 1.0) continue;
                if (std::abs(d.x() * r.y() - d.y() * r.x()) <= half * len) mask.at(x, y) = 1.0;
            }
    }
    // Round joins at interior samples, clipped to the flat end caps so they
    // never poke past the curve's endpoints.
    int first = 0, last = kBezierSegments;
    while ((pts[first + 1] - pts[first]).squaredNorm() == 0.0) ++first;
    while ((pts[last] - pts[last - 1]).squaredNorm() == 0.0) --last;
    const Vec2 start_dir = pts[first + 1] - pts[first], end_dir = pts[last] - pts[last - 1];
    for (int k = 1; k < kBezierSegments; ++k) {
        const Vec2& p = pts[k];
        const PixelBox box = clip_box(p.x() - half, p.x() + half, p.y() - half, p.y() + half, width, height);
        for (int y = box.y0; y <= box.y1; ++y)
            for (int x = box.x0; x <= box.x1; ++x) {
                const Vec2 q(x, y);
                if ((q - p).squaredNorm() > half * half) continue;
                if ((q - pts[0]).dot(start_dir) < 0.0 || (q - pts[kBezierSegments]).dot(end_dir) > 0.0) continue;
                mask.at(x, y) = 1.0;
            }
    }
    return mask;
}

ImageBuffer line_cut_mask(const Vec2& p1, const Vec2& p2, int preferred_side, int width, int height, double max_area) {
    if (p1 == p2) throw ValidationError("line cut endpoints coincide");
    if (preferred_side != 1 && preferred_side != -1) throw ValidationError("line cut side must be +1 or -1");
    std::vector<signed char> sign(static_cast<std::size_t>(width) * height, 0);
    std::size_t positive = 0, negative = 0;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double l = (y - p1.y()) * (p2.x() - p1.x()) - (x - p1.x()) * (p2.y() - p1.y());
            const signed char s = l > 0.0 ? 1 : (l < 0.0 ? -1 : 0);
            sign[static_cast<std::size_t>(y) * width + x] = s;
            if (s > 0) ++positive;
            if (s < 0) ++negative;
        }
    }
    const double total = static_cast<double>(width) * height;
    int side = preferred_side;
    if ((side > 0 ? positive : negative) / total > max_area) side = -side;

    ImageBuffer mask(width, height, 1, ImageRole::mask);
    for (std::size_t i = 0; i < sign.size(); ++i)
        if (sign[i] == side) mask.data()[i] = 1.0;
    return mask;
}

namespace {

void require_odd_kernel(int kernel) {
    if (kernel < 1 || kernel % 2 == 0) throw ValidationError("morphology kernel must be odd and >= 1, got " + std::to_string(kernel));
}

// Separable square max (dilate) or min (erode) filter; outside pixels are 0.
ImageBuffer square_filter(const ImageBuffer& mask, int kernel, bool take_max) {
    const int r = kernel / 2;
    const int w = mask.width(), h = mask.height();
    auto combine = [&](double a, double b) { return take_max ? std::max(a, b) : std::min(a, b); };
    ImageBuffer horiz(w, h, 1, ImageRole::mask);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v = take_max ? 0.0 : 1.0;
            for (int d = -r; d <= r; ++d) {
                const int xx = x + d;
                v = combine(v, (xx >= 0 && xx < w) ? mask.at(xx, y) : 0.0);
            }
            horiz.at(x, y) = v;
        }
    }
    ImageBuffer out(w, h, 1, ImageRole::mask);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v = take_max ? 0.0 : 1.0;
            for (int d = -r; d <= r; ++d) {
                const int yy = y + d;
                v = combine(v, (yy >= 0 && yy < h) ? horiz.at(x, yy) : 0.0);
            }
            out.at(x, y) = v;
        }
    }
    return out;
}

}  // namespace

ImageBuffer morph_dilate(const ImageBuffer& mask, int kernel, int iterations) {
    require_odd_kernel(kernel);
    ImageBuffer out = mask;
    for (int i = 0; i < iterations; ++i) out = square_filter(out, kernel, true);
    return out;
}

ImageBuffer morph_erode(const ImageBuffer& mask, int kernel, int iterations) {
    require_odd_kernel(kernel);
    ImageBuffer out = mask;
    for (int i = 0; i < iterations; ++i) out = square_filter(out, kernel, false);
    return out;
}

ImageBuffer morph_close(const ImageBuffer& mask, int kernel, int iterations) {
    require_odd_kernel(kernel);
    return morph_erode(morph_dilate(mask, kernel, iterations), kernel, iterations);
}

ImageBuffer mask_union(const ImageBuffer& a, const ImageBuffer& b) {
    require_same_shape(a, b, "mask_union");
    ImageBuffer out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::max(a.data()[i], b.data()[i]);
    return out;
}

double mask_fraction(const ImageBuffer& mask) {
    if (mask.size() == 0) return 0.0;
    std::size_t on = 0;
    for (double v : mask.data()) on += v > 0.5;
    return static_cast<double>(on) / mask.size();
}

MaskSpec sample_mask_spec(const std::vector<Vec2>& keypoints, const OcclusionConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CounterRng rng(seed);
    MaskSpec spec;
    spec.seed = seed;

    int n_ellipses = rng.uniform_int(0, cfg.k_max);
    if (keypoints.empty()) n_ellipses = 0;
    for (int i = 0; i < n_ellipses; ++i) {
        EllipseSpec e;
        e.center = keypoints[rng.uniform_int(0, static_cast<int>(keypoints.size()) - 1)];
        e.a_x = rng.uniform(cfg.axis_min, cfg.axis_max);
        e.a_y = rng.uniform(cfg.axis_min, cfg.axis_max);
        e.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        spec.ellipses.push_back(e);
    }

    const int n_beziers = rng.uniform_int(cfg.n_b_min, cfg.n_b_max);
    for (int i = 0; i < n_beziers; ++i) {
        BezierSpec b;
        b.c0 = {rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height)};
        b.c1 = {rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height)};
        b.c2 = {rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height)};
        b.thickness = rng.uniform(cfg.thickness_min, cfg.thickness_max);
        spec.beziers.push_back(b);
    }

    if (rng.bernoulli(cfg.line_prob)) {
        LineCutSpec cut;
        cut.p1 = {rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height)};
        cut.p2 = {rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height)};
        cut.side = rng.uniform01() < 0.5 ? 1 : -1;
        if (cut.p1 != cut.p2) spec.line_cut = cut;
    }
    return spec;
}

ImageBuffer render_mask_components(const MaskSpec& spec, const OcclusionConfig& cfg) {
    ImageBuffer mask(cfg.width, cfg.height, 1, ImageRole::mask);
    for (const auto& e : spec.ellipses)
        mask = mask_union(mask, ellipse_mask(e.center, e.a_x, e.a_y, e.angle, cfg.width, cfg.height));
    for (const auto& b : spec.beziers)
        mask = mask_union(mask, bezier_mask(b.c0, b.c1, b.c2, b.thickness, cfg.width, cfg.height));
    if (spec.line_cut)
        mask = mask_union(mask, line_cut_mask(spec.line_cut->p1, spec.line_cut->p2, spec.line_cut->side, cfg.width,
                                              cfg.height, cfg.max_line_area));
    return mask;
}

ImageBuffer mask_from_spec(const MaskSpec& spec, const OcclusionConfig& cfg) {
    const ImageBuffer components = render_mask_components(spec, cfg);
    ImageBuffer mask = components;
    if (cfg.close_iters > 0) mask = morph_close(mask, cfg.morph_kernel, cfg.close_iters);
    if (cfg.dilate_iters > 0) mask = morph_dilate(mask, cfg.morph_kernel, cfg.dilate_iters);
    // Closing with a zero border can erode slivers touching the image edge;
    // OR the raw components back so nothing sampled is ever lost.
    return mask_union(mask, components);
}

SynthesizedMask synthesize_mask(const std::vector<Vec2>& keypoints, const OcclusionConfig& cfg, std::uint64_t seed) {
    SynthesizedMask out;
    out.spec = sample_mask_spec(keypoints, cfg, seed);
    out.mask = mask_from_spec(out.spec, cfg);
    return out;
}

ImageBuffer apply_mask(const ImageBuffer& image, const ImageBuffer& mask, const Vec3& fill) {
    if (image.width() != mask.width() || image.height() != mask.height())
        throw ValidationError("apply_mask: image and mask sizes differ");
    if (mask.channels() != 1) throw ValidationError("apply_mask: mask must have one channel");
    ImageBuffer out = image;
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            if (mask.at(x, y) > 0.5)
                for (int c = 0; c < image.channels(); ++c) out.at(x, y, c) = c < 3 ? fill[c] : 1.0;
    return out;
}

nlohmann::json mask_spec_to_json(const MaskSpec& spec) {
    auto v2 = [](const Vec2& v) { return nlohmann::json::array({v.x(), v.y()}); };
    nlohmann::json ellipses = nlohmann::json::array(), beziers = nlohmann::json::array();
    for (const auto& e : spec.ellipses)
        ellipses.push_back({{"center", v2(e.center)}, {"a_x", e.a_x}, {"a_y", e.a_y}, {"angle", e.angle}});
    for (const auto& b : spec.beziers)
        beziers.push_back({{"c0", v2(b.c0)}, {"c1", v2(b.c1)}, {"c2", v2(b.c2)}, {"thickness", b.thickness}});
    nlohmann::json doc = {{"seed", spec.seed}, {"ellipses", ellipses}, {"beziers", beziers}};
    if (spec.line_cut)
        doc["line_cut"] = {{"p1", v2(spec.line_cut->p1)}, {"p2", v2(spec.line_cut->p2)}, {"side", spec.line_cut->side}};
    else
        doc["line_cut"] = nullptr;
    return doc;
}

MaskSpec mask_spec_from_json(const nlohmann::json& doc) {
    auto v2 = [](const nlohmann::json& j) { return Vec2(j.at(0).get<double>(), j.at(1).get<double>()); };
    MaskSpec spec;
    try {
        spec.seed = doc.at("seed").get<std::uint64_t>();
        for (const auto& e : doc.at("ellipses"))
            spec.ellipses.push_back({v2(e.at("center")), e.at("a_x").get<double>(), e.at("a_y").get<double>(),
                                     e.at("angle").get<double>()});
        for (const auto& b : doc.at("beziers"))
            spec.beziers.push_back({v2(b.at("c0")), v2(b.at("c1")), v2(b.at("c2")), b.at("thickness").get<double>()});
        if (doc.contains("line_cut") && !doc.at("line_cut").is_null()) {
            const auto& l = doc.at("line_cut");
            spec.line_cut = LineCutSpec{v2(l.at("p1")), v2(l.at("p2")), l.at("side").get<int>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed mask spec JSON: ") + e.what());
    }
    return spec;
}

nlohmann::json occlusion_config_to_json(const OcclusionConfig& cfg) {
    return {{"width", cfg.width},
            {"height", cfg.height},
            {"k_max", cfg.k_max},
            {"axis_range", {cfg.axis_min, cfg.axis_max}},
            {"n_b_range", {cfg.n_b_min, cfg.n_b_max}},
            {"thickness_range", {cfg.thickness_min, cfg.thickness_max}},
            {"line_prob", cfg.line_prob},
            {"max_line_area", cfg.max_line_area},
            {"morph_kernel", cfg.morph_kernel},
            {"close_iters", cfg.close_iters},
            {"morph_dilate_iters", cfg.dilate_iters},
            {"fill_color", {cfg.fill_color.x(), cfg.fill_color.y(), cfg.fill_color.z()}}};
}

OcclusionConfig occlusion_config_from_json(const nlohmann::json& doc) {
    OcclusionConfig cfg;
    try {
        cfg.width = doc.value("width", cfg.width);
        cfg.height = doc.value("height", cfg.height);
        cfg.k_max = doc.value("k_max", cfg.k_max);
        if (doc.contains("axis_range")) {
            cfg.axis_min = doc["axis_range"].at(0).get<double>();
            cfg.axis_max = doc["axis_range"].at(1).get<double>();
        }
        if (doc.contains("n_b_range")) {
            cfg.n_b_min = doc["n_b_range"].at(0).get<int>();
            cfg.n_b_max = doc["n_b_range"].at(1).get<int>();
        }
        if (doc.contains("thickness_range")) {
            cfg.thickness_min = doc["thickness_range"].at(0).get<double>();
            cfg.thickness_max = doc["thickness_range"].at(1).get<double>();
        }
        cfg.line_prob = doc.value("line_prob", cfg.line_prob);
        cfg.max_line_area = doc.value("max_line_area", cfg.max_line_area);
        cfg.morph_kernel = doc.value("morph_kernel", cfg.morph_kernel);
        cfg.close_iters = doc.value("close_iters", cfg.close_iters);
        cfg.dilate_iters = doc.value("morph_dilate_iters", cfg.dilate_iters);
        if (doc.contains("fill_color")) {
            const auto& f = doc["fill_color"];
            cfg.fill_color = Vec3(f.at(0).get<double>(), f.at(1).get<double>(), f.at(2).get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed occlusion config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

}  // namespace crowdsplat
