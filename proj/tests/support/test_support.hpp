#pragma once

#include "crowdsplat/camera.hpp"
#include "crowdsplat/image.hpp"
#include "crowdsplat/rng.hpp"
#include "crowdsplat/scene.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>

namespace testsupport {

using namespace crowdsplat;

// Unique scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;

    TempDir() {
        std::string templ = (std::filesystem::temp_directory_path() / "crowdsplat-test-XXXXXX").string();
        if (!mkdtemp(templ.data())) throw std::runtime_error("mkdtemp failed");
        path = templ;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

// Camera at the origin looking down +z (identity extrinsics).
inline Camera axis_camera(int width, int height, double focal) {
    Camera cam;
    cam.intrinsics = Intrinsics::centered(width, height, focal);
    cam.width = width;
    cam.height = height;
    return cam;
}

inline Vec4 random_unit_quaternion(CounterRng& rng) {
    Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return q / q.norm();
}

struct SceneRanges {
    double depth_min = 2.5, depth_max = 6.0;
    double lateral = 0.45;  // |x|, |y| <= lateral * depth * (half image) / focal
    double scale_min = 0.02, scale_max = 0.15;
    double logit_min = -2.0, logit_max = 2.5;
};

// Random Gaussians spread over `persons` persons, all in front of axis_camera.
inline CrowdScene random_scene(CounterRng& rng, int gaussians, int persons, const Camera& cam,
                               const SceneRanges& r = {}) {
    std::vector<PersonGaussians> ps(persons);
    for (int p = 0; p < persons; ++p) {
        ps[p].person_id = "p" + std::to_string(p);
        ps[p].root_translation = Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
    }
    const double half_w = 0.5 * cam.width / cam.intrinsics.fx;
    const double half_h = 0.5 * cam.height / cam.intrinsics.fy;
    for (int i = 0; i < gaussians; ++i) {
        PersonGaussians& person = ps[i % persons];
        const double z = rng.uniform(r.depth_min, r.depth_max);
        const Vec3 world(rng.uniform(-1.0, 1.0) * r.lateral * 2.0 * half_w * z,
                         rng.uniform(-1.0, 1.0) * r.lateral * 2.0 * half_h * z, z);
        const Vec3 log_scale(std::log(rng.uniform(r.scale_min, r.scale_max)),
                             std::log(rng.uniform(r.scale_min, r.scale_max)),
                             std::log(rng.uniform(r.scale_min, r.scale_max)));
        const Vec4 q = random_unit_quaternion(rng);
        const double logit_v = rng.uniform(r.logit_min, r.logit_max);
        const Vec3 color(rng.uniform01(), rng.uniform01(), rng.uniform01());
        person.gaussians.emplace_back(world - person.root_translation, log_scale, q, logit_v, color);
    }
    // Persons left empty (gaussians < persons) are dropped.
    std::vector<PersonGaussians> kept;
    for (auto& p : ps)
        if (!p.gaussians.empty()) kept.push_back(std::move(p));
    return assemble_scene(std::move(kept), Vec3(rng.uniform01(), rng.uniform01(), rng.uniform01()));
}

inline ImageBuffer random_image(CounterRng& rng, int width, int height, int channels = 3, double lo = 0.0,
                                double hi = 1.0) {
    ImageBuffer img(width, height, channels, ImageRole::rgb);
    for (double& v : img.data()) v = rng.uniform(lo, hi);
    return img;
}

inline double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// Relative check with an absolute floor.
inline bool grad_close(double analytic, double numeric, double rel = 1e-3, double abs_floor = 1e-6) {
    const double diff = std::abs(analytic - numeric);
    return diff <= abs_floor || diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

}  // namespace testsupport
