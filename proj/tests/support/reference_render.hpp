#pragma once

// Per-pixel brute-force splatting written from the compositing definition:
// every Gaussian is evaluated at every pixel, no tiles and no footprint
// truncation. Shares no code with the library renderer.

#include "crowdsplat/camera.hpp"
#include "crowdsplat/image.hpp"
#include "crowdsplat/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace testsupport {

struct ReferenceOptions {
    double lowpass = 0.3;
    double alpha_clamp = 0.999;
    double min_transmittance = 1e-4;  // 0 disables termination
    double near_plane = 0.01;
};

struct ReferenceSplat {
    double depth;
    std::size_t index;
    double mx, my;     // screen mean
    double ia, ib, ic;  // inverse 2D covariance
    double opacity;
    double r, g, b;
};

inline void quaternion_to_matrix(const double q_in[4], double m[3][3]) {
    const double n = std::sqrt(q_in[0] * q_in[0] + q_in[1] * q_in[1] + q_in[2] * q_in[2] + q_in[3] * q_in[3]);
    const double w = q_in[0] / n, x = q_in[1] / n, y = q_in[2] / n, z = q_in[3] / n;
    m[0][0] = 1 - 2 * (y * y + z * z);
    m[0][1] = 2 * (x * y - w * z);
    m[0][2] = 2 * (x * z + w * y);
    m[1][0] = 2 * (x * y + w * z);
    m[1][1] = 1 - 2 * (x * x + z * z);
    m[1][2] = 2 * (y * z - w * x);
    m[2][0] = 2 * (x * z - w * y);
    m[2][1] = 2 * (y * z + w * x);
    m[2][2] = 1 - 2 * (x * x + y * y);
}

inline std::vector<ReferenceSplat> reference_splats(const crowdsplat::CrowdScene& scene,
                                                    const crowdsplat::Camera& cam, const ReferenceOptions& opt) {
    std::vector<ReferenceSplat> out;
    std::size_t index = 0;
    for (const auto& person : scene.persons) {
        for (const auto& gs : person.gaussians) {
            const std::size_t my_index = index++;
            double world[3], c[3];
            for (int k = 0; k < 3; ++k) world[k] = gs.position[k] + person.root_translation[k];
            for (int r = 0; r < 3; ++r) {
                c[r] = cam.translation[r];
                for (int k = 0; k < 3; ++k) c[r] += cam.rotation(r, k) * world[k];
            }
            if (c[2] <= opt.near_plane) continue;

            const double q[4] = {gs.rotation[0], gs.rotation[1], gs.rotation[2], gs.rotation[3]};
            double R[3][3];
            quaternion_to_matrix(q, R);
            const double s[3] = {std::exp(gs.log_scale[0]), std::exp(gs.log_scale[1]), std::exp(gs.log_scale[2])};
            double cov[3][3];
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    cov[i][j] = 0;
                    for (int k = 0; k < 3; ++k) cov[i][j] += R[i][k] * s[k] * s[k] * R[j][k];
                }
            // Rotate into camera space, then apply the projection Jacobian.
            double cc[3][3];
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    cc[i][j] = 0;
                    for (int a = 0; a < 3; ++a)
                        for (int b = 0; b < 3; ++b) cc[i][j] += cam.rotation(i, a) * cov[a][b] * cam.rotation(j, b);
                }
            const double fx = cam.intrinsics.fx, fy = cam.intrinsics.fy, z = c[2];
            const double J[2][3] = {{fx / z, 0, -fx * c[0] / (z * z)}, {0, fy / z, -fy * c[1] / (z * z)}};
            double s2[2][2];
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) {
                    s2[i][j] = 0;
                    for (int a = 0; a < 3; ++a)
                        for (int b = 0; b < 3; ++b) s2[i][j] += J[i][a] * cc[a][b] * J[j][b];
                }
            s2[0][0] += opt.lowpass;
            s2[1][1] += opt.lowpass;
            const double off = 0.5 * (s2[0][1] + s2[1][0]);
            const double det = s2[0][0] * s2[1][1] - off * off;
            if (!(det > 0)) continue;
            out.push_back({z, my_index, fx * c[0] / z + cam.intrinsics.cx, fy * c[1] / z + cam.intrinsics.cy,
                           s2[1][1] / det, -off / det, s2[0][0] / det, 1.0 / (1.0 + std::exp(-gs.opacity_logit)),
                           gs.color[0], gs.color[1], gs.color[2]});
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const ReferenceSplat& a, const ReferenceSplat& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
    });
    return out;
}

inline crowdsplat::ImageBuffer reference_render(const crowdsplat::CrowdScene& scene, const crowdsplat::Camera& cam,
                                                const ReferenceOptions& opt = {}) {
    const auto splats = reference_splats(scene, cam, opt);
    crowdsplat::ImageBuffer img(cam.width, cam.height, 3, crowdsplat::ImageRole::rgb);
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            double T = 1.0, acc[3] = {0, 0, 0};
            for (const auto& s : splats) {
                const double dx = x - s.mx, dy = y - s.my;
                const double power = s.ia * dx * dx + 2 * s.ib * dx * dy + s.ic * dy * dy;
                const double alpha = std::min(opt.alpha_clamp, s.opacity * std::exp(-0.5 * power));
                acc[0] += s.r * alpha * T;
                acc[1] += s.g * alpha * T;
                acc[2] += s.b * alpha * T;
                T *= 1 - alpha;
                if (opt.min_transmittance > 0 && T < opt.min_transmittance) break;
            }
            for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = acc[ch] + T * scene.background_color[ch];
        }
    }
    return img;
}

}  // namespace testsupport
