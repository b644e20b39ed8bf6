#pragma once

#include "crowdsplat/camera.hpp"
#include "crowdsplat/image.hpp"
#include "crowdsplat/scene.hpp"

namespace crowdsplat {

struct RenderSettings {
    double lowpass = 0.3;             // px^2 added to the 2D covariance diagonal
    double alpha_clamp = 0.999;       // per-Gaussian alpha upper bound
    double min_transmittance = 1e-4;  // compositing stops below this
    double near_plane = 0.01;         // metres; closer Gaussians are culled
    // Footprints are truncated where opacity * exp(-q/2) < alpha_cutoff. The
    // truncation is a step in the loss, so keep it well below what a central
    // difference at h=1e-4 can resolve (cutoff / 2h against a 1e-6 floor).
    double alpha_cutoff = 1e-12;
    int tile_size = 16;
    int threads = 1;
};

struct RenderOutput {
    ImageBuffer rgb;
    ImageBuffer alpha;
    std::vector<int> contributing_count;  // per pixel, row-major
};

struct GaussianGradient {
    Vec3 position = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4::Zero();  // tangent to the quaternion sphere
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Zero();
};

// Indexed like scene.persons[p].gaussians[i].
struct SceneGradients {
    std::vector<std::vector<GaussianGradient>> persons;

    static SceneGradients zeros_like(const CrowdScene& scene);
    void add(const SceneGradients& other);
    bool all_finite() const;
};

/// Tile-based front-to-back splatting. Each Gaussian is projected with the
/// perspective Jacobian (EWA), sorted by camera depth (ties by scene order)
/// and composited per pixel over the scene background.
RenderOutput render(const CrowdScene& scene, const Camera& camera, const RenderSettings& settings = {});

/// Gradient of a loss with respect to every Gaussian parameter, given
/// dLoss/dRgb per pixel (3 channels). Makes the same culling, truncation
/// and termination decisions as render(); clamped alphas pass no gradient.
SceneGradients render_backward(const CrowdScene& scene, const Camera& camera, const ImageBuffer& loss_grad,
                               const RenderSettings& settings = {});

/// Z-buffered rasterization of interpolated vertex normals. Normals are
/// expressed in a camera frame with x right, y up, z towards the viewer and
/// encoded as (n + 1) / 2; uncovered pixels are 0.5.
ImageBuffer render_normal_map(const Mesh& mesh, const Camera& camera);

}  // namespace crowdsplat
