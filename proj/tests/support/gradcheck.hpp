#pragma once

// Central finite differences of a random linear image loss through render().
// Raw quaternion components are perturbed directly; since rendering uses
// q/|q|, the numeric derivative at a unit q is already the tangent projection.

#include "crowdsplat/renderer.hpp"
#include "support/test_support.hpp"

#include <functional>
#include <string>

namespace testsupport {

struct GradCheckResult {
    int checked = 0;
    int failed = 0;
    double worst_rel = 0.0;   // largest |a - n| / max(|a|, |n|) among entries above the abs floor
    std::string first_failure;
};

inline double linear_loss(const ImageBuffer& rgb, const ImageBuffer& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < rgb.size(); ++i) s += rgb.data()[i] * weights.data()[i];
    return s;
}

inline GradCheckResult check_render_gradients(const CrowdScene& scene, const Camera& cam, const RenderSettings& settings,
                                              CounterRng& rng, double h = 1e-4, double rel = 1e-3,
                                              double abs_floor = 1e-6) {
    const ImageBuffer weights = random_image(rng, cam.width, cam.height, 3, -1.0, 1.0);
    const SceneGradients grads = render_backward(scene, cam, weights, settings);

    GradCheckResult out;
    CrowdScene work = scene;
    auto probe = [&](double& slot, double analytic, const std::string& what) {
        const double orig = slot;
        slot = orig + h;
        const double up = linear_loss(render(work, cam, settings).rgb, weights);
        slot = orig - h;
        const double down = linear_loss(render(work, cam, settings).rgb, weights);
        slot = orig;
        const double numeric = (up - down) / (2.0 * h);
        ++out.checked;
        const double diff = std::abs(analytic - numeric);
        const double mag = std::max(std::abs(analytic), std::abs(numeric));
        if (diff > abs_floor) out.worst_rel = std::max(out.worst_rel, diff / mag);
        if (!grad_close(analytic, numeric, rel, abs_floor)) {
            if (out.failed++ == 0)
                out.first_failure = what + ": analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
        }
    };

    for (std::size_t p = 0; p < work.persons.size(); ++p) {
        for (std::size_t i = 0; i < work.persons[p].gaussians.size(); ++i) {
            Gaussian& g = work.persons[p].gaussians[i];
            const GaussianGradient& a = grads.persons[p][i];
            const std::string tag = "person " + std::to_string(p) + " gaussian " + std::to_string(i);
            for (int k = 0; k < 3; ++k) probe(g.position[k], a.position[k], tag + " position");
            for (int k = 0; k < 3; ++k) probe(g.log_scale[k], a.log_scale[k], tag + " log_scale");
            for (int k = 0; k < 4; ++k) probe(g.rotation[k], a.rotation[k], tag + " rotation");
            probe(g.opacity_logit, a.opacity_logit, tag + " opacity");
            for (int k = 0; k < 3; ++k) probe(g.color[k], a.color[k], tag + " color");
        }
    }
    return out;
}

}  // namespace testsupport
