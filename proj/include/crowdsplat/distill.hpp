#pragma once

#include "crowdsplat/camera.hpp"
#include "crowdsplat/metrics.hpp"
#include "crowdsplat/refiner.hpp"
#include "crowdsplat/renderer.hpp"
#include "crowdsplat/rng.hpp"
#include "crowdsplat/scene.hpp"

#include <json.hpp>

#include <set>

namespace crowdsplat {

struct StepSizes {
    double position = 1e-4;
    double log_scale = 1e-3;
    double rotation = 1e-3;
    double opacity_logit = 1e-2;
    double color = 1e-2;
};

struct OptimConfig {
    int iterations = 500;
    StepSizes step;
    double lambda_ssim = 0.2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int views_per_step = 4;
    std::uint64_t seed = 0;
    int threads = 1;
    RenderSettings render;
    SsimConfig ssim;

    void validate() const;
};

nlohmann::json optim_config_to_json(const OptimConfig& cfg);
OptimConfig optim_config_from_json(const nlohmann::json& doc);

struct TargetView {
    Camera camera;
    ImageBuffer image;
};

/// Renders the cluster's persons from every rig camera together with the
/// normal map of their merged meshes and passes both through the refiner.
/// `meshes` is indexed like scene.persons.
std::vector<TargetView> generate_pseudo_gt(const CrowdScene& scene, const std::set<std::string>& cluster,
                                           const CameraRig& rig, const Refiner& refiner,
                                           const std::vector<Mesh>& meshes, const RenderSettings& settings = {});

struct ViewScore {
    double psnr_before = 0.0;
    double psnr_after = 0.0;
    double ssim_before = 0.0;
    double ssim_after = 0.0;
};

struct RefinementReport {
    std::vector<double> loss_trace;  // one entry per iteration
    std::vector<ViewScore> views;    // per target, in target order
    double wall_clock_seconds = 0.0;
    nlohmann::json config;

    nlohmann::json to_json() const;
};

struct DistillResult {
    CrowdScene scene;
    RefinementReport report;
};

/// Adam descent of the cluster's Gaussians against the targets. Each
/// iteration takes the next views_per_step entries of a seeded permutation
/// of the targets (cycled), renders only the cluster, and averages the
/// per-view losses. Gradients are summed in view order; persons outside
/// the cluster are copied through untouched.
DistillResult distill(const CrowdScene& scene, const std::set<std::string>& cluster,
                      const std::vector<TargetView>& targets, const OptimConfig& cfg);

// Optimizes every person in the scene.
DistillResult distill(const CrowdScene& scene, const std::vector<TargetView>& targets, const OptimConfig& cfg);

struct SclConfig {
    double rho = 0.2;

    void validate() const;
};

enum class PairKind { degradation, identity };

std::string_view to_string(PairKind kind);

struct SclSample {
    ImageBuffer input;
    ImageBuffer target;
    PairKind kind = PairKind::degradation;
};

// One uniform draw from rng: identity when it is < rho.
PairKind scl_draw(const SclConfig& cfg, CounterRng& rng);

// (gt, gt) for an identity draw, otherwise the degradation pair (coarse, gt).
SclSample scl_sample(const ImageBuffer& coarse, const ImageBuffer& gt, const SclConfig& cfg, CounterRng& rng);

}  // namespace crowdsplat
