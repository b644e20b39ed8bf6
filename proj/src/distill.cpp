#include "crowdsplat/distill.hpp"

#include "crowdsplat/parallel.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace crowdsplat {

void OptimConfig::validate() const {
    ValidationErrors errs;
    if (iterations < 1) errs.add("iterations must be >= 1");
    if (views_per_step < 1) errs.add("views_per_step must be >= 1");
    const std::pair<const char*, double> steps[] = {{"position", step.position},
                                                    {"log_scale", step.log_scale},
                                                    {"rotation", step.rotation},
                                                    {"opacity_logit", step.opacity_logit},
                                                    {"color", step.color}};
    // Zero is allowed so a run can freeze a parameter class.
    for (const auto& [name, v] : steps)
        if (!(v >= 0.0) || !std::isfinite(v)) errs.add(std::string("step size '") + name + "' must be finite and >= 0");
    if (!(lambda_ssim >= 0.0)) errs.add("lambda_ssim must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) errs.add("Adam betas must be in [0, 1)");
    if (!(epsilon > 0.0)) errs.add("Adam epsilon must be > 0");
    errs.throw_if_any("invalid optimization config");
}

nlohmann::json optim_config_to_json(const OptimConfig& cfg) {
    return {{"iterations", cfg.iterations},
            {"step_size",
             {{"position", cfg.step.position},
              {"log_scale", cfg.step.log_scale},
              {"rotation", cfg.step.rotation},
              {"opacity_logit", cfg.step.opacity_logit},
              {"color", cfg.step.color}}},
            {"lambda_ssim", cfg.lambda_ssim},
            {"beta1", cfg.beta1},
            {"beta2", cfg.beta2},
            {"epsilon", cfg.epsilon},
            {"views_per_step", cfg.views_per_step},
            {"seed", cfg.seed}};
}

OptimConfig optim_config_from_json(const nlohmann::json& doc) {
    OptimConfig cfg;
    try {
        cfg.iterations = doc.value("iterations", cfg.iterations);
        if (doc.contains("step_size")) {
            const auto& s = doc["step_size"];
            cfg.step.position = s.value("position", cfg.step.position);
            cfg.step.log_scale = s.value("log_scale", cfg.step.log_scale);
            cfg.step.rotation = s.value("rotation", cfg.step.rotation);
            cfg.step.opacity_logit = s.value("opacity_logit", cfg.step.opacity_logit);
            cfg.step.color = s.value("color", cfg.step.color);
        }
        cfg.lambda_ssim = doc.value("lambda_ssim", cfg.lambda_ssim);
        cfg.beta1 = doc.value("beta1", cfg.beta1);
        cfg.beta2 = doc.value("beta2", cfg.beta2);
        cfg.epsilon = doc.value("epsilon", cfg.epsilon);
        cfg.views_per_step = doc.value("views_per_step", cfg.views_per_step);
        cfg.seed = doc.value("seed", cfg.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed optimization config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::vector<TargetView> generate_pseudo_gt(const CrowdScene& scene, const std::set<std::string>& cluster,
                                           const CameraRig& rig, const Refiner& refiner,
                                           const std::vector<Mesh>& meshes, const RenderSettings& settings) {
    if (!meshes.empty() && meshes.size() != scene.persons.size())
        throw ValidationError("generate_pseudo_gt: " + std::to_string(meshes.size()) + " meshes for "
                              + std::to_string(scene.persons.size()) + " persons");
    const CrowdScene sub = scene.subset(cluster);
    std::vector<Mesh> cluster_meshes;
    for (std::size_t p = 0; p < scene.persons.size() && !meshes.empty(); ++p)
        if (cluster.contains(scene.persons[p].person_id)) cluster_meshes.push_back(meshes[p]);
    const Mesh merged = merge_meshes(cluster_meshes);

    std::vector<TargetView> out;
    for (std::size_t v = 0; v < rig.cameras.size(); ++v) {
        const Camera& cam = rig.cameras[v];
        const ImageBuffer rgb = render(sub, cam, settings).rgb;
        const ImageBuffer normal = render_normal_map(merged, cam);
        ImageBuffer refined = refiner.refine(rgb, normal);
        if (!refined.same_shape(rgb))
            throw ValidationError("refiner '" + refiner.name() + "' returned " + std::to_string(refined.width()) + "x"
                                  + std::to_string(refined.height()) + "x" + std::to_string(refined.channels())
                                  + " for view " + std::to_string(v) + ", expected " + std::to_string(rgb.width())
                                  + "x" + std::to_string(rgb.height()) + "x3");
        out.push_back({cam, std::move(refined)});
    }
    return out;
}

nlohmann::json RefinementReport::to_json() const {
    auto num = [](double v) -> nlohmann::json {
        if (std::isinf(v) && v > 0) return "inf";
        return v;
    };
    nlohmann::json views_json = nlohmann::json::array();
    for (const auto& v : views)
        views_json.push_back({{"psnr_before", num(v.psnr_before)},
                              {"psnr_after", num(v.psnr_after)},
                              {"ssim_before", v.ssim_before},
                              {"ssim_after", v.ssim_after}});
    return {{"loss_trace", loss_trace}, {"views", views_json}, {"wall_clock_seconds", wall_clock_seconds},
            {"config", config}};
}

namespace {

// Adam moments for every scalar of one Gaussian, laid out as
// position(3) log_scale(3) rotation(4) opacity_logit(1) color(3).
constexpr int kParamsPerGaussian = 14;

struct Moments {
    std::array<double, kParamsPerGaussian> m{};
    std::array<double, kParamsPerGaussian> v{};
};

std::array<double, kParamsPerGaussian> flatten(const GaussianGradient& g) {
    return {g.position.x(),  g.position.y(),  g.position.z(),  g.log_scale.x(), g.log_scale.y(),
            g.log_scale.z(), g.rotation[0],   g.rotation[1],   g.rotation[2],   g.rotation[3],
            g.opacity_logit, g.color.x(),     g.color.y(),     g.color.z()};
}

std::vector<ViewScore> score_views(const CrowdScene& sub, const std::vector<TargetView>& targets,
                                   const OptimConfig& cfg, const RenderSettings& settings, bool after,
                                   std::vector<ViewScore> scores) {
    scores.resize(targets.size());
    parallel_for(targets.size(), cfg.threads, [&](std::size_t v) {
        const ImageBuffer img = render(sub, targets[v].camera, settings).rgb;
        const double p = psnr(img, targets[v].image);
        const double s = ssim(img, targets[v].image, cfg.ssim);
        if (after) {
            scores[v].psnr_after = p;
            scores[v].ssim_after = s;
        } else {
            scores[v].psnr_before = p;
            scores[v].ssim_before = s;
        }
    });
    return scores;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    CounterRng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

}  // namespace

DistillResult distill(const CrowdScene& scene, const std::set<std::string>& cluster,
                      const std::vector<TargetView>& targets, const OptimConfig& cfg) {
    cfg.validate();
    if (targets.empty()) throw ValidationError("distill: no target views");
    if (cluster.empty()) throw ValidationError("distill: empty cluster");
    for (std::size_t v = 0; v < targets.size(); ++v) {
        const auto& t = targets[v];
        t.camera.validate();
        if (t.image.width() != t.camera.width || t.image.height() != t.camera.height || t.image.channels() != 3)
            throw ValidationError("distill: target " + std::to_string(v) + " does not match its camera");
        require_finite(t.image, "distill target " + std::to_string(v));
    }
    const auto start = std::chrono::steady_clock::now();

    CrowdScene sub = scene.subset(cluster);
    for (const auto& p : sub.persons)
        for (std::size_t i = 0; i < p.gaussians.size(); ++i)
            p.gaussians[i].validate(p.person_id + "[" + std::to_string(i) + "]");

    RenderSettings settings = cfg.render;
    if (resolve_threads(cfg.threads) > 1) settings.threads = 1;  // parallel over views instead

    RefinementReport report;
    report.config = optim_config_to_json(cfg);
    report.views = score_views(sub, targets, cfg, settings, false, {});

    std::vector<std::vector<Moments>> moments;
    for (const auto& p : sub.persons) moments.emplace_back(p.gaussians.size());

    const std::vector<std::size_t> order = seeded_permutation(targets.size(), cfg.seed);
    std::size_t cursor = 0;
    const std::array<double, kParamsPerGaussian> lr = {
        cfg.step.position,      cfg.step.position,  cfg.step.position,  cfg.step.log_scale, cfg.step.log_scale,
        cfg.step.log_scale,     cfg.step.rotation,  cfg.step.rotation,  cfg.step.rotation,  cfg.step.rotation,
        cfg.step.opacity_logit, cfg.step.color,     cfg.step.color,     cfg.step.color};

    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<std::size_t> batch(cfg.views_per_step);
        for (auto& b : batch) {
            b = order[cursor];
            cursor = (cursor + 1) % order.size();
        }
        std::vector<double> losses(batch.size());
        std::vector<SceneGradients> grads(batch.size());
        parallel_for(batch.size(), cfg.threads, [&](std::size_t k) {
            const TargetView& t = targets[batch[k]];
            const ImageBuffer img = render(sub, t.camera, settings).rgb;
            OptimLoss l = optim_loss(t.image, img, cfg.lambda_ssim, cfg.ssim);
            losses[k] = l.loss;
            if (!std::isfinite(l.loss)) return;
            grads[k] = render_backward(sub, t.camera, l.grad, settings);
        });
        double loss = 0.0;
        SceneGradients total = SceneGradients::zeros_like(sub);
        for (std::size_t k = 0; k < batch.size(); ++k) {
            if (!std::isfinite(losses[k]))
                throw Error("distill: non-finite loss at iteration " + std::to_string(it) + ", view "
                            + std::to_string(batch[k]));
            loss += losses[k];
            total.add(grads[k]);
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        report.loss_trace.push_back(loss * inv);
        if (!total.all_finite())
            throw Error("distill: non-finite gradient at iteration " + std::to_string(it));

        const double bc1 = 1.0 - std::pow(cfg.beta1, it + 1);
        const double bc2 = 1.0 - std::pow(cfg.beta2, it + 1);
        for (std::size_t p = 0; p < sub.persons.size(); ++p) {
            for (std::size_t i = 0; i < sub.persons[p].gaussians.size(); ++i) {
                Gaussian& g = sub.persons[p].gaussians[i];
                Moments& mo = moments[p][i];
                const auto grad = flatten(total.persons[p][i]);
                std::array<double, kParamsPerGaussian> delta{};
                for (int k = 0; k < kParamsPerGaussian; ++k) {
                    const double gk = grad[k] * inv;
                    mo.m[k] = cfg.beta1 * mo.m[k] + (1.0 - cfg.beta1) * gk;
                    mo.v[k] = cfg.beta2 * mo.v[k] + (1.0 - cfg.beta2) * gk * gk;
                    delta[k] = lr[k] * (mo.m[k] / bc1) / (std::sqrt(mo.v[k] / bc2) + cfg.epsilon);
                }
                for (int k = 0; k < 3; ++k) {
                    g.position[k] -= delta[k];
                    g.log_scale[k] -= delta[3 + k];
                    g.color[k] -= delta[11 + k];
                }
                for (int k = 0; k < 4; ++k) g.rotation[k] -= delta[6 + k];
                g.opacity_logit -= delta[10];
                g.rotation = renormalize_quaternion(g.rotation);
            }
        }
    }

    report.views = score_views(sub, targets, cfg, settings, true, std::move(report.views));
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    DistillResult result{scene, std::move(report)};
    for (auto& p : sub.persons) result.scene.person(p.person_id).gaussians = std::move(p.gaussians);
    return result;
}

DistillResult distill(const CrowdScene& scene, const std::vector<TargetView>& targets, const OptimConfig& cfg) {
    std::set<std::string> all;
    for (const auto& p : scene.persons) all.insert(p.person_id);
    return distill(scene, all, targets, cfg);
}

void SclConfig::validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ValidationError("SCL rho must be in [0, 1]");
}

std::string_view to_string(PairKind kind) { return kind == PairKind::identity ? "identity" : "degradation"; }

PairKind scl_draw(const SclConfig& cfg, CounterRng& rng) {
    cfg.validate();
    return rng.uniform01() < cfg.rho ? PairKind::identity : PairKind::degradation;
}

SclSample scl_sample(const ImageBuffer& coarse, const ImageBuffer& gt, const SclConfig& cfg, CounterRng& rng) {
    require_same_shape(coarse, gt, "scl_sample");
    if (scl_draw(cfg, rng) == PairKind::identity) return {gt, gt, PairKind::identity};
    return {coarse, gt, PairKind::degradation};
}

}  // namespace crowdsplat
