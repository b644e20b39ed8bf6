#pragma once

#include "crowdsplat/features.hpp"
#include "crowdsplat/image.hpp"

#include <json.hpp>

#include <limits>

namespace crowdsplat {

struct SsimConfig {
    int window = 11;
    double sigma = 1.5;
    double max_value = 1.0;
    double k1 = 0.01;
    double k2 = 0.03;

    double c1() const { return (k1 * max_value) * (k1 * max_value); }
    double c2() const { return (k2 * max_value) * (k2 * max_value); }
    void validate() const;
};

// Returned by psnr() for identical images; serialized as the string "inf".
inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

double psnr(const ImageBuffer& a, const ImageBuffer& b, double max_value = 1.0);

// Mean of Gaussian-windowed SSIM over every fully inside window and channel.
double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimConfig& cfg = {});

// d ssim(a, b) / d a, same shape as a. Exactly zero wherever a == b.
ImageBuffer ssim_grad(const ImageBuffer& a, const ImageBuffer& b, const SsimConfig& cfg = {});

double feature_distance(const ImageBuffer& a, const ImageBuffer& b, const FeatureExtractor& fx);
double gram_loss(const ImageBuffer& a, const ImageBuffer& b, const FeatureExtractor& fx);

struct LossWeights {
    // self-distillation
    double distill_rgb = 1.0;
    double distill_ssim = 0.2;
    // refiner composite
    double refiner_l2 = 1.0;
    double refiner_lpips = 1.0;
    double refiner_ssim = 0.5;
    double refiner_gram = 1.0;
    // optimization against refined targets
    double optim_ssim = 0.2;

    void validate() const;
};

nlohmann::json loss_weights_to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& doc);

// Sum over views of lambda_rgb * ||clean - coarse||_2 + lambda_ssim * (1 - SSIM).
double self_distill_loss(const std::vector<ImageBuffer>& clean, const std::vector<ImageBuffer>& coarse,
                         double lambda_rgb, double lambda_ssim, const SsimConfig& cfg = {});

struct RefinerLoss {
    double total = 0.0;
    double l2 = 0.0;     // mean squared error
    double lpips = 0.0;  // feature_distance
    double ssim = 0.0;   // 1 - SSIM
    double gram = 0.0;
};

RefinerLoss refiner_loss(const ImageBuffer& out, const ImageBuffer& gt, const LossWeights& weights,
                         const FeatureExtractor& fx, const SsimConfig& cfg = {});

struct OptimLoss {
    double loss = 0.0;
    double l1 = 0.0;
    double ssim = 0.0;
    ImageBuffer grad;  // d loss / d rendered
};

// mean |refined - rendered| + lambda_ssim * (1 - SSIM(rendered, refined)).
OptimLoss optim_loss(const ImageBuffer& refined, const ImageBuffer& rendered, double lambda_ssim,
                     const SsimConfig& cfg = {});

}  // namespace crowdsplat
