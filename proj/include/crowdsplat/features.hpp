#pragma once

#include "crowdsplat/image.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>

namespace crowdsplat {

// Position-major feature map: data[(y * width + x) * channels + c].
struct FeatureMap {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::size_t positions() const { return static_cast<std::size_t>(width) * height; }
};

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::vector<FeatureMap> features(const ImageBuffer& image) const = 0;
    virtual const std::vector<double>& layer_weights() const = 0;
};

/// Fixed random convolution bank: per level, 3x3 zero-padded convolutions
/// (filters drawn once from N(0, 1)), absolute value, then a 2x average
/// pool before the next level. Deterministic for a given seed.
class ConvFeatureExtractor : public FeatureExtractor {
public:
    explicit ConvFeatureExtractor(std::uint64_t seed = 0, int levels = 3, int filters_per_level = 16,
                                  int input_channels = 3, std::vector<double> weights = {});

    std::vector<FeatureMap> features(const ImageBuffer& image) const override;
    const std::vector<double>& layer_weights() const override { return weights_; }
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    int input_channels_;
    // filters_[level] is (out x in x 3 x 3) flattened.
    std::vector<std::vector<double>> filters_;
    std::vector<int> out_channels_;
    std::vector<double> weights_;
};

FeatureMap average_pool2(const FeatureMap& map);

// G = F^T F / (H W), channels x channels.
Eigen::MatrixXd gram_matrix(const FeatureMap& map);

// Layer-weighted sums over precomputed features (used by the image-level
// losses and handy for feeding synthetic feature maps directly).
double feature_distance_from_features(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b,
                                      const std::vector<double>& weights);
double gram_loss_from_features(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b,
                               const std::vector<double>& weights);

}  // namespace crowdsplat
