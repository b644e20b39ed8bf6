#include "crowdsplat/features.hpp"

#include "crowdsplat/rng.hpp"

#include <cmath>

namespace crowdsplat {

namespace {

constexpr double kNormEps = 1e-10;

FeatureMap from_image(const ImageBuffer& image) {
    FeatureMap map{image.width(), image.height(), image.channels(), image.data()};
    return map;
}

FeatureMap conv3x3_abs(const FeatureMap& in, const std::vector<double>& filters, int out_channels) {
    FeatureMap out{in.width, in.height, out_channels,
                   std::vector<double>(in.positions() * static_cast<std::size_t>(out_channels), 0.0)};
    const int cin = in.channels;
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            for (int o = 0; o < out_channels; ++o) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= in.height) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= in.width) continue;
                        const double* f = &filters[((static_cast<std::size_t>(o) * cin) * 3 + (dy + 1)) * 3 + (dx + 1)];
                        for (int c = 0; c < cin; ++c) acc += f[static_cast<std::size_t>(c) * 9] * in.at(xx, yy, c);
                    }
                }
                out.at(x, y, o) = std::abs(acc);
            }
        }
    }
    return out;
}

void require_matching(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b,
                      const std::vector<double>& weights) {
    if (a.size() != b.size() || a.size() != weights.size())
        throw ValidationError("feature layer count mismatch: " + std::to_string(a.size()) + " vs "
                              + std::to_string(b.size()) + " with " + std::to_string(weights.size()) + " weights");
    for (std::size_t l = 0; l < a.size(); ++l)
        if (a[l].width != b[l].width || a[l].height != b[l].height || a[l].channels != b[l].channels)
            throw ValidationError("feature layer " + std::to_string(l) + " shape mismatch");
}

}  // namespace

ConvFeatureExtractor::ConvFeatureExtractor(std::uint64_t seed, int levels, int filters_per_level, int input_channels,
                                           std::vector<double> weights)
    : seed_(seed), input_channels_(input_channels), weights_(std::move(weights)) {
    if (levels < 1) throw ValidationError("feature extractor needs at least one level");
    if (filters_per_level < 1 || input_channels < 1) throw ValidationError("feature extractor sizes must be positive");
    if (weights_.empty()) weights_.assign(levels, 1.0);
    if (static_cast<int>(weights_.size()) != levels)
        throw ValidationError("feature extractor: " + std::to_string(weights_.size()) + " weights for "
                              + std::to_string(levels) + " levels");
    for (double w : weights_)
        if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("feature layer weights must be finite and >= 0");

    CounterRng rng(seed);
    int cin = input_channels;
    for (int l = 0; l < levels; ++l) {
        std::vector<double> f(static_cast<std::size_t>(filters_per_level) * cin * 9);
        for (double& v : f) v = rng.normal();
        filters_.push_back(std::move(f));
        out_channels_.push_back(filters_per_level);
        cin = filters_per_level;
    }
}

std::vector<FeatureMap> ConvFeatureExtractor::features(const ImageBuffer& image) const {
    if (image.channels() != input_channels_)
        throw ValidationError("feature extractor expects " + std::to_string(input_channels_) + " channels, got "
                              + std::to_string(image.channels()));
    const int levels = static_cast<int>(filters_.size());
    const int min_side = 1 << (levels - 1);
    if (image.width() < min_side || image.height() < min_side)
        throw ValidationError("image " + std::to_string(image.width()) + "x" + std::to_string(image.height())
                              + " too small for " + std::to_string(levels) + " feature levels");
    std::vector<FeatureMap> out;
    FeatureMap current = from_image(image);
    for (int l = 0; l < levels; ++l) {
        if (l > 0) current = average_pool2(out.back());
        out.push_back(conv3x3_abs(current, filters_[l], out_channels_[l]));
    }
    return out;
}

FeatureMap average_pool2(const FeatureMap& map) {
    FeatureMap out{map.width / 2, map.height / 2, map.channels, {}};
    out.data.assign(out.positions() * static_cast<std::size_t>(map.channels), 0.0);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < map.channels; ++c)
                out.at(x, y, c) = 0.25
                                  * (map.at(2 * x, 2 * y, c) + map.at(2 * x + 1, 2 * y, c) + map.at(2 * x, 2 * y + 1, c)
                                     + map.at(2 * x + 1, 2 * y + 1, c));
    return out;
}

Eigen::MatrixXd gram_matrix(const FeatureMap& map) {
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(
        map.data.data(), static_cast<Eigen::Index>(map.positions()), map.channels);
    return (f.transpose() * f) / static_cast<double>(map.positions());
}

double feature_distance_from_features(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b,
                                      const std::vector<double>& weights) {
    require_matching(a, b, weights);
    double total = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        if (weights[l] == 0.0) continue;
        const int C = a[l].channels;
        double layer = 0.0;
        for (std::size_t p = 0; p < a[l].positions(); ++p) {
            const double* fa = &a[l].data[p * C];
            const double* fb = &b[l].data[p * C];
            double na = 0.0, nb = 0.0;
            for (int c = 0; c < C; ++c) {
                na += fa[c] * fa[c];
                nb += fb[c] * fb[c];
            }
            na = std::sqrt(na) + kNormEps;
            nb = std::sqrt(nb) + kNormEps;
            double d2 = 0.0;
            for (int c = 0; c < C; ++c) {
                const double d = fa[c] / na - fb[c] / nb;
                d2 += d * d;
            }
            layer += d2;
        }
        total += weights[l] * layer / static_cast<double>(a[l].positions());
    }
    return total;
}

double gram_loss_from_features(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b,
                               const std::vector<double>& weights) {
    require_matching(a, b, weights);
    double total = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        if (weights[l] == 0.0) continue;
        total += weights[l] * (gram_matrix(a[l]) - gram_matrix(b[l])).squaredNorm();
    }
    return total;
}

}  // namespace crowdsplat
