#pragma once

#include "crowdsplat/image.hpp"

#include <json.hpp>

#include <memory>
#include <string>

namespace crowdsplat {

/// Maps a coarse rendering plus its body normal map to an enhanced
/// rendering of the same size with values in [0, 1].
class Refiner {
public:
    virtual ~Refiner() = default;
    virtual ImageBuffer refine(const ImageBuffer& rgb, const ImageBuffer& normal) const = 0;
    virtual std::string name() const = 0;
    virtual nlohmann::json to_json() const = 0;
};

class IdentityRefiner : public Refiner {
public:
    ImageBuffer refine(const ImageBuffer& rgb, const ImageBuffer& normal) const override;
    std::string name() const override { return "identity"; }
    nlohmann::json to_json() const override { return {{"type", name()}}; }
};

// clamp(x + amount * (x - blur(x)), 0, 1) with a separable Gaussian blur of
// standard deviation `radius` px (edges replicated).
class UnsharpRefiner : public Refiner {
public:
    UnsharpRefiner(double amount, double radius);

    ImageBuffer refine(const ImageBuffer& rgb, const ImageBuffer& normal) const override;
    std::string name() const override { return "unsharp"; }
    nlohmann::json to_json() const override { return {{"type", name()}, {"amount", amount_}, {"radius", radius_}}; }

private:
    double amount_;
    double radius_;
};

/// Runs `command <rgb.png> <normal.png> <out.png>` through /bin/sh in a
/// private temp directory and reads out.png back. Inputs are written as
/// 16-bit PNGs. The process group is killed after timeout_seconds.
class ExternalRefiner : public Refiner {
public:
    explicit ExternalRefiner(std::string command, double timeout_seconds = 300.0);

    ImageBuffer refine(const ImageBuffer& rgb, const ImageBuffer& normal) const override;
    std::string name() const override { return "external"; }
    nlohmann::json to_json() const override {
        return {{"type", name()}, {"command", command_}, {"timeout_seconds", timeout_seconds_}};
    }

private:
    std::string command_;
    double timeout_seconds_;
};

// (blur(x) - x) per channel, computed so constant regions give exactly 0.
ImageBuffer gaussian_blur_delta(const ImageBuffer& image, double sigma);
ImageBuffer gaussian_blur(const ImageBuffer& image, double sigma);

// {"type": "identity"} | {"type": "unsharp", "amount", "radius"} |
// {"type": "external", "command", "timeout_seconds"?}
std::unique_ptr<Refiner> make_refiner(const nlohmann::json& spec);

}  // namespace crowdsplat
