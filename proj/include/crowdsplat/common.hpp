#pragma once

#include <Eigen/Core>

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

using Rgb = std::array<double, 3>;

// Base of every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad input: malformed files, dimension mismatches, invariant violations.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Collects several validation problems so they can be reported together.
class ValidationErrors {
public:
    void add(std::string message) { messages_.push_back(std::move(message)); }
    bool empty() const { return messages_.empty(); }
    const std::vector<std::string>& messages() const { return messages_; }

    void throw_if_any(const std::string& context) const {
        if (messages_.empty()) return;
        std::string what = context + ":";
        for (const auto& m : messages_) what += "\n  - " + m;
        throw ValidationError(what);
    }

private:
    std::vector<std::string> messages_;
};

}  // namespace crowdsplat
