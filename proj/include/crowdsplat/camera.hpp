#pragma once

#include "crowdsplat/common.hpp"

#include <json.hpp>

#include <optional>

namespace crowdsplat {

struct Intrinsics {
    double fx = 500.0;
    double fy = 500.0;
    double cx = 256.0;
    double cy = 256.0;

    // fx = fy = focal, principal point at (width / 2, height / 2).
    static Intrinsics centered(int width, int height, double focal = 500.0);
};

/// Pinhole camera, OpenCV convention: x right, y down, z forward.
/// A world point p maps to camera space as rotation * p + translation.
/// Pixel (i, j) samples the image plane at exactly (i, j).
struct Camera {
    Intrinsics intrinsics;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    int width = 512;
    int height = 512;

    Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
    Vec3 center() const { return -rotation.transpose() * translation; }

    // Pixel position of a camera-space point; nullopt when z <= 0.
    std::optional<Vec2> project_camera_point(const Vec3& cam) const;

    void validate() const;

    // Camera at `eye` looking at `target` with world-up +z. Throws when the
    // view direction is parallel to up.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Intrinsics& intrinsics, int width, int height);
};

enum class RigKind { orbit, hemisphere };

struct CameraRig {
    std::vector<Camera> cameras;
    RigKind kind = RigKind::orbit;

    void validate() const;
};

// Camera k sits at azimuth 2*pi*k/n on a horizontal circle around look_at,
// raised by `elevation` metres.
CameraRig orbit_rig(int n, double radius, double elevation, const Vec3& look_at, const Intrinsics& intrinsics,
                    int width, int height);

// Fibonacci lattice on the upper hemisphere, elevation in [0, 85] degrees:
// sin(elev_k) = (k + 0.5) / n * sin(85 deg), azimuth_k = k * golden_angle.
CameraRig hemisphere_rig(int n, double radius, const Vec3& look_at, const Intrinsics& intrinsics, int width,
                         int height);

nlohmann::json camera_to_json(const Camera& camera);
Camera camera_from_json(const nlohmann::json& doc);
nlohmann::json rig_to_json(const CameraRig& rig);
CameraRig rig_from_json(const nlohmann::json& doc);

}  // namespace crowdsplat
