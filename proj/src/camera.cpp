#include "crowdsplat/camera.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>

namespace crowdsplat {

Intrinsics Intrinsics::centered(int width, int height, double focal) {
    return {focal, focal, width / 2.0, height / 2.0};
}

std::optional<Vec2> Camera::project_camera_point(const Vec3& cam) const {
    if (!(cam.z() > 0.0)) return std::nullopt;
    return Vec2(intrinsics.fx * cam.x() / cam.z() + intrinsics.cx, intrinsics.fy * cam.y() / cam.z() + intrinsics.cy);
}

void Camera::validate() const {
    if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0)) throw ValidationError("camera focal lengths must be > 0");
    if (width <= 0 || height <= 0) throw ValidationError("camera image size must be positive");
    const double err = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(err <= 1e-6)) throw ValidationError("camera rotation is not orthonormal (error " + std::to_string(err) + ")");
    if (!translation.allFinite()) throw ValidationError("camera translation is not finite");
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Intrinsics& intrinsics, int width, int height) {
    const Vec3 up(0.0, 0.0, 1.0);
    const Vec3 forward_raw = target - eye;
    if (forward_raw.norm() < 1e-12) throw ValidationError("camera eye coincides with look-at target");
    const Vec3 forward = forward_raw.normalized();
    const Vec3 right_raw = forward.cross(up);
    if (right_raw.norm() < 1e-9) throw ValidationError("camera view direction is parallel to world up");
    const Vec3 right = right_raw.normalized();
    const Vec3 down = forward.cross(right);

    Camera cam;
    cam.intrinsics = intrinsics;
    cam.rotation.row(0) = right.transpose();
    cam.rotation.row(1) = down.transpose();
    cam.rotation.row(2) = forward.transpose();
    cam.translation = -cam.rotation * eye;
    cam.width = width;
    cam.height = height;
    return cam;
}

void CameraRig::validate() const {
    if (cameras.empty()) throw ValidationError("camera rig is empty");
    for (const auto& cam : cameras) {
        cam.validate();
        if (cam.width != cameras.front().width || cam.height != cameras.front().height)
            throw ValidationError("camera rig mixes image sizes");
    }
}

CameraRig orbit_rig(int n, double radius, double elevation, const Vec3& look_at, const Intrinsics& intrinsics,
                    int width, int height) {
    if (n < 1) throw ValidationError("orbit rig needs n >= 1");
    if (!(radius > 0.0)) throw ValidationError("orbit rig needs radius > 0");
    CameraRig rig;
    rig.kind = RigKind::orbit;
    for (int k = 0; k < n; ++k) {
        const double a = 2.0 * std::numbers::pi * k / n;
        const Vec3 eye = look_at + radius * Vec3(std::cos(a), std::sin(a), 0.0) + Vec3(0.0, 0.0, elevation);
        rig.cameras.push_back(Camera::look_at(eye, look_at, intrinsics, width, height));
    }
    return rig;
}

CameraRig hemisphere_rig(int n, double radius, const Vec3& look_at, const Intrinsics& intrinsics, int width,
                         int height) {
    if (n < 1) throw ValidationError("hemisphere rig needs n >= 1");
    if (!(radius > 0.0)) throw ValidationError("hemisphere rig needs radius > 0");
    const double max_sin = std::sin(85.0 * std::numbers::pi / 180.0);
    const double golden_angle = std::numbers::pi * (3.0 - std::sqrt(5.0));
    CameraRig rig;
    rig.kind = RigKind::hemisphere;
    for (int k = 0; k < n; ++k) {
        const double s = (k + 0.5) / n * max_sin;
        const double c = std::sqrt(1.0 - s * s);
        const double az = k * golden_angle;
        const Vec3 eye = look_at + radius * Vec3(c * std::cos(az), c * std::sin(az), s);
        rig.cameras.push_back(Camera::look_at(eye, look_at, intrinsics, width, height));
    }
    return rig;
}

nlohmann::json camera_to_json(const Camera& camera) {
    nlohmann::json extr = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) {
        extr.push_back({camera.rotation(r, 0), camera.rotation(r, 1), camera.rotation(r, 2), camera.translation(r)});
    }
    return {{"fx", camera.intrinsics.fx}, {"fy", camera.intrinsics.fy}, {"cx", camera.intrinsics.cx},
            {"cy", camera.intrinsics.cy}, {"width", camera.width},       {"height", camera.height},
            {"extrinsics", extr}};
}

Camera camera_from_json(const nlohmann::json& doc) {
    try {
        Camera cam;
        cam.intrinsics = {doc.at("fx").get<double>(), doc.at("fy").get<double>(), doc.at("cx").get<double>(),
                          doc.at("cy").get<double>()};
        cam.width = doc.at("width").get<int>();
        cam.height = doc.at("height").get<int>();
        const auto& extr = doc.at("extrinsics");
        if (extr.size() != 3) throw ValidationError("camera extrinsics must have 3 rows");
        for (int r = 0; r < 3; ++r) {
            if (extr[r].size() != 4) throw ValidationError("camera extrinsics rows must have 4 entries");
            for (int c = 0; c < 3; ++c) cam.rotation(r, c) = extr[r][c].get<double>();
            cam.translation(r) = extr[r][3].get<double>();
        }
        cam.validate();
        return cam;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed camera JSON: ") + e.what());
    }
}

nlohmann::json rig_to_json(const CameraRig& rig) {
    nlohmann::json cams = nlohmann::json::array();
    for (const auto& c : rig.cameras) cams.push_back(camera_to_json(c));
    return {{"version", 1}, {"kind", rig.kind == RigKind::orbit ? "orbit" : "hemisphere"}, {"cameras", cams}};
}

CameraRig rig_from_json(const nlohmann::json& doc) {
    CameraRig rig;
    try {
        const auto kind = doc.at("kind").get<std::string>();
        if (kind == "orbit") rig.kind = RigKind::orbit;
        else if (kind == "hemisphere") rig.kind = RigKind::hemisphere;
        else throw ValidationError("unknown rig kind '" + kind + "'");
        for (const auto& c : doc.at("cameras")) rig.cameras.push_back(camera_from_json(c));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed rig JSON: ") + e.what());
    }
    rig.validate();
    return rig;
}

}  // namespace crowdsplat
