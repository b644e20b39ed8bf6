#pragma once

#include "crowdsplat/body_model.hpp"
#include "crowdsplat/common.hpp"

#include <filesystem>
#include <set>
#include <string>

namespace crowdsplat {

/// One anisotropic 3D Gaussian. Covariance is R diag(exp(log_scale))^2 R^T
/// with R from the unit quaternion `rotation` (w, x, y, z). Color is
/// degree-0 only; view-dependent appearance would extend this struct.
struct Gaussian {
    Vec3 position = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Zero();

    Gaussian() = default;
    // Renormalizes `rotation` when its norm is off by more than 1e-6.
    Gaussian(const Vec3& position, const Vec3& log_scale, const Vec4& rotation, double opacity_logit, const Vec3& color);

    double opacity() const;
    Mat3 rotation_matrix() const;  // from the normalized quaternion
    Mat3 covariance() const;

    // Throws ValidationError when any parameter is non-finite or the scale
    // does not exponentiate to a finite positive value.
    void validate(const std::string& name) const;
};

// Rescales q to unit norm when | |q| - 1 | > 1e-6; leaves it bit-identical otherwise.
Vec4 renormalize_quaternion(const Vec4& q);

double sigmoid(double x);
double logit(double p);

struct PersonGaussians {
    std::string person_id;
    std::vector<Gaussian> gaussians;  // person-local frame
    Vec3 root_translation = Vec3::Zero();

    Vec3 world_position(std::size_t i) const { return gaussians[i].position + root_translation; }
};

struct CrowdScene {
    std::vector<PersonGaussians> persons;
    Vec3 background_color = Vec3::Ones();

    std::size_t gaussian_count() const;
    const PersonGaussians& person(const std::string& id) const;
    PersonGaussians& person(const std::string& id);
    bool contains(const std::string& id) const;

    // Same background, only the listed persons, in scene order.
    CrowdScene subset(const std::set<std::string>& ids) const;
};

CrowdScene assemble_scene(std::vector<PersonGaussians> persons, const Vec3& background);

// One Gaussian per vertex: isotropic scale per_vertex_scale * mean incident
// edge length, identity rotation, opacity 0.95.
std::vector<Gaussian> init_gaussians_from_mesh(const Mesh& mesh, double per_vertex_scale, const std::vector<Vec3>& colors);

struct ClusterConfig {
    double eps = 1.5;
    int min_pts = 1;

    void validate() const;
};

struct ClusterResult {
    std::vector<std::set<std::string>> clusters;  // ordered by smallest member id
    std::set<std::string> noise;
};

/// DBSCAN over person root translations, 3D Euclidean distance. A point is
/// core when at least min_pts points (itself included) lie within eps
/// (inclusive). Points are visited in sorted-id order, so a border point
/// reachable from several clusters joins the first one that reaches it.
ClusterResult cluster_persons(const CrowdScene& scene, const ClusterConfig& cfg);

// Binary little-endian PLY with float properties
// x y z scale_0..2 rot_0..3 (wxyz) opacity red green blue.
void write_gaussians_ply(const std::filesystem::path& path, const std::vector<Gaussian>& gaussians);
std::vector<Gaussian> read_gaussians_ply(const std::filesystem::path& path);

// Scene manifest: {"version", "background", "persons": [{"id", "ply", "root_translation", "mesh"?}]}.
// PLY and mesh paths are stored relative to the manifest directory.
struct SceneFiles {
    CrowdScene scene;
    std::vector<Mesh> meshes;  // per person, empty when the manifest has none
};

void write_scene(const std::filesystem::path& manifest_path, const CrowdScene& scene, const std::vector<Mesh>& meshes,
                 const nlohmann::json& extra = nlohmann::json::object());
SceneFiles read_scene(const std::filesystem::path& manifest_path);

nlohmann::json mesh_to_json(const Mesh& mesh);
Mesh mesh_from_json(const nlohmann::json& doc);

}  // namespace crowdsplat
