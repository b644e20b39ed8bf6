#pragma once

#include "crowdsplat/camera.hpp"
#include "crowdsplat/common.hpp"

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <optional>
#include <set>

namespace crowdsplat {

using Face = std::array<int, 3>;

/// SMPL-style body model: template mesh, shape blendshapes, joint regressor,
/// linear-blend-skinning weights and a kinematic tree.
///
/// Layouts (row-major where it matters):
///   shape_blendshapes  (3N x S): row 3*v + axis, column s.
///   pose_blendshapes   (3N x 9(J-1)): column 9*(j-1) + 3*r + c holds the
///                       coefficient of (R_j - I)(r, c).
///   joint_regressor    (J x N)
///   skinning_weights   (N x J)
struct BodyModelData {
    std::vector<Vec3> template_vertices;
    std::vector<Face> faces;
    Eigen::MatrixXd shape_blendshapes;
    Eigen::MatrixXd joint_regressor;
    Eigen::MatrixXd skinning_weights;
    std::vector<int> kinematic_parents;  // -1 marks the root
    std::optional<Eigen::MatrixXd> pose_blendshapes;
    std::set<int> head_joint_ids;

    int num_vertices() const { return static_cast<int>(template_vertices.size()); }
    int num_joints() const { return static_cast<int>(kinematic_parents.size()); }
    int num_shape_coeffs() const { return static_cast<int>(shape_blendshapes.cols()); }

    // Throws ValidationError describing the first broken invariant.
    void validate() const;

    // Joints in an order where every parent precedes its children.
    std::vector<int> topological_order() const;
};

struct BodyParams {
    Eigen::VectorXd shape;
    std::vector<Vec3> pose;  // axis-angle per joint, radians
    Vec3 root_translation = Vec3::Zero();

    static BodyParams zero(const BodyModelData& model);
};

struct Mesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;
    std::vector<Vec3> vertex_normals;
};

BodyModelData load_body_model(const std::filesystem::path& path);
BodyModelData body_model_from_json(const nlohmann::json& doc);
nlohmann::json body_model_to_json(const BodyModelData& model);

// Rodrigues' formula; second-order Taylor expansion below |w| < 1e-8.
Mat3 axis_angle_to_matrix(const Vec3& axis_angle);
Vec3 matrix_to_axis_angle(const Mat3& rotation);

// Template plus shape blendshapes, rest pose.
std::vector<Vec3> shaped_vertices(const BodyModelData& model, const Eigen::VectorXd& shape);

std::vector<Vec3> regress_joints(const BodyModelData& model, const Eigen::VectorXd& shape);

struct SkinnedBody {
    Mesh mesh;
    std::vector<Vec3> joints;  // posed joint locations, root translation applied
};

SkinnedBody skin_with_joints(const BodyModelData& model, const BodyParams& params);
Mesh skin(const BodyModelData& model, const BodyParams& params);

// Area-weighted average of incident face normals; isolated vertices get (0, 0, 1).
std::vector<Vec3> compute_vertex_normals(const std::vector<Vec3>& vertices, const std::vector<Face>& faces);

// Concatenates meshes, offsetting face indices.
Mesh merge_meshes(const std::vector<Mesh>& meshes);

struct ProjectedKeypoints {
    std::vector<Vec2> points;
    int behind_camera = 0;  // joints dropped because they are not in front of the camera
};

ProjectedKeypoints projected_keypoints(const BodyModelData& model, const BodyParams& params, const Camera& camera);

// Five-joint, 32-vertex humanoid used for tests and synthetic scenes.
BodyModelData make_toy_body_model();

}  // namespace crowdsplat
