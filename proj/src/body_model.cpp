#include "crowdsplat/body_model.hpp"

#include "crowdsplat/fs_util.hpp"

#include <Eigen/Geometry>
#include <spdlog/spdlog.h>

#include <cmath>
#include <functional>

namespace crowdsplat {

namespace {

constexpr double kRowSumTolerance = 1e-6;

Mat3 skew(const Vec3& w) {
    Mat3 k;
    k << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
    return k;
}

Vec3 json_vec3(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 3) throw ValidationError(what + ": expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

// Reads an N x 3 x K nested array into a (3N x K) matrix.
Eigen::MatrixXd read_blend_tensor(const nlohmann::json& j, int num_vertices, const std::string& what) {
    if (!j.is_array() || static_cast<int>(j.size()) != num_vertices)
        throw ValidationError(what + ": expected " + std::to_string(num_vertices) + " vertex entries, got "
                              + std::to_string(j.is_array() ? j.size() : 0));
    int k = -1;
    Eigen::MatrixXd m;
    for (int v = 0; v < num_vertices; ++v) {
        if (!j[v].is_array() || j[v].size() != 3) throw ValidationError(what + ": vertex " + std::to_string(v) + " must have 3 axes");
        for (int a = 0; a < 3; ++a) {
            const auto& coeffs = j[v][a];
            if (!coeffs.is_array()) throw ValidationError(what + ": coefficients must be arrays");
            if (k < 0) {
                k = static_cast<int>(coeffs.size());
                m = Eigen::MatrixXd::Zero(3 * num_vertices, k);
            }
            if (static_cast<int>(coeffs.size()) != k)
                throw ValidationError(what + ": inconsistent coefficient count at vertex " + std::to_string(v));
            for (int s = 0; s < k; ++s) m(3 * v + a, s) = coeffs[s].get<double>();
        }
    }
    if (k < 0) m = Eigen::MatrixXd::Zero(0, 0);
    return m;
}

nlohmann::json write_blend_tensor(const Eigen::MatrixXd& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index v = 0; v < m.rows() / 3; ++v) {
        nlohmann::json axes = nlohmann::json::array();
        for (int a = 0; a < 3; ++a) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index s = 0; s < m.cols(); ++s) row.push_back(m(3 * v + a, s));
            axes.push_back(row);
        }
        out.push_back(axes);
    }
    return out;
}

Eigen::MatrixXd read_matrix(const nlohmann::json& j, int rows, int cols, const std::string& what) {
    if (!j.is_array() || static_cast<int>(j.size()) != rows)
        throw ValidationError(what + ": expected " + std::to_string(rows) + " rows, got "
                              + std::to_string(j.is_array() ? j.size() : 0));
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        if (!j[r].is_array() || static_cast<int>(j[r].size()) != cols)
            throw ValidationError(what + ": row " + std::to_string(r) + " must have " + std::to_string(cols)
                                  + " entries");
        for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
    }
    return m;
}

nlohmann::json write_matrix(const Eigen::MatrixXd& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(row);
    }
    return out;
}

}  // namespace

void BodyModelData::validate() const {
    const int n = num_vertices();
    const int j = num_joints();
    if (n == 0) throw ValidationError("body model has no vertices");
    if (j == 0) throw ValidationError("body model has no joints");
    for (std::size_t f = 0; f < faces.size(); ++f) {
        for (int idx : faces[f]) {
            if (idx < 0 || idx >= n)
                throw ValidationError("face " + std::to_string(f) + " references vertex " + std::to_string(idx)
                                      + " out of range");
        }
    }
    if (shape_blendshapes.rows() != 3 * n)
        throw ValidationError("shape_blendshapes has " + std::to_string(shape_blendshapes.rows() / 3)
                              + " vertex entries, expected " + std::to_string(n));
    if (joint_regressor.rows() != j || joint_regressor.cols() != n)
        throw ValidationError("joint_regressor must be " + std::to_string(j) + " x " + std::to_string(n));
    if (skinning_weights.rows() != n || skinning_weights.cols() != j)
        throw ValidationError("skinning_weights must be " + std::to_string(n) + " x " + std::to_string(j));
    if (pose_blendshapes && (pose_blendshapes->rows() != 3 * n || pose_blendshapes->cols() != 9 * (j - 1)))
        throw ValidationError("pose_blendshapes must be " + std::to_string(n) + " x 3 x " + std::to_string(9 * (j - 1)));

    for (int v = 0; v < n; ++v) {
        if (skinning_weights.row(v).minCoeff() < 0.0)
            throw ValidationError("skinning weight row " + std::to_string(v) + " has a negative entry");
        const double sum = skinning_weights.row(v).sum();
        if (!(std::abs(sum - 1.0) <= kRowSumTolerance))
            throw ValidationError("skinning weight row " + std::to_string(v) + " sums to " + std::to_string(sum)
                                  + ", expected 1");
    }
    for (int r = 0; r < j; ++r) {
        const double sum = joint_regressor.row(r).sum();
        if (!(std::abs(sum - 1.0) <= kRowSumTolerance))
            throw ValidationError("joint regressor row " + std::to_string(r) + " sums to " + std::to_string(sum)
                                  + ", expected 1");
    }
    for (int id : head_joint_ids) {
        if (id < 0 || id >= j) throw ValidationError("head joint id " + std::to_string(id) + " out of range");
    }
    (void)topological_order();
}

std::vector<int> BodyModelData::topological_order() const {
    const int j = num_joints();
    int roots = 0;
    for (int k = 0; k < j; ++k) {
        const int p = kinematic_parents[k];
        if (p == -1) ++roots;
        else if (p < 0 || p >= j || p == k)
            throw ValidationError("kinematic tree: joint " + std::to_string(k) + " has invalid parent " + std::to_string(p));
    }
    if (roots != 1) throw ValidationError("kinematic tree must have exactly one root, found " + std::to_string(roots));

    // 0 = unvisited, 1 = on stack, 2 = done
    std::vector<int> state(j, 0);
    std::vector<int> order;
    order.reserve(j);
    std::function<void(int)> visit = [&](int k) {
        if (state[k] == 2) return;
        if (state[k] == 1) throw ValidationError("kinematic tree has a cycle through joint " + std::to_string(k));
        state[k] = 1;
        if (kinematic_parents[k] >= 0) visit(kinematic_parents[k]);
        state[k] = 2;
        order.push_back(k);
    };
    for (int k = 0; k < j; ++k) visit(k);
    return order;
}

BodyParams BodyParams::zero(const BodyModelData& model) {
    BodyParams p;
    p.shape = Eigen::VectorXd::Zero(model.num_shape_coeffs());
    p.pose.assign(model.num_joints(), Vec3::Zero());
    return p;
}

BodyModelData body_model_from_json(const nlohmann::json& doc) {
    BodyModelData m;
    try {
        for (const auto& v : doc.at("template_vertices")) m.template_vertices.push_back(json_vec3(v, "template_vertices"));
        const int n = m.num_vertices();
        for (const auto& f : doc.at("faces")) {
            if (!f.is_array() || f.size() != 3) throw ValidationError("faces: expected index triples");
            m.faces.push_back({f[0].get<int>(), f[1].get<int>(), f[2].get<int>()});
        }
        m.kinematic_parents = doc.at("kinematic_parents").get<std::vector<int>>();
        const int j = m.num_joints();
        m.shape_blendshapes = read_blend_tensor(doc.at("shape_blendshapes"), n, "shape_blendshapes");
        if (m.shape_blendshapes.rows() == 0) m.shape_blendshapes = Eigen::MatrixXd::Zero(3 * n, 0);
        m.joint_regressor = read_matrix(doc.at("joint_regressor"), j, n, "joint_regressor");
        m.skinning_weights = read_matrix(doc.at("skinning_weights"), n, j, "skinning_weights");
        if (doc.contains("pose_blendshapes") && !doc.at("pose_blendshapes").is_null())
            m.pose_blendshapes = read_blend_tensor(doc.at("pose_blendshapes"), n, "pose_blendshapes");
        if (doc.contains("head_joint_ids")) {
            for (int id : doc.at("head_joint_ids").get<std::vector<int>>()) m.head_joint_ids.insert(id);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed body model JSON: ") + e.what());
    }
    m.validate();
    return m;
}

BodyModelData load_body_model(const std::filesystem::path& path) {
    try {
        return body_model_from_json(read_json(path));
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

nlohmann::json body_model_to_json(const BodyModelData& model) {
    nlohmann::json doc;
    nlohmann::json verts = nlohmann::json::array();
    for (const auto& v : model.template_vertices) verts.push_back({v.x(), v.y(), v.z()});
    nlohmann::json faces = nlohmann::json::array();
    for (const auto& f : model.faces) faces.push_back({f[0], f[1], f[2]});
    doc["template_vertices"] = verts;
    doc["faces"] = faces;
    doc["shape_blendshapes"] = write_blend_tensor(model.shape_blendshapes);
    doc["joint_regressor"] = write_matrix(model.joint_regressor);
    doc["skinning_weights"] = write_matrix(model.skinning_weights);
    doc["kinematic_parents"] = model.kinematic_parents;
    if (model.pose_blendshapes) doc["pose_blendshapes"] = write_blend_tensor(*model.pose_blendshapes);
    doc["head_joint_ids"] = std::vector<int>(model.head_joint_ids.begin(), model.head_joint_ids.end());
    return doc;
}

Mat3 axis_angle_to_matrix(const Vec3& w) {
    const double theta = w.norm();
    const Mat3 k = skew(w);
    if (theta < 1e-8) return Mat3::Identity() + k + 0.5 * k * k;
    return Mat3::Identity() + (std::sin(theta) / theta) * k + ((1.0 - std::cos(theta)) / (theta * theta)) * k * k;
}

Vec3 matrix_to_axis_angle(const Mat3& rotation) {
    const Eigen::AngleAxisd aa(rotation);
    return aa.axis() * aa.angle();
}

std::vector<Vec3> shaped_vertices(const BodyModelData& model, const Eigen::VectorXd& shape) {
    if (shape.size() != model.num_shape_coeffs())
        throw ValidationError("shape has " + std::to_string(shape.size()) + " coefficients, model expects "
                              + std::to_string(model.num_shape_coeffs()));
    std::vector<Vec3> out = model.template_vertices;
    if (shape.size() == 0) return out;
    const Eigen::VectorXd offsets = model.shape_blendshapes * shape;
    for (int v = 0; v < model.num_vertices(); ++v) out[v] += offsets.segment<3>(3 * v);
    return out;
}

namespace {

std::vector<Vec3> regress_from(const BodyModelData& model, const std::vector<Vec3>& vertices) {
    std::vector<Vec3> joints(model.num_joints(), Vec3::Zero());
    for (int j = 0; j < model.num_joints(); ++j) {
        for (int v = 0; v < model.num_vertices(); ++v) {
            const double w = model.joint_regressor(j, v);
            if (w != 0.0) joints[j] += w * vertices[v];
        }
    }
    return joints;
}

}  // namespace

std::vector<Vec3> regress_joints(const BodyModelData& model, const Eigen::VectorXd& shape) {
    return regress_from(model, shaped_vertices(model, shape));
}

SkinnedBody skin_with_joints(const BodyModelData& model, const BodyParams& params) {
    const int nj = model.num_joints();
    const int nv = model.num_vertices();
    if (static_cast<int>(params.pose.size()) != nj)
        throw ValidationError("pose has " + std::to_string(params.pose.size()) + " joints, model expects "
                              + std::to_string(nj));

    std::vector<Vec3> verts = shaped_vertices(model, params.shape);
    const std::vector<Vec3> rest_joints = regress_from(model, verts);

    std::vector<Mat3> local_rot(nj);
    for (int j = 0; j < nj; ++j) local_rot[j] = axis_angle_to_matrix(params.pose[j]);

    if (model.pose_blendshapes && nj > 1) {
        Eigen::VectorXd feature(9 * (nj - 1));
        for (int j = 1; j < nj; ++j) {
            const Mat3 d = local_rot[j] - Mat3::Identity();
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) feature(9 * (j - 1) + 3 * r + c) = d(r, c);
        }
        const Eigen::VectorXd offsets = *model.pose_blendshapes * feature;
        for (int v = 0; v < nv; ++v) verts[v] += offsets.segment<3>(3 * v);
    }

    // Global rotations along the kinematic tree, plus each joint's offset from
    // its rest position. Offsets are built as (G_p - I)(r_j - r_p) + d_p so
    // that a rest pose yields exact zeros.
    std::vector<Mat3> global_rot(nj);
    std::vector<Vec3> offset(nj);
    for (int j : model.topological_order()) {
        const int p = model.kinematic_parents[j];
        if (p < 0) {
            global_rot[j] = local_rot[j];
            offset[j] = Vec3::Zero();
        } else {
            global_rot[j] = global_rot[p] * local_rot[j];
            offset[j] = (global_rot[p] - Mat3::Identity()) * (rest_joints[j] - rest_joints[p]) + offset[p];
        }
    }

    // v' = v + sum_j w_j [(G_j - I)(v - r_j) + d_j], which is plain LBS when
    // the weights sum to 1 and leaves v untouched bit-for-bit at rest.
    SkinnedBody out;
    out.mesh.faces = model.faces;
    out.mesh.vertices.resize(nv);
    for (int v = 0; v < nv; ++v) {
        Vec3 delta = Vec3::Zero();
        for (int j = 0; j < nj; ++j) {
            const double w = model.skinning_weights(v, j);
            if (w != 0.0) delta += w * ((global_rot[j] - Mat3::Identity()) * (verts[v] - rest_joints[j]) + offset[j]);
        }
        out.mesh.vertices[v] = verts[v] + delta + params.root_translation;
    }
    out.mesh.vertex_normals = compute_vertex_normals(out.mesh.vertices, out.mesh.faces);
    out.joints.resize(nj);
    for (int j = 0; j < nj; ++j) out.joints[j] = rest_joints[j] + offset[j] + params.root_translation;
    return out;
}

Mesh skin(const BodyModelData& model, const BodyParams& params) { return skin_with_joints(model, params).mesh; }

std::vector<Vec3> compute_vertex_normals(const std::vector<Vec3>& vertices, const std::vector<Face>& faces) {
    std::vector<Vec3> normals(vertices.size(), Vec3::Zero());
    for (const auto& f : faces) {
        // Unnormalized cross product has length 2 * area.
        const Vec3 n = (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]);
        for (int idx : f) normals[idx] += n;
    }
    for (auto& n : normals) {
        const double len = n.norm();
        n = len > 1e-300 ? Vec3(n / len) : Vec3(0.0, 0.0, 1.0);
    }
    return normals;
}

Mesh merge_meshes(const std::vector<Mesh>& meshes) {
    Mesh out;
    for (const auto& m : meshes) {
        const int offset = static_cast<int>(out.vertices.size());
        out.vertices.insert(out.vertices.end(), m.vertices.begin(), m.vertices.end());
        out.vertex_normals.insert(out.vertex_normals.end(), m.vertex_normals.begin(), m.vertex_normals.end());
        for (const auto& f : m.faces) out.faces.push_back({f[0] + offset, f[1] + offset, f[2] + offset});
    }
    return out;
}

ProjectedKeypoints projected_keypoints(const BodyModelData& model, const BodyParams& params, const Camera& camera) {
    const auto joints = skin_with_joints(model, params).joints;
    ProjectedKeypoints out;
    for (int j = 0; j < model.num_joints(); ++j) {
        if (model.head_joint_ids.contains(j)) continue;
        const auto px = camera.project_camera_point(camera.to_camera(joints[j]));
        if (px) out.points.push_back(*px);
        else ++out.behind_camera;
    }
    if (out.behind_camera > 0) spdlog::warn("{} body joint(s) behind the camera were dropped", out.behind_camera);
    return out;
}

BodyModelData make_toy_body_model() {
    // Four boxes of 8 corners each: torso, head, left leg, right leg.
    // Corner (i, j, k) of a box has index 8 * box + i + 2 * j + 4 * k, where
    // i/j/k select the low or high x/y/z extent.
    struct Box {
        Vec3 lo, hi;
    };
    const std::array<Box, 4> boxes{{
        {{-0.18, -0.10, 0.90}, {0.18, 0.10, 1.50}},    // torso
        {{-0.09, -0.10, 1.50}, {0.09, 0.10, 1.75}},    // head
        {{0.03, -0.07, 0.00}, {0.17, 0.07, 0.90}},     // left leg
        {{-0.17, -0.07, 0.00}, {-0.03, 0.07, 0.90}},   // right leg
    }};
    const std::array<Face, 12> box_faces{{{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
                                          {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}}};
    enum Joint { pelvis = 0, spine = 1, head = 2, left_leg = 3, right_leg = 4 };

    BodyModelData m;
    m.kinematic_parents = {-1, pelvis, spine, pelvis, pelvis};
    m.head_joint_ids = {head};
    constexpr int nv = 32;
    constexpr int nj = 5;
    m.skinning_weights = Eigen::MatrixXd::Zero(nv, nj);
    m.joint_regressor = Eigen::MatrixXd::Zero(nj, nv);
    m.shape_blendshapes = Eigen::MatrixXd::Zero(3 * nv, 2);
    m.pose_blendshapes = Eigen::MatrixXd::Zero(3 * nv, 9 * (nj - 1));

    for (int b = 0; b < 4; ++b) {
        for (int c = 0; c < 8; ++c) {
            const int i = c & 1, j = (c >> 1) & 1, k = (c >> 2) & 1;
            m.template_vertices.emplace_back(i ? boxes[b].hi.x() : boxes[b].lo.x(), j ? boxes[b].hi.y() : boxes[b].lo.y(),
                                             k ? boxes[b].hi.z() : boxes[b].lo.z());
        }
        for (const auto& f : box_faces) m.faces.push_back({f[0] + 8 * b, f[1] + 8 * b, f[2] + 8 * b});
    }

    for (int c = 0; c < 8; ++c) {
        const bool top = (c >> 2) & 1;
        // torso: bottom ring blends pelvis/spine, top ring follows spine
        m.skinning_weights(c, pelvis) = top ? 0.0 : 0.6;
        m.skinning_weights(c, spine) = top ? 1.0 : 0.4;
        m.skinning_weights(8 + c, head) = 1.0;
        // legs: hip ring blends with pelvis
        m.skinning_weights(16 + c, left_leg) = top ? 0.5 : 1.0;
        m.skinning_weights(16 + c, pelvis) = top ? 0.5 : 0.0;
        m.skinning_weights(24 + c, right_leg) = top ? 0.5 : 1.0;
        m.skinning_weights(24 + c, pelvis) = top ? 0.5 : 0.0;
    }

    for (int c = 0; c < 8; ++c) m.joint_regressor(spine, c) = 1.0 / 8.0;
    for (int c = 0; c < 4; ++c) {
        m.joint_regressor(pelvis, c) = 0.25;      // torso bottom ring
        m.joint_regressor(head, 8 + c) = 0.25;    // head bottom ring (neck)
        m.joint_regressor(left_leg, 20 + c) = 0.25;   // left hip ring
        m.joint_regressor(right_leg, 28 + c) = 0.25;  // right hip ring
    }

    // beta_0 stretches height, beta_1 widens the body.
    for (int v = 0; v < nv; ++v) {
        const Vec3& p = m.template_vertices[v];
        m.shape_blendshapes(3 * v + 2, 0) = 0.1 * p.z();
        m.shape_blendshapes(3 * v + 0, 1) = 0.1 * p.x();
        m.shape_blendshapes(3 * v + 1, 1) = 0.1 * p.y();
    }
    m.validate();
    return m;
}

}  // namespace crowdsplat
