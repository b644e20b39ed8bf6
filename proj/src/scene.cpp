#include "crowdsplat/scene.hpp"

#include "crowdsplat/fs_util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstring>
#include <map>
#include <sstream>

namespace crowdsplat {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

Vec4 renormalize_quaternion(const Vec4& q) {
    const double n = q.norm();
    if (!(n > 0.0)) throw ValidationError("quaternion has zero norm");
    if (std::abs(n - 1.0) <= 1e-6) return q;
    return q / n;
}

Gaussian::Gaussian(const Vec3& position, const Vec3& log_scale, const Vec4& rotation, double opacity_logit,
                   const Vec3& color)
    : position(position), log_scale(log_scale), rotation(renormalize_quaternion(rotation)),
      opacity_logit(opacity_logit), color(color) {}

double Gaussian::opacity() const { return sigmoid(opacity_logit); }

Mat3 Gaussian::rotation_matrix() const {
    const Vec4 q = rotation / rotation.norm();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Mat3 Gaussian::covariance() const {
    const Mat3 r = rotation_matrix();
    const Vec3 s = log_scale.array().exp();
    const Mat3 b = r * s.asDiagonal();
    return b * b.transpose();
}

void Gaussian::validate(const std::string& name) const {
    const bool finite = position.allFinite() && log_scale.allFinite() && rotation.allFinite()
                        && std::isfinite(opacity_logit) && color.allFinite();
    if (!finite) throw ValidationError(name + " has a non-finite parameter");
    const Vec3 s = log_scale.array().exp();
    if (!s.allFinite() || !(s.minCoeff() > 0.0)) throw ValidationError(name + " has a degenerate scale");
    if (!(rotation.norm() > 0.0)) throw ValidationError(name + " has a zero quaternion");
}

std::size_t CrowdScene::gaussian_count() const {
    std::size_t n = 0;
    for (const auto& p : persons) n += p.gaussians.size();
    return n;
}

const PersonGaussians& CrowdScene::person(const std::string& id) const {
    for (const auto& p : persons)
        if (p.person_id == id) return p;
    throw ValidationError("unknown person id '" + id + "'");
}

PersonGaussians& CrowdScene::person(const std::string& id) {
    for (auto& p : persons)
        if (p.person_id == id) return p;
    throw ValidationError("unknown person id '" + id + "'");
}

bool CrowdScene::contains(const std::string& id) const {
    return std::any_of(persons.begin(), persons.end(), [&](const auto& p) { return p.person_id == id; });
}

CrowdScene CrowdScene::subset(const std::set<std::string>& ids) const {
    for (const auto& id : ids)
        if (!contains(id)) throw ValidationError("unknown person id '" + id + "'");
    CrowdScene out;
    out.background_color = background_color;
    for (const auto& p : persons)
        if (ids.contains(p.person_id)) out.persons.push_back(p);
    return out;
}

CrowdScene assemble_scene(std::vector<PersonGaussians> persons, const Vec3& background) {
    std::set<std::string> seen;
    for (const auto& p : persons) {
        if (!seen.insert(p.person_id).second) throw ValidationError("duplicate person id '" + p.person_id + "'");
        if (p.gaussians.empty()) throw ValidationError("person '" + p.person_id + "' has no Gaussians");
    }
    CrowdScene scene;
    scene.persons = std::move(persons);
    scene.background_color = background;
    return scene;
}

std::vector<Gaussian> init_gaussians_from_mesh(const Mesh& mesh, double per_vertex_scale, const std::vector<Vec3>& colors) {
    const std::size_t n = mesh.vertices.size();
    if (n == 0) throw ValidationError("cannot initialise Gaussians from an empty mesh");
    if (colors.size() != n)
        throw ValidationError("got " + std::to_string(colors.size()) + " colors for " + std::to_string(n) + " vertices");
    if (!(per_vertex_scale > 0.0)) throw ValidationError("per-vertex scale must be > 0");

    // Unique undirected edges, so a shared edge counts once per endpoint.
    std::set<std::pair<int, int>> edges;
    for (const auto& f : mesh.faces) {
        for (int k = 0; k < 3; ++k) {
            const int a = f[k], b = f[(k + 1) % 3];
            edges.insert({std::min(a, b), std::max(a, b)});
        }
    }
    std::vector<double> length_sum(n, 0.0);
    std::vector<int> degree(n, 0);
    for (const auto& [a, b] : edges) {
        const double len = (mesh.vertices[a] - mesh.vertices[b]).norm();
        length_sum[a] += len;
        length_sum[b] += len;
        ++degree[a];
        ++degree[b];
    }

    std::vector<Gaussian> out;
    out.reserve(n);
    const double opacity_logit = logit(0.95);
    for (std::size_t v = 0; v < n; ++v) {
        if (degree[v] == 0 || !(length_sum[v] > 0.0))
            throw ValidationError("vertex " + std::to_string(v) + " has no incident edge of positive length");
        const double scale = per_vertex_scale * length_sum[v] / degree[v];
        out.emplace_back(mesh.vertices[v], Vec3::Constant(std::log(scale)), Vec4(1.0, 0.0, 0.0, 0.0), opacity_logit,
                         colors[v]);
    }
    return out;
}

void ClusterConfig::validate() const {
    if (!(eps > 0.0)) throw ValidationError("cluster eps must be > 0");
    if (min_pts < 1) throw ValidationError("cluster min_pts must be >= 1");
}

ClusterResult cluster_persons(const CrowdScene& scene, const ClusterConfig& cfg) {
    cfg.validate();
    if (scene.persons.empty()) throw ValidationError("cannot cluster an empty scene");

    std::vector<const PersonGaussians*> order;
    for (const auto& p : scene.persons) order.push_back(&p);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->person_id < b->person_id; });
    const std::size_t n = order.size();

    std::vector<std::vector<std::size_t>> neighbors(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if ((order[i]->root_translation - order[j]->root_translation).norm() <= cfg.eps) neighbors[i].push_back(j);

    constexpr int unassigned = -1;
    std::vector<int> label(n, unassigned);
    int next_cluster = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != unassigned || static_cast<int>(neighbors[i].size()) < cfg.min_pts) continue;
        const int c = next_cluster++;
        label[i] = c;
        std::vector<std::size_t> frontier{i};
        // Breadth-first expansion in discovery order; only core points expand.
        for (std::size_t head = 0; head < frontier.size(); ++head) {
            const std::size_t p = frontier[head];
            if (static_cast<int>(neighbors[p].size()) < cfg.min_pts) continue;
            for (std::size_t q : neighbors[p]) {
                if (label[q] != unassigned) continue;
                label[q] = c;
                frontier.push_back(q);
            }
        }
    }

    ClusterResult result;
    result.clusters.resize(next_cluster);
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] == unassigned) result.noise.insert(order[i]->person_id);
        else result.clusters[label[i]].insert(order[i]->person_id);
    }
    std::sort(result.clusters.begin(), result.clusters.end(),
              [](const auto& a, const auto& b) { return *a.begin() < *b.begin(); });
    return result;
}

namespace {

constexpr int kPlyFloatsPerGaussian = 14;
constexpr const char* kPlyProperties[kPlyFloatsPerGaussian] = {
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green", "blue"};

}  // namespace

void write_gaussians_ply(const std::filesystem::path& path, const std::vector<Gaussian>& gaussians) {
    std::string header = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(gaussians.size()) + "\n";
    for (const char* name : kPlyProperties) header += std::string("property float ") + name + "\n";
    header += "end_header\n";

    std::string body(gaussians.size() * kPlyFloatsPerGaussian * sizeof(float), '\0');
    char* out = body.data();
    for (const auto& g : gaussians) {
        const float values[kPlyFloatsPerGaussian] = {
            static_cast<float>(g.position.x()),  static_cast<float>(g.position.y()),  static_cast<float>(g.position.z()),
            static_cast<float>(g.log_scale.x()), static_cast<float>(g.log_scale.y()), static_cast<float>(g.log_scale.z()),
            static_cast<float>(g.rotation[0]),   static_cast<float>(g.rotation[1]),   static_cast<float>(g.rotation[2]),
            static_cast<float>(g.rotation[3]),   static_cast<float>(g.opacity_logit), static_cast<float>(g.color.x()),
            static_cast<float>(g.color.y()),     static_cast<float>(g.color.z())};
        // x86/ARM hosts are little-endian; memcpy keeps the IEEE layout.
        std::memcpy(out, values, sizeof(values));
        out += sizeof(values);
    }
    write_text_file(path, header + body);
}

std::vector<Gaussian> read_gaussians_ply(const std::filesystem::path& path) {
    const std::string data = read_text_file(path);
    const std::string end_marker = "end_header\n";
    const auto end = data.find(end_marker);
    if (data.rfind("ply\n", 0) != 0 || end == std::string::npos) throw ValidationError(path.string() + ": not a PLY file");

    std::istringstream header(data.substr(0, end));
    std::string line;
    std::size_t count = 0;
    bool in_vertex = false;
    std::vector<std::string> props;
    std::vector<std::string> types;
    while (std::getline(header, line)) {
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt != "binary_little_endian") throw ValidationError(path.string() + ": only binary_little_endian PLY is supported");
        } else if (tok == "element") {
            std::string name;
            ls >> name;
            in_vertex = name == "vertex";
            if (in_vertex) ls >> count;
            else throw ValidationError(path.string() + ": unexpected element '" + name + "'");
        } else if (tok == "property" && in_vertex) {
            std::string type, name;
            ls >> type >> name;
            types.push_back(type);
            props.push_back(name);
        }
    }

    std::map<std::string, int> column;
    for (std::size_t i = 0; i < props.size(); ++i) {
        if (types[i] != "float" && types[i] != "float32")
            throw ValidationError(path.string() + ": property '" + props[i] + "' must be float");
        column[props[i]] = static_cast<int>(i);
    }
    for (const char* name : kPlyProperties)
        if (!column.contains(name)) throw ValidationError(path.string() + ": missing property '" + name + "'");

    const std::size_t stride = props.size() * sizeof(float);
    const std::size_t offset = end + end_marker.size();
    if (data.size() - offset != count * stride)
        throw ValidationError(path.string() + ": payload size does not match header");

    std::vector<Gaussian> out;
    out.reserve(count);
    std::vector<float> row(props.size());
    for (std::size_t i = 0; i < count; ++i) {
        std::memcpy(row.data(), data.data() + offset + i * stride, stride);
        auto f = [&](const char* name) { return static_cast<double>(row[column[name]]); };
        Gaussian g;
        g.position = {f("x"), f("y"), f("z")};
        g.log_scale = {f("scale_0"), f("scale_1"), f("scale_2")};
        g.rotation = renormalize_quaternion(Vec4(f("rot_0"), f("rot_1"), f("rot_2"), f("rot_3")));
        g.opacity_logit = f("opacity");
        g.color = {f("red"), f("green"), f("blue")};
        g.validate(path.string() + " Gaussian " + std::to_string(i));
        out.push_back(g);
    }
    return out;
}

nlohmann::json mesh_to_json(const Mesh& mesh) {
    nlohmann::json verts = nlohmann::json::array(), faces = nlohmann::json::array();
    for (const auto& v : mesh.vertices) verts.push_back({v.x(), v.y(), v.z()});
    for (const auto& f : mesh.faces) faces.push_back({f[0], f[1], f[2]});
    return {{"vertices", verts}, {"faces", faces}};
}

Mesh mesh_from_json(const nlohmann::json& doc) {
    Mesh m;
    try {
        for (const auto& v : doc.at("vertices")) m.vertices.emplace_back(v.at(0).get<double>(), v.at(1).get<double>(), v.at(2).get<double>());
        for (const auto& f : doc.at("faces")) {
            const Face face{f.at(0).get<int>(), f.at(1).get<int>(), f.at(2).get<int>()};
            for (int idx : face)
                if (idx < 0 || idx >= static_cast<int>(m.vertices.size())) throw ValidationError("mesh face index out of range");
            m.faces.push_back(face);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed mesh JSON: ") + e.what());
    }
    m.vertex_normals = compute_vertex_normals(m.vertices, m.faces);
    return m;
}

void write_scene(const std::filesystem::path& manifest_path, const CrowdScene& scene, const std::vector<Mesh>& meshes,
                 const nlohmann::json& extra) {
    if (!meshes.empty() && meshes.size() != scene.persons.size())
        throw ValidationError("write_scene: mesh count does not match person count");
    const auto dir = manifest_path.parent_path();
    nlohmann::json persons = nlohmann::json::array();
    for (std::size_t i = 0; i < scene.persons.size(); ++i) {
        const auto& p = scene.persons[i];
        const std::string ply = "persons/" + p.person_id + ".ply";
        write_gaussians_ply(dir / ply, p.gaussians);
        nlohmann::json entry = {{"id", p.person_id},
                                {"ply", ply},
                                {"root_translation", {p.root_translation.x(), p.root_translation.y(), p.root_translation.z()}}};
        if (!meshes.empty()) {
            const std::string mesh = "persons/" + p.person_id + "_mesh.json";
            write_json(dir / mesh, mesh_to_json(meshes[i]));
            entry["mesh"] = mesh;
        }
        persons.push_back(entry);
    }
    nlohmann::json doc = extra;
    doc["version"] = 1;
    doc["background"] = {scene.background_color.x(), scene.background_color.y(), scene.background_color.z()};
    doc["persons"] = persons;
    write_json(manifest_path, doc);
}

SceneFiles read_scene(const std::filesystem::path& manifest_path) {
    const auto doc = read_json(manifest_path);
    const auto dir = manifest_path.parent_path();
    SceneFiles out;
    try {
        const auto& bg = doc.at("background");
        const Vec3 background(bg.at(0).get<double>(), bg.at(1).get<double>(), bg.at(2).get<double>());
        std::vector<PersonGaussians> persons;
        bool any_mesh = false, all_mesh = true;
        for (const auto& e : doc.at("persons")) {
            PersonGaussians p;
            p.person_id = e.at("id").get<std::string>();
            p.gaussians = read_gaussians_ply(dir / e.at("ply").get<std::string>());
            const auto& t = e.at("root_translation");
            p.root_translation = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
            persons.push_back(std::move(p));
            if (e.contains("mesh")) {
                any_mesh = true;
                out.meshes.push_back(mesh_from_json(read_json(dir / e.at("mesh").get<std::string>())));
            } else {
                all_mesh = false;
            }
        }
        if (any_mesh && !all_mesh) throw ValidationError("scene manifest lists meshes for only some persons");
        out.scene = assemble_scene(std::move(persons), background);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(manifest_path.string() + ": malformed scene manifest: " + e.what());
    }
    return out;
}

}  // namespace crowdsplat
