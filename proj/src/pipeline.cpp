#include "crowdsplat/pipeline.hpp"

#include "crowdsplat/fs_util.hpp"
#include "crowdsplat/parallel.hpp"
#include "crowdsplat/renderer.hpp"
#include "crowdsplat/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

namespace crowdsplat {

namespace fs = std::filesystem;
using nlohmann::json;

json json_number(double v) {
    if (std::isinf(v) && v > 0.0) return "inf";
    return v;
}

namespace {

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from(const json& j) {
    if (!j.is_array() || j.size() != 3) throw ValidationError("expected a 3-element array, got " + j.dump());
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() || base.empty() ? p : base / p; }

bool safe_id(const std::string& id) {
    if (id.empty() || id == "." || id == "..") return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

std::string view_name(std::size_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03zu", v);
    return buf;
}

// Runs fn on a JSON subtree, turning json exceptions into a message in errs.
template <typename Fn>
void collect(ValidationErrors& errs, const std::string& where, Fn&& fn) {
    try {
        fn();
    } catch (const ValidationError& e) {
        errs.add(where + ": " + e.what());
    } catch (const json::exception& e) {
        errs.add(where + ": " + e.what());
    }
}

}  // namespace

// ---- scene config ----

SceneConfig SceneConfig::from_json(const json& doc, const fs::path& base_dir) {
    SceneConfig cfg;
    ValidationErrors errs;
    if (!doc.is_object()) throw ValidationError("scene config must be a JSON object");
    collect(errs, "background", [&] {
        if (doc.contains("background")) cfg.background = vec3_from(doc["background"]);
    });
    collect(errs, "per_vertex_scale", [&] {
        cfg.per_vertex_scale = doc.value("per_vertex_scale", cfg.per_vertex_scale);
        if (!(cfg.per_vertex_scale > 0.0)) throw ValidationError("must be > 0");
    });
    collect(errs, "seed", [&] { cfg.seed = doc.value("seed", cfg.seed); });
    collect(errs, "body_model", [&] {
        if (doc.contains("body_model") && !doc["body_model"].is_null()) {
            cfg.body_model = resolve(base_dir, doc["body_model"].get<std::string>());
            if (!fs::exists(*cfg.body_model)) throw ValidationError("file not found: " + cfg.body_model->string());
        }
    });
    if (!doc.contains("persons") || !doc["persons"].is_array()) {
        errs.add("persons: missing or not an array");
        errs.throw_if_any("invalid scene config");
    }
    std::set<std::string> seen;
    for (std::size_t i = 0; i < doc["persons"].size(); ++i) {
        const json& e = doc["persons"][i];
        const std::string where = "persons[" + std::to_string(i) + "]";
        PersonConfig p;
        collect(errs, where, [&] {
            p.id = e.at("id").get<std::string>();
            if (!safe_id(p.id)) throw ValidationError("id '" + p.id + "' must use only [A-Za-z0-9_.-]");
            if (!seen.insert(p.id).second) throw ValidationError("duplicate person id '" + p.id + "'");
        });
        collect(errs, where + ".shape", [&] {
            if (e.contains("shape")) p.shape = e["shape"].get<std::vector<double>>();
        });
        collect(errs, where + ".pose", [&] {
            if (e.contains("pose"))
                for (const auto& j : e["pose"]) p.pose.push_back(vec3_from(j));
        });
        collect(errs, where + ".translation", [&] {
            if (e.contains("translation")) p.translation = vec3_from(e["translation"]);
        });
        collect(errs, where + ".color", [&] {
            if (!e.contains("color")) return;
            const json& c = e["color"];
            const std::string type = c.value("type", std::string("flat"));
            if (type == "flat") {
                p.color.source = ColorSource::flat;
                if (c.contains("value")) p.color.flat = vec3_from(c["value"]);
            } else if (type == "checker") {
                p.color.source = ColorSource::checker;
                if (c.contains("a")) p.color.checker_a = vec3_from(c["a"]);
                if (c.contains("b")) p.color.checker_b = vec3_from(c["b"]);
                p.color.checker_cell = c.value("cell", p.color.checker_cell);
                if (!(p.color.checker_cell > 0.0)) throw ValidationError("checker cell must be > 0");
            } else if (type == "image") {
                p.color.source = ColorSource::image;
                p.color.image = resolve(base_dir, c.at("path").get<std::string>());
                if (!fs::exists(p.color.image)) throw ValidationError("file not found: " + p.color.image.string());
                p.color.camera = camera_from_json(c.at("camera"));
            } else {
                throw ValidationError("unknown color type '" + type + "'");
            }
        });
        cfg.persons.push_back(std::move(p));
    }
    if (cfg.persons.empty()) errs.add("persons: at least one person is required");
    errs.throw_if_any("invalid scene config");
    return cfg;
}

json SceneConfig::to_json() const {
    json persons_json = json::array();
    for (const auto& p : persons) {
        json pose = json::array();
        for (const auto& r : p.pose) pose.push_back(vec3_json(r));
        json color;
        switch (p.color.source) {
            case ColorSource::flat: color = {{"type", "flat"}, {"value", vec3_json(p.color.flat)}}; break;
            case ColorSource::checker:
                color = {{"type", "checker"},
                         {"a", vec3_json(p.color.checker_a)},
                         {"b", vec3_json(p.color.checker_b)},
                         {"cell", p.color.checker_cell}};
                break;
            case ColorSource::image:
                color = {{"type", "image"}, {"path", p.color.image.string()}, {"camera", camera_to_json(*p.color.camera)}};
                break;
        }
        persons_json.push_back({{"id", p.id},
                                {"shape", p.shape},
                                {"pose", pose},
                                {"translation", vec3_json(p.translation)},
                                {"color", color}});
    }
    return {{"persons", persons_json},
            {"body_model", body_model ? json(body_model->string()) : json(nullptr)},
            {"background", vec3_json(background)},
            {"per_vertex_scale", per_vertex_scale},
            {"seed", seed}};
}

namespace {

std::vector<Vec3> vertex_colors(const PersonConfig& p, const Mesh& mesh) {
    std::vector<Vec3> colors(mesh.vertices.size());
    switch (p.color.source) {
        case ColorSource::flat: std::fill(colors.begin(), colors.end(), p.color.flat); break;
        case ColorSource::checker:
            for (std::size_t v = 0; v < colors.size(); ++v) {
                const Vec3& x = mesh.vertices[v];
                const long parity = static_cast<long>(std::floor(x.x() / p.color.checker_cell))
                                    + static_cast<long>(std::floor(x.y() / p.color.checker_cell))
                                    + static_cast<long>(std::floor(x.z() / p.color.checker_cell));
                colors[v] = (parity % 2 == 0) ? p.color.checker_a : p.color.checker_b;
            }
            break;
        case ColorSource::image: {
            const ImageBuffer img = read_png(p.color.image, ImageRole::rgb);
            const Camera& cam = *p.color.camera;
            for (std::size_t v = 0; v < colors.size(); ++v) {
                const auto px = cam.project_camera_point(cam.to_camera(mesh.vertices[v]));
                if (!px) throw ValidationError("person '" + p.id + "': vertex " + std::to_string(v)
                                               + " is behind the color camera");
                const int x = std::clamp(static_cast<int>(std::lround(px->x())), 0, img.width() - 1);
                const int y = std::clamp(static_cast<int>(std::lround(px->y())), 0, img.height() - 1);
                for (int c = 0; c < 3; ++c) colors[v][c] = img.at(x, y, std::min(c, img.channels() - 1));
            }
            break;
        }
    }
    return colors;
}

}  // namespace

BuiltScene build_scene(const SceneConfig& config) {
    BuiltScene out;
    out.model = config.body_model ? load_body_model(*config.body_model) : make_toy_body_model();
    const BodyModelData& model = out.model;

    ValidationErrors errs;
    for (const auto& p : config.persons) {
        if (static_cast<int>(p.shape.size()) > model.num_shape_coeffs())
            errs.add("person '" + p.id + "': " + std::to_string(p.shape.size()) + " shape coefficients, model has "
                     + std::to_string(model.num_shape_coeffs()));
        if (static_cast<int>(p.pose.size()) > model.num_joints())
            errs.add("person '" + p.id + "': " + std::to_string(p.pose.size()) + " pose rotations, model has "
                     + std::to_string(model.num_joints()) + " joints");
    }
    errs.throw_if_any("invalid scene config");

    std::vector<PersonGaussians> persons;
    for (const auto& p : config.persons) {
        BodyParams params = BodyParams::zero(model);
        for (std::size_t s = 0; s < p.shape.size(); ++s) params.shape[static_cast<Eigen::Index>(s)] = p.shape[s];
        for (std::size_t j = 0; j < p.pose.size(); ++j) params.pose[j] = p.pose[j];
        params.root_translation = p.translation;
        Mesh mesh = skin(model, params);

        auto gaussians = init_gaussians_from_mesh(mesh, config.per_vertex_scale, vertex_colors(p, mesh));
        for (auto& g : gaussians) g.position -= p.translation;
        persons.push_back({p.id, std::move(gaussians), p.translation});
        out.meshes.push_back(std::move(mesh));
        out.params.push_back(std::move(params));
    }
    out.scene = assemble_scene(std::move(persons), config.background);
    return out;
}

void write_built_scene(const fs::path& out_dir, const BuiltScene& built, const json& config_echo) {
    write_scene(out_dir / "scene.json", built.scene, built.meshes, {{"config", config_echo}});
}

// ---- rigs ----

RigSpec RigSpec::from_json(const json& doc) {
    RigSpec r;
    try {
        const std::string kind = doc.value("kind", std::string("orbit"));
        if (kind == "orbit") {
            r.kind = RigKind::orbit;
        } else if (kind == "hemisphere") {
            r.kind = RigKind::hemisphere;
        } else {
            throw ValidationError("unknown rig kind '" + kind + "'");
        }
        r.n = doc.value("n", r.n);
        r.radius = doc.value("radius", r.radius);
        r.elevation = doc.value("elevation", r.elevation);
        if (doc.contains("look_at")) r.look_at = vec3_from(doc["look_at"]);
        r.width = doc.value("width", r.width);
        r.height = doc.value("height", r.height);
        r.focal = doc.value("focal", r.focal);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed rig spec: ") + e.what());
    }
    ValidationErrors errs;
    if (r.n < 1) errs.add("n must be >= 1");
    if (!(r.radius > 0.0)) errs.add("radius must be > 0");
    if (r.width < 1 || r.height < 1) errs.add("image size must be positive");
    if (!(r.focal > 0.0)) errs.add("focal must be > 0");
    errs.throw_if_any("invalid rig spec");
    return r;
}

json RigSpec::to_json() const {
    return {{"kind", kind == RigKind::orbit ? "orbit" : "hemisphere"},
            {"n", n},
            {"radius", radius},
            {"elevation", elevation},
            {"look_at", vec3_json(look_at)},
            {"width", width},
            {"height", height},
            {"focal", focal}};
}

CameraRig RigSpec::build(const Vec3& offset) const {
    const Intrinsics intr = Intrinsics::centered(width, height, focal);
    if (kind == RigKind::orbit) return orbit_rig(n, radius, elevation, look_at + offset, intr, width, height);
    return hemisphere_rig(n, radius, look_at + offset, intr, width, height);
}

// ---- coarse surrogate and splits ----

CoarseJitter CoarseJitter::from_json(const json& doc) {
    CoarseJitter j;
    try {
        j.color_sigma = doc.value("color_sigma", j.color_sigma);
        j.opacity_jitter = doc.value("opacity_jitter", j.opacity_jitter);
        j.position_sigma = doc.value("position_sigma", j.position_sigma);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed coarse jitter: ") + e.what());
    }
    if (!(j.color_sigma >= 0.0) || !(j.opacity_jitter >= 0.0) || !(j.position_sigma >= 0.0))
        throw ValidationError("coarse jitter magnitudes must be >= 0");
    return j;
}

json CoarseJitter::to_json() const {
    return {{"color_sigma", color_sigma}, {"opacity_jitter", opacity_jitter}, {"position_sigma", position_sigma}};
}

CrowdScene derive_coarse_scene(const CrowdScene& gt, const CoarseJitter& jitter, std::uint64_t seed) {
    CrowdScene out = gt;
    for (std::size_t p = 0; p < out.persons.size(); ++p) {
        CounterRng rng(derive_seed(seed, p));
        for (auto& g : out.persons[p].gaussians) {
            for (int c = 0; c < 3; ++c) g.color[c] = std::clamp(g.color[c] + rng.normal(0.0, jitter.color_sigma), 0.0, 1.0);
            g.opacity_logit += rng.uniform(-jitter.opacity_jitter, jitter.opacity_jitter);
            for (int k = 0; k < 3; ++k) g.position[k] += rng.normal(0.0, jitter.position_sigma);
        }
    }
    return out;
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::vector<Split> assign_splits(std::size_t n, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ValidationError("split fraction must be in [0, 1]");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    CounterRng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    std::vector<Split> out(n, Split::test);
    for (std::size_t k = 0; k < n_train; ++k) out[perm[k]] = Split::train;
    return out;
}

// ---- make-occlusion-pairs ----

OcclusionPairsConfig OcclusionPairsConfig::from_json(const json& doc, const fs::path& base_dir) {
    OcclusionPairsConfig cfg;
    cfg.frontal.n = 1;
    cfg.frontal.width = cfg.frontal.height = 512;
    cfg.frontal.focal = 800.0;
    cfg.clean_orbit.n = 24;
    ValidationErrors errs;
    collect(errs, "scene", [&] { cfg.scene = SceneConfig::from_json(doc.at("scene"), base_dir); });
    collect(errs, "frontal_azimuths_deg", [&] {
        if (doc.contains("frontal_azimuths_deg"))
            cfg.frontal_azimuths_deg = doc["frontal_azimuths_deg"].get<std::vector<double>>();
        if (cfg.frontal_azimuths_deg.empty()) throw ValidationError("at least one frontal view is required");
    });
    collect(errs, "frontal", [&] {
        if (doc.contains("frontal")) {
            json f = cfg.frontal.to_json();
            f.update(doc["frontal"]);
            cfg.frontal = RigSpec::from_json(f);
        }
    });
    collect(errs, "clean_orbit", [&] {
        if (doc.contains("clean_orbit")) {
            json f = cfg.clean_orbit.to_json();
            f.update(doc["clean_orbit"]);
            cfg.clean_orbit = RigSpec::from_json(f);
        }
    });
    collect(errs, "occlusion", [&] {
        json o = occlusion_config_to_json(cfg.occlusion);
        if (doc.contains("occlusion")) o.update(doc["occlusion"]);
        o["width"] = cfg.frontal.width;
        o["height"] = cfg.frontal.height;
        cfg.occlusion = occlusion_config_from_json(o);
    });
    collect(errs, "split_fraction", [&] {
        cfg.split_fraction = doc.value("split_fraction", cfg.split_fraction);
        if (!(cfg.split_fraction >= 0.0 && cfg.split_fraction <= 1.0)) throw ValidationError("must be in [0, 1]");
    });
    collect(errs, "seed", [&] { cfg.seed = doc.value("seed", cfg.seed); });
    errs.throw_if_any("invalid make-occlusion-pairs config");
    return cfg;
}

json OcclusionPairsConfig::to_json() const {
    return {{"scene", scene.to_json()},
            {"frontal_azimuths_deg", frontal_azimuths_deg},
            {"frontal", frontal.to_json()},
            {"clean_orbit", clean_orbit.to_json()},
            {"occlusion", occlusion_config_to_json(occlusion)},
            {"split_fraction", split_fraction},
            {"seed", seed}};
}

json make_occlusion_pairs(const OcclusionPairsConfig& cfg, const fs::path& out_dir, int threads) {
    const BuiltScene built = build_scene(cfg.scene);
    RenderSettings settings;
    const Intrinsics intr = Intrinsics::centered(cfg.frontal.width, cfg.frontal.height, cfg.frontal.focal);
    const auto splits = assign_splits(built.scene.persons.size(), cfg.split_fraction, derive_seed(cfg.seed, 0x5711));

    struct Job {
        std::size_t person, view;
    };
    std::vector<Job> jobs;
    for (std::size_t p = 0; p < built.scene.persons.size(); ++p)
        for (std::size_t v = 0; v < cfg.frontal_azimuths_deg.size(); ++v) jobs.push_back({p, v});

    std::vector<json> entries(jobs.size());
    parallel_for(jobs.size(), threads, [&](std::size_t j) {
        const auto [p, v] = jobs[j];
        const PersonGaussians& person = built.scene.persons[p];
        const CrowdScene solo = built.scene.subset({person.person_id});
        const Vec3 target = cfg.frontal.look_at + person.root_translation;
        const double az = cfg.frontal_azimuths_deg[v] * std::numbers::pi / 180.0;
        const Vec3 eye = target + cfg.frontal.radius * Vec3(std::cos(az), std::sin(az), 0.0)
                         + Vec3(0.0, 0.0, cfg.frontal.elevation);
        const Camera cam = Camera::look_at(eye, target, intr, cfg.frontal.width, cfg.frontal.height);

        const ImageBuffer full = render(solo, cam, settings).rgb;
        const ProjectedKeypoints kp = projected_keypoints(built.model, built.params[p], cam);
        const SynthesizedMask mask = synthesize_mask(kp.points, cfg.occlusion, derive_seed(cfg.seed, p, v));
        const ImageBuffer occluded = apply_mask(full, mask.mask, cfg.occlusion.fill_color);

        const std::string id = "samples/" + person.person_id + "_" + view_name(v);
        write_png(out_dir / (id + "_full.png"), full);
        write_png(out_dir / (id + "_occ.png"), occluded);
        write_png(out_dir / (id + "_mask.png"), mask.mask);
        write_json(out_dir / (id + "_spec.json"), mask_spec_to_json(mask.spec));
        entries[j] = {{"id", person.person_id + "_" + view_name(v)},
                      {"person", person.person_id},
                      {"view", v},
                      {"azimuth_deg", cfg.frontal_azimuths_deg[v]},
                      {"camera", camera_to_json(cam)},
                      {"full", id + "_full.png"},
                      {"occluded", id + "_occ.png"},
                      {"mask", id + "_mask.png"},
                      {"spec", id + "_spec.json"},
                      {"mask_fraction", mask_fraction(mask.mask)},
                      {"split", to_string(splits[p])}};
    });

    // Clean multi-view targets of each person alone.
    std::vector<json> clean(built.scene.persons.size(), json::array());
    for (std::size_t p = 0; p < built.scene.persons.size(); ++p) {
        const PersonGaussians& person = built.scene.persons[p];
        const CrowdScene solo = built.scene.subset({person.person_id});
        const CameraRig rig = cfg.clean_orbit.build(person.root_translation);
        std::vector<std::string> paths(rig.cameras.size());
        parallel_for(rig.cameras.size(), threads, [&](std::size_t k) {
            paths[k] = "clean/" + person.person_id + "/" + view_name(k) + ".png";
            write_png(out_dir / paths[k], render(solo, rig.cameras[k], settings).rgb);
        });
        for (const auto& path : paths) clean[p].push_back(path);
    }
    for (std::size_t j = 0; j < jobs.size(); ++j) entries[j]["clean"] = clean[jobs[j].person];

    std::size_t n_train = 0;
    for (auto s : splits) n_train += s == Split::train;
    json manifest = {{"version", kManifestVersion},
                     {"kind", "occlusion_pairs"},
                     {"seed", cfg.seed},
                     {"split", {{"fraction", cfg.split_fraction}, {"train", n_train}, {"test", splits.size() - n_train}}},
                     {"entries", entries},
                     {"config", cfg.to_json()}};
    write_json(out_dir / "manifest.json", manifest);
    return manifest;
}

// ---- make-refiner-pairs ----

RefinerPairsConfig RefinerPairsConfig::from_json(const json& doc, const fs::path& base_dir) {
    RefinerPairsConfig cfg;
    cfg.hemisphere.kind = RigKind::hemisphere;
    cfg.hemisphere.n = 126;
    ValidationErrors errs;
    auto scene_from = [&](const json& j) {
        if (j.is_string()) {
            const fs::path path = resolve(base_dir, j.get<std::string>());
            return SceneConfig::from_json(read_json(path), path.parent_path());
        }
        return SceneConfig::from_json(j, base_dir);
    };
    collect(errs, "pairs", [&] {
        const json& pairs = doc.at("pairs");
        if (!pairs.is_array() || pairs.empty()) throw ValidationError("at least one scene pair is required");
        std::set<std::string> seen;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            collect(errs, "pairs[" + std::to_string(i) + "]", [&] {
                ScenePairConfig pc;
                pc.id = pairs[i].value("id", "scene_" + std::to_string(i));
                if (!safe_id(pc.id)) throw ValidationError("id '" + pc.id + "' must use only [A-Za-z0-9_.-]");
                if (!seen.insert(pc.id).second) throw ValidationError("duplicate scene id '" + pc.id + "'");
                pc.gt = scene_from(pairs[i].at("gt"));
                if (pairs[i].contains("coarse") && !pairs[i]["coarse"].is_null()) {
                    pc.coarse = scene_from(pairs[i]["coarse"]);
                    std::vector<std::string> a, b;
                    for (const auto& p : pc.gt.persons) a.push_back(p.id);
                    for (const auto& p : pc.coarse->persons) b.push_back(p.id);
                    if (a != b) throw ValidationError("coarse and gt scenes must list the same person ids");
                }
                cfg.pairs.push_back(std::move(pc));
            });
        }
    });
    collect(errs, "hemisphere", [&] {
        json h = cfg.hemisphere.to_json();
        if (doc.contains("hemisphere")) h.update(doc["hemisphere"]);
        h["kind"] = "hemisphere";
        cfg.hemisphere = RigSpec::from_json(h);
    });
    collect(errs, "rho", [&] {
        cfg.scl.rho = doc.value("rho", cfg.scl.rho);
        cfg.scl.validate();
    });
    collect(errs, "split_fraction", [&] {
        cfg.split_fraction = doc.value("split_fraction", cfg.split_fraction);
        if (!(cfg.split_fraction >= 0.0 && cfg.split_fraction <= 1.0)) throw ValidationError("must be in [0, 1]");
    });
    collect(errs, "coarse_jitter", [&] {
        if (doc.contains("coarse_jitter")) cfg.coarse_jitter = CoarseJitter::from_json(doc["coarse_jitter"]);
    });
    collect(errs, "seed", [&] { cfg.seed = doc.value("seed", cfg.seed); });
    errs.throw_if_any("invalid make-refiner-pairs config");
    return cfg;
}

json RefinerPairsConfig::to_json() const {
    json pairs_json = json::array();
    for (const auto& p : pairs)
        pairs_json.push_back({{"id", p.id}, {"gt", p.gt.to_json()}, {"coarse", p.coarse ? p.coarse->to_json() : json(nullptr)}});
    return {{"pairs", pairs_json},
            {"hemisphere", hemisphere.to_json()},
            {"rho", scl.rho},
            {"split_fraction", split_fraction},
            {"coarse_jitter", coarse_jitter.to_json()},
            {"seed", seed}};
}

json make_refiner_pairs(const RefinerPairsConfig& cfg, const fs::path& out_dir, int threads) {
    const auto splits = assign_splits(cfg.pairs.size(), cfg.split_fraction, derive_seed(cfg.seed, 0x5711));
    const CameraRig rig = cfg.hemisphere.build();
    RenderSettings settings;
    json entries = json::array();
    for (std::size_t s = 0; s < cfg.pairs.size(); ++s) {
        const ScenePairConfig& pair = cfg.pairs[s];
        const BuiltScene gt = build_scene(pair.gt);
        const CrowdScene coarse = pair.coarse ? build_scene(*pair.coarse).scene
                                              : derive_coarse_scene(gt.scene, cfg.coarse_jitter, derive_seed(cfg.seed, s, 1));
        const Mesh merged = merge_meshes(gt.meshes);
        const std::string dir = "pairs/" + pair.id + "/";
        std::vector<std::array<std::string, 3>> paths(rig.cameras.size());
        parallel_for(rig.cameras.size(), threads, [&](std::size_t v) {
            const std::string base = dir + view_name(v) + "_";
            paths[v] = {base + "gt.png", base + "coarse.png", base + "normal.png"};
            write_png(out_dir / paths[v][0], render(gt.scene, rig.cameras[v], settings).rgb);
            write_png(out_dir / paths[v][1], render(coarse, rig.cameras[v], settings).rgb);
            write_png(out_dir / paths[v][2], render_normal_map(merged, rig.cameras[v]));
        });
        // SCL decisions use one sequential stream per scene, independent of threading.
        CounterRng rng(derive_seed(cfg.seed, s, 2));
        for (std::size_t v = 0; v < rig.cameras.size(); ++v) {
            const bool identity = scl_draw(cfg.scl, rng) == PairKind::identity;
            entries.push_back({{"scene", pair.id},
                               {"view", v},
                               {"camera", camera_to_json(rig.cameras[v])},
                               {"gt", paths[v][0]},
                               {"coarse", paths[v][1]},
                               {"normal", paths[v][2]},
                               {"input", identity ? paths[v][0] : paths[v][1]},
                               {"target", paths[v][0]},
                               {"kind", to_string(identity ? PairKind::identity : PairKind::degradation)},
                               {"split", to_string(splits[s])}});
        }
    }
    std::size_t n_train = 0;
    for (auto s : splits) n_train += s == Split::train;
    json manifest = {{"version", kManifestVersion},
                     {"kind", "refiner_pairs"},
                     {"seed", cfg.seed},
                     {"split", {{"fraction", cfg.split_fraction}, {"train", n_train}, {"test", splits.size() - n_train}}},
                     {"entries", entries},
                     {"config", cfg.to_json()}};
    write_json(out_dir / "manifest.json", manifest);
    return manifest;
}

// ---- refine ----

RefineConfig RefineConfig::from_json(const json& doc, const fs::path& base_dir) {
    RefineConfig cfg;
    ValidationErrors errs;
    collect(errs, "scene", [&] { cfg.scene = resolve(base_dir, doc.at("scene").get<std::string>()); });
    collect(errs, "refiner", [&] {
        if (doc.contains("refiner")) cfg.refiner = doc["refiner"];
        make_refiner(cfg.refiner);
    });
    collect(errs, "cluster", [&] {
        if (!doc.contains("cluster")) return;
        cfg.cluster.eps = doc["cluster"].value("eps", cfg.cluster.eps);
        cfg.cluster.min_pts = doc["cluster"].value("min_pts", cfg.cluster.min_pts);
        cfg.cluster.validate();
    });
    collect(errs, "optim", [&] {
        if (doc.contains("optim")) cfg.optim = optim_config_from_json(doc["optim"]);
    });
    collect(errs, "rig", [&] {
        json r = cfg.rig.to_json();
        if (doc.contains("rig")) r.update(doc["rig"]);
        cfg.rig = RigSpec::from_json(r);
    });
    collect(errs, "targets_scene", [&] {
        if (doc.contains("targets_scene") && !doc["targets_scene"].is_null())
            cfg.targets_scene = resolve(base_dir, doc["targets_scene"].get<std::string>());
    });
    collect(errs, "refresh_every", [&] {
        cfg.refresh_every = doc.value("refresh_every", cfg.refresh_every);
        if (cfg.refresh_every < 0) throw ValidationError("must be >= 0");
    });
    collect(errs, "held_out_every", [&] {
        cfg.held_out_every = doc.value("held_out_every", cfg.held_out_every);
        if (cfg.held_out_every < 0 || cfg.held_out_every == 1) throw ValidationError("must be 0 or >= 2");
    });
    errs.throw_if_any("invalid refine config");
    return cfg;
}

json RefineConfig::to_json() const {
    return {{"scene", scene.string()},
            {"refiner", refiner},
            {"cluster", {{"eps", cluster.eps}, {"min_pts", cluster.min_pts}}},
            {"optim", optim_config_to_json(optim)},
            {"rig", rig.to_json()},
            {"targets_scene", targets_scene ? json(targets_scene->string()) : json(nullptr)},
            {"refresh_every", refresh_every},
            {"held_out_every", held_out_every}};
}

namespace {

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Distills one cluster, writes its before/target/after grids and returns its report entry.
json refine_cluster(CrowdScene& scene, const std::vector<Mesh>& meshes, const std::set<std::string>& cluster,
                    std::size_t cluster_index, const RefineConfig& cfg, const Refiner& refiner,
                    const std::optional<CrowdScene>& target_scene, const CameraRig& rig, const fs::path& out_dir,
                    int threads) {
    RenderSettings settings;
    settings.threads = threads;
    OptimConfig optim = cfg.optim;
    optim.threads = threads;

    std::vector<std::size_t> train_views, held_views;
    for (std::size_t v = 0; v < rig.cameras.size(); ++v) {
        const bool held = cfg.held_out_every > 0 && (v + 1) % static_cast<std::size_t>(cfg.held_out_every) == 0;
        (held ? held_views : train_views).push_back(v);
    }

    auto make_targets = [&](const CrowdScene& current) {
        if (target_scene) {
            const CrowdScene sub = target_scene->subset(cluster);
            std::vector<TargetView> t;
            for (const auto& cam : rig.cameras) t.push_back({cam, render(sub, cam, settings).rgb});
            return t;
        }
        return generate_pseudo_gt(current, cluster, rig, refiner, meshes, settings);
    };
    auto pick = [](const std::vector<TargetView>& all, const std::vector<std::size_t>& idx) {
        std::vector<TargetView> out;
        for (auto i : idx) out.push_back(all[i]);
        return out;
    };

    const CrowdScene before = scene.subset(cluster);
    const std::vector<TargetView> targets = make_targets(scene);

    RefinementReport report;
    CrowdScene current = scene;
    const bool refresh = cfg.refresh_every > 0 && !target_scene && cfg.refresh_every < optim.iterations;
    if (!refresh) {
        DistillResult r = distill(current, cluster, pick(targets, train_views), optim);
        current = std::move(r.scene);
        report = std::move(r.report);
    } else {
        // Re-run the refiner on the current state every refresh_every iterations.
        std::vector<TargetView> chunk_targets = targets;
        int done = 0;
        std::vector<ViewScore> first_scores;
        while (done < optim.iterations) {
            OptimConfig chunk = optim;
            chunk.iterations = std::min(cfg.refresh_every, optim.iterations - done);
            chunk.seed = derive_seed(optim.seed, static_cast<std::uint64_t>(done));
            DistillResult r = distill(current, cluster, pick(chunk_targets, train_views), chunk);
            current = std::move(r.scene);
            if (done == 0) first_scores = r.report.views;
            report.loss_trace.insert(report.loss_trace.end(), r.report.loss_trace.begin(), r.report.loss_trace.end());
            report.wall_clock_seconds += r.report.wall_clock_seconds;
            report.views = r.report.views;
            done += chunk.iterations;
            if (done < optim.iterations) chunk_targets = make_targets(current);
        }
        for (std::size_t v = 0; v < report.views.size(); ++v) {
            report.views[v].psnr_before = first_scores[v].psnr_before;
            report.views[v].ssim_before = first_scores[v].ssim_before;
        }
        report.config = optim_config_to_json(optim);
    }

    // Scores on every rig view against the first-pass targets, plus the grids.
    const CrowdScene after = current.subset(cluster);
    json views = json::array();
    std::vector<double> train_before, train_after, held_before, held_after;
    for (std::size_t v = 0; v < rig.cameras.size(); ++v) {
        const ImageBuffer img_before = render(before, rig.cameras[v], settings).rgb;
        const ImageBuffer img_after = render(after, rig.cameras[v], settings).rgb;
        const double pb = psnr(img_before, targets[v].image);
        const double pa = psnr(img_after, targets[v].image);
        const bool held = std::find(held_views.begin(), held_views.end(), v) != held_views.end();
        (held ? held_before : train_before).push_back(pb);
        (held ? held_after : train_after).push_back(pa);
        const std::string grid = "grids/cluster_" + std::to_string(cluster_index) + "_" + view_name(v) + ".png";
        write_png(out_dir / grid, hconcat({img_before, targets[v].image, img_after}));
        views.push_back({{"view", v},
                         {"held_out", held},
                         {"psnr_before", json_number(pb)},
                         {"psnr_after", json_number(pa)},
                         {"ssim_before", ssim(img_before, targets[v].image)},
                         {"ssim_after", ssim(img_after, targets[v].image)},
                         {"grid", grid}});
    }
    for (const auto& p : after.persons) scene.person(p.person_id).gaussians = p.gaussians;

    const double tb = mean_of(train_before), ta = mean_of(train_after);
    json entry = {{"members", std::vector<std::string>(cluster.begin(), cluster.end())},
                  {"status", "ok"},
                  {"views", views},
                  {"train_psnr_before", json_number(tb)},
                  {"train_psnr_after", json_number(ta)},
                  {"psnr_delta", std::isinf(tb) && std::isinf(ta) ? 0.0 : ta - tb},
                  {"distill", report.to_json()}};
    if (!held_views.empty()) {
        entry["held_out_psnr_before"] = json_number(mean_of(held_before));
        entry["held_out_psnr_after"] = json_number(mean_of(held_after));
    }
    return entry;
}

}  // namespace

json refine_command(const RefineConfig& cfg, const fs::path& out_dir, int threads) {
    SceneFiles files = read_scene(cfg.scene);
    std::optional<CrowdScene> target_scene;
    if (cfg.targets_scene) target_scene = read_scene(*cfg.targets_scene).scene;
    const auto refiner = make_refiner(cfg.refiner);
    const CameraRig rig = cfg.rig.build();

    ClusterResult clusters = cluster_persons(files.scene, cfg.cluster);
    // Noise persons are refined on their own.
    for (const auto& id : clusters.noise) clusters.clusters.push_back({id});

    json cluster_reports = json::array();
    bool any_failed = false;
    for (std::size_t c = 0; c < clusters.clusters.size(); ++c) {
        const auto& cluster = clusters.clusters[c];
        spdlog::info("refining cluster {} of {} ({} persons)", c + 1, clusters.clusters.size(), cluster.size());
        try {
            if (target_scene)
                for (const auto& id : cluster)
                    if (!target_scene->contains(id))
                        throw ValidationError("targets scene has no person '" + id + "'");
            cluster_reports.push_back(
                refine_cluster(files.scene, files.meshes, cluster, c, cfg, *refiner, target_scene, rig, out_dir, threads));
        } catch (const Error& e) {
            any_failed = true;
            spdlog::error("cluster {} failed: {}", c, e.what());
            cluster_reports.push_back({{"members", std::vector<std::string>(cluster.begin(), cluster.end())},
                                       {"status", "error"},
                                       {"error", e.what()}});
        }
    }

    write_scene(out_dir / "scene.json", files.scene, files.meshes, {{"config", cfg.to_json()}});
    json report = {{"version", kManifestVersion},
                   {"kind", "refine_report"},
                   {"status", any_failed ? "partial" : "ok"},
                   {"clusters", cluster_reports},
                   {"noise", std::vector<std::string>(clusters.noise.begin(), clusters.noise.end())},
                   {"config", cfg.to_json()}};
    write_json(out_dir / "report.json", report);
    return report;
}

// ---- eval ----

namespace {

ImageBuffer as_rgb(const ImageBuffer& img) {
    if (img.channels() == 3) return img;
    ImageBuffer out(img.width(), img.height(), 3, ImageRole::rgb);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y, img.channels() == 1 ? 0 : c);
    return out;
}

std::set<std::string> png_names(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename().string());
    return names;
}

}  // namespace

EvalResult eval_command(const fs::path& dir_a, const fs::path& dir_b, std::uint64_t extractor_seed) {
    const auto names_a = png_names(dir_a);
    const auto names_b = png_names(dir_b);
    ValidationErrors errs;
    for (const auto& n : names_a)
        if (!names_b.contains(n)) errs.add(n + " missing from " + dir_b.string());
    for (const auto& n : names_b)
        if (!names_a.contains(n)) errs.add(n + " missing from " + dir_a.string());
    errs.throw_if_any("image sets differ");
    if (names_a.empty()) throw ValidationError("no PNG files in " + dir_a.string());

    const ConvFeatureExtractor fx(extractor_seed);
    EvalResult result;
    result.mean.name = "mean";
    for (const auto& n : names_a) {
        const ImageBuffer a = as_rgb(read_png(dir_a / n));
        const ImageBuffer b = as_rgb(read_png(dir_b / n));
        if (!a.same_shape(b)) throw ValidationError(n + ": image sizes differ");
        EvalRow row{n, psnr(a, b), ssim(a, b), feature_distance(a, b, fx)};
        result.mean.psnr += row.psnr;
        result.mean.ssim += row.ssim;
        result.mean.feature_distance += row.feature_distance;
        result.rows.push_back(row);
    }
    const double n = static_cast<double>(result.rows.size());
    result.mean.psnr /= n;
    result.mean.ssim /= n;
    result.mean.feature_distance /= n;
    return result;
}

json EvalResult::to_json(std::uint64_t seed) const {
    auto row_json = [](const EvalRow& r) {
        return json{{"name", r.name},
                    {"psnr", json_number(r.psnr)},
                    {"ssim", r.ssim},
                    {"feature_distance", r.feature_distance}};
    };
    json rows_json = json::array();
    for (const auto& r : rows) rows_json.push_back(row_json(r));
    return {{"version", kManifestVersion},
            {"kind", "eval"},
            {"extractor_seed", seed},
            {"rows", rows_json},
            {"mean", row_json(mean)}};
}

std::string EvalResult::to_text() const {
    std::size_t width = 5;
    for (const auto& r : rows) width = std::max(width, r.name.size());
    auto line = [&](const EvalRow& r) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "  %10.4f  %8.5f  %12.6f\n", r.psnr, r.ssim, r.feature_distance);
        std::string name = r.name;
        name.resize(width, ' ');
        return name + buf;
    };
    std::string header = "image";
    header.resize(width, ' ');
    std::string out = header + "     PSNR(dB)      SSIM   FeatureDist\n";
    for (const auto& r : rows) out += line(r);
    out += std::string(width + 38, '-') + "\n";
    out += line(mean);
    return out;
}

}  // namespace crowdsplat
