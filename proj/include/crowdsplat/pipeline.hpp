#pragma once

#include "crowdsplat/body_model.hpp"
#include "crowdsplat/camera.hpp"
#include "crowdsplat/distill.hpp"
#include "crowdsplat/occlusion.hpp"
#include "crowdsplat/scene.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>

namespace crowdsplat {

inline constexpr int kManifestVersion = 1;

enum class ColorSource { flat, checker, image };

struct ColorSpec {
    ColorSource source = ColorSource::flat;
    Vec3 flat = Vec3(0.7, 0.7, 0.7);
    // checker: parity of floor(p / cell) summed over the three axes of the world-space vertex
    Vec3 checker_a = Vec3(0.9, 0.9, 0.9);
    Vec3 checker_b = Vec3(0.2, 0.2, 0.2);
    double checker_cell = 0.1;
    // image: vertices projected with `camera`, nearest pixel, clamped to the border
    std::filesystem::path image;
    std::optional<Camera> camera;
};

struct PersonConfig {
    std::string id;
    std::vector<double> shape;  // missing coefficients are 0
    std::vector<Vec3> pose;     // axis-angle per joint; missing joints are 0
    Vec3 translation = Vec3::Zero();
    ColorSpec color;
};

struct SceneConfig {
    std::vector<PersonConfig> persons;
    std::optional<std::filesystem::path> body_model;  // toy model when absent
    Vec3 background = Vec3::Ones();
    double per_vertex_scale = 0.5;
    std::uint64_t seed = 0;

    // Relative paths are resolved against base_dir. Every problem found is
    // reported in one ValidationError.
    static SceneConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
    nlohmann::json to_json() const;
};

struct BuiltScene {
    CrowdScene scene;
    std::vector<Mesh> meshes;  // world space, one per person
    std::vector<BodyParams> params;
    BodyModelData model;
};

BuiltScene build_scene(const SceneConfig& config);

// Writes <out>/scene.json and <out>/persons/<id>.ply.
void write_built_scene(const std::filesystem::path& out_dir, const BuiltScene& built, const nlohmann::json& config_echo);

/// Camera rig description. For occlusion pairs `look_at` is an offset from
/// each person's root translation; elsewhere it is a world point.
struct RigSpec {
    RigKind kind = RigKind::orbit;
    int n = 24;
    double radius = 4.0;
    double elevation = 0.0;  // orbit only, metres above look_at
    Vec3 look_at = Vec3(0.0, 0.0, 0.9);
    int width = 512;
    int height = 512;
    double focal = 500.0;

    static RigSpec from_json(const nlohmann::json& doc);
    nlohmann::json to_json() const;
    CameraRig build(const Vec3& offset = Vec3::Zero()) const;
};

// Seeded perturbation that stands in for an over-smoothed coarse reconstruction.
struct CoarseJitter {
    double color_sigma = 0.2;       // Gaussian noise, colors clamped to [0, 1] afterwards
    double opacity_jitter = 1.0;    // uniform in +-, logit units
    double position_sigma = 0.002;  // metres

    static CoarseJitter from_json(const nlohmann::json& doc);
    nlohmann::json to_json() const;
};

CrowdScene derive_coarse_scene(const CrowdScene& gt, const CoarseJitter& jitter, std::uint64_t seed);

enum class Split { train, test };

std::string_view to_string(Split split);

// Seeded permutation of [0, n); the first round(fraction * n) positions are train.
std::vector<Split> assign_splits(std::size_t n, double train_fraction, std::uint64_t seed);

// ---- make-occlusion-pairs ----

struct OcclusionPairsConfig {
    SceneConfig scene;
    std::vector<double> frontal_azimuths_deg{-90.0};
    RigSpec frontal;      // n unused; width/height also size the masks
    RigSpec clean_orbit;  // n = 24 by default
    OcclusionConfig occlusion;
    double split_fraction = 0.8;
    std::uint64_t seed = 0;

    static OcclusionPairsConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
    nlohmann::json to_json() const;
};

nlohmann::json make_occlusion_pairs(const OcclusionPairsConfig& cfg, const std::filesystem::path& out_dir,
                                    int threads = 1);

// ---- make-refiner-pairs ----

struct ScenePairConfig {
    std::string id;
    SceneConfig gt;
    std::optional<SceneConfig> coarse;  // derived from gt with CoarseJitter when absent
};

struct RefinerPairsConfig {
    std::vector<ScenePairConfig> pairs;
    RigSpec hemisphere;  // n = 126 by default
    SclConfig scl;
    double split_fraction = 0.8;
    CoarseJitter coarse_jitter;
    std::uint64_t seed = 0;

    static RefinerPairsConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
    nlohmann::json to_json() const;
};

nlohmann::json make_refiner_pairs(const RefinerPairsConfig& cfg, const std::filesystem::path& out_dir,
                                  int threads = 1);

// ---- refine ----

struct RefineConfig {
    std::filesystem::path scene;                  // scene manifest
    nlohmann::json refiner = {{"type", "identity"}};
    ClusterConfig cluster;
    OptimConfig optim;
    RigSpec rig;
    // When set, targets are renders of this scene instead of refiner outputs.
    std::optional<std::filesystem::path> targets_scene;
    int refresh_every = 0;   // regenerate refined targets every N iterations (0 = once)
    int held_out_every = 0;  // every k-th rig view is evaluated but not optimized (0 = none)

    static RefineConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
    nlohmann::json to_json() const;
};

// Returns the report; cluster failures are recorded in it (status "error").
nlohmann::json refine_command(const RefineConfig& cfg, const std::filesystem::path& out_dir, int threads = 1);

// ---- eval ----

struct EvalRow {
    std::string name;
    double psnr = 0.0;
    double ssim = 0.0;
    double feature_distance = 0.0;
};

struct EvalResult {
    std::vector<EvalRow> rows;
    EvalRow mean;
    nlohmann::json to_json(std::uint64_t seed) const;
    std::string to_text() const;
};

EvalResult eval_command(const std::filesystem::path& dir_a, const std::filesystem::path& dir_b,
                        std::uint64_t extractor_seed);

// JSON has no infinity; the PSNR sentinel is written as the string "inf".
nlohmann::json json_number(double v);

}  // namespace crowdsplat
