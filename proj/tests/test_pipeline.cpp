#include "crowdsplat/fs_util.hpp"
#include "crowdsplat/pipeline.hpp"
#include "support/test_support.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

using namespace crowdsplat;
using nlohmann::json;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Relative path -> file bytes, for whole-tree comparisons.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
    return out;
}

json two_person_config() {
    return {{"persons",
             {{{"id", "ann"}, {"translation", {-0.4, 0.0, 0.0}}, {"color", {{"type", "flat"}, {"value", {0.8, 0.2, 0.1}}}}},
              {{"id", "ben"}, {"translation", {1.6, 0.0, 0.0}}, {"shape", {0.5}}, {"pose", {{0.0, 0.0, 0.3}}},
               {"color", {{"type", "checker"}, {"cell", 0.2}}}}}}};
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CROWDSPLAT_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("scene config problems are reported together") {
    const json doc = {{"persons",
                       {{{"id", "a"}},
                        {{"id", "a"}},
                        {{"id", "bad/id"}},
                        {{"id", "c"}, {"translation", {1, 2}}}}},
                      {"body_model", "no_such_model.json"},
                      {"per_vertex_scale", -1.0}};
    try {
        SceneConfig::from_json(doc);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("duplicate person id 'a'") != std::string::npos);
        CHECK(msg.find("bad/id") != std::string::npos);
        CHECK(msg.find("persons[3].translation") != std::string::npos);
        CHECK(msg.find("no_such_model.json") != std::string::npos);
        CHECK(msg.find("per_vertex_scale") != std::string::npos);
    }
    CHECK_THROWS_AS(SceneConfig::from_json({{"persons", json::array()}}), ValidationError);
    CHECK_THROWS_AS(SceneConfig::from_json({{"persons", {{{"id", "x"}, {"color", {{"type", "plaid"}}}}}}}),
                    ValidationError);

    SceneConfig too_many = SceneConfig::from_json({{"persons", {{{"id", "x"}, {"shape", std::vector<double>(40, 0.1)}}}}});
    CHECK_THROWS_WITH_AS(build_scene(too_many), doctest::Contains("shape coefficients"), ValidationError);
}

TEST_CASE("build_scene: flat color, translations, manifest") {
    const SceneConfig one = SceneConfig::from_json({{"persons", {{{"id", "solo"}, {"color", {{"value", {0.1, 0.5, 0.9}}}}}}}});
    const BuiltScene s = build_scene(one);
    REQUIRE(s.scene.persons.size() == 1);
    CHECK(s.scene.persons[0].gaussians.size() == s.meshes[0].vertices.size());
    for (const auto& g : s.scene.persons[0].gaussians) CHECK(g.color == Vec3(0.1, 0.5, 0.9));

    const SceneConfig two = SceneConfig::from_json(two_person_config());
    const BuiltScene b = build_scene(two);
    CHECK(b.scene.person("ben").root_translation - b.scene.person("ann").root_translation == Vec3(2.0, 0.0, 0.0));

    TempDir dir;
    write_built_scene(dir.path, b, two.to_json());
    const json manifest = read_json(dir.path / "scene.json");
    CHECK(manifest["version"] == 1);
    const auto t0 = manifest["persons"][0]["root_translation"].get<std::vector<double>>();
    const auto t1 = manifest["persons"][1]["root_translation"].get<std::vector<double>>();
    CHECK(t1[0] - t0[0] == 2.0);
    CHECK(manifest["config"]["persons"].size() == 2);
    const SceneFiles back = read_scene(dir.path / "scene.json");
    CHECK(back.scene.persons.size() == 2);
    CHECK(back.meshes.size() == 2);

    // Config echo re-parses to the same scene.
    const BuiltScene again = build_scene(SceneConfig::from_json(manifest["config"]));
    CHECK(again.scene.person("ben").gaussians[3].position == b.scene.person("ben").gaussians[3].position);
}

TEST_CASE("coarse surrogate and splits") {
    const BuiltScene b = build_scene(SceneConfig::from_json(two_person_config()));
    const CrowdScene c1 = derive_coarse_scene(b.scene, CoarseJitter{}, 3);
    const CrowdScene c2 = derive_coarse_scene(b.scene, CoarseJitter{}, 3);
    for (std::size_t i = 0; i < c1.persons[0].gaussians.size(); ++i) {
        const auto& g = c1.persons[0].gaussians[i];
        CHECK(g.color == c2.persons[0].gaussians[i].color);
        CHECK(g.color.minCoeff() >= 0.0);
        CHECK(g.color.maxCoeff() <= 1.0);
        CHECK(std::abs(g.opacity_logit - b.scene.persons[0].gaussians[i].opacity_logit) <= 1.0);
    }
    const CrowdScene none = derive_coarse_scene(b.scene, CoarseJitter{0.0, 0.0, 0.0}, 3);
    CHECK(none.persons[1].gaussians[5].position == b.scene.persons[1].gaussians[5].position);

    const auto s = assign_splits(114, 0.8, 99);
    CHECK(std::count(s.begin(), s.end(), Split::train) == 91);
    CHECK(std::count(s.begin(), s.end(), Split::test) == 23);
    CHECK(assign_splits(114, 0.8, 99) == s);
    CHECK(assign_splits(114, 0.8, 100) != s);
    CHECK(assign_splits(0, 0.8, 1).empty());
    CHECK_THROWS_AS(assign_splits(10, 1.5, 1), ValidationError);
}

TEST_CASE("occlusion pairs: determinism, all-off masks, clean views") {
    json doc = {{"scene", two_person_config()},
                {"frontal_azimuths_deg", {-90.0, -60.0}},
                {"frontal", {{"width", 48}, {"height", 48}, {"focal", 60.0}}},
                {"clean_orbit", {{"width", 16}, {"height", 16}, {"focal", 20.0}}},
                {"occlusion", {{"axis_range", {4, 12}}, {"thickness_range", {2, 6}}}},
                {"seed", 12}};
    const auto cfg = OcclusionPairsConfig::from_json(doc);
    TempDir a, b;
    const json m = make_occlusion_pairs(cfg, a.path);
    make_occlusion_pairs(cfg, b.path, 3);
    CHECK(tree(a.path) == tree(b.path));

    REQUIRE(m["entries"].size() == 4);
    for (const auto& e : m["entries"]) {
        CHECK(e["clean"].size() == 24);
        for (const auto& key : {"full", "occluded", "mask", "spec"}) CHECK(fs::exists(a.path / e[key].get<std::string>()));
        // Spec replays to the stored mask.
        const MaskSpec spec = mask_spec_from_json(read_json(a.path / e["spec"].get<std::string>()));
        const ImageBuffer stored = read_png(a.path / e["mask"].get<std::string>(), ImageRole::mask);
        CHECK(mask_from_spec(spec, cfg.occlusion) == stored);
        CHECK(mask_fraction(stored) == doctest::Approx(e["mask_fraction"].get<double>()));
    }
    CHECK(m["config"]["occlusion"]["width"] == 48);

    doc["occlusion"] = {{"k_max", 0}, {"n_b_range", {0, 0}}, {"line_prob", 0.0}};
    TempDir off;
    const json mo = make_occlusion_pairs(OcclusionPairsConfig::from_json(doc), off.path);
    for (const auto& e : mo["entries"]) {
        CHECK(slurp(off.path / e["full"].get<std::string>()) == slurp(off.path / e["occluded"].get<std::string>()));
        CHECK(e["mask_fraction"] == 0.0);
    }
}

TEST_CASE("refiner pairs: 126 views, rho extremes, byte-identical reruns") {
    json doc = {{"pairs", {{{"id", "s0"}, {"gt", two_person_config()}}}},
                {"hemisphere", {{"width", 12}, {"height", 12}, {"focal", 14.0}, {"radius", 6.0}}},
                {"seed", 4}};
    const auto cfg = RefinerPairsConfig::from_json(doc);
    CHECK(cfg.hemisphere.n == 126);
    TempDir a, b;
    const json m = make_refiner_pairs(cfg, a.path);
    make_refiner_pairs(cfg, b.path, 2);
    CHECK(tree(a.path) == tree(b.path));

    REQUIRE(m["entries"].size() == 126);
    int identity = 0;
    for (const auto& e : m["entries"]) {
        for (const auto& key : {"gt", "coarse", "normal"}) CHECK(fs::exists(a.path / e[key].get<std::string>()));
        if (e["kind"] == "identity") {
            ++identity;
            CHECK(e["input"] == e["gt"]);
        } else {
            CHECK(e["input"] == e["coarse"]);
        }
        CHECK(e["target"] == e["gt"]);
    }
    CHECK(identity > 0);
    CHECK(identity < 126);

    doc["rho"] = 0.0;
    TempDir z;
    for (const auto& e : make_refiner_pairs(RefinerPairsConfig::from_json(doc), z.path)["entries"])
        CHECK(e["kind"] == "degradation");

    doc["pairs"].push_back({{"id", "s0"}, {"gt", two_person_config()}});
    CHECK_THROWS_WITH_AS(RefinerPairsConfig::from_json(doc), doctest::Contains("duplicate scene id"), ValidationError);
}

TEST_CASE("refine with the identity refiner leaves PLYs byte-equal") {
    TempDir dir;
    const SceneConfig sc = SceneConfig::from_json(two_person_config());
    write_built_scene(dir.path / "in", build_scene(sc), sc.to_json());

    const RefineConfig cfg = RefineConfig::from_json(
        {{"scene", (dir.path / "in" / "scene.json").string()},
         {"optim", {{"iterations", 3}}},
         {"rig", {{"n", 4}, {"width", 24}, {"height", 24}, {"focal", 24.0}}},
         {"held_out_every", 2}});
    const json report = refine_command(cfg, dir.path / "out");
    CHECK(report["status"] == "ok");
    // ann and ben stand 2 m apart, beyond the default eps, so two clusters.
    CHECK(report["clusters"].size() == 2);
    for (const auto& c : report["clusters"]) {
        CHECK(c["psnr_delta"] == 0.0);
        CHECK(c["train_psnr_after"] == "inf");
        CHECK(c["held_out_psnr_after"] == "inf");
        CHECK(c["views"].size() == 4);
    }
    for (const auto* id : {"ann", "ben"}) {
        const std::string ply = std::string("persons/") + id + ".ply";
        CHECK(slurp(dir.path / "in" / ply) == slurp(dir.path / "out" / ply));
    }
    CHECK(fs::exists(dir.path / "out" / "report.json"));
    CHECK(fs::exists(dir.path / "out" / "grids" / "cluster_0_view_000.png"));

    // An empty manifest fails before any output is written.
    write_json(dir.path / "empty" / "scene.json", {{"version", 1}, {"persons", json::array()}});
    RefineConfig empty = cfg;
    empty.scene = dir.path / "empty" / "scene.json";
    CHECK_THROWS_AS(refine_command(empty, dir.path / "empty_out"), ValidationError);
    CHECK_FALSE(fs::exists(dir.path / "empty_out"));
}

TEST_CASE("refine records a failing cluster and keeps going") {
    TempDir dir;
    const SceneConfig sc = SceneConfig::from_json(two_person_config());
    write_built_scene(dir.path / "in", build_scene(sc), sc.to_json());
    RefineConfig cfg = RefineConfig::from_json(
        {{"scene", (dir.path / "in" / "scene.json").string()},
         {"optim", {{"iterations", 2}}},
         {"rig", {{"n", 2}, {"width", 16}, {"height", 16}, {"focal", 16.0}}}});
    // A targets scene that only knows ann.
    const SceneConfig only_ann = SceneConfig::from_json({{"persons", {two_person_config()["persons"][0]}}});
    write_built_scene(dir.path / "targets", build_scene(only_ann), only_ann.to_json());
    cfg.targets_scene = dir.path / "targets" / "scene.json";
    const json report = refine_command(cfg, dir.path / "out");
    CHECK(report["status"] == "partial");
    int ok = 0, failed = 0;
    for (const auto& c : report["clusters"]) (c["status"] == "ok" ? ok : failed)++;
    CHECK(ok == 1);
    CHECK(failed == 1);
}

TEST_CASE("eval: identical trees, missing files, deterministic output") {
    TempDir dir;
    CounterRng rng(5);
    fs::create_directories(dir.path / "a");
    fs::create_directories(dir.path / "b");
    for (const auto* name : {"x.png", "y.png"}) {
        const ImageBuffer img = testsupport::random_image(rng, 16, 16);
        write_png(dir.path / "a" / name, img);
        write_png(dir.path / "b" / name, img);
    }
    const EvalResult same = eval_command(dir.path / "a", dir.path / "b", 0);
    REQUIRE(same.rows.size() == 2);
    for (const auto& r : same.rows) {
        CHECK(r.psnr == kPsnrInfinity);
        CHECK(r.ssim == 1.0);
        CHECK(r.feature_distance == 0.0);
    }
    CHECK(same.to_json(0)["mean"]["psnr"] == "inf");
    CHECK(same.to_text().find("mean") != std::string::npos);

    write_png(dir.path / "b" / "y.png", testsupport::random_image(rng, 16, 16));
    const EvalResult diff = eval_command(dir.path / "a", dir.path / "b", 7);
    CHECK(diff.rows[1].psnr < 40.0);
    CHECK(diff.to_json(7).dump() == eval_command(dir.path / "a", dir.path / "b", 7).to_json(7).dump());

    fs::remove(dir.path / "b" / "x.png");
    CHECK_THROWS_WITH_AS(eval_command(dir.path / "a", dir.path / "b", 0), doctest::Contains("x.png missing"),
                         ValidationError);
}

TEST_CASE("CLI exit codes and error report") {
    TempDir dir;
    const fs::path good = dir.path / "scene.json";
    write_json(good, two_person_config());
    CHECK(run_cli("build-scene --config " + good.string() + " --out " + (dir.path / "built").string()) == 0);
    CHECK(fs::exists(dir.path / "built" / "persons" / "ann.ply"));

    const fs::path bad = dir.path / "bad.json";
    write_json(bad, {{"persons", {{{"id", "a"}}, {{"id", "a"}}}}});
    CHECK(run_cli("build-scene --config " + bad.string() + " --out " + (dir.path / "bad_out").string()) == 2);
    const json err = read_json(dir.path / "bad_out" / "error.json");
    CHECK(err["kind"] == "validation");
    CHECK(err["message"].get<std::string>().find("duplicate") != std::string::npos);

    // An external refiner that fails is a runtime error.
    const fs::path refine_cfg = dir.path / "refine.json";
    write_json(refine_cfg, {{"scene", (dir.path / "built" / "scene.json").string()},
                            {"refiner", {{"type", "external"}, {"command", "exit 9;"}}},
                            {"optim", {{"iterations", 1}}},
                            {"rig", {{"n", 1}, {"width", 16}, {"height", 16}, {"focal", 16.0}}}});
    CHECK(run_cli("refine --config " + refine_cfg.string() + " --out " + (dir.path / "refined").string()) == 3);
    CHECK(read_json(dir.path / "refined" / "report.json")["status"] == "partial");

    CHECK(run_cli("eval --a " + (dir.path / "nope").string() + " --b " + (dir.path / "nope").string() + " --out "
                  + (dir.path / "ev").string())
          == 2);
    CHECK(run_cli("no-such-command") == 2);
    CHECK(run_cli("build-scene --out " + (dir.path / "x").string()) == 2);
    CHECK(run_cli("--help") == 0);
}
