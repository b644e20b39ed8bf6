#include "crowdsplat/renderer.hpp"
#include "support/gradcheck.hpp"
#include "support/reference_render.hpp"
#include "support/test_support.hpp"

#include <doctest.h>

#include <Eigen/Geometry>

#include <numbers>

using namespace crowdsplat;
using namespace testsupport;

namespace {

CrowdScene single(const Gaussian& g, const Vec3& background, const Vec3& root = Vec3::Zero()) {
    PersonGaussians p;
    p.person_id = "only";
    p.gaussians = {g};
    p.root_translation = root;
    return assemble_scene({p}, background);
}

Gaussian iso(const Vec3& pos, double scale, double logit_v, const Vec3& color) {
    return Gaussian(pos, Vec3::Constant(std::log(scale)), Vec4(1, 0, 0, 0), logit_v, color);
}

Vec4 quat_mul(const Vec4& a, const Vec4& b) {
    const Eigen::Quaterniond qa(a[0], a[1], a[2], a[3]), qb(b[0], b[1], b[2], b[3]);
    const Eigen::Quaterniond r = qa * qb;
    return Vec4(r.w(), r.x(), r.y(), r.z());
}

}  // namespace

TEST_CASE("empty scene renders the background with zero alpha") {
    CrowdScene s;
    s.background_color = Vec3(0.1, 0.6, 0.9);
    const auto out = render(s, axis_camera(20, 10, 30));
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 20; ++x) {
            for (int c = 0; c < 3; ++c) CHECK(out.rgb.at(x, y, c) == s.background_color[c]);
            CHECK(out.alpha.at(x, y) == 0.0);
            CHECK(out.contributing_count[y * 20 + x] == 0);
        }
}

TEST_CASE("single saturated Gaussian: clamp at the peak and Gaussian falloff") {
    const Camera cam = axis_camera(33, 33, 50);  // principal point (16.5, 16.5)
    const double z = 2.0, s = 0.08;
    const Vec3 color(0.9, 0.2, 0.4), bg(0.1, 0.3, 0.5);
    // Put the mean exactly on pixel (16, 16).
    const Vec3 pos(-0.5 * z / 50, -0.5 * z / 50, z);
    const auto out = render(single(iso(pos, s, 40.0, color), bg), cam);
    // Isotropic 3D covariance s^2 I through J = [[f/z, 0, -f x/z^2], [0, f/z, -f y/z^2]].
    const double a = 50 / z, bx = -50 * pos.x() / (z * z), by = -50 * pos.y() / (z * z);
    Mat2 cov;
    cov << s * s * (a * a + bx * bx) + 0.3, s * s * bx * by, s * s * bx * by, s * s * (a * a + by * by) + 0.3;
    const Mat2 conic = cov.inverse();
    for (int c = 0; c < 3; ++c)
        CHECK(out.rgb.at(16, 16, c) == doctest::Approx(0.999 * color[c] + 0.001 * bg[c]).epsilon(1e-12));
    for (int d = 1; d <= 6; ++d) {
        const Vec2 offsets[2] = {Vec2(d, 0), Vec2(0, -d)};
        for (const Vec2& o : offsets) {
            const double alpha = std::min(0.999, sigmoid(40.0) * std::exp(-0.5 * o.dot(conic * o)));
            const int x = 16 + static_cast<int>(o.x()), y = 16 + static_cast<int>(o.y());
            for (int c = 0; c < 3; ++c)
                CHECK(out.rgb.at(x, y, c) == doctest::Approx(alpha * color[c] + (1 - alpha) * bg[c]).epsilon(1e-12));
            CHECK(out.alpha.at(x, y) == doctest::Approx(alpha).epsilon(1e-12));
        }
    }
}

TEST_CASE("a saturated front Gaussian hides the one behind it") {
    const Camera cam = axis_camera(16, 16, 20);
    PersonGaussians p;
    p.person_id = "p";
    p.gaussians = {iso(Vec3(0, 0, 4), 0.6, 30.0, Vec3(1, 0, 0)), iso(Vec3(0, 0, 2), 0.6, 30.0, Vec3(0, 1, 0))};
    const auto out = render(assemble_scene({p}, Vec3::Zero()), cam);
    // Green is in front; the red contribution is at most 0.001 of its color.
    CHECK(out.rgb.at(8, 8, 0) <= 0.001 + 1e-15);
    CHECK(out.rgb.at(8, 8, 1) == doctest::Approx(0.999));
}

TEST_CASE("equal depths composite in scene order") {
    const Camera cam = axis_camera(16, 16, 20);
    auto make = [&](bool swap) {
        PersonGaussians a, b;
        a.person_id = "a";
        b.person_id = "b";
        a.gaussians = {iso(Vec3(0, 0, 3), 0.3, 1.0, Vec3(1, 0, 0))};
        b.gaussians = {iso(Vec3(0, 0, 3), 0.3, 1.0, Vec3(0, 0, 1))};
        return swap ? assemble_scene({b, a}, Vec3::Ones()) : assemble_scene({a, b}, Vec3::Ones());
    };
    const auto ab = render(make(false), cam);
    const auto ba = render(make(true), cam);
    CHECK(ab.rgb.at(8, 8, 0) > ab.rgb.at(8, 8, 2));
    CHECK(ba.rgb.at(8, 8, 2) > ba.rgb.at(8, 8, 0));
    CHECK(max_abs_diff(ab.rgb, reference_render(make(false), cam)) < 1e-12);
    CHECK(max_abs_diff(ba.rgb, reference_render(make(true), cam)) < 1e-12);
}

TEST_CASE("Gaussians at or behind the near plane are culled") {
    const Camera cam = axis_camera(16, 16, 20);
    const auto out = render(single(iso(Vec3(0, 0, 0.01), 0.1, 5.0, Vec3::Zero()), Vec3::Ones()), cam);
    CHECK(out.rgb == ImageBuffer(16, 16, 3, ImageRole::rgb, 1.0));
    const auto behind = render(single(iso(Vec3(0, 0, -2), 0.1, 5.0, Vec3::Zero()), Vec3::Ones()), cam);
    CHECK(behind.rgb == ImageBuffer(16, 16, 3, ImageRole::rgb, 1.0));
}

TEST_CASE("non-finite parameters raise an error naming the Gaussian") {
    Gaussian g = iso(Vec3(0, 0, 2), 0.1, 0.0, Vec3::Zero());
    g.position.x() = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH_AS(render(single(g, Vec3::Ones()), axis_camera(8, 8, 10)), doctest::Contains("only"),
                         ValidationError);
}

TEST_CASE("tiled renderer matches the brute-force evaluator") {
    CounterRng rng(101);
    for (int trial = 0; trial < 12; ++trial) {
        const Camera cam = axis_camera(64, 64, rng.uniform(40, 90));
        const CrowdScene s = random_scene(rng, rng.uniform_int(1, 200), rng.uniform_int(1, 4), cam);
        const auto out = render(s, cam);
        CHECK(max_abs_diff(out.rgb, reference_render(s, cam)) <= 1e-5);

        RenderSettings no_stop;
        no_stop.min_transmittance = 0.0;
        ReferenceOptions ref_no_stop;
        ref_no_stop.min_transmittance = 0.0;
        CHECK(max_abs_diff(render(s, cam, no_stop).rgb, reference_render(s, cam, ref_no_stop)) <= 1e-5);

        for (std::size_t i = 0; i < out.alpha.size(); ++i) {
            CHECK(out.alpha.data()[i] >= 0.0);
            CHECK(out.alpha.data()[i] <= 1.0);
        }
        for (double v : out.rgb.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("tile size and thread count do not change the image") {
    CounterRng rng(55);
    const Camera cam = axis_camera(50, 37, 45);
    const CrowdScene s = random_scene(rng, 120, 3, cam);
    const auto base = render(s, cam);
    CHECK(render(s, cam).rgb == base.rgb);
    for (int tile : {1, 5, 16, 64}) {
        for (int threads : {1, 3}) {
            RenderSettings rs;
            rs.tile_size = tile;
            rs.threads = threads;
            CHECK(max_abs_diff(render(s, cam, rs).rgb, base.rgb) <= 1e-12);
        }
    }
    const ImageBuffer w = random_image(rng, 50, 37, 3, -1, 1);
    RenderSettings three;
    three.threads = 3;
    const auto g1 = render_backward(s, cam, w);
    const auto g3 = render_backward(s, cam, w, three);
    const auto g3b = render_backward(s, cam, w, three);
    for (std::size_t p = 0; p < s.persons.size(); ++p)
        for (std::size_t i = 0; i < s.persons[p].gaussians.size(); ++i) {
            CHECK((g1.persons[p][i].position - g3.persons[p][i].position).norm() <= 1e-9);
            CHECK((g1.persons[p][i].color - g3.persons[p][i].color).norm() <= 1e-9);
            CHECK(g3.persons[p][i].position == g3b.persons[p][i].position);
            CHECK(g3.persons[p][i].rotation == g3b.persons[p][i].rotation);
        }
}

TEST_CASE("rendering is equivariant under a rigid transform of scene and camera") {
    CounterRng rng(77);
    for (int trial = 0; trial < 5; ++trial) {
        const Camera cam = axis_camera(40, 40, 50);
        const CrowdScene s = random_scene(rng, 60, 2, cam);
        const Vec4 qg = random_unit_quaternion(rng);
        const Mat3 g = Eigen::Quaterniond(qg[0], qg[1], qg[2], qg[3]).toRotationMatrix();
        const Vec3 shift(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));

        CrowdScene moved = s;
        for (auto& p : moved.persons) {
            p.root_translation = g * p.root_translation + shift;
            for (auto& gs : p.gaussians) {
                gs.position = g * gs.position;
                gs.rotation = quat_mul(qg, gs.rotation);
            }
        }
        Camera cam2 = cam;
        cam2.rotation = cam.rotation * g.transpose();
        cam2.translation = cam.translation - cam2.rotation * shift;
        CHECK(max_abs_diff(render(moved, cam2).rgb, render(s, cam).rgb) <= 1e-5);
    }
}

TEST_CASE("contributing_count counts Gaussians composited at each pixel") {
    const Camera cam = axis_camera(16, 16, 20);
    PersonGaussians p;
    p.person_id = "p";
    p.gaussians = {iso(Vec3(0, 0, 2), 0.5, 0.0, Vec3::Ones()), iso(Vec3(0, 0, 3), 0.5, 0.0, Vec3::Ones())};
    const auto out = render(assemble_scene({p}, Vec3::Zero()), cam);
    CHECK(out.contributing_count[8 * 16 + 8] == 2);
}

TEST_CASE("backward: zero upstream gradient gives exactly zero") {
    CounterRng rng(3);
    const Camera cam = axis_camera(24, 24, 30);
    const CrowdScene s = random_scene(rng, 25, 2, cam);
    const auto g = render_backward(s, cam, ImageBuffer(24, 24, 3, ImageRole::rgb, 0.0));
    for (const auto& person : g.persons)
        for (const auto& gg : person) {
            CHECK(gg.position.isZero(0.0));
            CHECK(gg.log_scale.isZero(0.0));
            CHECK(gg.rotation.isZero(0.0));
            CHECK(gg.opacity_logit == 0.0);
            CHECK(gg.color.isZero(0.0));
        }
    CHECK_THROWS_AS(render_backward(s, cam, ImageBuffer(23, 24, 3, ImageRole::rgb)), ValidationError);
}

TEST_CASE("backward: single Gaussian color gradient of sum(rgb) equals summed alpha times visibility") {
    const Camera cam = axis_camera(20, 20, 40);
    const Gaussian g = iso(Vec3(0.05, -0.02, 2.5), 0.07, 0.8, Vec3(0.3, 0.3, 0.3));
    const CrowdScene s = single(g, Vec3(0.5, 0.5, 0.5));
    const auto out = render(s, cam);
    const auto grads = render_backward(s, cam, ImageBuffer(20, 20, 3, ImageRole::rgb, 1.0));
    double alpha_sum = 0.0;
    for (double a : out.alpha.data()) alpha_sum += a;
    for (int c = 0; c < 3; ++c) CHECK(grads.persons[0][0].color[c] == doctest::Approx(alpha_sum).epsilon(1e-12));
}

TEST_CASE("backward: quaternion gradient is tangent to the unit sphere") {
    CounterRng rng(8);
    const Camera cam = axis_camera(24, 24, 40);
    const CrowdScene s = random_scene(rng, 15, 1, cam);
    const auto g = render_backward(s, cam, random_image(rng, 24, 24, 3, -1, 1));
    for (std::size_t i = 0; i < s.persons[0].gaussians.size(); ++i) {
        const double along = g.persons[0][i].rotation.dot(s.persons[0].gaussians[i].rotation);
        CHECK(std::abs(along) <= 1e-12 * (1.0 + g.persons[0][i].rotation.norm()));
    }
    CHECK(g.all_finite());
}

TEST_CASE("backward matches central finite differences on random scenes") {
    CounterRng rng(4242);
    for (int trial = 0; trial < 6; ++trial) {
        const Camera cam = axis_camera(32, 32, rng.uniform(35, 60));
        const CrowdScene s = random_scene(rng, rng.uniform_int(1, 10), rng.uniform_int(1, 3), cam);
        const auto r = check_render_gradients(s, cam, RenderSettings{}, rng);
        INFO(r.first_failure);
        CHECK(r.failed == 0);
        CHECK(r.checked > 0);
    }
}

TEST_CASE("normal map: facing triangle, empty mesh, z-buffer") {
    const Camera cam = axis_camera(32, 32, 40);
    Mesh near_tri;
    near_tri.vertices = {Vec3(-1, -1, 2), Vec3(-1, 1, 2), Vec3(1, -1, 2)};
    near_tri.faces = {{0, 1, 2}};
    near_tri.vertex_normals = compute_vertex_normals(near_tri.vertices, near_tri.faces);
    REQUIRE((near_tri.vertex_normals[0] - Vec3(0, 0, -1)).norm() < 1e-12);
    const ImageBuffer n = render_normal_map(near_tri, cam);
    CHECK(n.role() == ImageRole::normal);
    CHECK(n.at(10, 10, 0) == doctest::Approx(0.5));
    CHECK(n.at(10, 10, 1) == doctest::Approx(0.5));
    CHECK(n.at(10, 10, 2) == doctest::Approx(1.0));
    CHECK(n.at(30, 30, 2) == 0.5);  // outside the triangle

    CHECK(render_normal_map(Mesh{}, cam) == ImageBuffer(32, 32, 3, ImageRole::normal, 0.5));

    // A farther triangle tilted about y covers the same pixels; the near one wins.
    Mesh far_tri;
    far_tri.vertices = {Vec3(-2, -2, 5), Vec3(-2, 2, 5), Vec3(2, -2, 6)};
    far_tri.faces = {{0, 1, 2}};
    far_tri.vertex_normals = compute_vertex_normals(far_tri.vertices, far_tri.faces);
    const ImageBuffer both = render_normal_map(merge_meshes({far_tri, near_tri}), cam);
    CHECK(both.at(10, 10, 0) == doctest::Approx(0.5));
    CHECK(both.at(10, 10, 2) == doctest::Approx(1.0));
    const ImageBuffer far_only = render_normal_map(far_tri, cam);
    CHECK(far_only.at(10, 10, 0) != doctest::Approx(0.5));
}

TEST_CASE("orbit rig positions and orientation") {
    const auto rig = orbit_rig(4, 2.0, 0.0, Vec3::Zero(), Intrinsics::centered(64, 64, 80), 64, 64);
    REQUIRE(rig.cameras.size() == 4);
    const Vec3 expected[4] = {Vec3(2, 0, 0), Vec3(0, 2, 0), Vec3(-2, 0, 0), Vec3(0, -2, 0)};
    for (int k = 0; k < 4; ++k) {
        const Camera& c = rig.cameras[k];
        CHECK((c.center() - expected[k]).norm() < 1e-12);
        CHECK((c.rotation * c.rotation.transpose() - Mat3::Identity()).norm() < 1e-12);
        // The target projects to the principal point, world up points to -y in the image.
        const Vec3 target = c.to_camera(Vec3::Zero());
        CHECK(target.z() == doctest::Approx(2.0));
        CHECK(std::abs(target.x()) < 1e-12);
        CHECK((c.rotation * Vec3(0, 0, 1)).y() < 0.0);
    }
    CHECK(orbit_rig(1, 3.0, 0.5, Vec3(1, 1, 1), Intrinsics{}, 8, 8).cameras.size() == 1);
    CHECK(orbit_rig(24, 3.0, 0.0, Vec3::Zero(), Intrinsics{}, 8, 8).cameras.size() == 24);
    CHECK_THROWS_AS(Camera::look_at(Vec3(0, 0, 5), Vec3::Zero(), Intrinsics{}, 8, 8), ValidationError);
    CHECK_THROWS_AS(orbit_rig(0, 1.0, 0.0, Vec3::Zero(), Intrinsics{}, 8, 8), ValidationError);
}

TEST_CASE("hemisphere rig stays above the target and is reproducible") {
    const Vec3 target(0.5, -1.0, 0.9);
    const auto rig = hemisphere_rig(126, 4.0, target, Intrinsics{}, 16, 16);
    REQUIRE(rig.cameras.size() == 126);
    for (const auto& c : rig.cameras) {
        CHECK(c.center().z() >= target.z());
        CHECK((c.center() - target).norm() == doctest::Approx(4.0));
        const double elev = std::asin((c.center().z() - target.z()) / 4.0) * 180.0 / std::numbers::pi;
        CHECK(elev <= 85.0 + 1e-9);
    }
    const auto again = hemisphere_rig(126, 4.0, target, Intrinsics{}, 16, 16);
    for (std::size_t k = 0; k < 126; ++k) {
        CHECK(again.cameras[k].rotation == rig.cameras[k].rotation);
        CHECK(again.cameras[k].translation == rig.cameras[k].translation);
    }
    CHECK(hemisphere_rig(1, 2.0, Vec3::Zero(), Intrinsics{}, 8, 8).cameras.size() == 1);
}

TEST_CASE("camera JSON round trip and validation") {
    const auto rig = orbit_rig(3, 2.5, 0.4, Vec3(0, 0, 1), Intrinsics{300, 310, 30, 20}, 60, 40);
    const CameraRig back = rig_from_json(rig_to_json(rig));
    REQUIRE(back.cameras.size() == 3);
    for (int k = 0; k < 3; ++k) {
        CHECK(back.cameras[k].rotation == rig.cameras[k].rotation);
        CHECK(back.cameras[k].translation == rig.cameras[k].translation);
        CHECK(back.cameras[k].intrinsics.fy == 310);
        CHECK(back.cameras[k].height == 40);
    }
    Camera bad = rig.cameras[0];
    bad.rotation(0, 0) += 1e-3;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = rig.cameras[0];
    bad.intrinsics.fx = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}
