#include "crowdsplat/renderer.hpp"

#include "crowdsplat/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace crowdsplat {

SceneGradients SceneGradients::zeros_like(const CrowdScene& scene) {
    SceneGradients g;
    for (const auto& p : scene.persons) g.persons.emplace_back(p.gaussians.size());
    return g;
}

void SceneGradients::add(const SceneGradients& other) {
    if (other.persons.size() != persons.size()) throw ValidationError("SceneGradients::add: person count mismatch");
    for (std::size_t p = 0; p < persons.size(); ++p) {
        if (other.persons[p].size() != persons[p].size()) throw ValidationError("SceneGradients::add: Gaussian count mismatch");
        for (std::size_t i = 0; i < persons[p].size(); ++i) {
            auto& a = persons[p][i];
            const auto& b = other.persons[p][i];
            a.position += b.position;
            a.log_scale += b.log_scale;
            a.rotation += b.rotation;
            a.opacity_logit += b.opacity_logit;
            a.color += b.color;
        }
    }
}

bool SceneGradients::all_finite() const {
    for (const auto& person : persons)
        for (const auto& g : person)
            if (!g.position.allFinite() || !g.log_scale.allFinite() || !g.rotation.allFinite()
                || !std::isfinite(g.opacity_logit) || !g.color.allFinite())
                return false;
    return true;
}

namespace {

using Mat23 = Eigen::Matrix<double, 2, 3>;

// Screen-space footprint of one Gaussian.
struct Splat {
    int person = 0;
    int local = 0;
    Vec3 cam = Vec3::Zero();
    Mat3 rot = Mat3::Identity();
    Vec3 scale = Vec3::Ones();
    Mat3 cov3 = Mat3::Zero();
    Mat23 proj_jacobian = Mat23::Zero();  // d(mean2d)/d(cam point)
    Vec2 mean = Vec2::Zero();
    Mat2 cov2 = Mat2::Zero();
    double conic_a = 0, conic_b = 0, conic_c = 0;  // inverse cov2 = [[a, b], [b, c]]
    double opacity = 0;
    double q_max = 0;  // truncation radius in Mahalanobis^2 units
    Vec3 color = Vec3::Zero();
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds
};

struct Prepared {
    std::vector<Splat> splats;  // sorted front to back
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<int>> tile_lists;  // indices into splats, front to back
};

Prepared prepare(const CrowdScene& scene, const Camera& camera, const RenderSettings& settings) {
    camera.validate();
    if (settings.tile_size < 1) throw ValidationError("tile size must be >= 1");
    const auto& k = camera.intrinsics;

    struct Keyed {
        double depth;
        std::size_t order;
        Splat splat;
    };
    std::vector<Keyed> keyed;
    std::size_t order = 0;
    for (std::size_t p = 0; p < scene.persons.size(); ++p) {
        const auto& person = scene.persons[p];
        for (std::size_t i = 0; i < person.gaussians.size(); ++i, ++order) {
            const Gaussian& g = person.gaussians[i];
            g.validate("person '" + person.person_id + "' Gaussian " + std::to_string(i));
            if (!person.root_translation.allFinite())
                throw ValidationError("person '" + person.person_id + "' has a non-finite root translation");

            Splat s;
            s.person = static_cast<int>(p);
            s.local = static_cast<int>(i);
            s.cam = camera.to_camera(g.position + person.root_translation);
            const double z = s.cam.z();
            if (!(z > settings.near_plane)) continue;
            s.opacity = g.opacity();
            if (!(s.opacity > settings.alpha_cutoff)) continue;

            s.rot = g.rotation_matrix();
            s.scale = g.log_scale.array().exp();
            const Mat3 b = s.rot * s.scale.asDiagonal();
            s.cov3 = b * b.transpose();
            s.proj_jacobian << k.fx / z, 0.0, -k.fx * s.cam.x() / (z * z), 0.0, k.fy / z, -k.fy * s.cam.y() / (z * z);
            const Mat23 m = s.proj_jacobian * camera.rotation;
            s.cov2 = m * s.cov3 * m.transpose();
            s.cov2 = 0.5 * (s.cov2 + s.cov2.transpose()).eval();
            s.cov2(0, 0) += settings.lowpass;
            s.cov2(1, 1) += settings.lowpass;
            const double det = s.cov2(0, 0) * s.cov2(1, 1) - s.cov2(0, 1) * s.cov2(0, 1);
            if (!(det > 0.0)) continue;
            s.conic_a = s.cov2(1, 1) / det;
            s.conic_b = -s.cov2(0, 1) / det;
            s.conic_c = s.cov2(0, 0) / det;
            s.mean = Vec2(k.fx * s.cam.x() / z + k.cx, k.fy * s.cam.y() / z + k.cy);
            s.color = g.color;

            s.q_max = 2.0 * std::log(s.opacity / settings.alpha_cutoff);
            const double ex = std::sqrt(s.q_max * s.cov2(0, 0));
            const double ey = std::sqrt(s.q_max * s.cov2(1, 1));
            s.x0 = std::max(0, static_cast<int>(std::ceil(s.mean.x() - ex)));
            s.x1 = std::min(camera.width - 1, static_cast<int>(std::floor(s.mean.x() + ex)));
            s.y0 = std::max(0, static_cast<int>(std::ceil(s.mean.y() - ey)));
            s.y1 = std::min(camera.height - 1, static_cast<int>(std::floor(s.mean.y() + ey)));
            if (s.x0 > s.x1 || s.y0 > s.y1) continue;
            keyed.push_back({z, order, s});
        }
    }
    std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
        return a.depth != b.depth ? a.depth < b.depth : a.order < b.order;
    });

    Prepared out;
    out.splats.reserve(keyed.size());
    for (auto& kd : keyed) out.splats.push_back(kd.splat);
    const int ts = settings.tile_size;
    out.tiles_x = (camera.width + ts - 1) / ts;
    out.tiles_y = (camera.height + ts - 1) / ts;
    out.tile_lists.resize(static_cast<std::size_t>(out.tiles_x) * out.tiles_y);
    for (int idx = 0; idx < static_cast<int>(out.splats.size()); ++idx) {
        const Splat& s = out.splats[idx];
        for (int ty = s.y0 / ts; ty <= s.y1 / ts; ++ty)
            for (int tx = s.x0 / ts; tx <= s.x1 / ts; ++tx) out.tile_lists[ty * out.tiles_x + tx].push_back(idx);
    }
    return out;
}

// Falloff of splat s at pixel (x, y); false outside the truncated footprint.
struct Sample {
    double gauss;  // exp(-q/2)
    double dx, dy;
};

inline bool sample_splat(const Splat& s, int x, int y, Sample& out) {
    if (x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1) return false;
    const double dx = x - s.mean.x();
    const double dy = y - s.mean.y();
    const double q = s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy;
    if (q > s.q_max) return false;
    out = {std::exp(-0.5 * q), dx, dy};
    return true;
}

// One composited contribution, kept for the backward pass.
struct Contribution {
    int slot;  // position in the tile list
    double alpha;
    double transmittance;  // before this splat
    bool clamped;
    Sample sample;
};

// Front-to-back compositing of one pixel. Returns the final transmittance.
template <typename OnContribution>
double composite_pixel(const Prepared& prep, const std::vector<int>& list, int x, int y, const RenderSettings& settings,
                       Vec3& color, int& count, OnContribution&& on_contribution) {
    double t = 1.0;
    color.setZero();
    count = 0;
    for (int li = 0; li < static_cast<int>(list.size()); ++li) {
        const Splat& s = prep.splats[list[li]];
        Sample smp;
        if (!sample_splat(s, x, y, smp)) continue;
        double alpha = s.opacity * smp.gauss;
        const bool clamped = alpha > settings.alpha_clamp;
        if (clamped) alpha = settings.alpha_clamp;
        on_contribution(Contribution{li, alpha, t, clamped, smp});
        color += s.color * (alpha * t);
        t *= 1.0 - alpha;
        ++count;
        if (t < settings.min_transmittance) break;
    }
    return t;
}

}  // namespace

RenderOutput render(const CrowdScene& scene, const Camera& camera, const RenderSettings& settings) {
    const Prepared prep = prepare(scene, camera, settings);
    RenderOutput out;
    out.rgb = ImageBuffer(camera.width, camera.height, 3, ImageRole::rgb);
    out.alpha = ImageBuffer(camera.width, camera.height, 1, ImageRole::alpha);
    out.contributing_count.assign(static_cast<std::size_t>(camera.width) * camera.height, 0);
    const int ts = settings.tile_size;
    const Vec3& bg = scene.background_color;

    parallel_for(prep.tile_lists.size(), settings.threads, [&](std::size_t tile) {
        const int tx = static_cast<int>(tile) % prep.tiles_x;
        const int ty = static_cast<int>(tile) / prep.tiles_x;
        const auto& list = prep.tile_lists[tile];
        for (int y = ty * ts; y < std::min(camera.height, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(camera.width, (tx + 1) * ts); ++x) {
                Vec3 c;
                int count = 0;
                const double t = composite_pixel(prep, list, x, y, settings, c, count, [](const Contribution&) {});
                for (int ch = 0; ch < 3; ++ch) out.rgb.at(x, y, ch) = c[ch] + t * bg[ch];
                out.alpha.at(x, y) = 1.0 - t;
                out.contributing_count[static_cast<std::size_t>(y) * camera.width + x] = count;
            }
        }
    });
    return out;
}

namespace {

// Gradient with respect to screen-space quantities of one splat.
struct SplatGrad {
    Vec2 mean = Vec2::Zero();
    double conic_a = 0, conic_b = 0, conic_c = 0;
    double opacity = 0;
    Vec3 color = Vec3::Zero();

    void add(const SplatGrad& o) {
        mean += o.mean;
        conic_a += o.conic_a;
        conic_b += o.conic_b;
        conic_c += o.conic_c;
        opacity += o.opacity;
        color += o.color;
    }
};

// Chain rule from screen-space gradients back to the Gaussian parameters.
GaussianGradient backprop_splat(const Splat& s, const SplatGrad& sg, const Gaussian& g, const Camera& camera) {
    const auto& k = camera.intrinsics;
    GaussianGradient out;
    out.color = sg.color;
    out.opacity_logit = sg.opacity * s.opacity * (1.0 - s.opacity);

    // conic = cov2^-1: dL/dcov2 = -A G_A A with G_A the full-matrix gradient.
    Mat2 conic;
    conic << s.conic_a, s.conic_b, s.conic_b, s.conic_c;
    Mat2 g_conic;
    g_conic << sg.conic_a, 0.5 * sg.conic_b, 0.5 * sg.conic_b, sg.conic_c;
    const Mat2 g_cov2 = -conic * g_conic * conic;

    // cov2 = M cov3 M^T with M = J W.
    const Mat23 m = s.proj_jacobian * camera.rotation;
    const Mat3 g_cov3 = m.transpose() * g_cov2 * m;
    const Mat23 g_m = 2.0 * g_cov2 * m * s.cov3;
    const Mat23 g_j = g_m * camera.rotation.transpose();

    // cov3 = B B^T with B = R S.
    const Mat3 b = s.rot * s.scale.asDiagonal();
    const Mat3 g_b = 2.0 * g_cov3 * b;
    const Mat3 g_r = g_b * s.scale.asDiagonal();
    const Mat3 rt_gb = s.rot.transpose() * g_b;
    for (int a = 0; a < 3; ++a) out.log_scale[a] = rt_gb(a, a) * s.scale[a];

    const double qn = g.rotation.norm();
    const Vec4 q = g.rotation / qn;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    const Mat3& G = g_r;
    Vec4 g_qhat;
    g_qhat[0] = 2.0 * (-z * G(0, 1) + y * G(0, 2) + z * G(1, 0) - x * G(1, 2) - y * G(2, 0) + x * G(2, 1));
    g_qhat[1] = 2.0 * (y * G(0, 1) + z * G(0, 2) + y * G(1, 0) - 2 * x * G(1, 1) - w * G(1, 2) + z * G(2, 0)
                       + w * G(2, 1) - 2 * x * G(2, 2));
    g_qhat[2] = 2.0 * (-2 * y * G(0, 0) + x * G(0, 1) + w * G(0, 2) + x * G(1, 0) + z * G(1, 2) - w * G(2, 0)
                       + z * G(2, 1) - 2 * y * G(2, 2));
    g_qhat[3] = 2.0 * (-2 * z * G(0, 0) - w * G(0, 1) + x * G(0, 2) + w * G(1, 0) - 2 * z * G(1, 1) + y * G(1, 2)
                       + x * G(2, 0) + y * G(2, 1));
    out.rotation = (g_qhat - q * q.dot(g_qhat)) / qn;

    // Camera-space point: through the mean and the projection Jacobian.
    const double cz = s.cam.z(), cx = s.cam.x(), cy = s.cam.y();
    const double z2 = cz * cz, z3 = z2 * cz;
    Vec3 g_cam;
    g_cam.x() = k.fx / cz * sg.mean.x() - k.fx / z2 * g_j(0, 2);
    g_cam.y() = k.fy / cz * sg.mean.y() - k.fy / z2 * g_j(1, 2);
    g_cam.z() = -k.fx * cx / z2 * sg.mean.x() - k.fy * cy / z2 * sg.mean.y() - k.fx / z2 * g_j(0, 0)
                + 2.0 * k.fx * cx / z3 * g_j(0, 2) - k.fy / z2 * g_j(1, 1) + 2.0 * k.fy * cy / z3 * g_j(1, 2);
    out.position = camera.rotation.transpose() * g_cam;
    return out;
}

}  // namespace

SceneGradients render_backward(const CrowdScene& scene, const Camera& camera, const ImageBuffer& loss_grad,
                               const RenderSettings& settings) {
    if (loss_grad.width() != camera.width || loss_grad.height() != camera.height || loss_grad.channels() != 3)
        throw ValidationError("render_backward: loss gradient must be " + std::to_string(camera.width) + "x"
                              + std::to_string(camera.height) + "x3");
    const Prepared prep = prepare(scene, camera, settings);
    const int ts = settings.tile_size;
    const Vec3& bg = scene.background_color;

    // Per-tile partials, aligned with the tile's splat list.
    std::vector<std::vector<SplatGrad>> tile_grads(prep.tile_lists.size());
    parallel_for(prep.tile_lists.size(), settings.threads, [&](std::size_t tile) {
        const auto& list = prep.tile_lists[tile];
        if (list.empty()) return;
        auto& grads = tile_grads[tile];
        grads.assign(list.size(), SplatGrad{});
        const int tx = static_cast<int>(tile) % prep.tiles_x;
        const int ty = static_cast<int>(tile) / prep.tiles_x;
        std::vector<Contribution> contribs;
        for (int y = ty * ts; y < std::min(camera.height, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(camera.width, (tx + 1) * ts); ++x) {
                const Vec3 g(loss_grad.at(x, y, 0), loss_grad.at(x, y, 1), loss_grad.at(x, y, 2));
                if (g.isZero(0.0)) continue;
                contribs.clear();
                Vec3 c;
                int count = 0;
                const double t_end = composite_pixel(prep, list, x, y, settings, c, count,
                                                     [&](const Contribution& cb) { contribs.push_back(cb); });

                // Walk back to front; acc = g . (sum of everything behind + background term).
                double acc = t_end * g.dot(bg);
                for (int ci = static_cast<int>(contribs.size()) - 1; ci >= 0; --ci) {
                    const Contribution& cb = contribs[ci];
                    const Splat& s = prep.splats[list[cb.slot]];
                    SplatGrad& sg = grads[cb.slot];
                    const double weight = cb.alpha * cb.transmittance;
                    sg.color += weight * g;
                    const double g_dot_c = g.dot(s.color);
                    const double d_alpha = cb.transmittance * g_dot_c - acc / (1.0 - cb.alpha);
                    acc += weight * g_dot_c;
                    if (cb.clamped) continue;
                    sg.opacity += d_alpha * cb.sample.gauss;
                    const double d_gauss = d_alpha * s.opacity;
                    const double d_q = -0.5 * cb.sample.gauss * d_gauss;
                    const double dx = cb.sample.dx, dy = cb.sample.dy;
                    sg.conic_a += d_q * dx * dx;
                    sg.conic_b += d_q * 2.0 * dx * dy;
                    sg.conic_c += d_q * dy * dy;
                    // q depends on the mean through d = p - mean.
                    sg.mean.x() += -d_q * 2.0 * (s.conic_a * dx + s.conic_b * dy);
                    sg.mean.y() += -d_q * 2.0 * (s.conic_b * dx + s.conic_c * dy);
                }
            }
        }
    });

    // Reduce in tile order for reproducibility.
    std::vector<SplatGrad> splat_grads(prep.splats.size());
    for (std::size_t tile = 0; tile < prep.tile_lists.size(); ++tile) {
        const auto& list = prep.tile_lists[tile];
        for (std::size_t li = 0; li < tile_grads[tile].size(); ++li) splat_grads[list[li]].add(tile_grads[tile][li]);
    }

    SceneGradients out = SceneGradients::zeros_like(scene);
    for (std::size_t i = 0; i < prep.splats.size(); ++i) {
        const Splat& s = prep.splats[i];
        const Gaussian& g = scene.persons[s.person].gaussians[s.local];
        out.persons[s.person][s.local] = backprop_splat(s, splat_grads[i], g, camera);
    }
    return out;
}

ImageBuffer render_normal_map(const Mesh& mesh, const Camera& camera) {
    camera.validate();
    ImageBuffer out(camera.width, camera.height, 3, ImageRole::normal, 0.5);
    if (mesh.faces.empty()) return out;
    if (mesh.vertex_normals.size() != mesh.vertices.size())
        throw ValidationError("render_normal_map: mesh has no vertex normals");

    constexpr double near = 0.01;
    std::vector<Vec3> cam(mesh.vertices.size());
    std::vector<Vec3> normals(mesh.vertices.size());
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
        cam[v] = camera.to_camera(mesh.vertices[v]);
        const Vec3 n = camera.rotation * mesh.vertex_normals[v];
        normals[v] = Vec3(n.x(), -n.y(), -n.z());  // to x right, y up, z towards viewer
    }
    std::vector<double> depth(static_cast<std::size_t>(camera.width) * camera.height,
                              std::numeric_limits<double>::infinity());
    const auto& k = camera.intrinsics;

    for (const auto& f : mesh.faces) {
        const Vec3& a = cam[f[0]];
        const Vec3& b = cam[f[1]];
        const Vec3& c = cam[f[2]];
        if (a.z() <= near || b.z() <= near || c.z() <= near) continue;
        const Vec2 pa(k.fx * a.x() / a.z() + k.cx, k.fy * a.y() / a.z() + k.cy);
        const Vec2 pb(k.fx * b.x() / b.z() + k.cx, k.fy * b.y() / b.z() + k.cy);
        const Vec2 pc(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy);
        const double area = (pb - pa).x() * (pc - pa).y() - (pb - pa).y() * (pc - pa).x();
        if (std::abs(area) < 1e-12) continue;

        const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({pa.x(), pb.x(), pc.x()}))));
        const int x1 = std::min(camera.width - 1, static_cast<int>(std::floor(std::max({pa.x(), pb.x(), pc.x()}))));
        const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({pa.y(), pb.y(), pc.y()}))));
        const int y1 = std::min(camera.height - 1, static_cast<int>(std::floor(std::max({pa.y(), pb.y(), pc.y()}))));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const Vec2 p(x, y);
                auto edge = [](const Vec2& u, const Vec2& v, const Vec2& q) {
                    return (v - u).x() * (q - u).y() - (v - u).y() * (q - u).x();
                };
                const double w0 = edge(pb, pc, p) / area;
                const double w1 = edge(pc, pa, p) / area;
                const double w2 = edge(pa, pb, p) / area;
                if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
                // Perspective-correct weights.
                const double i0 = w0 / a.z(), i1 = w1 / b.z(), i2 = w2 / c.z();
                const double inv_z = i0 + i1 + i2;
                const double z = 1.0 / inv_z;
                const std::size_t pix = static_cast<std::size_t>(y) * camera.width + x;
                if (!(z < depth[pix])) continue;
                Vec3 n = (i0 * normals[f[0]] + i1 * normals[f[1]] + i2 * normals[f[2]]) * z;
                const double len = n.norm();
                if (len < 1e-12) continue;
                n /= len;
                depth[pix] = z;
                for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = 0.5 * (n[ch] + 1.0);
            }
        }
    }
    return out;
}

}  // namespace crowdsplat
