#pragma once

// Point sets for clustering tests and the persons that carry them.

#include "crowdsplat/rng.hpp"
#include "crowdsplat/scene.hpp"

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

namespace testsupport {

using namespace crowdsplat;

inline PersonGaussians person_at(const std::string& id, const Vec3& t, int count = 1) {
    PersonGaussians p;
    p.person_id = id;
    p.root_translation = t;
    for (int i = 0; i < count; ++i)
        p.gaussians.emplace_back(Vec3(0.1 * i, -0.2 * i, 0.05), Vec3::Constant(-3.0), Vec4(1, 0, 0, 0), 0.5,
                                 Vec3(0.2, 0.4, 0.6));
    return p;
}

inline CrowdScene scene_of(const std::vector<std::pair<std::string, Vec3>>& roots) {
    std::vector<PersonGaussians> persons;
    for (const auto& [id, t] : roots) persons.push_back(person_at(id, t));
    return assemble_scene(std::move(persons), Vec3::Ones());
}

// Random instance: clumps of points so clusters, borders and noise all occur.
inline std::vector<std::pair<std::string, Vec3>> random_points(CounterRng& rng, int n) {
    std::vector<Vec3> centers;
    const int clumps = rng.uniform_int(1, 5);
    for (int c = 0; c < clumps; ++c) centers.emplace_back(rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-1, 1));
    std::vector<std::pair<std::string, Vec3>> pts;
    for (int i = 0; i < n; ++i) {
        Vec3 p;
        if (rng.uniform01() < 0.2) {
            p = Vec3(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-2, 2));
        } else {
            const Vec3& c = centers[rng.uniform_int(0, clumps - 1)];
            p = c + Vec3(rng.normal(), rng.normal(), 0.3 * rng.normal());
        }
        // Snap to a coarse grid now and then so exact-eps distances show up.
        if (rng.uniform01() < 0.3) p = (p * 2.0).array().round() / 2.0;
        // Unpadded numbers, so lexicographic id order differs from numeric order.
        pts.emplace_back("person_" + std::to_string(rng.next_u64() % 100000), p);
    }
    std::sort(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.first < b.first; });
    pts.erase(std::unique(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.first == b.first; }), pts.end());
    return pts;
}

}  // namespace testsupport
