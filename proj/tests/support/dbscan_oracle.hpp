#pragma once

// Exhaustive density-connectivity closure. Cores are joined through the
// transitive closure of the "within eps" relation restricted to cores; a
// border point joins the component (among those with a core in reach)
// whose smallest core id sorts first, matching sorted-id discovery order.

#include "crowdsplat/scene.hpp"

#include <algorithm>
#include <map>

namespace testsupport {

inline crowdsplat::ClusterResult dbscan_oracle(const std::vector<std::pair<std::string, crowdsplat::Vec3>>& points,
                                               double eps, int min_pts) {
    auto pts = points;
    std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::size_t n = pts.size();
    std::vector<std::vector<char>> near(n, std::vector<char>(n, 0));
    std::vector<char> core(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int count = 0;
        for (std::size_t j = 0; j < n; ++j) {
            near[i][j] = (pts[i].second - pts[j].second).norm() <= eps;
            count += near[i][j];
        }
        core[i] = count >= min_pts;
    }
    // reach[i][j]: cores i and j are density-connected (Warshall closure).
    std::vector<std::vector<char>> reach(n, std::vector<char>(n, 0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) reach[i][j] = core[i] && core[j] && near[i][j];
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i)
            if (reach[i][k])
                for (std::size_t j = 0; j < n; ++j)
                    if (reach[k][j]) reach[i][j] = 1;

    // Component id = smallest core index in it.
    std::vector<long> comp(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        if (!core[i]) continue;
        for (std::size_t j = 0; j <= i; ++j)
            if (reach[i][j]) {
                comp[i] = static_cast<long>(j);
                break;
            }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (core[i]) continue;
        long best = -1;
        for (std::size_t j = 0; j < n; ++j)
            if (core[j] && near[i][j] && (best < 0 || comp[j] < best)) best = comp[j];
        comp[i] = best;
    }
    std::map<long, std::set<std::string>> groups;
    crowdsplat::ClusterResult out;
    for (std::size_t i = 0; i < n; ++i) {
        if (comp[i] < 0) out.noise.insert(pts[i].first);
        else groups[comp[i]].insert(pts[i].first);
    }
    for (auto& [id, members] : groups) out.clusters.push_back(members);
    std::sort(out.clusters.begin(), out.clusters.end(),
              [](const auto& a, const auto& b) { return *a.begin() < *b.begin(); });
    return out;
}

}  // namespace testsupport
