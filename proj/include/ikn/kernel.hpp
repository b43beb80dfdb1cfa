#pragma once

#include "core.hpp"

#include <array>
#include <numbers>

namespace ikn {

/// Rectilinear node grid over an axis-aligned box. Nodes sit at
/// lower + dx (i, j, k); the kernel support of every deposited point must stay
/// inside the box.
struct GridSpec {
    Vec3 lower = Vec3::Constant(-3.0);
    Vec3 upper = Vec3::Constant(3.0);
    double dx = 0.2;
    double h = 0.6;

    void validate() const
    {
        if (!(dx > 0.0)) throw ConfigError("grid.dx: must be > 0");
        if (!(h >= 2.0 * dx)) throw ConfigError("grid.h: must be >= 2 dx");
        for (int a = 0; a < 3; ++a)
            if (!(upper(a) - lower(a) > 2.0 * h)) throw ConfigError("grid.upper: box must exceed 2 h along every axis");
    }

    std::array<int, 3> shape() const
    {
        std::array<int, 3> n{};
        for (int a = 0; a < 3; ++a) n[a] = static_cast<int>(std::floor((upper(a) - lower(a)) / dx + 1e-9)) + 1;
        return n;
    }

    std::size_t node_count() const
    {
        const auto n = shape();
        return static_cast<std::size_t>(n[0]) * n[1] * n[2];
    }

    std::size_t index(int i, int j, int k) const
    {
        const auto n = shape();
        return static_cast<std::size_t>(i) + static_cast<std::size_t>(n[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(n[1]) * k);
    }

    std::array<int, 3> coords(std::size_t idx) const
    {
        const auto n = shape();
        const int i = static_cast<int>(idx % n[0]);
        const int j = static_cast<int>((idx / n[0]) % n[1]);
        const int k = static_cast<int>(idx / (static_cast<std::size_t>(n[0]) * n[1]));
        return {i, j, k};
    }

    Vec3 node(std::size_t idx) const
    {
        const auto c = coords(idx);
        return lower + dx * Vec3(c[0], c[1], c[2]);
    }

    double cell_volume() const { return dx * dx * dx; }

    double box_volume() const
    {
        const auto n = shape();
        return (n[0] - 1) * dx * (n[1] - 1) * dx * (n[2] - 1) * dx;
    }

    /// True when the full kernel support around x lies inside the node box.
    bool inside_padded(const Vec3& x) const
    {
        const auto n = shape();
        for (int a = 0; a < 3; ++a)
            if (!(x(a) >= lower(a) + h && x(a) <= lower(a) + (n[a] - 1) * dx - h)) return false;
        return true;
    }
};

/// Lucy kernel w(d) = 105/(16 pi h^3) (1 + 3d/h)(1 - d/h)^3 on d < h.
struct LucyKernel {
    double h = 1.0;

    double operator()(double d) const
    {
        if (d >= h) return 0.0;
        const double q = d / h;
        const double c = 105.0 / (16.0 * std::numbers::pi * h * h * h);
        const double u = 1.0 - q;
        return c * (1.0 + 3.0 * q) * u * u * u;
    }
};

struct NodeWeight {
    std::size_t node;
    double w;
};

/// Kernel weights of a point on the grid, rescaled so that
/// dx^3 sum_nodes w = 1 holds exactly. The plain lattice sum of a C2 kernel
/// at h = 3 dx misses unity by about 2e-3; the rescaling is a smooth,
/// dx-periodic function of the point position.
inline void deposit(const GridSpec& grid, const Vec3& x, std::vector<NodeWeight>& out)
{
    out.clear();
    const LucyKernel w{grid.h};
    const auto n = grid.shape();
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
        const double c = (x(a) - grid.lower(a)) / grid.dx;
        const double r = grid.h / grid.dx;
        lo[a] = std::max(0, static_cast<int>(std::ceil(c - r)));
        hi[a] = std::min(n[a] - 1, static_cast<int>(std::floor(c + r)));
    }
    double total = 0.0;
    for (int k = lo[2]; k <= hi[2]; ++k)
        for (int j = lo[1]; j <= hi[1]; ++j)
            for (int i = lo[0]; i <= hi[0]; ++i) {
                const Vec3 node = grid.lower + grid.dx * Vec3(i, j, k);
                const double v = w((node - x).norm());
                if (v > 0.0) {
                    out.push_back({grid.index(i, j, k), v});
                    total += v;
                }
            }
    if (out.empty()) return;
    const double scale = 1.0 / (total * grid.cell_volume());
    for (auto& nw : out) nw.w *= scale;
}

/// 8-point Gauss-Legendre rule on [0, 1]; exact for degree <= 15.
struct BondQuadrature {
    static constexpr int size = 8;
    std::array<double, 8> alpha{};
    std::array<double, 8> weight{};

    BondQuadrature()
    {
        constexpr double x[4] = {0.18343464249564980494, 0.52553240991632898582, 0.79666647741362673959, 0.96028985649753623168};
        constexpr double wt[4] = {0.36268378337836198297, 0.31370664587788728734, 0.22238103445337447054, 0.10122853629037625915};
        for (int i = 0; i < 4; ++i) {
            alpha[2 * i] = 0.5 * (1.0 - x[i]);
            alpha[2 * i + 1] = 0.5 * (1.0 + x[i]);
            weight[2 * i] = weight[2 * i + 1] = 0.5 * wt[i];
        }
    }
};

} // namespace ikn
