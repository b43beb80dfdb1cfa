#pragma once

#include "autodiff.hpp"
#include "core.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace ikn {

/// Pair interaction V_jk(r), identical for all pairs.
///
/// Lennard-Jones with a cutoff is shifted in value and slope so that V and V'
/// both vanish at r_c. A harmonic spring with a cutoff is truncated and shifted
/// in value only, which keeps the rest length but leaves V' discontinuous at
/// r_c; such a cutoff is meant to select a bond shell that no pair crosses.
class PairPotential {
public:
    enum class Kind { LennardJones, Harmonic };

    static PairPotential lennard_jones(double epsilon = 1.0, double sigma = 1.0, std::optional<double> cutoff = std::nullopt)
    {
        if (!(epsilon > 0.0)) throw ConfigError("potential.pair.epsilon: must be > 0");
        if (!(sigma > 0.0)) throw ConfigError("potential.pair.sigma: must be > 0");
        PairPotential p(Kind::LennardJones, epsilon, sigma, cutoff);
        if (cutoff) {
            p.shift_value_ = p.raw_energy(*cutoff);
            p.shift_slope_ = p.raw_derivative(*cutoff);
        }
        return p;
    }

    static PairPotential harmonic(double k = 1.0, double r0 = 1.0, std::optional<double> cutoff = std::nullopt)
    {
        if (!(k > 0.0)) throw ConfigError("potential.pair.k: must be > 0");
        if (!(r0 >= 0.0)) throw ConfigError("potential.pair.r0: must be >= 0");
        PairPotential p(Kind::Harmonic, k, r0, cutoff);
        if (cutoff) p.shift_value_ = p.raw_energy(*cutoff);
        return p;
    }

    Kind kind() const { return kind_; }
    std::optional<double> cutoff() const { return cutoff_; }
    double param_a() const { return a_; } ///< epsilon or k
    double param_b() const { return b_; } ///< sigma or r0

    template <class T> T energy(const T& r) const
    {
        if (cutoff_ && value_of(r) >= *cutoff_) return T(0.0);
        T v = raw_energy(r);
        if (cutoff_) {
            v -= shift_value_;
            if (kind_ == Kind::LennardJones) v -= shift_slope_ * (r - *cutoff_);
        }
        return v;
    }

    /// dV/dr.
    template <class T> T derivative(const T& r) const
    {
        if (cutoff_ && value_of(r) >= *cutoff_) return T(0.0);
        T d = raw_derivative(r);
        if (cutoff_ && kind_ == Kind::LennardJones) d -= shift_slope_;
        return d;
    }

private:
    PairPotential(Kind kind, double a, double b, std::optional<double> cutoff) : kind_(kind), a_(a), b_(b), cutoff_(cutoff)
    {
        if (cutoff_ && !(*cutoff_ > 0.0)) throw ConfigError("potential.pair.cutoff: must be > 0");
    }

    template <class T> T raw_energy(const T& r) const
    {
        if (kind_ == Kind::LennardJones) {
            const T sr2 = (b_ * b_) / (r * r);
            const T sr6 = sr2 * sr2 * sr2;
            return 4.0 * a_ * (sr6 * sr6 - sr6);
        }
        const T d = r - b_;
        return 0.5 * a_ * d * d;
    }

    template <class T> T raw_derivative(const T& r) const
    {
        if (kind_ == Kind::LennardJones) {
            const T sr2 = (b_ * b_) / (r * r);
            const T sr6 = sr2 * sr2 * sr2;
            return -24.0 * a_ * (2.0 * sr6 * sr6 - sr6) / r;
        }
        return a_ * (r - b_);
    }

    Kind kind_;
    double a_;
    double b_;
    std::optional<double> cutoff_;
    double shift_value_ = 0.0;
    double shift_slope_ = 0.0;
};

/// Unary potential V^e(r), identical for all particles.
class ExternalPotential {
public:
    enum class Kind { None, HarmonicTrap, UniformField };

    ExternalPotential() = default;

    static ExternalPotential none() { return {}; }

    static ExternalPotential harmonic_trap(double kappa, const Vec3& center)
    {
        if (!(kappa > 0.0)) throw ConfigError("potential.external.kappa: must be > 0");
        ExternalPotential e;
        e.kind_ = Kind::HarmonicTrap;
        e.kappa_ = kappa;
        e.vec_ = center;
        return e;
    }

    /// V^e(r) = g . r, so the force on every particle is -g.
    static ExternalPotential uniform_field(const Vec3& g)
    {
        ExternalPotential e;
        e.kind_ = Kind::UniformField;
        e.vec_ = g;
        return e;
    }

    Kind kind() const { return kind_; }
    bool active() const { return kind_ != Kind::None; }
    double kappa() const { return kappa_; }
    const Vec3& vector() const { return vec_; }

    template <class T> T energy(const Vec3T<T>& r) const
    {
        switch (kind_) {
        case Kind::None: return T(0.0);
        case Kind::HarmonicTrap: {
            const Vec3T<T> d = r - vec_.cast<T>();
            return 0.5 * kappa_ * d.squaredNorm();
        }
        case Kind::UniformField: return vec_.cast<T>().dot(r);
        }
        return T(0.0);
    }

    template <class T> Vec3T<T> gradient(const Vec3T<T>& r) const
    {
        switch (kind_) {
        case Kind::None: return Vec3T<T>::Zero();
        case Kind::HarmonicTrap: return kappa_ * (r - vec_.cast<T>());
        case Kind::UniformField: return vec_.cast<T>();
        }
        return Vec3T<T>::Zero();
    }

private:
    Kind kind_ = Kind::None;
    double kappa_ = 0.0;
    Vec3 vec_ = Vec3::Zero();
};

inline constexpr double coincidence_tolerance = 1e-12;

template <class T> struct PairSum {
    T energy = T(0.0);
    std::vector<Vec3T<T>> grad;   ///< dV^i / dr_k
    Mat3T<T> virial;              ///< sum over interacting pairs of V'(d)/d x (x) x
    std::vector<T> site_energy;   ///< 1/2 sum_j V_jk, filled on request
};

namespace detail {

inline int image_range(const Mat3& cell, double rc)
{
    const Vec3 a = cell.col(0), b = cell.col(1), c = cell.col(2);
    const double vol = std::abs(cell.determinant());
    const double face = std::max({a.cross(b).norm(), b.cross(c).norm(), c.cross(a).norm()});
    const double width = vol / face;
    // wrapped separations have fractional coordinates in [-1/2, 1/2]
    return static_cast<int>(std::floor(rc / width + 0.5));
}

} // namespace detail

/// Internal pair energy 1/2 sum_{j != k} V(|r_j - r_k|) with its gradient.
/// `cell` (columns are lattice vectors) enables periodic images; a cutoff is
/// then mandatory.
template <class T>
PairSum<T> pair_sum(const std::vector<Vec3T<T>>& r, const PairPotential& pot, const Mat3T<T>* cell = nullptr,
                    bool want_sites = false)
{
    const std::size_t n = r.size();
    PairSum<T> out;
    out.grad.assign(n, Vec3T<T>::Zero());
    out.virial.setZero();
    if (want_sites) out.site_energy.assign(n, T(0.0));

    auto accumulate = [&](std::size_t j, std::size_t k, const Vec3T<T>& x, T weight) {
        const T d2 = x.squaredNorm();
        const double d2v = value_of(d2);
        if (pot.cutoff() && d2v >= (*pot.cutoff()) * (*pot.cutoff())) return;
        if (d2v <= coincidence_tolerance * coincidence_tolerance) throw StateError("coincident particles");
        using std::sqrt;
        const T d = sqrt(d2);
        const T V = pot.energy(d);
        const T dV = pot.derivative(d);
        out.energy += weight * V;
        const T c = dV / d;
        out.virial += (weight * c) * (x * x.transpose());
        if (j != k) {
            const Vec3T<T> g = c * x;
            out.grad[j] += g;
            out.grad[k] -= g;
            if (want_sites) {
                out.site_energy[j] += 0.5 * V;
                out.site_energy[k] += 0.5 * V;
            }
        } else if (want_sites) {
            out.site_energy[k] += weight * V;
        }
    };

    if (!cell) {
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = j + 1; k < n; ++k) accumulate(j, k, Vec3T<T>(r[j] - r[k]), T(1.0));
        return out;
    }

    if (!pot.cutoff()) throw ConfigError("periodic interactions require a pair cutoff");
    Mat3 cell_v;
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) cell_v(a, b) = value_of((*cell)(a, b));
    if (!(std::abs(cell_v.determinant()) > singular_det_tolerance)) throw StateError("periodic cell is singular");
    const Mat3 cell_inv = cell_v.inverse();
    const int R = detail::image_range(cell_v, *pot.cutoff());

    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = j; k < n; ++k) {
            Vec3T<T> base = r[j] - r[k];
            Vec3 base_v;
            for (int a = 0; a < 3; ++a) base_v(a) = value_of(base(a));
            const Vec3 frac = cell_inv * base_v;
            const Vec3 shift(std::round(frac(0)), std::round(frac(1)), std::round(frac(2)));
            base -= (*cell) * shift.cast<T>();
            for (int i0 = -R; i0 <= R; ++i0)
                for (int i1 = -R; i1 <= R; ++i1)
                    for (int i2 = -R; i2 <= R; ++i2) {
                        const bool self = (j == k);
                        if (self && i0 == 0 && i1 == 0 && i2 == 0) continue;
                        const Vec3 nvec(i0, i1, i2);
                        const Vec3T<T> x = base + (*cell) * nvec.cast<T>();
                        accumulate(j, k, x, T(self ? 0.5 : 1.0));
                    }
        }
    }
    return out;
}

template <class T> T external_energy(const std::vector<Vec3T<T>>& r, const ExternalPotential& ext)
{
    T e(0.0);
    if (!ext.active()) return e;
    for (const auto& rk : r) e += ext.energy(rk);
    return e;
}

/// V = V^i + V^e.
inline double total_potential(const std::vector<Vec3>& r, const PairPotential& pair, const ExternalPotential& ext,
                              const Mat3* cell = nullptr)
{
    return pair_sum<double>(r, pair, cell).energy + external_energy<double>(r, ext);
}

/// -dV/dr_k for every particle.
inline std::vector<Vec3> forces(const std::vector<Vec3>& r, const PairPotential& pair, const ExternalPotential& ext,
                                const Mat3* cell = nullptr)
{
    auto ps = pair_sum<double>(r, pair, cell);
    std::vector<Vec3> f(r.size());
    for (std::size_t k = 0; k < r.size(); ++k) f[k] = -(ps.grad[k] + ext.gradient<double>(r[k]));
    return f;
}

inline Vec3 force_on_particle(const std::vector<Vec3>& r, const PairPotential& pair, const ExternalPotential& ext,
                              std::size_t k, const Mat3* cell = nullptr)
{
    check_index(k, r.size());
    return forces(r, pair, ext, cell)[k];
}

inline double pair_energy(const PairPotential& pot, double r)
{
    if (!(r > 0.0)) throw ConfigError("pair separation must be > 0");
    return pot.energy(r);
}

/// V'(r); the radial force magnitude is -V'(r).
inline double pair_force_scalar(const PairPotential& pot, double r)
{
    if (!(r > 0.0)) throw ConfigError("pair separation must be > 0");
    return pot.derivative(r);
}

} // namespace ikn
