#pragma once

#include "autodiff.hpp"
#include "core.hpp"
#include "potentials.hpp"

#include <functional>
#include <variant>

namespace ikn {

/// Potentials shared by every backend. `box` > 0 makes the NVE and NH
/// systems periodic in a cube of that side; APR uses its own cell.
struct Interactions {
    PairPotential pair = PairPotential::lennard_jones();
    ExternalPotential ext;
    double box = 0.0;
};

/// Physical content of one phase point, as consumed by the field extractor.
struct Snapshot {
    std::vector<Vec3> r;
    std::vector<Vec3> v;
    double s = 1.0;
    double ps = 0.0;
    Mat3 F = Mat3::Identity();
};

namespace detail {

template <class T> Vec3T<T> vec3_at(const VecXT<T>& z, Eigen::Index off) { return z.template segment<3>(off); }

template <class T> Mat3T<T> mat3_at(const VecXT<T>& z, Eigen::Index off)
{
    Mat3T<T> m;
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) m(a, b) = z(off + 3 * a + b);
    return m;
}

template <class T> void put_mat3(VecXT<T>& z, Eigen::Index off, const Mat3T<T>& m)
{
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) z(off + 3 * a + b) = m(a, b);
}

template <class T> std::vector<Vec3T<T>> block3(const VecXT<T>& z, Eigen::Index off, std::size_t n)
{
    std::vector<Vec3T<T>> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = vec3_at(z, off + 3 * static_cast<Eigen::Index>(k));
    return out;
}

inline std::vector<Vec3> to_vec3(const VecX& z, Eigen::Index off, std::size_t n) { return block3<double>(z, off, n); }

inline void put_block(VecX& z, Eigen::Index off, const std::vector<Vec3>& v)
{
    for (std::size_t k = 0; k < v.size(); ++k) z.segment<3>(off + 3 * static_cast<Eigen::Index>(k)) = v[k];
}

template <class T> T frobenius_dot(const Mat3& a, const Mat3T<T>& b)
{
    T s(0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) s += a(i, j) * b(i, j);
    return s;
}

inline void check_sizes(std::size_t n, const std::vector<Vec3>& a, const std::vector<Vec3>& b)
{
    if (a.size() != n || b.size() != n) throw ConfigError("state size does not match particle count");
}

} // namespace detail

// ---------------------------------------------------------------------------
// NVE: z = [r (3N), p (3N)]

class NVESystem {
public:
    static constexpr Backend backend = Backend::NVE;

    NVESystem(ParticleSet particles, Interactions inter) : particles_(std::move(particles)), inter_(std::move(inter)) {}

    std::size_t n() const { return particles_.size(); }
    Eigen::Index dim() const { return 6 * static_cast<Eigen::Index>(n()); }
    const ParticleSet& particles() const { return particles_; }
    const Interactions& interactions() const { return inter_; }

    VecX pack(const NVEState& st) const
    {
        detail::check_sizes(n(), st.r, st.p);
        VecX z(dim());
        detail::put_block(z, 0, st.r);
        detail::put_block(z, 3 * n(), st.p);
        return z;
    }

    NVEState unpack(const VecX& z) const { return {detail::to_vec3(z, 0, n()), detail::to_vec3(z, 3 * n(), n())}; }

    template <class T> T hamiltonian(const VecXT<T>& z) const
    {
        const auto N = n();
        const auto r = detail::block3(z, 0, N);
        T H = potential(r);
        for (std::size_t k = 0; k < N; ++k)
            H += detail::vec3_at(z, 3 * (N + k)).squaredNorm() / (2.0 * particles_.mass(k));
        return H;
    }

    template <class T> void rhs(const VecXT<T>& z, VecXT<T>& dz) const
    {
        const auto N = n();
        dz.resize(dim());
        const auto r = detail::block3(z, 0, N);
        const auto g = gradient(r);
        for (std::size_t k = 0; k < N; ++k) {
            const auto i = static_cast<Eigen::Index>(3 * k);
            dz.template segment<3>(i) = detail::vec3_at(z, 3 * (N + k)) / particles_.mass(k);
            dz.template segment<3>(3 * N + i) = -g[k];
        }
    }

    void validate(const VecX&) const {}
    double time_rate(const VecX&) const { return 1.0; }

    Vec3 momentum(const VecX& z) const
    {
        Vec3 P = Vec3::Zero();
        for (std::size_t k = 0; k < n(); ++k) P += z.segment<3>(3 * (n() + k));
        return P;
    }

    Snapshot snapshot(const VecX& z) const
    {
        Snapshot s;
        s.r = detail::to_vec3(z, 0, n());
        s.v = detail::to_vec3(z, 3 * n(), n());
        for (std::size_t k = 0; k < n(); ++k) s.v[k] /= particles_.mass(k);
        return s;
    }

private:
    template <class T> T potential(const std::vector<Vec3T<T>>& r) const
    {
        if (inter_.box > 0.0) {
            const Mat3T<T> cell = (inter_.box * Mat3::Identity()).cast<T>();
            return pair_sum<T>(r, inter_.pair, &cell).energy + external_energy<T>(r, inter_.ext);
        }
        return pair_sum<T>(r, inter_.pair).energy + external_energy<T>(r, inter_.ext);
    }

    template <class T> std::vector<Vec3T<T>> gradient(const std::vector<Vec3T<T>>& r) const
    {
        PairSum<T> ps;
        if (inter_.box > 0.0) {
            const Mat3T<T> cell = (inter_.box * Mat3::Identity()).cast<T>();
            ps = pair_sum<T>(r, inter_.pair, &cell);
        } else {
            ps = pair_sum<T>(r, inter_.pair);
        }
        if (inter_.ext.active())
            for (std::size_t k = 0; k < r.size(); ++k) ps.grad[k] += inter_.ext.gradient(r[k]);
        return ps.grad;
    }

    friend class NHSystem;

    ParticleSet particles_;
    Interactions inter_;
};

// ---------------------------------------------------------------------------
// Nose: z = [r (3N), s, p (3N), p_s], evolved in virtual time tau.

class NHSystem {
public:
    static constexpr Backend backend = Backend::NH;

    NHSystem(ParticleSet particles, Interactions inter, NHParams params, Units units = Units{})
        : base_(std::move(particles), std::move(inter)), params_(params), units_(units)
    {
        params_.validate();
        A_ = params_.entropic_coefficient(base_.n(), units_);
    }

    std::size_t n() const { return base_.n(); }
    Eigen::Index dim() const { return 6 * static_cast<Eigen::Index>(n()) + 2; }
    const ParticleSet& particles() const { return base_.particles(); }
    const Interactions& interactions() const { return base_.interactions(); }
    const NHParams& params() const { return params_; }
    const Units& units() const { return units_; }
    /// A = (3N+1) k_B T_target.
    double A() const { return A_; }

    Eigen::Index s_index() const { return 3 * static_cast<Eigen::Index>(n()); }
    Eigen::Index ps_index() const { return dim() - 1; }

    VecX pack(const NHState& st) const
    {
        detail::check_sizes(n(), st.r, st.p);
        VecX z(dim());
        detail::put_block(z, 0, st.r);
        z(s_index()) = st.s;
        detail::put_block(z, s_index() + 1, st.p);
        z(ps_index()) = st.ps;
        return z;
    }

    NHState unpack(const VecX& z) const
    {
        NHState st;
        st.r = detail::to_vec3(z, 0, n());
        st.s = z(s_index());
        st.p = detail::to_vec3(z, s_index() + 1, n());
        st.ps = z(ps_index());
        return st;
    }

    template <class T> T hamiltonian(const VecXT<T>& z) const
    {
        using std::log;
        const auto N = n();
        const T s = z(s_index());
        check_s(value_of(s));
        const auto r = detail::block3(z, 0, N);
        T H = base_.potential(r);
        for (std::size_t k = 0; k < N; ++k)
            H += detail::vec3_at(z, s_index() + 1 + 3 * static_cast<Eigen::Index>(k)).squaredNorm() /
                 (2.0 * particles().mass(k) * s * s);
        const T ps = z(ps_index());
        H += ps * ps / (2.0 * params_.Q) + A_ * (log(s) - 1.0);
        return H;
    }

    template <class T> void rhs(const VecXT<T>& z, VecXT<T>& dz) const
    {
        const auto N = n();
        dz.resize(dim());
        const T s = z(s_index());
        check_s(value_of(s));
        const T ps = z(ps_index());
        const auto r = detail::block3(z, 0, N);
        const auto g = base_.gradient(r);
        T twice_kin(0.0);
        for (std::size_t k = 0; k < N; ++k) {
            const auto i = static_cast<Eigen::Index>(3 * k);
            const Vec3T<T> p = detail::vec3_at(z, s_index() + 1 + i);
            const double m = particles().mass(k);
            dz.template segment<3>(i) = p / (m * s * s);
            dz.template segment<3>(s_index() + 1 + i) = -g[k];
            twice_kin += p.squaredNorm() / m;
        }
        dz(s_index()) = ps / params_.Q;
        dz(ps_index()) = twice_kin / (s * s * s) - A_ / s;
    }

    void validate(const VecX& z) const { check_s(z(s_index())); }

    /// dt/dtau = 1/s.
    double time_rate(const VecX& z) const
    {
        validate(z);
        return 1.0 / z(s_index());
    }

    Snapshot snapshot(const VecX& z) const
    {
        validate(z);
        Snapshot sn;
        sn.s = z(s_index());
        sn.ps = z(ps_index());
        sn.r = detail::to_vec3(z, 0, n());
        sn.v = detail::to_vec3(z, s_index() + 1, n());
        for (std::size_t k = 0; k < n(); ++k) sn.v[k] /= particles().mass(k) * sn.s;
        return sn;
    }

    /// sum_k m_k |v_k|^2 with v_k = p_k / (m_k s).
    double twice_kinetic(const VecX& z) const
    {
        const double s = z(s_index());
        double t = 0.0;
        for (std::size_t k = 0; k < n(); ++k)
            t += z.segment<3>(s_index() + 1 + 3 * static_cast<Eigen::Index>(k)).squaredNorm() / (particles().mass(k) * s * s);
        return t;
    }

private:
    static void check_s(double s)
    {
        if (!(s > 0.0)) throw StateError("NH state has s <= 0");
    }

    NVESystem base_;
    NHParams params_;
    Units units_;
    double A_ = 0.0;
};

// ---------------------------------------------------------------------------
// APR: z = [s (3N), F (9, row-major), p (3N), G (9)].

struct KineticTerms {
    double total = 0.0;
    double ss = 0.0; ///< 1/2 sum m sdot . C sdot
    double sF = 0.0; ///< sum m sdot . F^T Fdot s
    double FF = 0.0; ///< 1/2 sum m |Fdot s|^2
};

/// Lagrangian kinetic energy 1/2 sum m |F sdot_k + Fdot s_k|^2 and its three
/// quadratic-form parts.
inline KineticTerms kinetic_energy_exact_apr(const ParticleSet& particles, const std::vector<Vec3>& s,
                                             const std::vector<Vec3>& sdot, const Mat3& F, const Mat3& Fdot)
{
    detail::check_sizes(particles.size(), s, sdot);
    KineticTerms K;
    const Mat3 C = F.transpose() * F;
    for (std::size_t k = 0; k < s.size(); ++k) {
        const double m = particles.mass(k);
        const Vec3 Fs = Fdot * s[k];
        K.ss += 0.5 * m * sdot[k].dot(C * sdot[k]);
        K.sF += m * (F * sdot[k]).dot(Fs);
        K.FF += 0.5 * m * Fs.squaredNorm();
        K.total += 0.5 * m * (F * sdot[k] + Fs).squaredNorm();
    }
    return K;
}

class APRSystem {
public:
    static constexpr Backend backend = Backend::APR;

    APRSystem(ParticleSet particles, Interactions inter, APRParams params)
        : particles_(std::move(particles)), inter_(std::move(inter)), params_(params)
    {
        params_.validate();
        if (params_.periodic_cell > 0.0 && !inter_.pair.cutoff())
            throw ConfigError("apr.periodic_cell: requires a pair cutoff");
    }

    std::size_t n() const { return particles_.size(); }
    Eigen::Index dim() const { return 6 * static_cast<Eigen::Index>(n()) + 18; }
    const ParticleSet& particles() const { return particles_; }
    const Interactions& interactions() const { return inter_; }
    const APRParams& params() const { return params_; }

    Eigen::Index F_index() const { return 3 * static_cast<Eigen::Index>(n()); }
    Eigen::Index p_index() const { return F_index() + 9; }
    Eigen::Index G_index() const { return dim() - 9; }

    VecX pack(const APRState& st) const
    {
        detail::check_sizes(n(), st.s, st.p);
        VecX z(dim());
        detail::put_block(z, 0, st.s);
        detail::put_mat3<double>(z, F_index(), st.F);
        detail::put_block(z, p_index(), st.p);
        detail::put_mat3<double>(z, G_index(), st.G);
        return z;
    }

    APRState unpack(const VecX& z) const
    {
        APRState st;
        st.s = detail::to_vec3(z, 0, n());
        st.F = detail::mat3_at(z, F_index());
        st.p = detail::to_vec3(z, p_index(), n());
        st.G = detail::mat3_at(z, G_index());
        return st;
    }

    template <class T> T hamiltonian(const VecXT<T>& z) const
    {
        const auto N = n();
        const Mat3T<T> F = detail::mat3_at(z, F_index());
        check_F(value_of(F.determinant()));
        const Mat3T<T> Finv = F.inverse();
        const auto s = detail::block3(z, 0, N);
        T H = potential_terms(F, s).energy;
        for (std::size_t k = 0; k < N; ++k) {
            const Vec3T<T> p = detail::vec3_at(z, p_index() + 3 * static_cast<Eigen::Index>(k));
            // p . C^{-1} p = |F^{-T} p|^2
            H += (Finv.transpose() * p).squaredNorm() / (2.0 * particles_.mass(k));
        }
        if (params_.kinetic == APRKinetic::ParrinelloRahman) {
            const Mat3T<T> G = detail::mat3_at(z, G_index());
            H += G.squaredNorm() / (2.0 * params_.W);
        }
        H -= params_.omega_ref * detail::frobenius_dot(params_.P, F);
        return H;
    }

    template <class T> void rhs(const VecXT<T>& z, VecXT<T>& dz) const
    {
        const auto N = n();
        dz.resize(dim());
        const Mat3T<T> F = detail::mat3_at(z, F_index());
        check_F(value_of(F.determinant()));
        const Mat3T<T> Finv = F.inverse();
        const auto s = detail::block3(z, 0, N);
        const auto pot = potential_terms(F, s);
        Mat3T<T> Gdot = params_.omega_ref * params_.P.cast<T>() - pot.dVdF;

        if (params_.kinetic == APRKinetic::ParrinelloRahman) {
            const Mat3T<T> Cinv = Finv * Finv.transpose();
            for (std::size_t k = 0; k < N; ++k) {
                const auto i = static_cast<Eigen::Index>(3 * k);
                const double m = particles_.mass(k);
                const Vec3T<T> u = Cinv * detail::vec3_at(z, p_index() + i);
                dz.template segment<3>(i) = u / m;
                dz.template segment<3>(p_index() + i) = -(F.transpose() * pot.grad[k]);
                Gdot += (F * u) * u.transpose() / m;
            }
            detail::put_mat3<T>(dz, F_index(), Mat3T<T>(detail::mat3_at(z, G_index()) / params_.W));
            detail::put_mat3<T>(dz, G_index(), Gdot);
            return;
        }

        // Minimal-norm velocities of the degenerate Lagrangian: solve
        // F sdot_k + Fdot s_k = v_k for (sdot, Fdot) with least Euclidean norm.
        std::vector<Vec3T<T>> v(N);
        for (std::size_t k = 0; k < N; ++k)
            v[k] = Finv.transpose() * detail::vec3_at(z, p_index() + 3 * static_cast<Eigen::Index>(k)) / particles_.mass(k);
        std::vector<Vec3T<T>> sdot;
        Mat3T<T> Fdot;
        minimal_norm_velocities(F, s, v, sdot, Fdot);
        for (std::size_t k = 0; k < N; ++k) {
            const auto i = static_cast<Eigen::Index>(3 * k);
            const double m = particles_.mass(k);
            dz.template segment<3>(i) = sdot[k];
            dz.template segment<3>(p_index() + i) = m * (Fdot.transpose() * v[k]) - F.transpose() * pot.grad[k];
            Gdot += m * v[k] * sdot[k].transpose();
        }
        detail::put_mat3<T>(dz, F_index(), Fdot);
        detail::put_mat3<T>(dz, G_index(), Gdot);
    }

    void validate(const VecX& z) const { check_F(detail::mat3_at(z, F_index()).determinant()); }
    double time_rate(const VecX&) const { return 1.0; }

    /// |G - sum_k F^{-T} p_k (x) s_k|, the distance from the image of the
    /// degenerate Legendre map.
    double constraint_defect(const VecX& z) const
    {
        const Mat3 F = detail::mat3_at(z, F_index());
        check_F(F.determinant());
        const Mat3 FinvT = F.inverse().transpose();
        Mat3 G = detail::mat3_at(z, G_index());
        for (std::size_t k = 0; k < n(); ++k)
            G -= FinvT * z.segment<3>(p_index() + 3 * static_cast<Eigen::Index>(k)) *
                 z.segment<3>(3 * static_cast<Eigen::Index>(k)).transpose();
        return G.norm();
    }

    /// Sets G on the constraint set of the exact backend.
    void project_constraint(VecX& z) const
    {
        const Mat3 F = detail::mat3_at(z, F_index());
        const Mat3 FinvT = F.inverse().transpose();
        Mat3 G = Mat3::Zero();
        for (std::size_t k = 0; k < n(); ++k)
            G += FinvT * z.segment<3>(p_index() + 3 * static_cast<Eigen::Index>(k)) *
                 z.segment<3>(3 * static_cast<Eigen::Index>(k)).transpose();
        detail::put_mat3<double>(z, G_index(), G);
    }

    /// Current positions F s_k and kinematic velocities F sdot_k + Fdot s_k.
    Snapshot snapshot(const VecX& z) const
    {
        validate(z);
        Snapshot sn;
        sn.F = detail::mat3_at(z, F_index());
        VecX dz;
        rhs<double>(z, dz);
        const Mat3 Fdot = detail::mat3_at(dz, F_index());
        sn.r.resize(n());
        sn.v.resize(n());
        for (std::size_t k = 0; k < n(); ++k) {
            const auto i = static_cast<Eigen::Index>(3 * k);
            const Vec3 sk = z.segment<3>(i);
            sn.r[k] = sn.F * sk;
            sn.v[k] = sn.F * dz.segment<3>(i) + Fdot * sk;
        }
        return sn;
    }

    Mat3 cell_tensor(const VecX& z) const { return detail::mat3_at(z, F_index()); }

private:
    template <class T> struct PotentialTerms {
        T energy;
        std::vector<Vec3T<T>> grad; ///< dV/dr_k at r = F s
        Mat3T<T> dVdF;
    };

    template <class T> PotentialTerms<T> potential_terms(const Mat3T<T>& F, const std::vector<Vec3T<T>>& s) const
    {
        std::vector<Vec3T<T>> r(s.size());
        for (std::size_t k = 0; k < s.size(); ++k) r[k] = F * s[k];
        PairSum<T> ps;
        if (params_.periodic_cell > 0.0) {
            const Mat3T<T> cell = params_.periodic_cell * F;
            ps = pair_sum<T>(r, inter_.pair, &cell);
        } else {
            ps = pair_sum<T>(r, inter_.pair);
        }
        PotentialTerms<T> out;
        out.energy = ps.energy;
        // Every interacting separation is x = F y with y referential, so
        // dV^i/dF = sum V'/|x| x (x) y = W F^{-T}.
        out.dVdF = ps.virial * F.inverse().transpose();
        out.grad = std::move(ps.grad);
        if (inter_.ext.active()) {
            for (std::size_t k = 0; k < s.size(); ++k) {
                const Vec3T<T> ge = inter_.ext.gradient(r[k]);
                out.energy += inter_.ext.energy(r[k]);
                out.grad[k] += ge;
                out.dVdF += ge * s[k].transpose();
            }
        }
        return out;
    }

    template <class T>
    void minimal_norm_velocities(const Mat3T<T>& F, const std::vector<Vec3T<T>>& s, const std::vector<Vec3T<T>>& v,
                                 std::vector<Vec3T<T>>& sdot, Mat3T<T>& Fdot) const
    {
        const auto N = static_cast<Eigen::Index>(s.size());
        using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
        MatT A = MatT::Zero(3 * N, 3 * N + 9);
        VecXT<T> rhs_v(3 * N);
        for (Eigen::Index k = 0; k < N; ++k) {
            A.template block<3, 3>(3 * k, 3 * k) = F;
            for (int a = 0; a < 3; ++a) {
                for (int b = 0; b < 3; ++b) A(3 * k + a, 3 * N + 3 * a + b) = s[k](b);
                rhs_v(3 * k + a) = v[k](a);
            }
        }
        const MatT AAt = A * A.transpose();
        const VecXT<T> lambda = AAt.ldlt().solve(rhs_v);
        const VecXT<T> x = A.transpose() * lambda;
        sdot.resize(s.size());
        for (Eigen::Index k = 0; k < N; ++k) sdot[k] = x.template segment<3>(3 * k);
        Fdot = detail::mat3_at(x, 3 * N);
    }

    static void check_F(double det)
    {
        if (std::abs(det) <= singular_det_tolerance) throw StateError("APR cell tensor F is singular");
        if (!(det > 0.0)) throw StateError("APR cell tensor F has det <= 0");
    }

    ParticleSet particles_;
    Interactions inter_;
    APRParams params_;
};

using System = std::variant<NVESystem, NHSystem, APRSystem>;

// ---------------------------------------------------------------------------
// Spec-level wrappers

inline double hamiltonian_nh(const NHSystem& sys, const NHState& st) { return sys.hamiltonian<double>(sys.pack(st)); }

inline double hamiltonian_apr_pr(const APRSystem& sys, const APRState& st)
{
    if (sys.params().kinetic != APRKinetic::ParrinelloRahman) throw ConfigError("hamiltonian_apr_pr: system uses the exact kinetic energy");
    return sys.hamiltonian<double>(sys.pack(st));
}

template <class Sys> VecX eval_rhs(const Sys& sys, const VecX& z)
{
    VecX dz;
    sys.template rhs<double>(z, dz);
    return dz;
}

inline VecX eom_nh(const NHSystem& sys, const NHState& st) { return eval_rhs(sys, sys.pack(st)); }

inline VecX eom_apr_pr(const APRSystem& sys, const APRState& st)
{
    if (sys.params().kinetic != APRKinetic::ParrinelloRahman) throw ConfigError("eom_apr_pr: system uses the exact kinetic energy");
    return eval_rhs(sys, sys.pack(st));
}

inline constexpr double constraint_tolerance = 1e-10;

inline VecX eom_apr_exact(const APRSystem& sys, const APRState& st)
{
    if (sys.params().kinetic != APRKinetic::ExactMinimalNorm) throw ConfigError("eom_apr_exact: system uses the PR kinetic energy");
    const VecX z = sys.pack(st);
    const double defect = sys.constraint_defect(z);
    if (defect > constraint_tolerance * std::max(1.0, st.G.norm()))
        throw StateError("APR momenta off the constraint set (defect " + std::to_string(defect) + ")");
    return eval_rhs(sys, z);
}

/// t(tau) = int_0^tau dalpha / s(alpha) by the composite trapezoid rule.
inline std::vector<double> real_time_map(const std::vector<double>& s, double dtau)
{
    if (!(dtau > 0.0)) throw ConfigError("real_time_map: dtau must be > 0");
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!(s[i] > 0.0)) throw StateError("real_time_map: s <= 0 at node " + std::to_string(i));
        t[i] = i == 0 ? 0.0 : t[i - 1] + 0.5 * dtau * (1.0 / s[i - 1] + 1.0 / s[i]);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Integrators

enum class Scheme { ImplicitMidpoint, RK4 };

struct IntegratorSpec {
    Scheme scheme = Scheme::ImplicitMidpoint;
    double dtau = 1e-3;
    double tolerance = 1e-12;
    int max_iterations = 50;

    void validate() const
    {
        if (!(dtau > 0.0)) throw ConfigError("integrator.dtau: must be > 0");
        if (!(tolerance > 0.0)) throw ConfigError("integrator.tolerance: must be > 0");
        if (max_iterations < 1) throw ConfigError("integrator.max_iterations: must be >= 1");
    }
};

/// One step. For implicit midpoint the converged midpoint is written to `mid`.
template <class Sys> VecX step(const Sys& sys, const VecX& z, const IntegratorSpec& spec, VecX* mid = nullptr)
{
    const double h = spec.dtau;
    if (spec.scheme == Scheme::RK4) {
        const VecX k1 = eval_rhs(sys, z);
        const VecX k2 = eval_rhs(sys, VecX(z + 0.5 * h * k1));
        const VecX k3 = eval_rhs(sys, VecX(z + 0.5 * h * k2));
        const VecX k4 = eval_rhs(sys, VecX(z + h * k3));
        VecX z1 = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        sys.validate(z1);
        return z1;
    }
    VecX z1 = z + h * eval_rhs(sys, z);
    VecX zm(z.size());
    for (int it = 0; it < spec.max_iterations; ++it) {
        zm = 0.5 * (z + z1);
        VecX next = z + h * eval_rhs(sys, zm);
        const double diff = (next - z1).template lpNorm<Eigen::Infinity>();
        z1.swap(next);
        if (diff <= spec.tolerance * std::max(1.0, z1.template lpNorm<Eigen::Infinity>())) {
            sys.validate(z1);
            if (mid) *mid = 0.5 * (z + z1);
            return z1;
        }
    }
    throw ConvergenceError("implicit midpoint did not converge in " + std::to_string(spec.max_iterations) +
                           " iterations; reduce dtau");
}

/// Raised by integrate; carries the last state that satisfied every invariant.
class IntegrationAborted : public NumericalError {
public:
    IntegrationAborted(const std::string& what, VecX last, double tau, std::size_t steps_done)
        : NumericalError(what), last_state(std::move(last)), last_tau(tau), steps(steps_done)
    {
    }
    VecX last_state;
    double last_tau;
    std::size_t steps;
};

struct IntegrateOptions {
    std::size_t stride = 1; ///< store every stride-th step (the last step is always stored)
    std::function<void(const VecX& z, double tau, double t)> observer; ///< called on every step, including step 0
};

template <class Sys> Vec3 monitor_momentum(const Sys& sys, const VecX& z)
{
    if constexpr (std::is_same_v<Sys, NVESystem>)
        return sys.momentum(z);
    else
        return Vec3::Zero();
}

template <class Sys>
Trajectory integrate(const Sys& sys, const VecX& z0, std::size_t n_steps, const IntegratorSpec& spec,
                     const IntegrateOptions& opt = {})
{
    spec.validate();
    if (z0.size() != sys.dim()) throw ConfigError("initial state has wrong dimension");
    if (opt.stride < 1) throw ConfigError("integrate: stride must be >= 1");
    sys.validate(z0);
    constexpr bool nve = std::is_same_v<Sys, NVESystem>;

    Trajectory traj(Sys::backend, spec.dtau);
    VecX z = z0;
    double tau = 0.0, t = 0.0;
    double rate = sys.time_rate(z);
    Vec3 P0 = monitor_momentum(sys, z);
    traj.monitor.start(sys.template hamiltonian<double>(z), nve ? &P0 : nullptr);
    traj.append(z, tau, t);
    if (opt.observer) opt.observer(z, tau, t);

    for (std::size_t i = 1; i <= n_steps; ++i) {
        VecX z1;
        try {
            z1 = step(sys, z, spec);
        } catch (const NumericalError& e) {
            throw IntegrationAborted(std::string(e.what()) + " at step " + std::to_string(i), z, tau, i - 1);
        }
        const double rate1 = sys.time_rate(z1);
        tau = static_cast<double>(i) * spec.dtau;
        if constexpr (std::is_same_v<Sys, NHSystem>)
            t += 0.5 * spec.dtau * (rate + rate1);
        else
            t = tau;
        rate = rate1;
        z.swap(z1);
        const Vec3 P = monitor_momentum(sys, z);
        traj.monitor.record(sys.template hamiltonian<double>(z), nve ? &P : nullptr);
        if (i % opt.stride == 0 || i == n_steps) traj.append(z, tau, t);
        if (opt.observer) opt.observer(z, tau, t);
    }
    return traj;
}

template <class Sys> MatX rhs_jacobian(const Sys& sys, const VecX& z)
{
    return jacobian([&sys](const VecXT<ADScalar>& za, VecXT<ADScalar>& out) { sys.template rhs<ADScalar>(za, out); }, z);
}

/// Divergence of the phase-space velocity field at z.
template <class Sys> double rhs_jacobian_trace(const Sys& sys, const VecX& z) { return rhs_jacobian(sys, z).trace(); }

/// Determinant of the discrete tangent map of implicit midpoint after
/// n_steps. Each step maps dz0 to (I - h/2 J)^{-1} (I + h/2 J) dz0 with J the
/// RHS Jacobian at the converged midpoint.
template <class Sys> double phase_volume_check(const Sys& sys, const VecX& z0, double dtau, std::size_t n_steps)
{
    IntegratorSpec spec;
    spec.dtau = dtau;
    spec.validate();
    const auto d = sys.dim();
    MatX M = MatX::Identity(d, d);
    VecX z = z0;
    for (std::size_t i = 0; i < n_steps; ++i) {
        VecX mid;
        z = step(sys, z, spec, &mid);
        const MatX J = rhs_jacobian(sys, mid);
        const MatX I = MatX::Identity(d, d);
        const MatX lhs = I - 0.5 * dtau * J;
        M = lhs.partialPivLu().solve(MatX((I + 0.5 * dtau * J) * M));
    }
    return M.determinant();
}

/// Central finite-difference gradient of H, the oracle for the RHS.
template <class Sys> VecX fd_gradient(const Sys& sys, const VecX& z, double step_size = 1e-5)
{
    VecX g(z.size());
    VecX zp = z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double x = z(i);
        zp(i) = x + step_size;
        const double hp = sys.template hamiltonian<double>(zp);
        zp(i) = x - step_size;
        const double hm = sys.template hamiltonian<double>(zp);
        zp(i) = x;
        g(i) = (hp - hm) / (2.0 * step_size);
    }
    return g;
}

/// Canonical pairing: first half of the phase vector is coordinates, second
/// half their conjugate momenta, so zdot = (dH/dp, -dH/dq).
inline VecX symplectic_pairing(const VecX& grad)
{
    const auto h = grad.size() / 2;
    VecX out(grad.size());
    out.head(h) = grad.tail(h);
    out.tail(h) = -grad.head(h);
    return out;
}

} // namespace ikn
