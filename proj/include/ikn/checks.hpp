#pragma once

#include "balance.hpp"

#include <random>

namespace ikn {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

namespace checks {

inline std::string sci(double x)
{
    char s[32];
    std::snprintf(s, sizeof s, "%.3e", x);
    return s;
}

/// Corners of a unit-spaced cube (up to 8 particles) with Gaussian jitter.
inline std::vector<Vec3> jittered_cube(std::size_t n, double a, double jitter, std::mt19937_64& rng)
{
    std::normal_distribution<double> g(0.0, jitter);
    std::vector<Vec3> r;
    for (std::size_t i = 0; i < n; ++i)
        r.push_back(a * Vec3(double(i % 2), double((i / 2) % 2), double((i / 4) % 2)) + Vec3(g(rng), g(rng), g(rng)));
    return r;
}

inline std::vector<Vec3> gaussian_vectors(std::size_t n, double sd, std::mt19937_64& rng)
{
    std::normal_distribution<double> g(0.0, sd);
    std::vector<Vec3> v;
    for (std::size_t i = 0; i < n; ++i) v.emplace_back(g(rng), g(rng), g(rng));
    return v;
}

inline Mat3 perturbed_identity(double sd, std::mt19937_64& rng)
{
    std::normal_distribution<double> g(0.0, sd);
    Mat3 F = Mat3::Identity();
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) F(a, b) += g(rng);
    return F;
}

/// max |rhs - J grad_FD H| / max |rhs|.
template <class Sys> double gradient_mismatch(const Sys& sys, const VecX& z)
{
    const VecX rhs = eval_rhs(sys, z);
    const VecX ref = symplectic_pairing(fd_gradient(sys, z));
    return (rhs - ref).lpNorm<Eigen::Infinity>() / std::max(1e-12, rhs.lpNorm<Eigen::Infinity>());
}

struct BackendTriple {
    NVESystem nve;
    NHSystem nh;
    APRSystem apr;
};

/// Random canonical states for the three backends; a callback receives
/// (system, z) for each.
template <class F> void random_states(const BackendTriple& s, std::size_t count, std::uint64_t seed, F&& f)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> us(0.7, 1.4);
    std::normal_distribution<double> g(0.0, 0.5);
    const std::size_t n = s.nve.n();
    for (std::size_t k = 0; k < count; ++k) {
        const auto r = jittered_cube(n, 1.12, 0.05, rng);
        const auto p = gaussian_vectors(n, 0.7, rng);
        f(s.nve, s.nve.pack(NVEState{r, p}));
        f(s.nh, s.nh.pack(NHState{r, p, us(rng), g(rng)}));
        f(s.apr, s.apr.pack(APRState{r, p, perturbed_identity(0.08, rng), perturbed_identity(0.3, rng) - Mat3::Identity()}));
    }
}

inline BackendTriple lj_triple(std::size_t n)
{
    Interactions in;
    in.pair = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    in.ext = ExternalPotential::harmonic_trap(0.3, Vec3::Constant(0.5));
    std::vector<double> masses;
    for (std::size_t i = 0; i < n; ++i) masses.push_back(0.8 + 0.1 * static_cast<double>(i % 5));
    APRParams ap;
    ap.P << 0.3, 0.1, 0.0, 0.1, -0.2, 0.05, 0.0, 0.05, 0.4;
    ap.omega_ref = 2.0;
    return {NVESystem(ParticleSet(masses), in), NHSystem(ParticleSet(masses), in, NHParams{}), APRSystem(ParticleSet(masses), in, ap)};
}

// ---------------------------------------------------------------------------

inline CheckResult gradient_cross_check(std::size_t states_per_backend = 100, std::uint64_t seed = 3)
{
    const auto sys = lj_triple(4);
    double worst = 0.0;
    random_states(sys, states_per_backend, seed, [&](const auto& s, const VecX& z) { worst = std::max(worst, gradient_mismatch(s, z)); });
    return {"hamiltonian gradient cross-check", worst <= 1e-6, "max relative mismatch " + sci(worst)};
}

inline CheckResult divergence_free_check(std::size_t states_per_backend = 100, std::uint64_t seed = 4)
{
    const auto sys = lj_triple(3);
    double worst = 0.0;
    random_states(sys, states_per_backend, seed, [&](const auto& s, const VecX& z) { worst = std::max(worst, std::abs(rhs_jacobian_trace(s, z))); });
    return {"phase-space divergence (Jacobian trace)", worst <= 1e-8, "max |tr J| " + sci(worst)};
}

inline CheckResult phase_volume_suite(std::size_t n_steps = 1000, double dtau = 1e-3)
{
    Interactions in;
    in.pair = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    const ParticleSet parts(std::vector<double>{1.0, 1.2, 0.9});
    const std::vector<Vec3> r{Vec3(0, 0, 0), Vec3(1.12, 0.05, 0), Vec3(0.5, 0.95, 0.1)};
    const std::vector<Vec3> p{Vec3(0.2, -0.1, 0.05), Vec3(-0.1, 0.15, 0.0), Vec3(-0.1, -0.05, -0.05)};
    NVESystem nve(parts, in);
    NHSystem nh(parts, in, NHParams{});
    APRParams ap;
    ap.P = 0.1 * Mat3::Identity();
    APRSystem apr(parts, in, ap);
    const double d1 = phase_volume_check(nve, nve.pack(NVEState{r, p}), dtau, n_steps);
    const double d2 = phase_volume_check(nh, nh.pack(NHState{r, p, 1.1, 0.2}), dtau, n_steps);
    const double d3 = phase_volume_check(apr, apr.pack(APRState{r, p, Mat3::Identity(), Mat3::Zero()}), dtau, n_steps);
    const double worst = std::max({std::abs(d1 - 1.0), std::abs(d2 - 1.0), std::abs(d3 - 1.0)});
    return {"tangent-map determinant", worst <= 1e-6,
            "det - 1: NVE " + sci(d1 - 1.0) + ", NH " + sci(d2 - 1.0) + ", APR " + sci(d3 - 1.0)};
}

inline GridSpec default_grid()
{
    GridSpec g;
    g.lower = Vec3::Constant(-3.0);
    g.upper = Vec3::Constant(3.0);
    g.dx = 0.2;
    g.h = 0.6;
    return g;
}

/// Kernel, mass, number and bond-function normalizations on `grid`.
inline CheckResult normalization_check(const GridSpec& grid = default_grid(), std::uint64_t seed = 9)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.8, 0.8);
    std::vector<double> masses{1.0, 2.0, 0.5, 1.5};
    std::vector<Vec3> r;
    for (int k = 0; k < 4; ++k) r.emplace_back(u(rng), u(rng), u(rng));
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0);
    NVESystem sys{ParticleSet(masses), in};
    EnsembleBatch b{Backend::NVE, {}};
    Trajectory tr(Backend::NVE, 1.0);
    tr.append(sys.pack(NVEState{r, gaussian_vectors(4, 0.3, rng)}), 0.0, 0.0);
    b.trajectories.push_back(tr);
    const auto fs = extract_fields(sys, b, grid);
    const double err_rho = std::abs(fs.integral(FieldId::rho, 0) - 5.0);
    const double err_n = std::abs(fs.integral(FieldId::n, 0) - 1.0);

    // bond function b = sum_q w_q w_h(x - point_q) integrates to one per bond
    const BondQuadrature quad;
    std::vector<NodeWeight> dep;
    double err_b = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j)
        for (std::size_t k = j + 1; k < r.size(); ++k) {
            double total = 0.0;
            for (int q = 0; q < BondQuadrature::size; ++q) {
                deposit(grid, quad.alpha[q] * r[j] + (1.0 - quad.alpha[q]) * r[k], dep);
                for (const auto& nw : dep) total += quad.weight[q] * nw.w;
            }
            err_b = std::max(err_b, std::abs(total * grid.cell_volume() - 1.0));
        }
    const double worst = std::max({err_rho, err_n, err_b});
    return {"field normalizations", worst <= 1e-6, "|int rho - sum m| " + sci(err_rho) + ", |int n - 1| " + sci(err_n) + ", max |int b - 1| " + sci(err_b)};
}

inline EnsembleBatch repeated_state(Backend b, const VecX& z, std::size_t copies, std::size_t times, double dt = 0.1)
{
    EnsembleBatch batch{b, {}};
    for (std::size_t m = 0; m < copies; ++m) {
        Trajectory tr(b, dt);
        for (std::size_t t = 0; t < times; ++t) tr.append(z, dt * static_cast<double>(t), dt * static_cast<double>(t));
        batch.trajectories.push_back(tr);
    }
    return batch;
}

/// Static, force-free configurations (P = 0, p_s = 0) for all backends and
/// modes: every residual must vanish.
inline CheckResult exact_zero_check(const GridSpec& grid = default_grid())
{
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0, 1.02);
    // one bond at its rest length, one particle beyond the cutoff of both
    const std::vector<Vec3> r{Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0), Vec3(0.0, 0.3, 1.1)};
    const std::vector<Vec3> p(3, Vec3::Zero());
    const ParticleSet parts(std::vector<double>{1.0, 1.5, 2.0});
    NVESystem nve(parts, in);
    NHSystem nh(parts, in, NHParams{});
    APRSystem apr(parts, in, APRParams{});
    std::vector<FieldSet> sets;
    sets.push_back(extract_fields(nve, repeated_state(Backend::NVE, nve.pack(NVEState{r, p}), 3, 4), grid));
    sets.push_back(extract_fields(nh, repeated_state(Backend::NH, nh.pack(NHState{r, p, 1.0, 0.0}), 3, 4), grid));
    sets.push_back(extract_fields(nh, repeated_state(Backend::NH, nh.pack(NHState{r, p, 1.7, 0.0}), 3, 4), grid));
    sets.push_back(extract_fields(apr, repeated_state(Backend::APR, apr.pack(APRState{r, p, Mat3::Identity(), Mat3::Zero()}), 3, 4), grid));
    double worst = 0.0;
    std::size_t count = 0;
    for (const auto& fs : sets)
        for (EnergyMode mode : {EnergyMode::Collective, EnergyMode::Distributed}) {
            const auto rep = balance_report(fs, BalanceSpec{fs.backend, mode});
            for (const auto& e : rep.entries) {
                worst = std::max(worst, e.linf);
                ++count;
            }
        }
    return {"exact-zero balance suite", worst <= 1e-10, std::to_string(count) + " residuals, max |r| " + sci(worst)};
}

/// Shared NVE trajectory mapped onto NH (s = 1, p_s = 0) and APR (F = I,
/// G = 0, P = 0): fields and residuals must agree bit for bit.
struct ReductionOutcome {
    bool nh_fields = true, apr_fields = true;
    bool nh_residuals = true, apr_residuals = true;
    std::size_t fields_compared = 0;
};

inline ReductionOutcome backend_reduction(const GridSpec& grid, std::size_t M = 4, std::size_t steps = 8, unsigned threads = 1)
{
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0);
    const ParticleSet parts(std::vector<double>{1.0, 1.5});
    NVESystem nve(parts, in);
    NHSystem nh(parts, in, NHParams{});
    APRSystem apr(parts, in, APRParams{});
    InitialDensity d;
    d.positions = InitialDensity::Positions::Explicit;
    d.explicit_positions = {Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0)};
    d.jitter = 0.15;
    d.momenta = InitialDensity::Momenta::MaxwellBoltzmann;
    d.T0 = 0.2;
    d.seed = 21;
    const auto bn = run_batch(nve, d, M, IntegratorSpec{Scheme::ImplicitMidpoint, 0.01}, steps, BatchOptions{threads, 2, {}});
    EnsembleBatch bh{Backend::NH, {}}, ba{Backend::APR, {}};
    for (const auto& tr : bn.trajectories) {
        Trajectory th(Backend::NH, tr.dtau()), ta(Backend::APR, tr.dtau());
        for (std::size_t i = 0; i < tr.size(); ++i) {
            const auto st = nve.unpack(tr.state(i));
            th.append(nh.pack(NHState{st.r, st.p, 1.0, 0.0}), tr.tau()[i], tr.t()[i]);
            ta.append(apr.pack(APRState{st.r, st.p, Mat3::Identity(), Mat3::Zero()}), tr.tau()[i], tr.t()[i]);
        }
        bh.trajectories.push_back(th);
        ba.trajectories.push_back(ta);
    }
    const FieldOptions fo{threads};
    const auto fn = extract_fields(nve, bn, grid, fo);
    const auto fh = extract_fields(nh, bh, grid, fo);
    const auto fa = extract_fields(apr, ba, grid, fo);
    ReductionOutcome out;
    for (FieldId id : fn.ids()) {
        if (!fa.has(id)) continue; // sigma_eps0 has no APR counterpart
        ++out.fields_compared;
        out.nh_fields = out.nh_fields && fh.get(id).mean == fn.get(id).mean && fh.get(id).se == fn.get(id).se;
        out.apr_fields = out.apr_fields && fa.get(id).mean == fn.get(id).mean && fa.get(id).se == fn.get(id).se;
    }
    const auto rn = balance_report(fn, BalanceSpec{Backend::NVE});
    const auto rh = balance_report(fh, BalanceSpec{Backend::NH, EnergyMode::Collective});
    for (std::size_t e = 0; e < rn.entries.size(); ++e) out.nh_residuals = out.nh_residuals && rh.entries[e].residual == rn.entries[e].residual;
    for (EnergyMode mode : {EnergyMode::Collective, EnergyMode::Distributed}) {
        const auto ra = balance_report(fa, BalanceSpec{Backend::APR, mode});
        for (std::size_t e = 0; e < rn.entries.size(); ++e)
            out.apr_residuals = out.apr_residuals && ra.entries[e].residual == rn.entries[e].residual;
    }
    return out;
}

inline CheckResult backend_reduction_check(const GridSpec& grid = default_grid())
{
    const auto o = backend_reduction(grid);
    const bool ok = o.nh_fields && o.apr_fields && o.nh_residuals && o.apr_residuals;
    auto yn = [](bool b) { return b ? std::string("identical") : std::string("DIFFERENT"); };
    return {"backend reductions", ok,
            std::to_string(o.fields_compared) + " fields; NH fields " + yn(o.nh_fields) + ", APR fields " + yn(o.apr_fields) +
                ", NH residuals " + yn(o.nh_residuals) + ", APR residuals " + yn(o.apr_residuals)};
}

} // namespace checks

/// Built-in desk-scale verification suite.
inline std::vector<CheckResult> run_check_suite()
{
    return {checks::gradient_cross_check(), checks::divergence_free_check(), checks::phase_volume_suite(),
            checks::normalization_check(), checks::exact_zero_check(), checks::backend_reduction_check()};
}

} // namespace ikn
