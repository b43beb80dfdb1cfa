// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <ikn/ikn.hpp>

#include <chrono>
#include <cstdio>
#include <functional>

using namespace ikn;
using namespace ikn::checks;

namespace {

unsigned workers() { return resolve_threads(0); }

// ---------------------------------------------------------------------------
// Hamiltonian conservation and second-order drift

template <class Sys> std::pair<double, double> drift_pair(const Sys& sys, const VecX& z0)
{
    double d[2];
    for (int h = 0; h < 2; ++h) {
        IntegratorSpec spec{Scheme::ImplicitMidpoint, 1e-3 / (1 << h)};
        spec.tolerance = 1e-14;
        const auto tr = integrate(sys, z0, std::size_t(10000) << h, spec, IntegrateOptions{std::size_t(10) << h, {}});
        d[h] = tr.monitor.max_rel_drift;
    }
    return {d[0], d[1]};
}

CheckResult hamiltonian_conservation()
{
    Interactions in;
    in.pair = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    InitialDensity d;
    d.spacing = 1.12;
    d.momenta = InitialDensity::Momenta::MaxwellBoltzmann;
    d.T0 = 0.2;
    d.zero_total_momentum = true;
    d.seed = 1;
    d.sigma_s = 0.05;
    d.sigma_ps = 0.1;
    d.sigma_F = 0.01;
    const NHSystem nh(ParticleSet::uniform(8), in, NHParams{10.0, 0.2, 1.0});
    const APRSystem apr(ParticleSet::uniform(8), in, APRParams{});
    const auto a = drift_pair(nh, sample_initial(nh, d, 1)[0]);
    const auto b = drift_pair(apr, sample_initial(apr, d, 1)[0]);
    const double ra = a.first / a.second, rb = b.first / b.second;
    const bool ok = a.first <= 1e-5 && b.first <= 1e-5 && ra >= 3.0 && ra <= 5.0 && rb >= 3.0 && rb <= 5.0;
    return {"hamiltonian conservation (LJ N=8, 1e4 steps)", ok,
            "max |dH|/|H0|: NH " + sci(a.first) + ", APR " + sci(b.first) + "; halving dtau improves by NH " + sci(ra) + ", APR " + sci(rb)};
}

// ---------------------------------------------------------------------------

CheckResult liouville()
{
    const auto det = phase_volume_suite(1000, 1e-3);
    const auto tr = divergence_free_check(100);
    return {"phase-space volume preservation", det.passed && tr.passed, det.detail + "; " + tr.detail};
}

// ---------------------------------------------------------------------------
// Thermostat statistics: bulk LJ gas, virtual-time sampling

std::vector<Vec3> fcc_sites(int cells, double a)
{
    const Vec3 basis[4] = {Vec3(0, 0, 0), Vec3(0.5, 0.5, 0), Vec3(0.5, 0, 0.5), Vec3(0, 0.5, 0.5)};
    std::vector<Vec3> r;
    for (int i = 0; i < cells; ++i)
        for (int j = 0; j < cells; ++j)
            for (int k = 0; k < cells; ++k)
                for (const auto& b : basis) r.push_back(a * (Vec3(i, j, k) + b));
    return r;
}

CheckResult thermostat_statistics()
{
    const std::size_t N = 32, M = 64, steps = 10000, stride = 10, burn = 200;
    const double L = std::cbrt(N / 0.25);
    Interactions in;
    in.pair = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    in.box = L;
    const NHSystem sys(ParticleSet::uniform(N), in, NHParams{10.0, 1.0, 1.0});
    InitialDensity d;
    d.positions = InitialDensity::Positions::Explicit;
    d.explicit_positions = fcc_sites(2, L / 2);
    d.momenta = InitialDensity::Momenta::MaxwellBoltzmann;
    d.T0 = 1.0;
    d.zero_total_momentum = true;
    d.seed = 5;
    BatchOptions bo;
    bo.threads = workers();
    bo.stride = stride;
    const auto batch = run_batch(sys, d, M, IntegratorSpec{Scheme::ImplicitMidpoint, 0.005}, steps, bo);
    std::vector<double> per;
    for (const auto& tr : batch.trajectories) {
        double acc = 0.0;
        for (std::size_t i = burn; i < tr.size(); ++i) {
            const auto st = sys.unpack(tr.state(i));
            double twice_k = 0.0;
            for (std::size_t k = 0; k < N; ++k) twice_k += (st.p[k] / st.s).squaredNorm() / sys.particles().mass(k);
            acc += twice_k / (3.0 * N);
        }
        per.push_back(acc / double(tr.size() - burn));
    }
    const auto e = mean_and_se(per);
    return {"thermostat temperature (LJ N=32, M=64)", std::abs(e.mean - 1.0) <= 0.05,
            "<sum m v^2>/(3N kB) = " + sci(e.mean) + " +- " + sci(e.se) + " (target 1)"};
}

// ---------------------------------------------------------------------------
// Stress control: periodic harmonic simple-cubic lattice under hydrostatic load.
// Each of the 8 sites has six unit springs (24 bonds), so the enthalpy
// 12 k (lambda - 1)^2 - 3 omega p lambda is stationary at lambda = 1 + omega p / (8 k).

CheckResult stress_control()
{
    const double k = 1.0, omega = 8.0, pbar = 0.05;
    const double lambda = 1.0 + omega * pbar / (8.0 * k);
    Interactions in;
    in.pair = PairPotential::harmonic(k, 1.0, 1.2);
    APRParams ap;
    ap.periodic_cell = 2.0;
    ap.omega_ref = omega;
    ap.P = pbar * Mat3::Identity();
    const APRSystem sys(ParticleSet::uniform(8), in, ap);
    InitialDensity d;
    d.spacing = 1.0;
    d.origin = Vec3::Constant(0.5);
    d.momenta = InitialDensity::Momenta::MaxwellBoltzmann;
    d.T0 = 1e-3;
    d.zero_total_momentum = true;
    d.seed = 3;
    // start half way to the predicted cell; the cell then oscillates about its true equilibrium
    const double start = 1.0 + 0.5 * (lambda - 1.0);
    auto init = sample_initial(sys, d, 16);
    for (auto& z : init) {
        auto st = sys.unpack(z);
        st.F = start * Mat3::Identity();
        for (auto& p : st.p) p *= start;
        z = sys.pack(st);
    }
    BatchOptions bo;
    bo.threads = workers();
    bo.stride = 10;
    const auto batch = run_batch(sys, init, IntegratorSpec{Scheme::ImplicitMidpoint, 0.01}, 20000, bo);
    Mat3 avg = Mat3::Zero();
    std::size_t count = 0;
    for (const auto& tr : batch.trajectories)
        for (std::size_t i = 0; i < tr.size(); ++i, ++count) avg += sys.unpack(tr.state(i)).F;
    avg /= double(count);
    const double dev = (avg - lambda * Mat3::Identity()).cwiseAbs().maxCoeff() / lambda;
    return {"APR cell under hydrostatic load (harmonic N=8)", dev <= 0.02,
            "<F> diag " + sci(avg(0, 0)) + " " + sci(avg(1, 1)) + " " + sci(avg(2, 2)) + " vs lambda " + sci(lambda) +
                ", max relative deviation " + sci(dev)};
}

// ---------------------------------------------------------------------------
// Single-bond stress and heat flux against a direct node-by-node evaluation

CheckResult single_bond_oracle()
{
    const GridSpec grid = default_grid();
    const std::vector<Vec3> r{Vec3(-0.41, 0.23, 0.12), Vec3(0.62, -0.31, -0.27)};
    const std::vector<Vec3> v{Vec3(0.3, -0.2, 0.5), Vec3(-0.4, 0.1, 0.2)};
    const std::vector<double> m{1.0, 1.7};
    Interactions in;
    in.pair = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    const NVESystem sys(ParticleSet(m), in);
    EnsembleBatch b{Backend::NVE, {}};
    Trajectory tr(Backend::NVE, 1.0);
    tr.append(sys.pack(NVEState{r, {m[0] * v[0], m[1] * v[1]}}), 0.0, 0.0);
    b.trajectories.push_back(tr);
    const auto fs = extract_fields(sys, b, grid);

    const std::size_t nn = grid.node_count();
    const LucyKernel w{grid.h};
    auto normalized = [&](const Vec3& y) {
        std::vector<double> out(nn);
        double total = 0.0;
        for (std::size_t i = 0; i < nn; ++i) total += out[i] = w((grid.node(i) - y).norm());
        for (auto& x : out) x /= total * grid.cell_volume();
        return out;
    };
    const Vec3 x = r[0] - r[1];
    const double dist = x.norm();
    const double coef = in.pair.derivative(dist) / dist;
    const Vec3 vbar = 0.5 * (v[0] + v[1]);
    const BondQuadrature quad;
    std::vector<double> bond(nn, 0.0);
    for (int q = 0; q < BondQuadrature::size; ++q) {
        const auto wq = normalized(quad.alpha[q] * r[0] + (1.0 - quad.alpha[q]) * r[1]);
        for (std::size_t i = 0; i < nn; ++i) bond[i] += quad.weight[q] * wq[i];
    }
    const auto w0 = normalized(r[0]), w1 = normalized(r[1]);
    double err_t = 0.0, err_q = 0.0;
    for (std::size_t i = 0; i < nn; ++i) {
        const double rho = m[0] * w0[i] + m[1] * w1[i];
        const Vec3 vn = rho > fs.rho_floor ? Vec3((m[0] * w0[i] * v[0] + m[1] * w1[i] * v[1]) / rho) : Vec3::Zero();
        const Mat3 T = coef * bond[i] * (x * x.transpose());
        const Vec3 q = -coef * bond[i] * x.dot(vbar - vn) * x;
        for (int c = 0; c < 9; ++c) err_t = std::max(err_t, std::abs(fs.at(FieldId::T_V, 0, i, c) - T(c / 3, c % 3)));
        for (int c = 0; c < 3; ++c) err_q = std::max(err_q, std::abs(fs.at(FieldId::q_V, 0, i, c) - q(c)));
    }
    return {"single-bond T_V and q_V oracle", err_t <= 1e-8 && err_q <= 1e-8,
            "max node error T_V " + sci(err_t) + ", q_V " + sci(err_q)};
}

// ---------------------------------------------------------------------------
// Residual convergence with ensemble size and manufactured-field operator order

struct SmoothFields {
    template <class T> T operator()(FieldId id, int c, const T& t, const Vec3T<T>& x) const
    {
        using std::cos;
        using std::exp;
        using std::sin;
        const double a = 0.2 + 0.6 * std::fmod(0.137 * (static_cast<int>(id) + 1) + 0.05 * c, 1.0);
        return sin(a + (0.4 + a) * x(0) - 0.7 * t) * cos(0.35 * x(1) - a * t) * exp(-0.15 * x(2) * x(2)) + a;
    }
};

CheckResult residual_convergence()
{
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0);
    NHParams par;
    par.Q = 1.0;
    par.T_target = 0.5;
    const NHSystem sys(ParticleSet::uniform(2), in, par);
    InitialDensity d;
    d.positions = InitialDensity::Positions::Explicit;
    d.explicit_positions = {Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0)};
    d.jitter = 0.45;
    d.momenta = InitialDensity::Momenta::MaxwellBoltzmann;
    d.T0 = 0.3;
    d.sigma_s = 0.1;
    d.sigma_ps = 0.3;
    d.seed = 11;
    GridSpec g;
    g.lower = Vec3::Constant(-3.2);
    g.upper = Vec3::Constant(3.2);
    g.dx = 0.2;
    g.h = 0.6;
    const std::vector<double> Ms{64, 256, 1024};
    std::vector<std::vector<double>> l2(4);
    for (double M : Ms) {
        BatchOptions bo;
        bo.threads = workers();
        bo.stride = 10;
        const auto batch = run_batch(sys, d, std::size_t(M), IntegratorSpec{Scheme::ImplicitMidpoint, 0.01}, 20, bo);
        const auto fs = extract_fields(sys, batch, g, FieldOptions{workers()});
        const auto a = balance_report(fs, BalanceSpec{Backend::NH, EnergyMode::Collective});
        const auto c = balance_report(fs, BalanceSpec{Backend::NH, EnergyMode::Distributed});
        l2[0].push_back(a.entry("mass").l2);
        l2[1].push_back(a.entry("momentum").l2);
        l2[2].push_back(a.entry("energy_collective").l2);
        l2[3].push_back(c.entry("energy_distributed").l2);
    }
    bool ok = true;
    std::string detail = "slopes vs M:";
    const char* names[4] = {"mass", "momentum", "energy (collective)", "energy (distributed)"};
    for (int k = 0; k < 4; ++k) {
        const auto f = fit_loglog(Ms, l2[k]);
        ok = ok && f.slope >= -0.7 && f.slope <= -0.3;
        detail += std::string(k ? ", " : " ") + names[k] + " " + sci(f.slope);
    }

    // manufactured fields: error against the exact pointwise residual with dt proportional to dx
    const std::vector<double> dxs{0.2, 0.1, 0.05};
    double worst_order = 4.0, best_order = 0.0;
    for (Backend be : {Backend::NVE, Backend::NH, Backend::APR})
        for (EnergyMode mode : {EnergyMode::Collective, EnergyMode::Distributed}) {
            const ManufacturedFields<SmoothFields> mf{be, {}};
            const BalanceSpec spec{be, mode, 1};
            std::vector<std::vector<double>> err(3);
            for (double dx : dxs) {
                GridSpec gm;
                gm.lower = Vec3::Constant(-0.6);
                gm.upper = Vec3::Constant(0.6);
                gm.dx = dx;
                gm.h = 2 * dx;
                std::vector<double> ts;
                for (int i = 0; i < 5; ++i) ts.push_back(0.3 + i * 0.5 * dx);
                int bi = 0;
                for (Balance bal : {Balance::Mass, Balance::Momentum, Balance::Energy})
                    err[bi++].push_back(manufactured_error(mf, bal, spec, gm, ts));
            }
            for (const auto& e : err) {
                const double order = fit_loglog(dxs, e).slope;
                worst_order = std::min(worst_order, order);
                best_order = std::max(best_order, order);
            }
        }
    ok = ok && worst_order >= 1.7 && best_order <= 2.3;
    detail += "; manufactured order in dx=dt refinement " + sci(worst_order) + " .. " + sci(best_order);
    return {"balance residual convergence", ok, detail};
}

// ---------------------------------------------------------------------------
// Collective and distributed energy bookkeeping agree on box integrals

CheckResult mode_consistency()
{
    GridSpec g;
    g.lower = Vec3::Constant(-3.2);
    g.upper = Vec3::Constant(3.2);
    g.dx = 0.2;
    g.h = 0.6;
    const auto mask = interior_mask(g, default_layers(g));
    double nodes = 0.0;
    for (auto m : mask) nodes += m;
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0);
    NHParams par;
    par.Q = 1.0;
    par.T_target = 0.5;
    par.omega_ref = nodes * g.cell_volume(); // uniform densities then integrate to the same totals
    const NHSystem sys(ParticleSet::uniform(2), in, par);
    InitialDensity d;
    d.positions = InitialDensity::Positions::Explicit;
    d.explicit_positions = {Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0)};
    d.jitter = 0.2;
    d.momenta = InitialDensity::Momenta::MaxwellBoltzmann;
    d.T0 = 0.3;
    d.sigma_s = 0.1;
    d.sigma_ps = 0.3;
    std::vector<double> rc, rd;
    for (std::uint64_t batch_id = 0; batch_id < 16; ++batch_id) {
        d.seed = 100 + batch_id;
        BatchOptions bo;
        bo.threads = workers();
        bo.stride = 10;
        const auto batch = run_batch(sys, d, 64, IntegratorSpec{Scheme::ImplicitMidpoint, 0.01}, 20, bo);
        const auto fs = extract_fields(sys, batch, g, FieldOptions{workers()});
        auto integrated = [&](EnergyMode mode) {
            const auto rep = balance_report(fs, BalanceSpec{Backend::NH, mode});
            const auto& e = rep.entries.back();
            double s = 0.0;
            for (double x : e.integrated) s += x;
            return s / double(e.integrated.size());
        };
        rc.push_back(integrated(EnergyMode::Collective));
        rd.push_back(integrated(EnergyMode::Distributed));
    }
    const auto a = mean_and_se(rc), b = mean_and_se(rd);
    const double diff = std::abs(a.mean - b.mean), bound = 2.0 * std::sqrt(a.se * a.se + b.se * b.se);
    return {"collective vs distributed energy balance", diff <= bound,
            "box-integrated residual: collective " + sci(a.mean) + " +- " + sci(a.se) + ", distributed " + sci(b.mean) + " +- " +
                sci(b.se) + ", |diff| " + sci(diff) + " <= " + sci(bound)};
}

} // namespace

int main()
{
    const std::vector<std::function<CheckResult()>> criteria = {
        hamiltonian_conservation,
        liouville,
        thermostat_statistics,
        stress_control,
        [] { return gradient_cross_check(100); },
        [] { return normalization_check(); },
        single_bond_oracle,
        [] { return exact_zero_check(); },
        residual_convergence,
        [] { return backend_reduction_check(); },
        mode_consistency,
    };
    int failed = 0;
    for (const auto& run : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = run();
        } catch (const std::exception& e) {
            r = {"criterion raised", false, e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %s: %s [%.1fs]\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !r.passed;
    }
    std::printf("%d of %zu criteria passed\n", int(criteria.size()) - failed, criteria.size());
    return failed ? 1 : 0;
}
