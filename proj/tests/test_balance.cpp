#include <ikn/balance.hpp>

#include <gtest/gtest.h>

using namespace ikn;

namespace {

GridSpec grid_with(double dx, double half = 2.0, double h = 0.6)
{
    GridSpec g;
    g.lower = Vec3::Constant(-half);
    g.upper = Vec3::Constant(half);
    g.dx = dx;
    g.h = h;
    return g;
}

std::vector<double> sample_vector(const GridSpec& g, const std::function<Vec3(const Vec3&)>& f)
{
    std::vector<double> out(3 * g.node_count());
    for (std::size_t i = 0; i < g.node_count(); ++i) {
        const Vec3 v = f(g.node(i));
        for (int a = 0; a < 3; ++a) out[3 * i + a] = v(a);
    }
    return out;
}

double max_interior_error(const GridSpec& g, const std::vector<double>& d, const std::function<double(const Vec3&)>& exact)
{
    const auto mask = interior_mask(g, 1);
    double err = 0.0;
    for (std::size_t i = 0; i < g.node_count(); ++i)
        if (mask[i]) err = std::max(err, std::abs(d[i] - exact(g.node(i))));
    return err;
}

EnsembleBatch static_batch(Backend b, const VecX& z, std::size_t copies, std::size_t times)
{
    EnsembleBatch batch;
    batch.backend = b;
    for (std::size_t m = 0; m < copies; ++m) {
        Trajectory tr(b, 0.1);
        for (std::size_t t = 0; t < times; ++t) tr.append(z, 0.1 * t, 0.1 * t);
        batch.trajectories.push_back(tr);
    }
    return batch;
}

Interactions rest_length_bonds()
{
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0);
    return in;
}

/// Smooth analytic field family, distinct per (field, component).
struct Smooth {
    template <class T> T operator()(FieldId id, int c, const T& t, const Vec3T<T>& x) const
    {
        using std::cos;
        using std::exp;
        using std::sin;
        const double a = 0.13 * (static_cast<int>(id) + 1) + 0.07 * c;
        return sin(a + (0.5 + a) * x(0) - 0.8 * t) * cos(0.3 * x(1) - a * t) * exp(-0.1 * x(2) * x(2)) + a;
    }
};

} // namespace

TEST(Operators, DivergenceOfConstantAndAffineFields)
{
    const auto g = grid_with(0.25);
    const auto c = divergence(g, sample_vector(g, [](const Vec3&) { return Vec3(1.5, -2.0, 0.3); }));
    EXPECT_EQ(max_interior_error(g, c, [](const Vec3&) { return 0.0; }), 0.0);
    Mat3 A;
    A << 0.3, -1.2, 0.5, 2.0, -0.7, 0.1, 0.4, 0.9, 1.1;
    const auto d = divergence(g, sample_vector(g, [&](const Vec3& x) { return Vec3(A * x + Vec3(1, 2, 3)); }));
    EXPECT_NEAR(max_interior_error(g, d, [&](const Vec3&) { return A.trace(); }), 0.0, 1e-12);
}

TEST(Operators, DivergenceIsSecondOrder)
{
    auto f = [](const Vec3& x) { return Vec3(std::sin(x(0)) * x(1), std::cos(x(1)) + x(2) * x(2), std::sin(x(2) + x(0))); };
    auto exact = [](const Vec3& x) { return std::cos(x(0)) * x(1) - std::sin(x(1)) + std::cos(x(2) + x(0)); };
    const auto g1 = grid_with(0.2), g2 = grid_with(0.1);
    const double e1 = max_interior_error(g1, divergence(g1, sample_vector(g1, f)), exact);
    const double e2 = max_interior_error(g2, divergence(g2, sample_vector(g2, f)), exact);
    EXPECT_NEAR(e1 / e2, 4.0, 0.3);
}

TEST(Operators, TensorDivergenceContractsFirstIndex)
{
    // T_ji = r_j B_i: sum_j d_j T_ji = 3 B_i, while the other contraction gives B_i
    const auto g = grid_with(0.25);
    const Vec3 B(0.5, -1.0, 2.0);
    std::vector<double> Tf(9 * g.node_count());
    for (std::size_t n = 0; n < g.node_count(); ++n) {
        const Vec3 r = g.node(n);
        for (int j = 0; j < 3; ++j)
            for (int i = 0; i < 3; ++i) Tf[9 * n + 3 * j + i] = r(j) * B(i);
    }
    const auto d = divergence_tensor(g, Tf);
    const auto mask = interior_mask(g, 1);
    for (std::size_t n = 0; n < g.node_count(); ++n)
        if (mask[n]) {
            for (int i = 0; i < 3; ++i) EXPECT_NEAR(d[3 * n + i], 3.0 * B(i), 1e-12);
        }
}

TEST(Operators, TimeDerivative)
{
    std::vector<double> t{0.0, 0.5, 1.0, 1.5};
    std::vector<std::vector<double>> lin, cst;
    for (double x : t) {
        lin.push_back({2.0 * x - 1.0, -x});
        cst.push_back({3.0, 3.0});
    }
    const auto dl = time_derivative(lin, t);
    ASSERT_EQ(dl.size(), 2u);
    for (const auto& d : dl) {
        EXPECT_NEAR(d[0], 2.0, 1e-14);
        EXPECT_NEAR(d[1], -1.0, 1e-14);
    }
    for (const auto& d : time_derivative(cst, t)) EXPECT_EQ(d[0], 0.0);
    EXPECT_THROW(time_derivative({{1.0}, {2.0}}, {0.0, 1.0}), ConfigError);

    auto err = [](double dt) {
        std::vector<double> ts;
        std::vector<std::vector<double>> s;
        for (int i = 0; i * dt <= 1.0 + 1e-12; ++i) {
            ts.push_back(i * dt);
            s.push_back({std::sin(3.0 * i * dt)});
        }
        const auto d = time_derivative(s, ts);
        double e = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) e = std::max(e, std::abs(d[i][0] - 3.0 * std::cos(3.0 * ts[i + 1])));
        return e;
    };
    EXPECT_NEAR(err(0.05) / err(0.025), 4.0, 0.2);
}

TEST(Operators, MaskExcludesBoundaryLayers)
{
    const auto g = grid_with(0.2);
    EXPECT_EQ(default_layers(g), 4);
    const auto mask = interior_mask(g, 4);
    std::size_t count = 0;
    for (auto m : mask) count += m;
    EXPECT_EQ(count, 13u * 13u * 13u);
    EXPECT_THROW(interior_mask(g, 11), ConfigError);
}

TEST(Balance, StaticForceFreeConfigurationsGiveZeroResiduals)
{
    const auto grid = grid_with(0.2);
    const std::vector<Vec3> p(3, Vec3::Zero());
    // separation 1 = rest length for the first bond; the third particle sits
    // beyond the cutoff of both others
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0, 1.02);
    const std::vector<Vec3> rr{Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0), Vec3(0.0, 0.0, 1.1)};

    NVESystem nve(ParticleSet::uniform(3), in);
    NHSystem nh(ParticleSet::uniform(3), in, NHParams{});
    APRSystem apr(ParticleSet::uniform(3), in, APRParams{});
    const auto fn = extract_fields(nve, static_batch(Backend::NVE, nve.pack(NVEState{rr, p}), 2, 4), grid);
    const auto fh = extract_fields(nh, static_batch(Backend::NH, nh.pack(NHState{rr, p, 1.0, 0.0}), 2, 4), grid);
    const auto fa = extract_fields(apr, static_batch(Backend::APR, apr.pack(APRState{rr, p, Mat3::Identity(), Mat3::Zero()}), 2, 4), grid);
    for (EnergyMode mode : {EnergyMode::Collective, EnergyMode::Distributed}) {
        for (const auto* fs : {&fn, &fh, &fa}) {
            const auto rep = balance_report(*fs, BalanceSpec{fs->backend, mode});
            for (const auto& e : rep.entries) EXPECT_LE(e.linf, 1e-10) << e.name;
        }
    }
}

TEST(Balance, NoseHooverAtUnitScaleMatchesNVE)
{
    const auto grid = grid_with(0.2);
    const std::vector<Vec3> r{Vec3(-0.5, 0.1, 0), Vec3(0.4, -0.2, 0.3)};
    NVESystem nve(ParticleSet::uniform(2), rest_length_bonds());
    NHSystem nh(ParticleSet::uniform(2), rest_length_bonds(), NHParams{});
    // shared trajectory: NVE integration, mapped onto NH with s = 1, p_s = 0
    const VecX z0 = nve.pack(NVEState{r, {Vec3(0.3, -0.1, 0.2), Vec3(-0.3, 0.1, -0.2)}});
    auto traj = integrate(nve, z0, 8, IntegratorSpec{Scheme::ImplicitMidpoint, 0.02}, IntegrateOptions{2, {}});
    EnsembleBatch bn{Backend::NVE, {traj}}, bh{Backend::NH, {}};
    Trajectory th(Backend::NH, 0.02);
    for (std::size_t i = 0; i < traj.size(); ++i) {
        const auto st = nve.unpack(traj.state(i));
        th.append(nh.pack(NHState{st.r, st.p, 1.0, 0.0}), traj.tau()[i], traj.t()[i]);
    }
    bh.trajectories.push_back(th);
    const auto fa = extract_fields(nve, bn, grid);
    const auto fb = extract_fields(nh, bh, grid);
    const auto ra = balance_report(fa, BalanceSpec{Backend::NVE});
    const auto rb = balance_report(fb, BalanceSpec{Backend::NH, EnergyMode::Collective});
    for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(ra.entries[e].residual, rb.entries[e].residual) << ra.entries[e].name;
}

TEST(Balance, DriftingFreeParticleResidualDecaysWithEnsembleSize)
{
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0, 0.5);
    NVESystem sys(ParticleSet::uniform(1), in);
    InitialDensity d;
    d.positions = InitialDensity::Positions::Explicit;
    d.explicit_positions = {Vec3::Zero()};
    d.jitter = 0.4;
    d.momenta = InitialDensity::Momenta::MaxwellBoltzmann;
    d.T0 = 0.05;
    d.seed = 5;
    auto relative = [&](std::size_t M) {
        auto z = sample_initial(sys, d, M);
        for (auto& zi : z) zi.tail(3) += Vec3(0.3, 0.0, 0.0);
        const auto batch = run_batch(sys, z, IntegratorSpec{Scheme::ImplicitMidpoint, 0.01}, 8, BatchOptions{4, 2, {}});
        const auto fs = extract_fields(sys, batch, grid_with(0.2, 3.0), FieldOptions{4});
        return mass_balance_residual(fs, BalanceSpec{Backend::NVE}).relative;
    };
    const double r256 = relative(256), r1024 = relative(1024);
    // per-sample stencil error at h = 3 dx dominates; it averages out as M grows
    EXPECT_LT(r256, 0.3);
    EXPECT_LT(r1024, 0.8 * r256);
}

TEST(Balance, ManufacturedFieldsConvergeAtSecondOrder)
{
    for (Backend be : {Backend::NVE, Backend::NH, Backend::APR})
        for (EnergyMode mode : {EnergyMode::Collective, EnergyMode::Distributed}) {
            ManufacturedFields<Smooth> mf{be, {}};
            BalanceSpec spec{be, mode, 1};
            auto err = [&](double dx, double dt) {
                std::vector<double> ts;
                for (int i = 0; i < 5; ++i) ts.push_back(0.3 + i * dt);
                return std::array<double, 3>{manufactured_error(mf, Balance::Mass, spec, grid_with(dx, 1.0, 2 * dx), ts),
                                             manufactured_error(mf, Balance::Momentum, spec, grid_with(dx, 1.0, 2 * dx), ts),
                                             manufactured_error(mf, Balance::Energy, spec, grid_with(dx, 1.0, 2 * dx), ts)};
            };
            const auto e1 = err(0.2, 0.1), e2 = err(0.1, 0.05);
            for (int b = 0; b < 3; ++b) {
                const double ratio = e1[b] / e2[b];
                EXPECT_GT(ratio, 3.0) << int(be) << " " << b;
                EXPECT_LT(ratio, 5.0) << int(be) << " " << b;
            }
        }
}

TEST(Balance, MissingFieldsAndMismatchesAreErrors)
{
    ManufacturedFields<Smooth> mf{Backend::NH, {}};
    const auto g = grid_with(0.2, 1.0, 0.4);
    const auto fs = mf.sample(g, {0.0, 0.1, 0.2}, {FieldId::rho, FieldId::rho_v});
    EXPECT_THROW(mass_balance_residual(fs, BalanceSpec{Backend::NH}), ConfigError);
    EXPECT_THROW(mass_balance_residual(fs, BalanceSpec{Backend::NVE}), ConfigError);
    const auto ok = mf.sample(g, {0.0, 0.1, 0.2}, {FieldId::rho_sw, FieldId::rho_v, FieldId::sigma_rho});
    EXPECT_NO_THROW(mass_balance_residual(ok, BalanceSpec{Backend::NH}));
    const auto short_series = mf.sample(g, {0.0, 0.1}, {FieldId::rho_sw, FieldId::rho_v, FieldId::sigma_rho});
    EXPECT_THROW(mass_balance_residual(short_series, BalanceSpec{Backend::NH}), ConfigError);
}

TEST(Convergence, SlopeFit)
{
    const std::vector<double> M{64, 256, 1024};
    std::vector<double> y;
    for (double m : M) y.push_back(3.0 / std::sqrt(m));
    const auto f = fit_loglog(M, y);
    EXPECT_NEAR(f.slope, -0.5, 1e-12);
    EXPECT_NEAR(f.slope_se, 0.0, 1e-12);
    EXPECT_THROW(fit_loglog({1, 2}, {1, 2}), ConfigError);
}

TEST(Convergence, StaticResidualIndependentOfEnsembleSize)
{
    const auto grid = grid_with(0.2);
    Interactions in;
    in.pair = PairPotential::harmonic(1.0, 1.0, 1.02);
    NVESystem nve(ParticleSet::uniform(2), in);
    const VecX z = nve.pack(NVEState{{Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0)}, {Vec3::Zero(), Vec3::Zero()}});
    auto make = [&](std::size_t M) { return balance_report(extract_fields(nve, static_batch(Backend::NVE, z, M, 3), grid), BalanceSpec{}); };
    EXPECT_THROW(convergence_report(make, {1, 2}), ConfigError);
    std::vector<double> norms;
    for (std::size_t M : {1, 4, 16}) norms.push_back(make(M).entries[0].l2);
    EXPECT_EQ(norms[0], norms[1]);
    EXPECT_EQ(norms[1], norms[2]);
}
