#include <ikn/potentials.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace ikn;

namespace {

double fd_total(const std::vector<Vec3>& r, const PairPotential& pp, const ExternalPotential& ext, std::size_t k, int a,
                double h, const Mat3* cell = nullptr)
{
    auto rp = r, rm = r;
    rp[k](a) += h;
    rm[k](a) -= h;
    return (total_potential(rp, pp, ext, cell) - total_potential(rm, pp, ext, cell)) / (2.0 * h);
}

} // namespace

TEST(Potentials, PairExamples)
{
    const auto lj = PairPotential::lennard_jones();
    const double rmin = std::pow(2.0, 1.0 / 6.0);
    EXPECT_NEAR(pair_energy(lj, rmin), -1.0, 1e-14);
    EXPECT_NEAR(pair_force_scalar(lj, rmin), 0.0, 1e-13);
    EXPECT_EQ(pair_energy(lj, 1.0), 0.0);
    EXPECT_EQ(pair_force_scalar(lj, 1.0), -24.0);

    const auto hb = PairPotential::harmonic(1.0, 1.0);
    EXPECT_EQ(pair_energy(hb, 1.0), 0.0);
    EXPECT_EQ(pair_force_scalar(hb, 1.0), 0.0);

    EXPECT_THROW(pair_energy(lj, 0.0), ConfigError);
    EXPECT_THROW(pair_force_scalar(lj, -1.0), ConfigError);
}

TEST(Potentials, CutoffIsC1)
{
    const auto lj = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    EXPECT_LE(std::abs(lj.derivative(2.5 - 1e-12)), 1e-12);
    EXPECT_LE(std::abs(lj.energy(2.5 - 1e-12)), 1e-12);
    EXPECT_EQ(lj.energy(2.6), 0.0);
    EXPECT_EQ(lj.derivative(2.6), 0.0);
}

TEST(Potentials, TotalPotentialExamples)
{
    const auto hb = PairPotential::harmonic(1.0, 1.0);
    const ExternalPotential none;
    EXPECT_EQ(total_potential({Vec3::Zero(), Vec3(1, 0, 0)}, hb, none), 0.0);
    EXPECT_EQ(total_potential({Vec3::Zero(), Vec3(2, 0, 0)}, hb, none), 0.5);

    // brute-force value from tests/oracles/hamiltonians.py
    const std::vector<Vec3> c4 = {Vec3(0, 0, 0), Vec3(1.1, 0.05, -0.02), Vec3(0.1, 1.05, 0.2), Vec3(0.55, 0.6, 1.0)};
    EXPECT_NEAR(total_potential(c4, PairPotential::lennard_jones(), none), -4.11372621909607, 1e-12);

    EXPECT_THROW(total_potential({Vec3::Zero(), Vec3::Zero()}, hb, none), StateError);
}

TEST(Potentials, ForceExamples)
{
    const auto lj = PairPotential::lennard_jones();
    const auto field = ExternalPotential::uniform_field(Vec3(0, 0, -1));
    EXPECT_EQ(force_on_particle({Vec3(0.3, 0.1, 2.0)}, lj, field, 0), Vec3(0, 0, 1));

    const double rmin = std::pow(2.0, 1.0 / 6.0);
    const Vec3 f = force_on_particle({Vec3::Zero(), Vec3(rmin, 0, 0)}, lj, ExternalPotential{}, 0);
    EXPECT_LE(f.norm(), 1e-12);

    const Vec3 c(0.2, -0.1, 0.4);
    const auto trap = ExternalPotential::harmonic_trap(3.0, c);
    EXPECT_EQ(force_on_particle({c}, PairPotential::harmonic(), trap, 0), Vec3::Zero());
}

TEST(Potentials, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-0.15, 0.15);
    const auto lj = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    const auto trap = ExternalPotential::harmonic_trap(0.7, Vec3(0.1, 0.2, 0.3));
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Vec3> r;
        for (int i = 0; i < 5; ++i) r.push_back(Vec3(1.1 * (i % 2), 1.1 * ((i / 2) % 2), 1.1 * (i / 4)) + Vec3(u(rng), u(rng), u(rng)));
        const auto f = forces(r, lj, trap);
        for (std::size_t k = 0; k < r.size(); ++k)
            for (int a = 0; a < 3; ++a) {
                const double ref = -fd_total(r, lj, trap, k, a, 1e-5);
                EXPECT_LE(std::abs(f[k](a) - ref), 1e-6 * std::max(1.0, std::abs(ref)));
            }
    }
}

TEST(Potentials, NewtonThirdLawAndTranslationInvariance)
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    std::vector<Vec3> r;
    for (int i = 0; i < 8; ++i) r.push_back(Vec3(1.12 * (i % 2), 1.12 * ((i / 2) % 2), 1.12 * (i / 4)) + Vec3(u(rng), u(rng), u(rng)));
    const auto lj = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    const auto f = forces(r, lj, ExternalPotential{});
    Vec3 total = Vec3::Zero();
    for (const auto& fk : f) total += fk;
    EXPECT_LE(total.lpNorm<Eigen::Infinity>(), 1e-12);

    const auto f2 = forces({r[0], r[1]}, lj, ExternalPotential{});
    EXPECT_EQ(f2[0], Vec3(-f2[1]));
}

TEST(Potentials, PeriodicImagesMatchExplicitReplicas)
{
    // Two particles in a cube of side 3 with rc = 2.5: compare against an
    // explicit replica sum over the 5^3 neighbouring cells.
    const double L = 3.0;
    const auto lj = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    const std::vector<Vec3> r = {Vec3(0.2, 0.1, 0.3), Vec3(1.3, 0.4, 2.6)};
    double ref = 0.0;
    for (int a = -2; a <= 2; ++a)
        for (int b = -2; b <= 2; ++b)
            for (int c = -2; c <= 2; ++c) {
                const Vec3 n(a, b, c);
                for (std::size_t j = 0; j < 2; ++j)
                    for (std::size_t k = 0; k < 2; ++k) {
                        if (j == k && n.isZero()) continue;
                        const double d = (r[j] - r[k] + L * n).norm();
                        if (d < 2.5) ref += 0.5 * lj.energy(d);
                    }
            }
    const Mat3 cell = L * Mat3::Identity();
    EXPECT_NEAR(total_potential(r, lj, ExternalPotential{}, &cell), ref, 1e-12);

    const auto f = forces(r, lj, ExternalPotential{}, &cell);
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(f[0](a), -fd_total(r, lj, ExternalPotential{}, 0, a, 1e-5, &cell), 1e-6);

    EXPECT_THROW(total_potential(r, PairPotential::lennard_jones(), ExternalPotential{}, &cell), ConfigError);
}

TEST(Potentials, VirialIsStrainDerivative)
{
    // d/deps V(exp(eps) r) at eps = 0 equals tr W.
    const auto lj = PairPotential::lennard_jones(1.0, 1.0, 2.5);
    const std::vector<Vec3> r = {Vec3(0, 0, 0), Vec3(1.1, 0.1, 0), Vec3(0.2, 1.0, 0.3)};
    auto scaled = [&](double e) {
        std::vector<Vec3> q = r;
        for (auto& x : q) x *= std::exp(e);
        return total_potential(q, lj, ExternalPotential{});
    };
    const double fd = (scaled(1e-6) - scaled(-1e-6)) / 2e-6;
    EXPECT_NEAR(pair_sum<double>(r, lj).virial.trace(), fd, 1e-6);
}
