#include <ikn/core.hpp>

#include <gtest/gtest.h>

using namespace ikn;

TEST(Core, PhysicalMomentumNH)
{
    NHState st;
    st.r = {Vec3::Zero()};
    st.p = {Vec3(2, 0, 0)};
    st.s = 1.0;
    EXPECT_EQ(physical_momentum_nh(st, 0), Vec3(2, 0, 0));
    st.s = 2.0;
    EXPECT_EQ(physical_momentum_nh(st, 0), Vec3(1, 0, 0));
    st.p[0].setZero();
    st.s = 3.7;
    EXPECT_EQ(physical_momentum_nh(st, 0), Vec3::Zero());
}

TEST(Core, PhysicalMomentumScalesInverselyWithS)
{
    NHState st;
    st.r = {Vec3::Zero()};
    st.p = {Vec3(0.3, -1.7, 2.9)};
    st.s = 0.83;
    const Vec3 a = physical_momentum_nh(st, 0);
    st.s *= 2.0;
    EXPECT_EQ(physical_momentum_nh(st, 0), a / 2.0);
}

TEST(Core, PhysicalMomentumErrors)
{
    NHState st;
    st.r = {Vec3::Zero()};
    st.p = {Vec3::Zero()};
    EXPECT_THROW(physical_momentum_nh(st, 1), ConfigError);
    st.s = 0.0;
    EXPECT_THROW(physical_momentum_nh(st, 0), StateError);
}

TEST(Core, PhysicalVelocityAPR)
{
    const auto parts = ParticleSet::uniform(2);
    APRState st;
    st.s = {Vec3::Zero(), Vec3::Zero()};
    st.p = {Vec3(1, 0, 0), Vec3(-0.4, 0.25, 0.1)};
    EXPECT_TRUE(physical_velocity_apr(st, parts, 0).isApprox(Vec3(1, 0, 0)));
    st.F = Vec3(2, 1, 1).asDiagonal();
    st.p[0] = Vec3(2, 0, 0);
    EXPECT_TRUE(physical_velocity_apr(st, parts, 0).isApprox(Vec3(1, 0, 0)));

    // adjugate inverse computed in tests/oracles/hamiltonians.py
    st.F << 1.1, 0.05, -0.02, 0.03, 0.95, 0.04, -0.01, 0.02, 1.05;
    const Vec3 ref(-0.37059657053481126, 0.28103196406269854, 0.07747313335885317);
    EXPECT_LE((physical_velocity_apr(st, parts, 1) - ref).lpNorm<Eigen::Infinity>(), 1e-12);

    st.F.setZero();
    EXPECT_THROW(physical_velocity_apr(st, parts, 0), StateError);
}

TEST(Core, CurrentPositionsAPR)
{
    APRState st;
    st.s = {Vec3(1, 1, 1), Vec3(0, 1, 0)};
    st.p = {Vec3::Zero(), Vec3::Zero()};
    EXPECT_EQ(current_positions_apr(st)[0], Vec3(1, 1, 1));
    st.F = 2.0 * Mat3::Identity();
    EXPECT_EQ(current_positions_apr(st)[0], Vec3(2, 2, 2));
    st.F = Mat3::Identity();
    st.F(0, 1) = 0.5;
    EXPECT_EQ(current_positions_apr(st)[1], Vec3(0.5, 1, 0));
}

TEST(Core, ParticleSetInvariants)
{
    EXPECT_THROW(ParticleSet(std::vector<double>{}), ConfigError);
    EXPECT_THROW(ParticleSet(std::vector<double>{1.0, -1.0}), ConfigError);
    EXPECT_THROW(Units(0.0), ConfigError);
    EXPECT_DOUBLE_EQ(ParticleSet({1.0, 2.5}).total_mass(), 3.5);
}

TEST(Core, NHParamsDeriveA)
{
    NHParams p;
    p.T_target = 2.0;
    EXPECT_DOUBLE_EQ(p.entropic_coefficient(4, Units(0.5)), 13.0);
    p.Q = -1.0;
    try {
        p.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("nh.Q"), std::string::npos);
    }
}

TEST(Core, TrajectoryClockMustIncrease)
{
    Trajectory tr(Backend::NH, 0.1);
    tr.append(VecX::Zero(2), 0.0, 0.0);
    tr.append(VecX::Zero(2), 0.1, 0.05);
    EXPECT_THROW(tr.append(VecX::Zero(2), 0.1, 0.1), NumericalError);
    EXPECT_THROW(tr.append(VecX::Zero(2), 0.2, 0.05), NumericalError);
    EXPECT_EQ(tr.size(), 2u);
}
