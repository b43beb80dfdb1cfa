#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ikn {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

template <class T> using Vec3T = Eigen::Matrix<T, 3, 1>;
template <class T> using Mat3T = Eigen::Matrix<T, 3, 3>;
template <class T> using VecXT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr std::string_view version_string = "1.0.0";

// ---------------------------------------------------------------------------
// Errors

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid user input (configuration, parameters, indices).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure failed (non-convergence, invariant violation).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// A state violates its invariants (s <= 0, det F <= 0, coincident particles).
class StateError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ConvergenceError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

// ---------------------------------------------------------------------------
// Units and particles

enum class Backend { NVE, NH, APR };

inline std::string_view to_string(Backend b)
{
    switch (b) {
    case Backend::NVE: return "NVE";
    case Backend::NH: return "NH";
    case Backend::APR: return "APR";
    }
    return "?";
}

/// Reduced units by default: k_B = 1, LJ epsilon = sigma = 1.
struct Units {
    double kB = 1.0;

    explicit Units(double kB_ = 1.0) : kB(kB_)
    {
        if (!(kB > 0.0)) throw ConfigError("units.kB: must be > 0");
    }
};

class ParticleSet {
public:
    explicit ParticleSet(std::vector<double> masses) : masses_(std::move(masses))
    {
        if (masses_.empty()) throw ConfigError("particles: N must be >= 1");
        for (double m : masses_)
            if (!(m > 0.0)) throw ConfigError("particles.masses: every mass must be > 0");
    }

    static ParticleSet uniform(std::size_t n, double m = 1.0) { return ParticleSet(std::vector<double>(n, m)); }

    std::size_t size() const { return masses_.size(); }
    double mass(std::size_t k) const { return masses_[k]; }
    const std::vector<double>& masses() const { return masses_; }
    double total_mass() const
    {
        double s = 0.0;
        for (double m : masses_) s += m;
        return s;
    }

private:
    std::vector<double> masses_;
};

// ---------------------------------------------------------------------------
// States

struct NVEState {
    std::vector<Vec3> r;
    std::vector<Vec3> p;
};

/// Thermostat parameters; A = (3N+1) k_B T is derived from them.
struct NHParams {
    double Q = 10.0;
    double T_target = 1.0;
    double omega_ref = 1.0;

    void validate() const
    {
        if (!(Q > 0.0)) throw ConfigError("nh.Q: must be > 0");
        if (!(T_target > 0.0)) throw ConfigError("nh.T_target: must be > 0");
        if (!(omega_ref > 0.0)) throw ConfigError("nh.omega_ref: must be > 0");
    }

    double entropic_coefficient(std::size_t n, const Units& u) const
    {
        return (3.0 * static_cast<double>(n) + 1.0) * u.kB * T_target;
    }
};

/// Virtual momenta p_k relate to physical ones through p_k / s = m_k v_k.
struct NHState {
    std::vector<Vec3> r;
    std::vector<Vec3> p;
    double s = 1.0;
    double ps = 0.0;
};

enum class APRKinetic { ParrinelloRahman, ExactMinimalNorm };

struct APRParams {
    double W = 20.0;
    double omega_ref = 1.0;
    Mat3 P = Mat3::Zero();
    APRKinetic kinetic = APRKinetic::ParrinelloRahman;
    /// Side of the referential periodic cell; zero means open boundaries.
    double periodic_cell = 0.0;

    void validate() const
    {
        if (!(W > 0.0)) throw ConfigError("apr.W: must be > 0");
        if (!(omega_ref > 0.0)) throw ConfigError("apr.omega_ref: must be > 0");
        if (periodic_cell < 0.0) throw ConfigError("apr.periodic_cell: must be >= 0");
        if (!P.allFinite()) throw ConfigError("apr.P: must be finite");
    }
};

/// Current positions follow r_k = F s_k.
struct APRState {
    std::vector<Vec3> s;
    std::vector<Vec3> p;
    Mat3 F = Mat3::Identity();
    Mat3 G = Mat3::Zero();
};

inline constexpr double singular_det_tolerance = 1e-12;

inline void check_index(std::size_t k, std::size_t n)
{
    if (k >= n)
        throw ConfigError("particle index " + std::to_string(k) + " out of range (N = " + std::to_string(n) + ")");
}

inline Vec3 physical_momentum_nh(const NHState& state, std::size_t k)
{
    check_index(k, state.p.size());
    if (!(state.s > 0.0)) throw StateError("NH state has s <= 0");
    return state.p[k] / state.s;
}

inline Vec3 physical_velocity_apr(const APRState& state, const ParticleSet& particles, std::size_t k)
{
    check_index(k, state.p.size());
    const double det = state.F.determinant();
    if (std::abs(det) <= singular_det_tolerance) throw StateError("APR cell tensor F is singular");
    return state.F.inverse().transpose() * state.p[k] / particles.mass(k);
}

inline std::vector<Vec3> current_positions_apr(const APRState& state)
{
    if (!(state.F.determinant() > 0.0)) throw StateError("APR cell tensor F has det <= 0");
    std::vector<Vec3> r;
    r.reserve(state.s.size());
    for (const auto& sk : state.s) r.push_back(state.F * sk);
    return r;
}

// ---------------------------------------------------------------------------
// Trajectories

struct ConservationMonitor {
    double H0 = 0.0;
    double max_rel_drift = 0.0;
    double max_momentum_drift = 0.0; ///< NVE only
    Vec3 momentum0 = Vec3::Zero();
    bool track_momentum = false;

    void start(double H, const Vec3* momentum)
    {
        H0 = H;
        max_rel_drift = 0.0;
        max_momentum_drift = 0.0;
        track_momentum = momentum != nullptr;
        if (momentum) momentum0 = *momentum;
    }

    void record(double H, const Vec3* momentum)
    {
        max_rel_drift = std::max(max_rel_drift, std::abs(H - H0) / std::max(1.0, std::abs(H0)));
        if (track_momentum && momentum)
            max_momentum_drift = std::max(max_momentum_drift, (*momentum - momentum0).lpNorm<Eigen::Infinity>());
    }
};

/// Append-only series of phase-space samples. For NH, t is the physical
/// time obtained from the virtual time tau; for NVE and APR, t == tau.
class Trajectory {
public:
    Trajectory() = default;
    Trajectory(Backend backend, double dtau) : backend_(backend), dtau_(dtau) {}

    void append(VecX z, double tau, double t)
    {
        if (!tau_.empty()) {
            if (!(tau > tau_.back())) throw NumericalError("trajectory: virtual time must increase strictly");
            if (!(t > t_.back())) throw NumericalError("trajectory: physical time must increase strictly");
        }
        states_.push_back(std::move(z));
        tau_.push_back(tau);
        t_.push_back(t);
    }

    Backend backend() const { return backend_; }
    double dtau() const { return dtau_; }
    std::size_t size() const { return states_.size(); }
    bool empty() const { return states_.empty(); }
    const VecX& state(std::size_t i) const { return states_[i]; }
    const std::vector<VecX>& states() const { return states_; }
    const std::vector<double>& tau() const { return tau_; }
    const std::vector<double>& t() const { return t_; }
    const VecX& back() const { return states_.back(); }

    ConservationMonitor monitor;

private:
    Backend backend_ = Backend::NVE;
    double dtau_ = 0.0;
    std::vector<VecX> states_;
    std::vector<double> tau_;
    std::vector<double> t_;
};

} // namespace ikn
