#pragma once

#include "dynamics.hpp"

#include <atomic>
#include <cstdint>
#include <mutex>
#include <random>
#include <thread>

namespace ikn {

// ---------------------------------------------------------------------------
// Worker pool

inline unsigned resolve_threads(unsigned requested)
{
    if (requested > 0) return requested;
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items write to
/// disjoint slots, so results do not depend on scheduling. The first
/// exception (lowest index) is rethrown after all workers finish.
template <class Fn> void parallel_for(std::size_t n, unsigned threads, Fn&& fn)
{
    const unsigned w = std::min<std::size_t>(resolve_threads(threads), std::max<std::size_t>(n, 1));
    std::vector<std::exception_ptr> errors(n);
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < w; ++t)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Random streams

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent engine for sample k of a batch seeded with `seed`.
inline std::mt19937_64 sample_stream(std::uint64_t seed, std::uint64_t k)
{
    return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(k + 0x632BE59BD9B4E019ull)));
}

// ---------------------------------------------------------------------------
// Initial density

struct InitialDensity {
    enum class Positions { Lattice, Explicit };
    enum class Momenta { MaxwellBoltzmann, Zero };

    Positions positions = Positions::Lattice;
    double spacing = 1.12;          ///< simple-cubic lattice constant
    Vec3 origin = Vec3::Zero();
    double jitter = 0.0;            ///< Gaussian positional sd
    std::vector<Vec3> explicit_positions;

    Momenta momenta = Momenta::Zero;
    double T0 = 1.0;
    bool zero_total_momentum = false;

    double sigma_s = 0.0;   ///< NH: s = exp(sigma_s N(0,1))
    double sigma_ps = 0.0;  ///< NH: p_s ~ N(0, sigma_ps)
    double sigma_F = 0.0;   ///< APR: F = I + sigma_F N(0,1) entrywise

    std::uint64_t seed = 0;
    double kB = 1.0;

    void validate(std::size_t n) const
    {
        if (positions == Positions::Explicit && explicit_positions.size() != n)
            throw ConfigError("ensemble.density.positions: expected " + std::to_string(n) + " explicit positions");
        if (positions == Positions::Lattice && !(spacing > 0.0)) throw ConfigError("ensemble.density.spacing: must be > 0");
        if (jitter < 0.0 || sigma_s < 0.0 || sigma_ps < 0.0 || sigma_F < 0.0)
            throw ConfigError("ensemble.density: spreads must be >= 0");
        if (momenta == Momenta::MaxwellBoltzmann && !(T0 > 0.0)) throw ConfigError("ensemble.density.T0: must be > 0");
        if (!(kB > 0.0)) throw ConfigError("units.kB: must be > 0");
    }
};

inline constexpr int resample_cap = 100;

/// Sites of a simple-cubic lattice filled row by row.
inline std::vector<Vec3> lattice_sites(std::size_t n, double spacing, const Vec3& origin)
{
    const auto side = static_cast<std::size_t>(std::ceil(std::cbrt(static_cast<double>(n)) - 1e-9));
    std::vector<Vec3> r;
    r.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        r.push_back(origin + spacing * Vec3(double(i % side), double((i / side) % side), double(i / (side * side))));
    return r;
}

namespace detail {

inline bool separated(const std::vector<Vec3>& r)
{
    for (std::size_t j = 0; j < r.size(); ++j)
        for (std::size_t k = j + 1; k < r.size(); ++k)
            if ((r[j] - r[k]).norm() <= coincidence_tolerance) return false;
    return true;
}

struct PhysicalDraw {
    std::vector<Vec3> r;
    std::vector<Vec3> p; ///< physical momenta m v
};

inline PhysicalDraw draw_physical(const InitialDensity& d, const ParticleSet& parts, std::mt19937_64& rng)
{
    std::normal_distribution<double> g(0.0, 1.0);
    const auto n = parts.size();
    PhysicalDraw out;
    out.r = d.positions == InitialDensity::Positions::Explicit ? d.explicit_positions : lattice_sites(n, d.spacing, d.origin);
    if (d.jitter > 0.0)
        for (auto& x : out.r) x += d.jitter * Vec3(g(rng), g(rng), g(rng));
    out.p.assign(n, Vec3::Zero());
    if (d.momenta == InitialDensity::Momenta::MaxwellBoltzmann) {
        for (std::size_t k = 0; k < n; ++k) out.p[k] = std::sqrt(parts.mass(k) * d.kB * d.T0) * Vec3(g(rng), g(rng), g(rng));
        if (d.zero_total_momentum) {
            Vec3 P = Vec3::Zero();
            for (const auto& pk : out.p) P += pk;
            const double M = parts.total_mass();
            for (std::size_t k = 0; k < n; ++k) out.p[k] -= P * parts.mass(k) / M;
        }
    }
    return out;
}

inline VecX draw_state(const NVESystem& sys, const InitialDensity& d, std::mt19937_64& rng)
{
    auto ph = draw_physical(d, sys.particles(), rng);
    if (!separated(ph.r)) return {};
    return sys.pack({ph.r, ph.p});
}

inline VecX draw_state(const NHSystem& sys, const InitialDensity& d, std::mt19937_64& rng)
{
    auto ph = draw_physical(d, sys.particles(), rng);
    std::normal_distribution<double> g(0.0, 1.0);
    const double s = std::exp(d.sigma_s * g(rng));
    const double ps = d.sigma_ps * g(rng);
    if (!separated(ph.r) || !(s > 0.0)) return {};
    for (auto& p : ph.p) p *= s; // virtual momentum p = s m v
    return sys.pack({ph.r, ph.p, s, ps});
}

/// Positions are drawn as referential coordinates s_k; physical momenta pi_k
/// map to p_k = F^T pi_k.
inline VecX draw_state(const APRSystem& sys, const InitialDensity& d, std::mt19937_64& rng)
{
    auto ph = draw_physical(d, sys.particles(), rng);
    std::normal_distribution<double> g(0.0, 1.0);
    Mat3 F = Mat3::Identity();
    if (d.sigma_F > 0.0)
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) F(a, b) += d.sigma_F * g(rng);
    if (!(F.determinant() > singular_det_tolerance) || !separated(ph.r)) return {};
    for (auto& p : ph.p) p = F.transpose() * p;
    VecX z = sys.pack({ph.r, ph.p, F, Mat3::Zero()});
    if (sys.params().kinetic == APRKinetic::ExactMinimalNorm) sys.project_constraint(z);
    return z;
}

} // namespace detail

/// M independent draws, deterministic in (density.seed, sample index).
template <class Sys> std::vector<VecX> sample_initial(const Sys& sys, const InitialDensity& density, std::size_t M)
{
    if (M < 1) throw ConfigError("ensemble.M: must be >= 1");
    density.validate(sys.n());
    std::vector<VecX> out(M);
    for (std::size_t k = 0; k < M; ++k) {
        auto rng = sample_stream(density.seed, k);
        for (int attempt = 0;; ++attempt) {
            if (attempt == resample_cap)
                throw NumericalError("sample_initial: resampling cap of " + std::to_string(resample_cap) + " exceeded for sample " +
                                     std::to_string(k));
            VecX z = detail::draw_state(sys, density, rng);
            if (z.size() == sys.dim()) {
                out[k] = std::move(z);
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batches

struct EnsembleBatch {
    Backend backend = Backend::NVE;
    std::vector<Trajectory> trajectories;

    std::size_t size() const { return trajectories.size(); }
};

using SampleObserver = std::function<void(std::size_t sample, const VecX& z, double tau, double t)>;

struct BatchOptions {
    unsigned threads = 1;
    std::size_t stride = 1;
    SampleObserver observer; ///< must only touch per-sample state
};

template <class Sys>
EnsembleBatch run_batch(const Sys& sys, const std::vector<VecX>& initial, const IntegratorSpec& spec, std::size_t n_steps,
                        const BatchOptions& opt = {})
{
    if (initial.empty()) throw ConfigError("run_batch: empty ensemble");
    EnsembleBatch batch;
    batch.backend = Sys::backend;
    batch.trajectories.resize(initial.size());
    std::vector<std::string> failures(initial.size());
    parallel_for(initial.size(), opt.threads, [&](std::size_t k) {
        IntegrateOptions io;
        io.stride = opt.stride;
        if (opt.observer) io.observer = [&, k](const VecX& z, double tau, double t) { opt.observer(k, z, tau, t); };
        try {
            batch.trajectories[k] = integrate(sys, initial[k], n_steps, spec, io);
        } catch (const NumericalError& e) {
            failures[k] = e.what();
        }
    });
    std::string msg;
    for (std::size_t k = 0; k < failures.size(); ++k)
        if (!failures[k].empty()) msg += "\n  sample " + std::to_string(k) + ": " + failures[k];
    if (!msg.empty()) throw NumericalError("run_batch: integration failed" + msg);
    return batch;
}

template <class Sys>
EnsembleBatch run_batch(const Sys& sys, const InitialDensity& density, std::size_t M, const IntegratorSpec& spec,
                        std::size_t n_steps, const BatchOptions& opt = {})
{
    return run_batch(sys, sample_initial(sys, density, M), spec, n_steps, opt);
}

// ---------------------------------------------------------------------------
// Averages

struct Estimate {
    double mean = 0.0;
    double se = 0.0;
};

/// Sample mean and standard error sd / sqrt(M).
inline Estimate mean_and_se(const std::vector<double>& x)
{
    Estimate e;
    if (x.empty()) throw ConfigError("mean_and_se: no samples");
    for (double v : x) e.mean += v;
    e.mean /= static_cast<double>(x.size());
    if (x.size() > 1) {
        double ss = 0.0;
        for (double v : x) ss += (v - e.mean) * (v - e.mean);
        e.se = std::sqrt(ss / static_cast<double>(x.size() - 1) / static_cast<double>(x.size()));
    }
    return e;
}

/// Phase point of one trajectory at physical time t: the stored sample when t
/// is a node, otherwise linear interpolation between the bracketing samples.
inline VecX state_at_time(const Trajectory& tr, double t)
{
    const auto& ts = tr.t();
    if (tr.empty() || t < ts.front() || t > ts.back())
        throw ConfigError("ensemble_average: t = " + std::to_string(t) + " outside the trajectory time range");
    const auto it = std::lower_bound(ts.begin(), ts.end(), t);
    const auto i = static_cast<std::size_t>(it - ts.begin());
    if (*it == t) return tr.state(i);
    const double w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
    return (1.0 - w) * tr.state(i - 1) + w * tr.state(i);
}

struct Observable {
    std::function<double(const VecX& z)> f;
    std::optional<Backend> backend; ///< restricts the observable to one backend
};

inline Estimate ensemble_average(const EnsembleBatch& batch, const Observable& obs, double t)
{
    if (batch.size() == 0) throw ConfigError("ensemble_average: empty batch");
    if (obs.backend && *obs.backend != batch.backend)
        throw ConfigError("ensemble_average: observable defined for " + std::string(to_string(*obs.backend)) + ", batch is " +
                          std::string(to_string(batch.backend)));
    std::vector<double> x(batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) x[k] = obs.f(state_at_time(batch.trajectories[k], t));
    return mean_and_se(x);
}

} // namespace ikn
