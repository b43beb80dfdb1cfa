#pragma once

#include "balance.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace ikn {

using json = nlohmann::json;

inline constexpr int config_version = 1;

enum class BalanceModes { Collective, Distributed, Both };

/// Fully validated run description.
struct RunConfig {
    Backend backend = Backend::NVE;
    std::vector<double> masses;
    PairPotential pair = PairPotential::lennard_jones();
    ExternalPotential external;
    IntegratorSpec integrator;
    std::size_t n_steps = 0;
    std::size_t stride = 1;
    std::size_t M = 1;
    InitialDensity density;
    NHParams nh;
    APRParams apr;
    double kB = 1.0;
    GridSpec grid;
    BalanceModes modes = BalanceModes::Both;
    std::string output_dir = "out";
    bool binary_fields = false;
    json source; ///< normalized echo for the manifest

    std::size_t N() const { return masses.size(); }
};

namespace detail {

/// Object view that records consumed keys so leftovers can be rejected.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ConfigError(where("") + ": must be an object");
    }

    ~Section() = default;

    std::string where(const std::string& key) const
    {
        if (path_.empty()) return key;
        return key.empty() ? path_ : path_ + "." + key;
    }

    bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

    const json& raw(const std::string& key)
    {
        used_.insert(key);
        if (!j_.contains(key)) throw ConfigError(where(key) + ": required");
        return j_.at(key);
    }

    double number(const std::string& key)
    {
        const auto& v = raw(key);
        if (!v.is_number()) throw ConfigError(where(key) + ": must be a number");
        const double x = v.get<double>();
        if (!std::isfinite(x)) throw ConfigError(where(key) + ": must be finite");
        return x;
    }

    double number(const std::string& key, double fallback) { return has(key) ? number(key) : (used_.insert(key), fallback); }

    double positive(const std::string& key)
    {
        const double x = number(key);
        if (!(x > 0.0)) throw ConfigError(where(key) + ": must be > 0");
        return x;
    }

    double positive(const std::string& key, double fallback) { return has(key) ? positive(key) : (used_.insert(key), fallback); }

    double nonnegative(const std::string& key, double fallback)
    {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const double x = number(key);
        if (x < 0.0) throw ConfigError(where(key) + ": must be >= 0");
        return x;
    }

    std::size_t count(const std::string& key)
    {
        const auto& v = raw(key);
        if (!v.is_number_integer() || v.get<long long>() < 1) throw ConfigError(where(key) + ": must be a positive integer");
        return static_cast<std::size_t>(v.get<long long>());
    }

    std::size_t count(const std::string& key, std::size_t fallback) { return has(key) ? count(key) : (used_.insert(key), fallback); }

    std::uint64_t seed(const std::string& key, std::uint64_t fallback)
    {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const auto& v = raw(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(where(key) + ": must be a non-negative integer");
        return v.get<std::uint64_t>();
    }

    bool flag(const std::string& key, bool fallback)
    {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const auto& v = raw(key);
        if (!v.is_boolean()) throw ConfigError(where(key) + ": must be true or false");
        return v.get<bool>();
    }

    std::string text(const std::string& key, const std::vector<std::string>& allowed)
    {
        const auto& v = raw(key);
        if (!v.is_string()) throw ConfigError(where(key) + ": must be a string");
        const auto s = v.get<std::string>();
        if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
            std::string list;
            for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
            throw ConfigError(where(key) + ": must be one of " + list);
        }
        return s;
    }

    std::string text(const std::string& key, const std::vector<std::string>& allowed, const std::string& fallback)
    {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        return text(key, allowed);
    }

    std::vector<double> numbers(const std::string& key, std::size_t expected = 0)
    {
        const auto& v = raw(key);
        if (!v.is_array()) throw ConfigError(where(key) + ": must be an array of numbers");
        if (expected && v.size() != expected)
            throw ConfigError(where(key) + ": expected " + std::to_string(expected) + " numbers");
        std::vector<double> out;
        for (const auto& x : v) {
            if (!x.is_number()) throw ConfigError(where(key) + ": must be an array of numbers");
            out.push_back(x.get<double>());
        }
        return out;
    }

    Vec3 vec3(const std::string& key)
    {
        const auto v = numbers(key, 3);
        return Vec3(v[0], v[1], v[2]);
    }

    Vec3 vec3(const std::string& key, const Vec3& fallback) { return has(key) ? vec3(key) : (used_.insert(key), fallback); }

    Section child(const std::string& key) { return Section(raw(key), where(key)); }

    bool has_child(const std::string& key)
    {
        used_.insert(key);
        return has(key);
    }

    /// Rejects keys that no accessor consumed.
    void finish() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline Backend parse_backend(const std::string& s)
{
    if (s == "NVE") return Backend::NVE;
    if (s == "NH") return Backend::NH;
    return Backend::APR;
}

} // namespace detail

/// Validates a parsed JSON document against the version-1 schema.
inline RunConfig parse_config(const json& j)
{
    detail::Section root(j, "");
    RunConfig c;
    c.source = j;
    {
        const auto& v = root.raw("version");
        if (!v.is_number_integer() || v.get<int>() != config_version)
            throw ConfigError("version: unsupported schema version (expected " + std::to_string(config_version) + ")");
    }
    c.backend = detail::parse_backend(root.text("backend", {"NVE", "NH", "APR"}));

    {
        auto s = root.child("particles");
        const std::size_t n = s.count("N");
        if (s.has("masses")) {
            c.masses = s.numbers("masses", n);
            for (double m : c.masses)
                if (!(m > 0.0)) throw ConfigError("particles.masses: must be > 0");
            if (s.has("mass")) throw ConfigError("particles.mass: give either mass or masses");
            s.has_child("mass");
        } else {
            s.has_child("masses");
            c.masses.assign(n, s.positive("mass", 1.0));
        }
        s.finish();
    }

    {
        auto s = root.child("potential");
        auto p = s.child("pair");
        const auto kind = p.text("kind", {"lennard_jones", "harmonic"});
        std::optional<double> rc;
        if (p.has("cutoff")) rc = p.positive("cutoff");
        p.has_child("cutoff");
        if (kind == "lennard_jones") {
            c.pair = PairPotential::lennard_jones(p.positive("epsilon", 1.0), p.positive("sigma", 1.0), rc);
        } else {
            c.pair = PairPotential::harmonic(p.positive("k", 1.0), p.positive("r0", 1.0), rc);
        }
        p.finish();
        if (s.has_child("external")) {
            auto e = s.child("external");
            const auto ek = e.text("kind", {"none", "harmonic_trap", "uniform_field"});
            if (ek == "harmonic_trap")
                c.external = ExternalPotential::harmonic_trap(e.positive("kappa"), e.vec3("center", Vec3::Zero()));
            else if (ek == "uniform_field")
                c.external = ExternalPotential::uniform_field(e.vec3("g"));
            e.finish();
        }
        s.finish();
    }

    {
        auto s = root.child("integrator");
        c.integrator.scheme = s.text("scheme", {"implicit_midpoint", "rk4"}, "implicit_midpoint") == "rk4" ? Scheme::RK4
                                                                                                          : Scheme::ImplicitMidpoint;
        c.integrator.dtau = s.positive("dtau");
        c.n_steps = s.count("n_steps");
        c.stride = s.count("stride", 1);
        c.integrator.tolerance = s.positive("tolerance", 1e-12);
        c.integrator.max_iterations = static_cast<int>(s.count("max_iterations", 50));
        s.finish();
        if (c.n_steps % c.stride != 0) throw ConfigError("integrator.stride: must divide n_steps");
    }

    {
        auto s = root.child("ensemble");
        c.M = s.count("M");
        c.density.seed = s.seed("seed", 0);
        auto d = s.child("density");
        const auto pos = d.text("positions", {"lattice", "explicit"}, "lattice");
        if (pos == "explicit") {
            c.density.positions = InitialDensity::Positions::Explicit;
            const auto& arr = d.raw("explicit");
            if (!arr.is_array() || arr.size() != c.N())
                throw ConfigError("ensemble.density.explicit: expected " + std::to_string(c.N()) + " positions");
            for (const auto& x : arr) {
                if (!x.is_array() || x.size() != 3) throw ConfigError("ensemble.density.explicit: positions are [x, y, z]");
                c.density.explicit_positions.emplace_back(x[0].get<double>(), x[1].get<double>(), x[2].get<double>());
            }
        } else {
            d.has_child("explicit");
        }
        c.density.spacing = d.positive("spacing", c.density.spacing);
        c.density.origin = d.vec3("origin", Vec3::Zero());
        c.density.jitter = d.nonnegative("jitter", 0.0);
        c.density.momenta = d.text("momenta", {"maxwell_boltzmann", "zero"}, "zero") == "zero"
                                ? InitialDensity::Momenta::Zero
                                : InitialDensity::Momenta::MaxwellBoltzmann;
        c.density.T0 = d.positive("T0", 1.0);
        c.density.zero_total_momentum = d.flag("zero_total_momentum", false);
        c.density.sigma_s = d.nonnegative("sigma_s", 0.0);
        c.density.sigma_ps = d.nonnegative("sigma_ps", 0.0);
        c.density.sigma_F = d.nonnegative("sigma_F", 0.0);
        d.finish();
        s.finish();
    }

    c.kB = 1.0;
    if (root.has_child("units")) {
        auto s = root.child("units");
        c.kB = s.positive("kB", 1.0);
        s.finish();
    }
    c.density.kB = c.kB;

    if (root.has_child("nh")) {
        if (c.backend != Backend::NH) throw ConfigError("nh: only valid for the NH backend");
        auto s = root.child("nh");
        c.nh.Q = s.positive("Q", c.nh.Q);
        c.nh.T_target = s.positive("T_target", c.nh.T_target);
        c.nh.omega_ref = s.positive("omega_ref", c.nh.omega_ref);
        s.finish();
    }

    if (root.has_child("apr")) {
        if (c.backend != Backend::APR) throw ConfigError("apr: only valid for the APR backend");
        auto s = root.child("apr");
        c.apr.W = s.positive("W", c.apr.W);
        c.apr.omega_ref = s.positive("omega_ref", c.apr.omega_ref);
        const auto P = s.numbers("P", 9);
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) c.apr.P(i, k) = P[3 * i + k];
        c.apr.kinetic = s.text("kinetic", {"parrinello_rahman", "exact"}, "parrinello_rahman") == "exact"
                            ? APRKinetic::ExactMinimalNorm
                            : APRKinetic::ParrinelloRahman;
        s.finish();
    } else if (c.backend == Backend::APR) {
        throw ConfigError("apr.P: required for the APR backend");
    }

    {
        auto s = root.child("grid");
        c.grid.lower = s.vec3("lower");
        c.grid.upper = s.vec3("upper");
        c.grid.dx = s.positive("dx");
        c.grid.h = s.positive("h");
        s.finish();
        c.grid.validate();
    }

    if (root.has_child("balance")) {
        auto s = root.child("balance");
        const auto m = s.text("mode", {"collective", "distributed", "both"}, "both");
        c.modes = m == "collective" ? BalanceModes::Collective : m == "distributed" ? BalanceModes::Distributed : BalanceModes::Both;
        s.finish();
    }

    if (root.has_child("output")) {
        auto s = root.child("output");
        c.output_dir = s.text("dir", {}, c.output_dir);
        c.binary_fields = s.flag("binary", false);
        s.finish();
    }
    root.finish();

    c.nh.validate();
    c.apr.validate();
    c.integrator.validate();
    c.density.validate(c.N());
    return c;
}

inline RunConfig parse_config_text(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline RunConfig parse_config_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Construction of systems from a configuration

inline Interactions interactions_of(const RunConfig& c)
{
    Interactions in;
    in.pair = c.pair;
    in.ext = c.external;
    return in;
}

/// Calls f with the configured system (NVESystem, NHSystem or APRSystem).
template <class F> decltype(auto) with_system(const RunConfig& c, F&& f)
{
    ParticleSet ps(c.masses);
    switch (c.backend) {
    case Backend::NH: {
        const NHSystem sys(ps, interactions_of(c), c.nh, Units{c.kB});
        return f(sys);
    }
    case Backend::APR: {
        const APRSystem sys(ps, interactions_of(c), c.apr);
        return f(sys);
    }
    case Backend::NVE: break;
    }
    const NVESystem sys(ps, interactions_of(c));
    return f(sys);
}

inline std::vector<EnergyMode> energy_modes(const RunConfig& c)
{
    if (c.backend == Backend::NVE) return {EnergyMode::Collective};
    switch (c.modes) {
    case BalanceModes::Collective: return {EnergyMode::Collective};
    case BalanceModes::Distributed: return {EnergyMode::Distributed};
    case BalanceModes::Both: break;
    }
    return {EnergyMode::Collective, EnergyMode::Distributed};
}

} // namespace ikn
