#pragma once

#include "autodiff.hpp"
#include "fields.hpp"

#include <array>
#include <limits>

namespace ikn {

enum class EnergyMode { Collective, Distributed };

inline std::string_view mode_name(EnergyMode m) { return m == EnergyMode::Collective ? "collective" : "distributed"; }

enum class Balance { Mass, Momentum, Energy };

/// Which balance laws to assemble and on which part of the grid.
struct BalanceSpec {
    Backend backend = Backend::NVE;
    EnergyMode mode = EnergyMode::Collective;
    /// Excluded boundary layers; negative means ceil(h/dx) + 1 (kernel
    /// support plus one stencil layer).
    int boundary_layers = -1;
};

// ---------------------------------------------------------------------------
// Pointwise terms. A getter g(FieldId, component) returns the field value at
// the current point; templating on the scalar lets analytic (AD) fields reuse
// exactly the same assembly as the grid path.

inline int balance_components(Balance b) { return b == Balance::Momentum ? 3 : 1; }

/// Up to four rate operands; each is differenced in time separately and the
/// derivatives are summed in order, so constant operands drop out exactly.
template <class T> struct RateTerms {
    std::array<T, 4> v{};
    int count = 0;
    void add(const T& x) { v[count++] = x; }
};

template <class T, class G> RateTerms<T> balance_rate(Balance b, const BalanceSpec& s, int c, G&& g)
{
    const bool nh = s.backend == Backend::NH, apr = s.backend == Backend::APR;
    const bool coll = s.mode == EnergyMode::Collective;
    RateTerms<T> r;
    switch (b) {
    case Balance::Mass: r.add(nh ? g(FieldId::rho_sw, 0) : g(FieldId::rho, 0)); break;
    case Balance::Momentum: r.add(nh ? g(FieldId::rho_v_sw, c) : g(FieldId::rho_v, c)); break;
    case Balance::Energy:
        if (nh) {
            r.add(g(FieldId::eps_K_sw, 0));
            r.add(g(FieldId::eps_V_sw, 0));
            r.add(coll ? g(FieldId::eps_ps_sw, 0) : g(FieldId::eps_bar_ps_sw, 0));
            r.add(coll ? g(FieldId::eps_s_sw, 0) : g(FieldId::eps_bar_s_sw, 0));
        } else {
            r.add(g(FieldId::eps_K, 0));
            r.add(g(FieldId::eps_V, 0));
            if (apr) r.add(coll ? g(FieldId::eps_P, 0) : g(FieldId::eps_bar_P, 0));
        }
        break;
    }
    return r;
}

/// Flux vector J whose divergence sum_j d_j J_j enters the balance.
template <class T, class G> std::array<T, 3> balance_flux(Balance b, const BalanceSpec& s, int c, G&& g)
{
    std::array<T, 3> J{T(0.0), T(0.0), T(0.0)};
    const bool nh = s.backend == Backend::NH, apr = s.backend == Backend::APR;
    const bool dist = s.mode == EnergyMode::Distributed;
    switch (b) {
    case Balance::Mass:
        for (int j = 0; j < 3; ++j) J[j] = g(FieldId::rho_v, j);
        break;
    case Balance::Momentum:
        for (int j = 0; j < 3; ++j) J[j] = g(FieldId::rho_v, j) * g(FieldId::v, c) - g(FieldId::T, 3 * j + c);
        break;
    case Balance::Energy: {
        const T e = g(FieldId::eps_K, 0) + g(FieldId::eps_V, 0);
        for (int j = 0; j < 3; ++j) {
            T Tv = T(0.0);
            for (int i = 0; i < 3; ++i) Tv = Tv + g(FieldId::T, 3 * i + j) * g(FieldId::v, i);
            J[j] = (((g(FieldId::q_K, j) + g(FieldId::q_V, j)) + g(FieldId::q_T, j)) + e * g(FieldId::v, j)) - Tv;
            if (nh && dist)
                J[j] = J[j] + (g(FieldId::q_ps, j) + g(FieldId::q_s, j)) +
                       (g(FieldId::eps_bar_ps, 0) + g(FieldId::eps_bar_s, 0)) * g(FieldId::v, j);
            if (apr && dist) J[j] = J[j] + g(FieldId::q_P, j) + g(FieldId::eps_bar_P, 0) * g(FieldId::v, j);
        }
        break;
    }
    }
    return J;
}

template <class T, class G> T balance_source(Balance b, const BalanceSpec& s, int c, G&& g)
{
    const bool nh = s.backend == Backend::NH, apr = s.backend == Backend::APR;
    const bool coll = s.mode == EnergyMode::Collective;
    switch (b) {
    case Balance::Mass: return nh ? g(FieldId::sigma_rho, 0) : T(0.0);
    case Balance::Momentum: return g(FieldId::f_e, c);
    case Balance::Energy:
        if (nh) {
            const T r = g(FieldId::sigma_K, 0) + g(FieldId::sigma_V, 0);
            return coll ? (r + g(FieldId::sigma_ps, 0)) + g(FieldId::sigma_s, 0)
                        : (r + g(FieldId::sigma_bar_ps, 0)) + g(FieldId::sigma_bar_s, 0);
        }
        if (apr && coll) return g(FieldId::sigma_P, 0);
        return T(0.0);
    }
    return T(0.0);
}

/// Fields the assembly of balance b reads for spec s.
inline std::vector<FieldId> balance_inputs(Balance b, const BalanceSpec& s)
{
    std::vector<FieldId> ids;
    auto rec = [&](FieldId id, int) {
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
        return 0.0;
    };
    for (int c = 0; c < balance_components(b); ++c) {
        balance_rate<double>(b, s, c, rec);
        balance_flux<double>(b, s, c, rec);
        balance_source<double>(b, s, c, rec);
    }
    return ids;
}

// ---------------------------------------------------------------------------
// Discrete operators

/// Boolean interior mask over grid nodes.
inline std::vector<std::uint8_t> interior_mask(const GridSpec& grid, int layers)
{
    const auto n = grid.shape();
    std::vector<std::uint8_t> mask(grid.node_count(), 0);
    bool any = false;
    for (int k = layers; k < n[2] - layers; ++k)
        for (int j = layers; j < n[1] - layers; ++j)
            for (int i = layers; i < n[0] - layers; ++i) {
                mask[grid.index(i, j, k)] = 1;
                any = true;
            }
    if (!any) throw ConfigError("balance: interior mask is empty (grid too small for stencil and kernel support)");
    return mask;
}

inline int default_layers(const GridSpec& grid)
{
    return static_cast<int>(std::ceil(grid.h / grid.dx - 1e-9)) + 1;
}

/// Central-difference divergence of a node vector field J (3 comps per node,
/// contraction of component j with d_j). Boundary nodes are left at zero.
inline std::vector<double> divergence(const GridSpec& grid, const std::vector<double>& J)
{
    const auto n = grid.shape();
    for (int a = 0; a < 3; ++a)
        if (n[a] < 3) throw ConfigError("divergence: field too small for stencil");
    if (J.size() != 3 * grid.node_count()) throw ConfigError("divergence: field size does not match grid");
    std::vector<double> out(grid.node_count(), 0.0);
    const double inv = 1.0 / (2.0 * grid.dx);
    for (int k = 1; k < n[2] - 1; ++k)
        for (int j = 1; j < n[1] - 1; ++j)
            for (int i = 1; i < n[0] - 1; ++i) {
                const double dxJ = J[3 * grid.index(i + 1, j, k)] - J[3 * grid.index(i - 1, j, k)];
                const double dyJ = J[3 * grid.index(i, j + 1, k) + 1] - J[3 * grid.index(i, j - 1, k) + 1];
                const double dzJ = J[3 * grid.index(i, j, k + 1) + 2] - J[3 * grid.index(i, j, k - 1) + 2];
                out[grid.index(i, j, k)] = ((dxJ + dyJ) + dzJ) * inv;
            }
    return out;
}

/// Divergence of a row-major tensor field with contraction on the first index:
/// out_i = sum_j d_j T_ji.
inline std::vector<double> divergence_tensor(const GridSpec& grid, const std::vector<double>& Tf)
{
    const std::size_t nn = grid.node_count();
    if (Tf.size() != 9 * nn) throw ConfigError("divergence: field size does not match grid");
    std::vector<double> out(3 * nn, 0.0), col(3 * nn);
    for (int i = 0; i < 3; ++i) {
        for (std::size_t node = 0; node < nn; ++node)
            for (int j = 0; j < 3; ++j) col[3 * node + j] = Tf[9 * node + 3 * j + i];
        const auto d = divergence(grid, col);
        for (std::size_t node = 0; node < nn; ++node) out[3 * node + i] = d[node];
    }
    return out;
}

/// Central differences in time of a series of equal-length slices; the two
/// endpoints are dropped.
inline std::vector<std::vector<double>> time_derivative(const std::vector<std::vector<double>>& series,
                                                        const std::vector<double>& times)
{
    if (series.size() < 3 || times.size() != series.size()) throw ConfigError("time_derivative: needs >= 3 time samples");
    std::vector<std::vector<double>> out;
    for (std::size_t t = 1; t + 1 < series.size(); ++t) {
        const double inv = 1.0 / (times[t + 1] - times[t - 1]);
        std::vector<double> d(series[t].size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = (series[t + 1][i] - series[t - 1][i]) * inv;
        out.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Residuals

struct TermNorm {
    std::string name;
    double l2 = 0.0;
};

struct BalanceEntry {
    std::string name;
    Balance balance = Balance::Mass;
    int comps = 1;
    std::vector<double> times;          ///< interior time samples
    std::vector<double> residual;       ///< (time * nodes + node) * comps + c; zero off the mask
    double l2 = 0.0;
    double linf = 0.0;
    double reference = 0.0;             ///< L2 norm of the largest constituent term
    double relative = 0.0;
    std::vector<TermNorm> terms;        ///< rate, divergence, source
    std::vector<double> integrated;     ///< dx^3 sum over the mask, per time and component
};

struct BalanceReport {
    Backend backend = Backend::NVE;
    EnergyMode mode = EnergyMode::Collective;
    std::size_t samples = 0;
    GridSpec grid;
    std::vector<std::uint8_t> mask;
    std::vector<BalanceEntry> entries;

    const BalanceEntry& entry(std::string_view name) const
    {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw ConfigError("balance report has no entry '" + std::string(name) + "'");
    }
};

namespace detail {

inline void check_time_grid(const std::vector<double>& times)
{
    if (times.size() < 3) throw ConfigError("balance: needs >= 3 time samples");
    const double dt = times[1] - times[0];
    for (std::size_t i = 1; i < times.size(); ++i)
        if (std::abs((times[i] - times[i - 1]) - dt) > 1e-9 * std::max(1.0, std::abs(dt)))
            throw ConfigError("balance: time samples must be equally spaced");
}

/// Norm of a node series restricted to the mask: sqrt(dx^3 sum r^2).
inline double masked_l2(const std::vector<double>& v, const std::vector<std::uint8_t>& mask, int comps, double cell)
{
    double s = 0.0;
    const std::size_t nn = mask.size();
    for (std::size_t t = 0; t < v.size() / (nn * comps); ++t)
        for (std::size_t i = 0; i < nn; ++i)
            if (mask[i])
                for (int c = 0; c < comps; ++c) {
                    const double x = v[(t * nn + i) * comps + c];
                    s += x * x;
                }
    return std::sqrt(s * cell);
}

} // namespace detail

/// Residual rate + div(flux) - source of one balance on the interior mask.
inline BalanceEntry balance_residual(Balance b, const FieldSet& fs, const BalanceSpec& spec)
{
    if (spec.backend != fs.backend) throw ConfigError("balance: spec backend does not match the field set");
    for (FieldId id : balance_inputs(b, spec))
        if (!fs.has(id)) throw ConfigError("balance: missing field '" + std::string(field_name(id)) + "'");
    detail::check_time_grid(fs.times);

    const auto& grid = fs.grid;
    const std::size_t nn = fs.nodes(), T = fs.time_count();
    const int comps = balance_components(b);
    const int layers = spec.boundary_layers >= 0 ? spec.boundary_layers : default_layers(grid);
    const auto mask = interior_mask(grid, layers);

    constexpr int max_terms = 4;
    std::vector<std::vector<std::vector<double>>> rate(max_terms, std::vector<std::vector<double>>(T, std::vector<double>(nn * comps, 0.0)));
    int n_terms = 0;
    std::vector<std::vector<double>> src(T, std::vector<double>(nn * comps));
    std::vector<std::vector<double>> div(T, std::vector<double>(nn * comps));

    n_terms = balance_rate<double>(b, spec, 0, [](FieldId, int) { return 0.0; }).count;
    parallel_for(T, 1, [&](std::size_t ti) {
        std::vector<double> J(3 * nn);
        for (int c = 0; c < comps; ++c) {
            for (std::size_t i = 0; i < nn; ++i) {
                auto g = [&](FieldId id, int k) { return fs.at(id, ti, i, k); };
                const auto rt = balance_rate<double>(b, spec, c, g);
                for (int q = 0; q < rt.count; ++q) rate[q][ti][i * comps + c] = rt.v[q];
                src[ti][i * comps + c] = balance_source<double>(b, spec, c, g);
                const auto f = balance_flux<double>(b, spec, c, g);
                for (int j = 0; j < 3; ++j) J[3 * i + j] = f[j];
            }
            const auto d = divergence(grid, J);
            for (std::size_t i = 0; i < nn; ++i) div[ti][i * comps + c] = d[i];
        }
    });
    std::vector<std::vector<std::vector<double>>> dts;
    for (int q = 0; q < n_terms; ++q) dts.push_back(time_derivative(rate[q], fs.times));

    BalanceEntry e;
    e.balance = b;
    e.name = b == Balance::Mass ? "mass" : b == Balance::Momentum ? "momentum" : "energy_" + std::string(mode_name(spec.mode));
    e.comps = comps;
    e.times.assign(fs.times.begin() + 1, fs.times.end() - 1);
    const std::size_t Ti = e.times.size();
    e.residual.assign(Ti * nn * comps, 0.0);
    std::vector<double> rate_v(e.residual.size(), 0.0), div_v(rate_v), src_v(rate_v);
    e.integrated.assign(Ti * comps, 0.0);
    const double cell = grid.cell_volume();
    for (std::size_t t = 0; t < Ti; ++t)
        for (std::size_t i = 0; i < nn; ++i) {
            if (!mask[i]) continue;
            for (int c = 0; c < comps; ++c) {
                const std::size_t idx = (t * nn + i) * comps + c;
                double r = dts[0][t][i * comps + c];
                for (int q = 1; q < n_terms; ++q) r += dts[q][t][i * comps + c];
                const double d = div[t + 1][i * comps + c];
                const double s = src[t + 1][i * comps + c];
                rate_v[idx] = r;
                div_v[idx] = d;
                src_v[idx] = s;
                e.residual[idx] = (r + d) - s;
                e.linf = std::max(e.linf, std::abs(e.residual[idx]));
                e.integrated[t * comps + c] += e.residual[idx] * cell;
            }
        }
    e.l2 = detail::masked_l2(e.residual, mask, comps, cell);
    e.terms = {{"rate", detail::masked_l2(rate_v, mask, comps, cell)},
               {"divergence", detail::masked_l2(div_v, mask, comps, cell)},
               {"source", detail::masked_l2(src_v, mask, comps, cell)}};
    for (const auto& t : e.terms) e.reference = std::max(e.reference, t.l2);
    e.relative = e.reference > 0.0 ? e.l2 / e.reference : (e.l2 > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    return e;
}

inline BalanceEntry mass_balance_residual(const FieldSet& fs, const BalanceSpec& s) { return balance_residual(Balance::Mass, fs, s); }

inline BalanceEntry momentum_balance_residual(const FieldSet& fs, const BalanceSpec& s)
{
    return balance_residual(Balance::Momentum, fs, s);
}

inline BalanceEntry energy_balance_residual(const FieldSet& fs, const BalanceSpec& s)
{
    return balance_residual(Balance::Energy, fs, s);
}

/// Mass, momentum and energy residuals in the mode of `spec`.
inline BalanceReport balance_report(const FieldSet& fs, const BalanceSpec& spec)
{
    BalanceReport r;
    r.backend = spec.backend;
    r.mode = spec.mode;
    r.samples = fs.samples;
    r.grid = fs.grid;
    r.mask = interior_mask(fs.grid, spec.boundary_layers >= 0 ? spec.boundary_layers : default_layers(fs.grid));
    r.entries = {mass_balance_residual(fs, spec), momentum_balance_residual(fs, spec), energy_balance_residual(fs, spec)};
    return r;
}

// ---------------------------------------------------------------------------
// Convergence

struct SlopeFit {
    double slope = 0.0;
    double slope_se = 0.0;
    double intercept = 0.0;
};

/// Least-squares fit of log y against log x.
inline SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size()) throw ConfigError("fit_loglog: size mismatch");
    if (x.size() < 3) throw ConfigError("fit_loglog: need at least 3 points");
    const std::size_t n = x.size();
    double mx = 0.0, my = 0.0;
    std::vector<double> lx(n), ly(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw NumericalError("fit_loglog: values must be positive");
        lx[i] = std::log(x[i]);
        ly[i] = std::log(y[i]);
        mx += lx[i];
        my += ly[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if (!(sxx > 0.0)) throw ConfigError("fit_loglog: abscissae must differ");
    SlopeFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double rss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = ly[i] - (f.intercept + f.slope * lx[i]);
        rss += r * r;
    }
    f.slope_se = n > 2 ? std::sqrt(rss / (n - 2) / sxx) : 0.0;
    return f;
}

struct ConvergenceReport {
    std::vector<std::size_t> sizes;
    std::vector<std::string> names;
    std::vector<std::vector<double>> residuals; ///< per entry, L2 norm per ensemble size
    std::vector<SlopeFit> fits;
    std::vector<BalanceReport> reports;
};

/// Runs `make_report(M)` for every ensemble size and fits the decay of each
/// entry's residual norm.
template <class MakeReport>
ConvergenceReport convergence_report(MakeReport&& make_report, const std::vector<std::size_t>& sizes)
{
    if (sizes.size() < 3) throw ConfigError("convergence_report: need at least 3 ensemble sizes");
    ConvergenceReport out;
    out.sizes = sizes;
    for (std::size_t M : sizes) out.reports.push_back(make_report(M));
    const auto& first = out.reports.front();
    std::vector<double> xs(sizes.begin(), sizes.end());
    for (std::size_t e = 0; e < first.entries.size(); ++e) {
        out.names.push_back(first.entries[e].name);
        std::vector<double> ys;
        for (const auto& r : out.reports) ys.push_back(r.entries.at(e).l2);
        out.residuals.push_back(ys);
        out.fits.push_back(fit_loglog(xs, ys));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manufactured fields

/// Analytic field set: `value<T>(id, comp, t, x)` with T = double or an AD
/// scalar. Sampling it onto a grid gives a FieldSet whose discrete residual
/// can be compared with the exact residual of the same pointwise assembly.
template <class Fn> struct ManufacturedFields {
    Backend backend = Backend::NVE;
    Fn fn;

    FieldSet sample(const GridSpec& grid, const std::vector<double>& times, const std::vector<FieldId>& ids) const
    {
        FieldSet fs;
        fs.backend = backend;
        fs.grid = grid;
        fs.times = times;
        fs.samples = 1;
        const std::size_t nn = grid.node_count();
        fs.defined.assign(times.size() * nn, 1);
        for (FieldId id : ids) {
            auto& f = fs.create(id);
            for (std::size_t t = 0; t < times.size(); ++t)
                for (std::size_t i = 0; i < nn; ++i) {
                    const Vec3 x = grid.node(i);
                    for (int c = 0; c < f.comps; ++c)
                        f.mean[(t * nn + i) * f.comps + c] = fn.template operator()<double>(id, c, times[t], Vec3T<double>(x));
                }
        }
        return fs;
    }

    /// Exact rate + div(flux) - source at (t, x) via forward-mode derivatives.
    double exact_residual(Balance b, const BalanceSpec& spec, int c, double t, const Vec3& x) const
    {
        const ADScalar ta(t, 4, 0);
        Vec3T<ADScalar> xa;
        for (int a = 0; a < 3; ++a) xa(a) = ADScalar(x(a), 4, a + 1);
        auto g = [&](FieldId id, int k) { return fn.template operator()<ADScalar>(id, k, ta, xa); };
        const auto rt = balance_rate<ADScalar>(b, spec, c, g);
        const auto J = balance_flux<ADScalar>(b, spec, c, g);
        const ADScalar src = balance_source<ADScalar>(b, spec, c, g);
        auto d = [](const ADScalar& v, int k) { return v.derivatives().size() ? v.derivatives()(k) : 0.0; };
        double rate = 0.0;
        for (int q = 0; q < rt.count; ++q) rate += d(rt.v[q], 0);
        return (rate + (d(J[0], 1) + d(J[1], 2) + d(J[2], 3))) - src.value();
    }
};

/// Max-norm difference between the discrete and exact residual of a
/// manufactured field set on the interior mask.
template <class Fn>
double manufactured_error(const ManufacturedFields<Fn>& mf, Balance b, const BalanceSpec& spec, const GridSpec& grid,
                          const std::vector<double>& times)
{
    std::vector<FieldId> ids;
    for (std::size_t i = 0; i < field_count; ++i)
        if (applicable(static_cast<FieldId>(i), spec.backend)) ids.push_back(static_cast<FieldId>(i));
    const auto fs = mf.sample(grid, times, ids);
    const auto e = balance_residual(b, fs, spec);
    const std::size_t nn = grid.node_count();
    const auto mask = interior_mask(grid, spec.boundary_layers >= 0 ? spec.boundary_layers : default_layers(grid));
    double err = 0.0;
    for (std::size_t t = 0; t < e.times.size(); ++t)
        for (std::size_t i = 0; i < nn; ++i) {
            if (!mask[i]) continue;
            for (int c = 0; c < e.comps; ++c) {
                const double exact = mf.exact_residual(b, spec, c, e.times[t], grid.node(i));
                err = std::max(err, std::abs(e.residual[(t * nn + i) * e.comps + c] - exact));
            }
        }
    return err;
}

} // namespace ikn
