#pragma once

#include "dynamics.hpp"
#include "ensemble.hpp"
#include "kernel.hpp"

#include <array>
#include <optional>
#include <string_view>

namespace ikn {

// ---------------------------------------------------------------------------
// Catalog

enum class FieldId : int {
    n,
    rho,
    rho_v,
    v,
    eps_K,
    eps_V,
    f_e,
    sigma_eps0,
    T_K,
    T_V,
    T,
    q_K,
    q_V,
    q_T,
    q_ps,
    q_s,
    q_P,
    q,
    sigma_rho,
    sigma_K,
    sigma_V,
    sigma_ps,
    sigma_s,
    sigma_bar_ps,
    sigma_bar_s,
    eps_ps,
    eps_s,
    eps_bar_ps,
    eps_bar_s,
    eps_P,
    eps_bar_P,
    sigma_P,
    rho_sw,
    rho_v_sw,
    eps_K_sw,
    eps_V_sw,
    eps_ps_sw,
    eps_s_sw,
    eps_bar_ps_sw,
    eps_bar_s_sw,
    Count
};

inline constexpr std::size_t field_count = static_cast<std::size_t>(FieldId::Count);

inline constexpr unsigned on_nve = 1, on_nh = 2, on_apr = 4, on_all = 7;

inline unsigned backend_bit(Backend b)
{
    switch (b) {
    case Backend::NVE: return on_nve;
    case Backend::NH: return on_nh;
    case Backend::APR: return on_apr;
    }
    return 0;
}

struct FieldInfo {
    FieldId id;
    std::string_view name;
    int order;
    unsigned backends;
    bool uniform; ///< collective observable, constant in space
    std::string_view precursor;
};

// clang-format off
inline constexpr std::array<FieldInfo, field_count> field_catalog{{
    {FieldId::n,             "n",              0, on_all, false, "sum (1/N) d_k"},
    {FieldId::rho,           "rho",            0, on_all, false, "sum m_k d_k"},
    {FieldId::rho_v,         "rho_v",          1, on_all, false, "sum m_k v_k d_k"},
    {FieldId::v,             "v",              1, on_all, false, "rho_v / rho"},
    {FieldId::eps_K,         "eps_K",          0, on_all, false, "sum m_k/2 |v_k|^2 d_k"},
    {FieldId::eps_V,         "eps_V",          0, on_all, false, "sum (1/2 sum_j V_jk + V^e_k) d_k"},
    {FieldId::f_e,           "f_e",            1, on_all, false, "-sum dV^e_k/dr d_k"},
    {FieldId::sigma_eps0,    "sigma_eps0",     0, on_nve | on_nh, false, "sum dV^e_k/dr . v_k d_k"},
    {FieldId::T_K,           "T_K",            2, on_all, false, "-sum m_k c_k (x) c_k d_k"},
    {FieldId::T_V,           "T_V",            2, on_all, false, "sum_{j<k} V'/|x| x (x) x b_jk"},
    {FieldId::T,             "T",              2, on_all, false, "T_K + T_V"},
    {FieldId::q_K,           "q_K",            1, on_all, false, "sum m_k/2 |c_k|^2 c_k d_k"},
    {FieldId::q_V,           "q_V",            1, on_all, false, "-sum_{j<k} V'/|x| x (x . (v_j + v_k)/2 - v) b_jk"},
    {FieldId::q_T,           "q_T",            1, on_all, false, "sum e_k c_k d_k"},
    {FieldId::q_ps,          "q_ps",           1, on_nh,  false, "p_s^2/2Q sum c_k/N d_k"},
    {FieldId::q_s,           "q_s",            1, on_nh,  false, "A (ln s - 1) sum c_k/N d_k"},
    {FieldId::q_P,           "q_P",            1, on_apr, false, "-omega (P . F) sum c_k/N d_k"},
    {FieldId::q,             "q",              1, on_all, false, "q_K + q_V + q_T"},
    {FieldId::sigma_rho,     "sigma_rho",      0, on_nh,  false, "p_s/Q sum m_k d_k"},
    {FieldId::sigma_K,       "sigma_eps_K",    0, on_nh,  false, "-p_s/Q sum m_k/2 |v_k|^2 d_k"},
    {FieldId::sigma_V,       "sigma_eps_V",    0, on_nh,  false, "p_s/Q sum e_k d_k"},
    {FieldId::sigma_ps,      "sigma_eps_ps",   0, on_nh,  true,  "p_s^3/(2 Q^2 omega) + p_s/(Q omega) (sum m|v|^2 - A)"},
    {FieldId::sigma_s,       "sigma_eps_s",    0, on_nh,  true,  "p_s/(Q omega) A ln s"},
    {FieldId::sigma_bar_ps,  "sigma_epsbar_ps",0, on_nh,  false, "[p_s^3/2Q^2 + p_s/Q (sum m|v|^2 - A)] sum d_k/N"},
    {FieldId::sigma_bar_s,   "sigma_epsbar_s", 0, on_nh,  false, "p_s/Q A ln s sum d_k/N"},
    {FieldId::eps_ps,        "eps_ps",         0, on_nh,  true,  "p_s^2/(2 Q omega)"},
    {FieldId::eps_s,         "eps_s",          0, on_nh,  true,  "A/omega (ln s - 1)"},
    {FieldId::eps_bar_ps,    "epsbar_ps",      0, on_nh,  false, "p_s^2/2Q sum d_k/N"},
    {FieldId::eps_bar_s,     "epsbar_s",       0, on_nh,  false, "A (ln s - 1) sum d_k/N"},
    {FieldId::eps_P,         "eps_P",          0, on_apr, true,  "-P . F"},
    {FieldId::eps_bar_P,     "epsbar_P",       0, on_apr, false, "-omega (P . F) sum d_k/N"},
    {FieldId::sigma_P,       "sigma_eps_P",    0, on_apr, true,  "d eps_P / dt"},
    {FieldId::rho_sw,        "rho_sw",         0, on_nh,  false, "s rho"},
    {FieldId::rho_v_sw,      "rho_v_sw",       1, on_nh,  false, "s rho_v"},
    {FieldId::eps_K_sw,      "eps_K_sw",       0, on_nh,  false, "s eps_K"},
    {FieldId::eps_V_sw,      "eps_V_sw",       0, on_nh,  false, "s eps_V"},
    {FieldId::eps_ps_sw,     "eps_ps_sw",      0, on_nh,  true,  "s eps_ps"},
    {FieldId::eps_s_sw,      "eps_s_sw",       0, on_nh,  true,  "s eps_s"},
    {FieldId::eps_bar_ps_sw, "epsbar_ps_sw",   0, on_nh,  false, "s epsbar_ps"},
    {FieldId::eps_bar_s_sw,  "epsbar_s_sw",    0, on_nh,  false, "s epsbar_s"},
}};
// clang-format on

inline const FieldInfo& field_info(FieldId id) { return field_catalog[static_cast<std::size_t>(id)]; }

inline std::string_view field_name(FieldId id) { return field_info(id).name; }

inline FieldId field_by_name(std::string_view name)
{
    for (const auto& f : field_catalog)
        if (f.name == name) return f.id;
    throw ConfigError("unknown field '" + std::string(name) + "'");
}

inline int component_count(int order) { return order == 0 ? 1 : order == 1 ? 3 : 9; }

inline bool applicable(FieldId id, Backend b) { return (field_info(id).backends & backend_bit(b)) != 0; }

// ---------------------------------------------------------------------------
// Field sets

/// Values on grid x time samples; index (time * nodes + node) * comps + c.
/// Tensor components are row-major.
struct Field {
    int comps = 1;
    std::vector<double> mean;
    std::vector<double> se;
};

class FieldSet {
public:
    Backend backend = Backend::NVE;
    GridSpec grid;
    std::vector<double> times; ///< physical time, or virtual time for NH
    std::size_t samples = 0;
    double rho_floor = 0.0;
    std::vector<std::uint8_t> defined; ///< v well defined (rho > floor), per time and node

    std::size_t nodes() const { return grid.node_count(); }
    std::size_t time_count() const { return times.size(); }

    bool has(FieldId id) const { return fields_[static_cast<std::size_t>(id)].has_value(); }

    const Field& get(FieldId id) const
    {
        if (!has(id)) throw ConfigError("missing field '" + std::string(field_name(id)) + "'");
        return *fields_[static_cast<std::size_t>(id)];
    }

    Field& get(FieldId id)
    {
        if (!has(id)) throw ConfigError("missing field '" + std::string(field_name(id)) + "'");
        return *fields_[static_cast<std::size_t>(id)];
    }

    Field& create(FieldId id)
    {
        auto& f = fields_[static_cast<std::size_t>(id)];
        f.emplace();
        f->comps = component_count(field_info(id).order);
        const std::size_t size = times.size() * nodes() * f->comps;
        f->mean.assign(size, 0.0);
        f->se.assign(size, 0.0);
        return *f;
    }

    void put(FieldId id, Field f) { fields_[static_cast<std::size_t>(id)] = std::move(f); }
    void erase(FieldId id) { fields_[static_cast<std::size_t>(id)].reset(); }

    double at(FieldId id, std::size_t ti, std::size_t node, int c = 0) const
    {
        const auto& f = get(id);
        return f.mean[(ti * nodes() + node) * f.comps + c];
    }

    std::vector<FieldId> ids() const
    {
        std::vector<FieldId> out;
        for (std::size_t i = 0; i < field_count; ++i)
            if (fields_[i]) out.push_back(static_cast<FieldId>(i));
        return out;
    }

    /// Copy restricted to `keep` (grid, times and mask are shared).
    FieldSet select(std::initializer_list<FieldId> keep) const
    {
        FieldSet out;
        out.backend = backend;
        out.grid = grid;
        out.times = times;
        out.samples = samples;
        out.rho_floor = rho_floor;
        out.defined = defined;
        for (FieldId id : keep)
            if (has(id)) out.fields_[static_cast<std::size_t>(id)] = fields_[static_cast<std::size_t>(id)];
        return out;
    }

    /// dx^3 sum over all nodes of component c at time ti.
    double integral(FieldId id, std::size_t ti, int c = 0) const
    {
        const auto& f = get(id);
        double s = 0.0;
        for (std::size_t i = 0; i < nodes(); ++i) s += f.mean[(ti * nodes() + i) * f.comps + c];
        return s * grid.cell_volume();
    }

private:
    std::array<std::optional<Field>, field_count> fields_;
};

// ---------------------------------------------------------------------------
// Extraction

/// Everything the extractor needs from a dynamical system.
struct ExtractionModel {
    Backend backend = Backend::NVE;
    std::vector<double> masses;
    PairPotential pair = PairPotential::lennard_jones();
    ExternalPotential ext;
    double Q = 1.0;
    double A = 0.0;
    double omega = 1.0;
    Mat3 P = Mat3::Zero();
    std::function<Snapshot(const VecX&)> snapshot;
};

inline ExtractionModel extraction_model(const NVESystem& sys)
{
    if (sys.interactions().box > 0.0) throw ConfigError("field extraction supports open geometry only");
    ExtractionModel m;
    m.backend = Backend::NVE;
    m.masses = sys.particles().masses();
    m.pair = sys.interactions().pair;
    m.ext = sys.interactions().ext;
    m.snapshot = [&sys](const VecX& z) { return sys.snapshot(z); };
    return m;
}

inline ExtractionModel extraction_model(const NHSystem& sys)
{
    if (sys.interactions().box > 0.0) throw ConfigError("field extraction supports open geometry only");
    ExtractionModel m;
    m.backend = Backend::NH;
    m.masses = sys.particles().masses();
    m.pair = sys.interactions().pair;
    m.ext = sys.interactions().ext;
    m.Q = sys.params().Q;
    m.A = sys.A();
    m.omega = sys.params().omega_ref;
    m.snapshot = [&sys](const VecX& z) { return sys.snapshot(z); };
    return m;
}

inline ExtractionModel extraction_model(const APRSystem& sys)
{
    if (sys.params().periodic_cell > 0.0) throw ConfigError("field extraction supports open geometry only");
    ExtractionModel m;
    m.backend = Backend::APR;
    m.masses = sys.particles().masses();
    m.pair = sys.interactions().pair;
    m.ext = sys.interactions().ext;
    m.omega = sys.params().omega_ref;
    m.P = sys.params().P;
    m.snapshot = [&sys](const VecX& z) { return sys.snapshot(z); };
    return m;
}

struct FieldOptions {
    unsigned threads = 1;
    double rho_floor_factor = 1e-8; ///< rho_floor = factor * total mass / box volume
};

namespace detail {

struct Bond {
    std::size_t j, k;
    Vec3 x; ///< r_j - r_k
    double coef; ///< V'(|x|) / |x|
};

struct SampleData {
    Snapshot sn;
    std::vector<double> e;        ///< site energies 1/2 sum_j V_jk + V^e_k
    std::vector<Vec3> grad_ext;   ///< dV^e_k / dr
    std::vector<Bond> bonds;
    double twice_kin = 0.0;       ///< sum m |v|^2
    double PF = 0.0;              ///< P . F
};

inline SampleData prepare_sample(const ExtractionModel& model, const GridSpec& grid, const VecX& z)
{
    SampleData d;
    d.sn = model.snapshot(z);
    const auto n = d.sn.r.size();
    for (std::size_t k = 0; k < n; ++k)
        if (!grid.inside_padded(d.sn.r[k]))
            throw ConfigError("particle " + std::to_string(k) + " outside the grid box padded by h");
    const auto ps = pair_sum<double>(d.sn.r, model.pair, nullptr, true);
    d.e = ps.site_energy;
    d.grad_ext.assign(n, Vec3::Zero());
    for (std::size_t k = 0; k < n; ++k) {
        if (model.ext.active()) {
            d.e[k] += model.ext.energy(d.sn.r[k]);
            d.grad_ext[k] = model.ext.gradient(d.sn.r[k]);
        }
        d.twice_kin += model.masses[k] * d.sn.v[k].squaredNorm();
    }
    const auto rc = model.pair.cutoff();
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = j + 1; k < n; ++k) {
            const Vec3 x = d.sn.r[j] - d.sn.r[k];
            const double dist = x.norm();
            if (rc && dist >= *rc) continue;
            d.bonds.push_back({j, k, x, model.pair.derivative(dist) / dist});
        }
    d.PF = (model.P.array() * d.sn.F.array()).sum();
    return d;
}

/// Per-node accumulator for one time sample. Node fields are laid out
/// node-major with pass-1 components first.
class TimeAccumulator {
public:
    TimeAccumulator(std::size_t nodes, const std::array<int, field_count>& offset, int c1, int c)
        : nodes_(nodes), off_(offset), c1_(c1), c_(c), sum_(nodes * c, 0.0), sq_(nodes * c, 0.0), scratch_(nodes * c, 0.0),
          shift_(nodes * c, 0.0), count_(nodes, 0), touched_flag_(nodes, 0)
    {
    }

    double* slot(std::size_t node, FieldId id)
    {
        if (!touched_flag_[node]) {
            touched_flag_[node] = 1;
            touched_.push_back(node);
        }
        return &scratch_[node * c_ + off_[static_cast<std::size_t>(id)]];
    }

    bool active(FieldId id) const { return off_[static_cast<std::size_t>(id)] >= 0; }

    /// Adds the scratch values of one sample to the running sums. Sums are
    /// shifted by the first value seen at each node to avoid cancellation.
    void flush(int from, int to)
    {
        for (std::size_t node : touched_) {
            double* s = &scratch_[node * c_];
            double* a = &sum_[node * c_];
            double* b = &sq_[node * c_];
            double* k = &shift_[node * c_];
            if (count_[node]++ == 0)
                for (int c = from; c < to; ++c) k[c] = s[c];
            for (int c = from; c < to; ++c) {
                const double d = s[c] - k[c];
                a[c] += d;
                b[c] += d * d;
                s[c] = 0.0;
            }
            touched_flag_[node] = 0;
        }
        touched_.clear();
    }

    /// Starts the second group of components: counts restart per group.
    void restart_counts() { std::fill(count_.begin(), count_.end(), 0); }

    int pass1_end() const { return c1_; }
    int width() const { return c_; }

    void finalize(std::size_t M, int from, int to, std::vector<double>& mean, std::vector<double>& se) const
    {
        mean.assign(nodes_ * c_, 0.0);
        se.assign(nodes_ * c_, 0.0);
        const double m = static_cast<double>(M);
        for (std::size_t i = 0; i < nodes_; ++i) {
            // samples that never reached this node contribute zeros
            const double missing = m - static_cast<double>(count_[i]);
            for (int c = from; c < to; ++c) {
                const std::size_t idx = i * c_ + c;
                const double K = shift_[idx];
                const double a = sum_[idx] - missing * K;
                const double b = sq_[idx] + missing * K * K;
                const double d = a / m;
                mean[idx] = K + d;
                if (M > 1) se[idx] = std::sqrt(std::max(0.0, (b - m * d * d) / (m - 1.0)) / m);
            }
        }
    }

private:
    std::size_t nodes_;
    std::array<int, field_count> off_;
    int c1_, c_;
    std::vector<double> sum_, sq_, scratch_, shift_;
    std::vector<std::size_t> count_;
    std::vector<std::uint8_t> touched_flag_;
    std::vector<std::size_t> touched_;
};

inline void add_scaled(double* dst, double a) { dst[0] += a; }
inline void add_scaled(double* dst, const Vec3& a)
{
    for (int i = 0; i < 3; ++i) dst[i] += a(i);
}
inline void add_scaled(double* dst, const Mat3& a)
{
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) dst[3 * i + j] += a(i, j);
}

} // namespace detail

/// Kernel-regularized ensemble fields of every catalog entry applicable to
/// the batch backend. Time samples are the stored trajectory samples; for NH
/// they sit on the shared virtual-time grid and rates are taken of the
/// s-weighted operands (*_sw).
inline FieldSet extract_fields(const ExtractionModel& model, const EnsembleBatch& batch, const GridSpec& grid,
                               const FieldOptions& opt = {})
{
    grid.validate();
    if (batch.size() == 0) throw ConfigError("extract_fields: empty batch");
    if (batch.backend != model.backend) throw ConfigError("extract_fields: batch backend does not match the system");
    const std::size_t M = batch.size();
    const std::size_t T = batch.trajectories[0].size();
    for (const auto& tr : batch.trajectories)
        if (tr.size() != T) throw ConfigError("extract_fields: trajectories have different sample counts");

    const Backend be = model.backend;
    const bool nh = be == Backend::NH, apr = be == Backend::APR;
    const std::size_t N = model.masses.size();
    const double invN = 1.0 / static_cast<double>(N);

    FieldSet fs;
    fs.backend = be;
    fs.grid = grid;
    fs.samples = M;
    fs.times = nh ? batch.trajectories[0].tau() : batch.trajectories[0].t();
    double total_mass = 0.0;
    for (double m : model.masses) total_mass += m;
    fs.rho_floor = opt.rho_floor_factor * total_mass / grid.box_volume();
    const std::size_t nodes = grid.node_count();

    // Layout of node-accumulated fields.
    static constexpr FieldId pass1[] = {FieldId::n,          FieldId::rho,          FieldId::rho_v,        FieldId::eps_K,
                                        FieldId::eps_V,      FieldId::f_e,          FieldId::sigma_eps0,   FieldId::T_V,
                                        FieldId::sigma_rho,  FieldId::sigma_K,      FieldId::sigma_V,      FieldId::sigma_bar_ps,
                                        FieldId::sigma_bar_s, FieldId::eps_bar_ps,  FieldId::eps_bar_s,    FieldId::eps_bar_P,
                                        FieldId::rho_sw,     FieldId::rho_v_sw,     FieldId::eps_K_sw,     FieldId::eps_V_sw,
                                        FieldId::eps_bar_ps_sw, FieldId::eps_bar_s_sw};
    static constexpr FieldId pass2[] = {FieldId::T_K, FieldId::q_K, FieldId::q_V, FieldId::q_T,
                                        FieldId::q_ps, FieldId::q_s, FieldId::q_P};
    std::array<int, field_count> offset;
    offset.fill(-1);
    int C = 0;
    for (FieldId id : pass1)
        if (applicable(id, be)) {
            offset[static_cast<std::size_t>(id)] = C;
            C += component_count(field_info(id).order);
        }
    const int C1 = C;
    for (FieldId id : pass2)
        if (applicable(id, be)) {
            offset[static_cast<std::size_t>(id)] = C;
            C += component_count(field_info(id).order);
        }

    for (FieldId id : pass1)
        if (applicable(id, be)) fs.create(id);
    for (FieldId id : pass2)
        if (applicable(id, be)) fs.create(id);
    fs.create(FieldId::v);
    fs.defined.assign(T * nodes, 0);

    // Uniform (collective) fields are plain per-sample scalars.
    std::vector<FieldId> uniform;
    for (FieldId id : {FieldId::eps_ps, FieldId::eps_s, FieldId::sigma_ps, FieldId::sigma_s, FieldId::eps_ps_sw,
                       FieldId::eps_s_sw, FieldId::eps_P})
        if (applicable(id, be)) uniform.push_back(id);
    std::vector<std::vector<Estimate>> uniform_est(uniform.size(), std::vector<Estimate>(T));

    const BondQuadrature quad;
    auto off = [&](FieldId id) { return offset[static_cast<std::size_t>(id)]; };

    parallel_for(T, opt.threads, [&](std::size_t ti) {
        detail::TimeAccumulator acc(nodes, offset, C1, C);
        std::vector<NodeWeight> dep;
        std::vector<std::vector<double>> uvals(uniform.size(), std::vector<double>(M));
        std::vector<detail::SampleData> data(M);

        for (std::size_t m = 0; m < M; ++m) {
            data[m] = detail::prepare_sample(model, grid, batch.trajectories[m].state(ti));
            const auto& d = data[m];
            const double s = d.sn.s, ps = d.sn.ps;
            const double lns = nh ? std::log(s) : 0.0;
            const double rate_ps = ps / model.Q;
            const double src_bar_ps = ps * ps * ps / (2.0 * model.Q * model.Q) + rate_ps * (d.twice_kin - model.A);
            const double src_bar_s = rate_ps * model.A * lns;
            const double ebar_ps = ps * ps / (2.0 * model.Q);
            const double ebar_s = model.A * (lns - 1.0);

            for (std::size_t k = 0; k < N; ++k) {
                deposit(grid, d.sn.r[k], dep);
                const double mk = model.masses[k];
                const Vec3& vk = d.sn.v[k];
                const double ek = 0.5 * mk * vk.squaredNorm();
                for (const auto& nw : dep) {
                    const double w = nw.w;
                    double* base = acc.slot(nw.node, FieldId::n) - off(FieldId::n);
                    base[off(FieldId::n)] += invN * w;
                    base[off(FieldId::rho)] += mk * w;
                    detail::add_scaled(base + off(FieldId::rho_v), Vec3(mk * w * vk));
                    base[off(FieldId::eps_K)] += ek * w;
                    base[off(FieldId::eps_V)] += d.e[k] * w;
                    detail::add_scaled(base + off(FieldId::f_e), Vec3(-w * d.grad_ext[k]));
                    if (off(FieldId::sigma_eps0) >= 0) base[off(FieldId::sigma_eps0)] += d.grad_ext[k].dot(vk) * w;
                    if (nh) {
                        base[off(FieldId::sigma_rho)] += rate_ps * mk * w;
                        base[off(FieldId::sigma_K)] += -rate_ps * ek * w;
                        base[off(FieldId::sigma_V)] += rate_ps * d.e[k] * w;
                        base[off(FieldId::sigma_bar_ps)] += src_bar_ps * invN * w;
                        base[off(FieldId::sigma_bar_s)] += src_bar_s * invN * w;
                        base[off(FieldId::eps_bar_ps)] += ebar_ps * invN * w;
                        base[off(FieldId::eps_bar_s)] += ebar_s * invN * w;
                        base[off(FieldId::rho_sw)] += s * (mk * w);
                        detail::add_scaled(base + off(FieldId::rho_v_sw), Vec3(s * (mk * w * vk)));
                        base[off(FieldId::eps_K_sw)] += s * (ek * w);
                        base[off(FieldId::eps_V_sw)] += s * (d.e[k] * w);
                        base[off(FieldId::eps_bar_ps_sw)] += s * (ebar_ps * invN * w);
                        base[off(FieldId::eps_bar_s_sw)] += s * (ebar_s * invN * w);
                    }
                    if (apr) base[off(FieldId::eps_bar_P)] += -model.omega * d.PF * invN * w;
                }
            }
            for (const auto& b : d.bonds) {
                const Mat3 xx = b.coef * (b.x * b.x.transpose());
                for (int q = 0; q < BondQuadrature::size; ++q) {
                    const Vec3 point = quad.alpha[q] * d.sn.r[b.j] + (1.0 - quad.alpha[q]) * d.sn.r[b.k];
                    deposit(grid, point, dep);
                    for (const auto& nw : dep)
                        detail::add_scaled(acc.slot(nw.node, FieldId::T_V), Mat3(quad.weight[q] * nw.w * xx));
                }
            }
            acc.flush(0, C1);

            for (std::size_t u = 0; u < uniform.size(); ++u) {
                double val = 0.0;
                switch (uniform[u]) {
                case FieldId::eps_ps: val = ebar_ps / model.omega; break;
                case FieldId::eps_s: val = ebar_s / model.omega; break;
                case FieldId::sigma_ps: val = src_bar_ps / model.omega; break;
                case FieldId::sigma_s: val = src_bar_s / model.omega; break;
                case FieldId::eps_ps_sw: val = s * (ebar_ps / model.omega); break;
                case FieldId::eps_s_sw: val = s * (ebar_s / model.omega); break;
                case FieldId::eps_P: val = -d.PF; break;
                default: break;
                }
                uvals[u][m] = val;
            }
        }

        std::vector<double> mean, se;
        acc.finalize(M, 0, C1, mean, se);

        acc.restart_counts();

        // Continuum velocity.
        std::vector<Vec3> vnode(nodes, Vec3::Zero());
        std::vector<Vec3> vse(nodes, Vec3::Zero());
        for (std::size_t i = 0; i < nodes; ++i) {
            const double rho = mean[i * C + off(FieldId::rho)];
            if (rho > fs.rho_floor) {
                fs.defined[ti * nodes + i] = 1;
                for (int a = 0; a < 3; ++a) {
                    vnode[i](a) = mean[i * C + off(FieldId::rho_v) + a] / rho;
                    // leading-order error, fluctuations of rho neglected
                    vse[i](a) = se[i * C + off(FieldId::rho_v) + a] / rho;
                }
            }
        }

        for (std::size_t m = 0; m < M; ++m) {
            const auto& d = data[m];
            const double ps = d.sn.ps;
            const double lns = nh ? std::log(d.sn.s) : 0.0;
            const double cps = ps * ps / (2.0 * model.Q) * invN;
            const double cs = model.A * (lns - 1.0) * invN;
            const double cP = -model.omega * d.PF * invN;
            for (std::size_t k = 0; k < N; ++k) {
                deposit(grid, d.sn.r[k], dep);
                const double mk = model.masses[k];
                for (const auto& nw : dep) {
                    const double w = nw.w;
                    const Vec3 c = d.sn.v[k] - vnode[nw.node];
                    double* base = acc.slot(nw.node, FieldId::T_K) - off(FieldId::T_K);
                    detail::add_scaled(base + off(FieldId::T_K), Mat3(-mk * w * (c * c.transpose())));
                    detail::add_scaled(base + off(FieldId::q_K), Vec3(0.5 * mk * c.squaredNorm() * w * c));
                    detail::add_scaled(base + off(FieldId::q_T), Vec3(d.e[k] * w * c));
                    if (nh) {
                        detail::add_scaled(base + off(FieldId::q_ps), Vec3(cps * w * c));
                        detail::add_scaled(base + off(FieldId::q_s), Vec3(cs * w * c));
                    }
                    if (apr) detail::add_scaled(base + off(FieldId::q_P), Vec3(cP * w * c));
                }
            }
            for (const auto& b : d.bonds) {
                const Vec3 vbar = 0.5 * (d.sn.v[b.j] + d.sn.v[b.k]);
                for (int q = 0; q < BondQuadrature::size; ++q) {
                    const Vec3 point = quad.alpha[q] * d.sn.r[b.j] + (1.0 - quad.alpha[q]) * d.sn.r[b.k];
                    deposit(grid, point, dep);
                    for (const auto& nw : dep) {
                        const double proj = b.x.dot(vbar - vnode[nw.node]);
                        detail::add_scaled(acc.slot(nw.node, FieldId::q_V), Vec3(-b.coef * proj * quad.weight[q] * nw.w * b.x));
                    }
                }
            }
            acc.flush(C1, C);
        }
        std::vector<double> mean2, se2;
        acc.finalize(M, C1, C, mean2, se2);

        // Scatter into the field set; each time slice is written by one worker.
        for (std::size_t f = 0; f < field_count; ++f) {
            if (offset[f] < 0) continue;
            auto& fld = fs.get(static_cast<FieldId>(f));
            const bool second = offset[f] >= C1;
            const auto& mu = second ? mean2 : mean;
            const auto& sd = second ? se2 : se;
            for (std::size_t i = 0; i < nodes; ++i)
                for (int c = 0; c < fld.comps; ++c) {
                    const std::size_t dst = (ti * nodes + i) * fld.comps + c;
                    fld.mean[dst] = mu[i * C + offset[f] + c];
                    fld.se[dst] = sd[i * C + offset[f] + c];
                }
        }
        auto& vf = fs.get(FieldId::v);
        for (std::size_t i = 0; i < nodes; ++i)
            for (int a = 0; a < 3; ++a) {
                vf.mean[(ti * nodes + i) * 3 + a] = vnode[i](a);
                vf.se[(ti * nodes + i) * 3 + a] = vse[i](a);
            }
        for (std::size_t u = 0; u < uniform.size(); ++u) uniform_est[u][ti] = mean_and_se(uvals[u]);
    });

    for (std::size_t u = 0; u < uniform.size(); ++u) {
        auto& f = fs.create(uniform[u]);
        for (std::size_t ti = 0; ti < T; ++ti)
            for (std::size_t i = 0; i < nodes; ++i) {
                f.mean[ti * nodes + i] = uniform_est[u][ti].mean;
                f.se[ti * nodes + i] = uniform_est[u][ti].se;
            }
    }

    // Derived sums.
    auto& Tf = fs.create(FieldId::T);
    const auto& TK = fs.get(FieldId::T_K);
    const auto& TV = fs.get(FieldId::T_V);
    for (std::size_t i = 0; i < Tf.mean.size(); ++i) {
        Tf.mean[i] = TK.mean[i] + TV.mean[i];
        Tf.se[i] = std::hypot(TK.se[i], TV.se[i]);
    }
    auto& qf = fs.create(FieldId::q);
    // mode-independent part; distributed-mode extras stay separate fields
    const std::vector<FieldId> parts = {FieldId::q_K, FieldId::q_V, FieldId::q_T};
    for (std::size_t i = 0; i < qf.mean.size(); ++i) {
        double s = 0.0, e2 = 0.0;
        for (FieldId id : parts) {
            s += fs.get(id).mean[i];
            e2 += fs.get(id).se[i] * fs.get(id).se[i];
        }
        qf.mean[i] = s;
        qf.se[i] = std::sqrt(e2);
    }

    if (apr) {
        // sigma_eps = d eps_P / dt: central differences, one-sided at the ends
        auto& sf = fs.create(FieldId::sigma_P);
        const auto& ep = fs.get(FieldId::eps_P);
        if (T >= 2) {
            for (std::size_t ti = 0; ti < T; ++ti) {
                const std::size_t a = ti == 0 ? 0 : ti - 1;
                const std::size_t b = ti + 1 == T ? T - 1 : ti + 1;
                const double val = (ep.mean[b * nodes] - ep.mean[a * nodes]) / (fs.times[b] - fs.times[a]);
                for (std::size_t i = 0; i < nodes; ++i) sf.mean[ti * nodes + i] = val;
            }
        }
    }
    return fs;
}

template <class Sys>
FieldSet extract_fields(const Sys& sys, const EnsembleBatch& batch, const GridSpec& grid, const FieldOptions& opt = {})
{
    return extract_fields(extraction_model(sys), batch, grid, opt);
}

// Spec-level views over one extraction.

template <class Sys> FieldSet primary_fields(const Sys& sys, const EnsembleBatch& b, const GridSpec& g, const FieldOptions& o = {})
{
    return extract_fields(sys, b, g, o).select({FieldId::n, FieldId::rho, FieldId::rho_v, FieldId::v, FieldId::eps_K, FieldId::eps_V});
}

inline FieldSet extended_energy_fields_nh(const NHSystem& sys, const EnsembleBatch& b, const GridSpec& g, const FieldOptions& o = {})
{
    return extract_fields(sys, b, g, o).select({FieldId::eps_ps, FieldId::eps_s, FieldId::eps_bar_ps, FieldId::eps_bar_s});
}

inline FieldSet extended_energy_fields_apr(const APRSystem& sys, const EnsembleBatch& b, const GridSpec& g, const FieldOptions& o = {})
{
    return extract_fields(sys, b, g, o).select({FieldId::eps_P, FieldId::eps_bar_P});
}

template <class Sys> FieldSet stress_fields(const Sys& sys, const EnsembleBatch& b, const GridSpec& g, const FieldOptions& o = {})
{
    return extract_fields(sys, b, g, o).select({FieldId::T_K, FieldId::T_V, FieldId::T});
}

template <class Sys> FieldSet heat_flux_fields(const Sys& sys, const EnsembleBatch& b, const GridSpec& g, const FieldOptions& o = {})
{
    return extract_fields(sys, b, g, o)
        .select({FieldId::q_K, FieldId::q_V, FieldId::q_T, FieldId::q_ps, FieldId::q_s, FieldId::q_P, FieldId::q});
}

template <class Sys> FieldSet source_fields(const Sys& sys, const EnsembleBatch& b, const GridSpec& g, const FieldOptions& o = {})
{
    return extract_fields(sys, b, g, o)
        .select({FieldId::sigma_rho, FieldId::sigma_eps0, FieldId::sigma_K, FieldId::sigma_V, FieldId::sigma_ps, FieldId::sigma_s,
                 FieldId::sigma_bar_ps, FieldId::sigma_bar_s, FieldId::sigma_P});
}

template <class Sys> FieldSet external_force_field(const Sys& sys, const EnsembleBatch& b, const GridSpec& g, const FieldOptions& o = {})
{
    return extract_fields(sys, b, g, o).select({FieldId::f_e});
}

} // namespace ikn
