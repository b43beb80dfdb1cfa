#pragma once

#include "balance.hpp"
#include "config.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>

namespace ikn {

namespace fs_ = std::filesystem;

// ---------------------------------------------------------------------------
// Checksums

/// 64-bit FNV-1a of a file's bytes.
inline std::uint64_t fnv1a_file(const fs_::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot read '" + p.string() + "'");
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

inline std::string hex64(std::uint64_t v)
{
    char s[17];
    std::snprintf(s, sizeof s, "%016llx", static_cast<unsigned long long>(v));
    return s;
}

// ---------------------------------------------------------------------------
// Number formatting

inline std::string fmt17(double x)
{
    char s[32];
    std::snprintf(s, sizeof s, "%.17g", x);
    return s;
}

inline void write_text(const fs_::path& p, const std::string& text)
{
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + p.string() + "'");
    out << text;
}

// ---------------------------------------------------------------------------
// Field files

inline std::vector<std::string> component_labels(int order)
{
    if (order == 0) return {""};
    if (order == 1) return {"_x", "_y", "_z"};
    std::vector<std::string> out;
    const char ax[3] = {'x', 'y', 'z'};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out.push_back(std::string("_") + ax[i] + ax[j]);
    return out;
}

/// CSV with header t, x, y, z, components..., stderr components...; one row
/// per (time, node).
inline void write_field_csv(const fs_::path& p, const FieldSet& fs, FieldId id)
{
    const auto& f = fs.get(id);
    const auto labels = component_labels(field_info(id).order);
    const std::string name(field_name(id));
    std::string out = "t,x,y,z";
    for (const auto& l : labels) out += "," + name + l;
    for (const auto& l : labels) out += ",se_" + name + l;
    out += "\n";
    const std::size_t nn = fs.nodes();
    for (std::size_t t = 0; t < fs.time_count(); ++t)
        for (std::size_t i = 0; i < nn; ++i) {
            const Vec3 x = fs.grid.node(i);
            out += fmt17(fs.times[t]) + "," + fmt17(x(0)) + "," + fmt17(x(1)) + "," + fmt17(x(2));
            for (int c = 0; c < f.comps; ++c) out += "," + fmt17(f.mean[(t * nn + i) * f.comps + c]);
            for (int c = 0; c < f.comps; ++c) out += "," + fmt17(f.se[(t * nn + i) * f.comps + c]);
            out += "\n";
        }
    write_text(p, out);
}

/// Reads a field CSV written by write_field_csv into `fs` (grid and times
/// must already be set).
inline void read_field_csv(const fs_::path& p, FieldSet& fs, FieldId id)
{
    std::ifstream in(p);
    if (!in) throw ConfigError("fields missing: cannot read '" + p.string() + "'");
    std::string line;
    std::getline(in, line);
    auto& f = fs.create(id);
    const std::size_t rows = fs.time_count() * fs.nodes();
    for (std::size_t r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) throw ConfigError("fields: truncated file '" + p.string() + "'");
        const char* s = line.c_str();
        char* end = nullptr;
        for (int k = 0; k < 4; ++k) {
            std::strtod(s, &end);
            s = end + 1;
        }
        for (int c = 0; c < f.comps; ++c) {
            f.mean[r * f.comps + c] = std::strtod(s, &end);
            s = end + 1;
        }
        for (int c = 0; c < f.comps; ++c) {
            f.se[r * f.comps + c] = std::strtod(s, &end);
            s = end + 1;
        }
    }
}

/// Compact binary: 64-byte little-endian header (magic "IKNF", version, grid
/// shape, time count, tensor order, component count, dx, lower corner) then
/// times, means and standard errors as contiguous float64 arrays.
struct BinaryHeader {
    char magic[4] = {'I', 'K', 'N', 'F'};
    std::uint32_t version = 1;
    std::uint32_t shape[3] = {0, 0, 0};
    std::uint32_t times = 0;
    std::uint32_t order = 0;
    std::uint32_t comps = 0;
    double dx = 0.0;
    double lower[3] = {0.0, 0.0, 0.0};
};
static_assert(sizeof(BinaryHeader) == 64);

inline void write_field_binary(const fs_::path& p, const FieldSet& fs, FieldId id)
{
    const auto& f = fs.get(id);
    BinaryHeader h;
    const auto shape = fs.grid.shape();
    for (int a = 0; a < 3; ++a) {
        h.shape[a] = static_cast<std::uint32_t>(shape[a]);
        h.lower[a] = fs.grid.lower(a);
    }
    h.times = static_cast<std::uint32_t>(fs.time_count());
    h.order = static_cast<std::uint32_t>(field_info(id).order);
    h.comps = static_cast<std::uint32_t>(f.comps);
    h.dx = fs.grid.dx;
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + p.string() + "'");
    out.write(reinterpret_cast<const char*>(&h), sizeof h);
    out.write(reinterpret_cast<const char*>(fs.times.data()), static_cast<std::streamsize>(fs.times.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(f.mean.data()), static_cast<std::streamsize>(f.mean.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(f.se.data()), static_cast<std::streamsize>(f.se.size() * sizeof(double)));
}

inline void read_field_binary(const fs_::path& p, FieldSet& fs, FieldId id)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("fields missing: cannot read '" + p.string() + "'");
    BinaryHeader h;
    in.read(reinterpret_cast<char*>(&h), sizeof h);
    if (!in || std::memcmp(h.magic, "IKNF", 4) != 0) throw ConfigError("fields: '" + p.string() + "' is not an IKNF file");
    const auto shape = fs.grid.shape();
    if (h.times != fs.time_count() || int(h.shape[0]) != shape[0] || int(h.shape[1]) != shape[1] || int(h.shape[2]) != shape[2])
        throw ConfigError("fields: '" + p.string() + "' does not match the grid");
    auto& f = fs.create(id);
    std::vector<double> times(h.times);
    in.read(reinterpret_cast<char*>(times.data()), static_cast<std::streamsize>(times.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(f.mean.data()), static_cast<std::streamsize>(f.mean.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(f.se.data()), static_cast<std::streamsize>(f.se.size() * sizeof(double)));
    if (!in) throw ConfigError("fields: truncated file '" + p.string() + "'");
}

// ---------------------------------------------------------------------------
// Trajectory store

inline void write_batch(const fs_::path& p, const EnsembleBatch& b)
{
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + p.string() + "'");
    const std::uint64_t M = b.size(), T = M ? b.trajectories[0].size() : 0, dim = T ? b.trajectories[0].state(0).size() : 0;
    const std::uint32_t backend = static_cast<std::uint32_t>(b.backend);
    const double dtau = M ? b.trajectories[0].dtau() : 0.0;
    out.write("IKNT", 4);
    out.write(reinterpret_cast<const char*>(&backend), 4);
    out.write(reinterpret_cast<const char*>(&M), 8);
    out.write(reinterpret_cast<const char*>(&T), 8);
    out.write(reinterpret_cast<const char*>(&dim), 8);
    out.write(reinterpret_cast<const char*>(&dtau), 8);
    for (const auto& tr : b.trajectories) {
        out.write(reinterpret_cast<const char*>(tr.tau().data()), static_cast<std::streamsize>(T * 8));
        out.write(reinterpret_cast<const char*>(tr.t().data()), static_cast<std::streamsize>(T * 8));
        for (const auto& z : tr.states()) out.write(reinterpret_cast<const char*>(z.data()), static_cast<std::streamsize>(dim * 8));
    }
}

inline EnsembleBatch read_batch(const fs_::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("trajectories missing: cannot read '" + p.string() + "'");
    char magic[4];
    std::uint32_t backend = 0;
    std::uint64_t M = 0, T = 0, dim = 0;
    double dtau = 0.0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&backend), 4);
    in.read(reinterpret_cast<char*>(&M), 8);
    in.read(reinterpret_cast<char*>(&T), 8);
    in.read(reinterpret_cast<char*>(&dim), 8);
    in.read(reinterpret_cast<char*>(&dtau), 8);
    if (!in || std::memcmp(magic, "IKNT", 4) != 0) throw ConfigError("'" + p.string() + "' is not a trajectory file");
    EnsembleBatch b;
    b.backend = static_cast<Backend>(backend);
    for (std::uint64_t m = 0; m < M; ++m) {
        std::vector<double> tau(T), t(T);
        in.read(reinterpret_cast<char*>(tau.data()), static_cast<std::streamsize>(T * 8));
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(T * 8));
        Trajectory tr(b.backend, dtau);
        for (std::uint64_t k = 0; k < T; ++k) {
            VecX z(static_cast<Eigen::Index>(dim));
            in.read(reinterpret_cast<char*>(z.data()), static_cast<std::streamsize>(dim * 8));
            tr.append(std::move(z), tau[k], t[k]);
        }
        b.trajectories.push_back(std::move(tr));
    }
    if (!in) throw ConfigError("trajectories: truncated file '" + p.string() + "'");
    return b;
}

// ---------------------------------------------------------------------------
// Balance reports

inline json report_json(const BalanceReport& r)
{
    json j;
    j["backend"] = std::string(to_string(r.backend));
    j["mode"] = std::string(mode_name(r.mode));
    j["samples"] = r.samples;
    std::size_t mask_nodes = 0;
    for (auto m : r.mask) mask_nodes += m;
    j["mask_nodes"] = mask_nodes;
    for (const auto& e : r.entries) {
        json je;
        je["l2"] = e.l2;
        je["linf"] = e.linf;
        je["reference"] = e.reference;
        je["relative"] = e.relative;
        for (const auto& t : e.terms) je["terms"][t.name] = t.l2;
        je["times"] = e.times;
        je["integrated"] = e.integrated;
        j["entries"][e.name] = je;
    }
    return j;
}

inline void write_residual_csv(const fs_::path& p, const BalanceReport& r, const BalanceEntry& e)
{
    std::string out = "t,x,y,z";
    const auto labels = component_labels(e.comps == 1 ? 0 : 1);
    for (const auto& l : labels) out += ",residual" + l;
    out += "\n";
    const std::size_t nn = r.grid.node_count();
    for (std::size_t t = 0; t < e.times.size(); ++t)
        for (std::size_t i = 0; i < nn; ++i) {
            if (!r.mask[i]) continue;
            const Vec3 x = r.grid.node(i);
            out += fmt17(e.times[t]) + "," + fmt17(x(0)) + "," + fmt17(x(1)) + "," + fmt17(x(2));
            for (int c = 0; c < e.comps; ++c) out += "," + fmt17(e.residual[(t * nn + i) * e.comps + c]);
            out += "\n";
        }
    write_text(p, out);
}

// ---------------------------------------------------------------------------
// Manifest

/// Config echo, code version, seed and checksums of every file below `dir`
/// (except the manifest itself), keyed by relative path.
inline json build_manifest(const fs_::path& dir, const RunConfig& c)
{
    json j;
    j["manifest_version"] = 1;
    j["code_version"] = std::string(version_string);
    j["seed"] = c.density.seed;
    j["config"] = c.source;
    std::vector<std::string> files;
    for (const auto& e : fs_::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(fs_::relative(e.path(), dir).generic_string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) j["files"][f] = hex64(fnv1a_file(dir / f));
    return j;
}

inline void write_manifest(const fs_::path& dir, const RunConfig& c) { write_text(dir / "manifest.json", build_manifest(dir, c).dump(2) + "\n"); }

/// Accepts a config document or a manifest (whose "config" member is used).
inline RunConfig parse_config_or_manifest(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (j.is_object() && j.contains("manifest_version")) {
        if (!j.contains("config")) throw ConfigError("manifest: missing config");
        return parse_config(j.at("config"));
    }
    return parse_config(j);
}

} // namespace ikn
