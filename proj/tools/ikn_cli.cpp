#include <ikn/checks.hpp>
#include <ikn/io.hpp>

#include <CLI11.hpp>

#include <iostream>

using namespace ikn;

namespace {

struct Options {
    std::string config;
    std::string out;
    unsigned threads = 0;
    std::optional<std::uint64_t> seed;
};

RunConfig load(const Options& o)
{
    if (o.config.empty()) throw ConfigError("--config: required");
    RunConfig c = parse_config_or_manifest(o.config);
    if (o.seed) {
        c.density.seed = *o.seed;
        c.source["ensemble"]["seed"] = *o.seed;
    }
    if (!o.out.empty()) c.output_dir = o.out;
    return c;
}

fs_::path prepare_dir(const RunConfig& c)
{
    const fs_::path dir(c.output_dir);
    fs_::create_directories(dir);
    return dir;
}

EnsembleBatch simulate(const RunConfig& c, unsigned threads)
{
    return with_system(c, [&](const auto& sys) {
        BatchOptions bo;
        bo.threads = threads;
        bo.stride = c.stride;
        return run_batch(sys, c.density, c.M, c.integrator, c.n_steps, bo);
    });
}

void write_conservation(const fs_::path& p, const EnsembleBatch& b)
{
    std::string out = "trajectory,H0,max_rel_drift,max_momentum_drift\n";
    for (std::size_t m = 0; m < b.size(); ++m) {
        const auto& mon = b.trajectories[m].monitor;
        out += std::to_string(m) + "," + fmt17(mon.H0) + "," + fmt17(mon.max_rel_drift) + "," + fmt17(mon.max_momentum_drift) + "\n";
    }
    write_text(p, out);
}

int cmd_run(const Options& o)
{
    const auto c = load(o);
    const auto dir = prepare_dir(c);
    const auto batch = simulate(c, resolve_threads(o.threads));
    write_batch(dir / "trajectories.bin", batch);
    write_conservation(dir / "conservation.csv", batch);
    write_manifest(dir, c);
    double worst = 0.0;
    for (const auto& tr : batch.trajectories) worst = std::max(worst, tr.monitor.max_rel_drift);
    std::cout << "run: " << batch.size() << " trajectories, " << batch.trajectories[0].size() << " samples, max relative H drift "
              << checks::sci(worst) << "\n";
    return 0;
}

int cmd_fields(const Options& o)
{
    const auto c = load(o);
    const auto dir = prepare_dir(c);
    const unsigned threads = resolve_threads(o.threads);
    EnsembleBatch batch;
    if (fs_::exists(dir / "trajectories.bin")) {
        batch = read_batch(dir / "trajectories.bin");
        if (batch.backend != c.backend || batch.size() != c.M) throw ConfigError("fields: stored trajectories do not match the config");
    } else {
        batch = simulate(c, threads);
        write_batch(dir / "trajectories.bin", batch);
        write_conservation(dir / "conservation.csv", batch);
    }
    const auto fs = with_system(c, [&](const auto& sys) { return extract_fields(sys, batch, c.grid, FieldOptions{threads}); });
    const auto fdir = dir / "fields";
    fs_::create_directories(fdir);
    json meta;
    meta["backend"] = std::string(to_string(fs.backend));
    meta["samples"] = fs.samples;
    meta["times"] = fs.times;
    meta["rho_floor"] = fs.rho_floor;
    meta["format"] = c.binary_fields ? "binary" : "csv";
    for (FieldId id : fs.ids()) {
        const std::string name(field_name(id));
        meta["fields"].push_back(name);
        write_field_csv(fdir / (name + ".csv"), fs, id);
        if (c.binary_fields) write_field_binary(fdir / (name + ".iknf"), fs, id);
    }
    write_text(fdir / "meta.json", meta.dump(2) + "\n");
    write_manifest(dir, c);
    std::cout << "fields: " << fs.ids().size() << " fields on " << fs.nodes() << " nodes x " << fs.time_count() << " times\n";
    return 0;
}

FieldSet load_fields(const RunConfig& c, const fs_::path& dir)
{
    const auto fdir = dir / "fields";
    if (!fs_::exists(fdir / "meta.json")) throw ConfigError("fields missing: run 'ikn fields' first");
    std::ifstream in(fdir / "meta.json");
    const json meta = json::parse(in);
    FieldSet fs;
    fs.backend = c.backend;
    fs.grid = c.grid;
    fs.times = meta.at("times").get<std::vector<double>>();
    fs.samples = meta.at("samples").get<std::size_t>();
    fs.rho_floor = meta.at("rho_floor").get<double>();
    const bool binary = meta.value("format", "csv") == "binary";
    for (const auto& n : meta.at("fields")) {
        const auto name = n.get<std::string>();
        const FieldId id = field_by_name(name);
        if (binary)
            read_field_binary(fdir / (name + ".iknf"), fs, id);
        else
            read_field_csv(fdir / (name + ".csv"), fs, id);
    }
    return fs;
}

int cmd_balance(const Options& o)
{
    const auto c = load(o);
    const fs_::path dir(c.output_dir);
    const auto fs = load_fields(c, dir);
    const auto bdir = dir / "balance";
    fs_::create_directories(bdir);
    for (EnergyMode mode : energy_modes(c)) {
        const auto rep = balance_report(fs, BalanceSpec{c.backend, mode});
        const std::string tag(mode_name(mode));
        write_text(bdir / ("report_" + tag + ".json"), report_json(rep).dump(2) + "\n");
        for (const auto& e : rep.entries) {
            // mass and momentum do not depend on the mode; write them once
            if (e.balance != Balance::Energy && mode != energy_modes(c).front()) continue;
            write_residual_csv(bdir / (e.name + "_residual.csv"), rep, e);
            std::cout << "balance " << e.name << ": L2 " << checks::sci(e.l2) << ", Linf " << checks::sci(e.linf) << ", relative "
                      << checks::sci(e.relative) << "\n";
        }
    }
    write_manifest(dir, c);
    return 0;
}

int cmd_check(const Options& o)
{
    if (!o.config.empty()) load(o);
    bool ok = true;
    for (const auto& r : run_check_suite()) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        ok = ok && r.passed;
    }
    std::cout << (ok ? "all checks passed\n" : "check suite FAILED\n");
    return ok ? 0 : 3;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Extended-Hamiltonian particle dynamics with continuum field extraction and balance verification"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;
    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", o.config, "run configuration (JSON) or manifest");
        if (config_required) opt->required();
        sub->add_option("--out", o.out, "output directory (overrides output.dir)");
        sub->add_option("--threads", o.threads, "worker threads (default: hardware)");
        sub->add_option("--seed", seed, "override ensemble.seed");
    };
    auto* run = app.add_subcommand("run", "integrate the ensemble and store trajectories");
    auto* fields = app.add_subcommand("fields", "extract continuum fields");
    auto* balance = app.add_subcommand("balance", "evaluate balance-law residuals from stored fields");
    auto* check = app.add_subcommand("check", "run the built-in verification suite");
    add_common(run, true);
    add_common(fields, true);
    add_common(balance, true);
    add_common(check, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    for (auto* sub : {run, fields, balance, check})
        if (sub->parsed() && sub->count("--seed")) o.seed = seed;

    try {
        if (run->parsed()) return cmd_run(o);
        if (fields->parsed()) return cmd_fields(o);
        if (balance->parsed()) return cmd_balance(o);
        return cmd_check(o);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
}
