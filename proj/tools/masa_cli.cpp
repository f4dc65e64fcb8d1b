// masa: run, sweep and analyze adapter experiments from JSON configs.
#include <iostream>

#include "CLI11.hpp"
#include "masa/experiment.hpp"

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out, bool force) {
    masa::ExperimentConfig cfg = masa::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.output_dir = out;
    const masa::RunResult r = masa::run_experiment(cfg, force);
    const auto params = masa::params_of(cfg);
    std::cout << "output: " << r.dir.string() << "\n"
              << "trainable params: " << params.total_params << " (" << masa::format_number(params.percent_of_base, 4)
              << "% of base)\n"
              << "steps: " << r.log.steps.size() << "\n"
              << "final mean mse: " << masa::format_number(r.final_eval.mean) << "\n";
    return kOk;
}

int cmd_sweep(const std::string& config_path, const std::string& axis, const std::vector<std::string>& values,
              const std::string& out, bool force) {
    masa::ExperimentConfig cfg = masa::load_config(config_path);
    if (!out.empty()) cfg.output_dir = out;
    const auto rows = masa::sweep(cfg, axis, values);
    const std::string csv = masa::sweep_csv(rows);
    const std::filesystem::path dir = cfg.output_dir, file = dir / ("sweep_" + axis + ".csv");
    std::error_code ec;
    if (std::filesystem::exists(file, ec) && !force) {
        throw masa::IoError(file.string() + " already exists (use --force to overwrite)");
    }
    std::filesystem::create_directories(dir, ec);
    if (ec) throw masa::IoError("cannot create " + dir.string() + ": " + ec.message());
    masa::CsvWriter::write_file(file, csv);
    std::cout << csv << "written: " << file.string() << "\n";
    return kOk;
}

int cmd_analyze(const std::string& dir, bool cka, bool ceiling, bool features, const std::string& out) {
    std::set<std::string> which;
    if (cka) which.insert("cka");
    if (ceiling) which.insert("ceiling");
    if (features) which.insert("features");
    if (which.empty()) throw masa::ConfigError("analyze: pass at least one of --cka, --ceiling, --features");
    std::filesystem::path ck = dir;
    if (std::filesystem::exists(ck / "checkpoint" / "manifest.json")) ck /= "checkpoint";
    const std::filesystem::path target = out.empty() ? ck.parent_path() / "analysis" : std::filesystem::path(out);
    for (const auto& f : masa::analyze_checkpoint(ck, which, target)) std::cout << (target / f).string() << "\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-A adapter lab: train, sweep and analyze adapter variants on synthetic tasks"};
    app.require_subcommand(1);

    std::string config_path, out, axis, dir;
    std::optional<std::uint64_t> seed;
    bool force = false, cka = false, ceiling = false, features = false;
    std::vector<std::string> values;

    auto* run = app.add_subcommand("run", "Train one configuration and write reports plus a checkpoint");
    run->add_option("config", config_path, "JSON config file")->required();
    run->add_option("--seed", seed, "Override the master seed");
    run->add_option("--out", out, "Override output_dir");
    run->add_flag("--force", force, "Overwrite an existing output directory");

    auto* sw = app.add_subcommand("sweep", "Vary one axis and tabulate params % and final MSE");
    sw->add_option("config", config_path, "JSON config file")->required();
    sw->add_option("--axis", axis, "num_experts | num_b_heads | group_size | strategy")->required();
    sw->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
    sw->add_option("--out", out, "Override output_dir");
    sw->add_flag("--force", force, "Overwrite an existing sweep table");

    auto* an = app.add_subcommand("analyze", "Recompute analyses from a run or checkpoint directory");
    an->add_option("dir", dir, "Run directory or its checkpoint/ subdirectory")->required();
    an->add_flag("--cka", cka, "Adjacent-layer CKA of A outputs and increments");
    an->add_flag("--ceiling", ceiling, "Information ceilings and increment ranks");
    an->add_flag("--features", features, "Per-sample feature table");
    an->add_option("--out", out, "Output directory (default: <run>/analysis)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*run) return cmd_run(config_path, seed, out, force);
        if (*sw) return cmd_sweep(config_path, axis, values, out, force);
        if (*an) return cmd_analyze(dir, cka, ceiling, features, out);
    } catch (const masa::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const masa::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInternal;
    }
    return kInternal;
}
