// Command-line front end: one subcommand per run mode.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "clmtt/cli_io.hpp"

namespace {

struct CommonFlags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool verbose = false;
};

clmtt::RunConfig make_config(clmtt::RunMode mode, const CommonFlags& flags) {
    nlohmann::json doc = nlohmann::json::object();
    std::filesystem::path base;
    if (!flags.config.empty()) {
        std::ifstream in(flags.config);
        if (!in) throw clmtt::ConfigError("config: cannot open '" + flags.config + "'");
        try {
            doc = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw clmtt::ConfigError("config: " + flags.config + " is not valid JSON (" + e.what() + ")");
        }
        if (!doc.is_object()) throw clmtt::ConfigError("config: top level must be an object");
        base = std::filesystem::path(flags.config).parent_path();
    } else if (mode != clmtt::RunMode::Synth) {
        throw clmtt::ConfigError("config: --config is required for " + clmtt::to_string(mode));
    }
    doc["mode"] = clmtt::to_string(mode);
    clmtt::RunConfig cfg = clmtt::parse_config(doc, base);
    if (!flags.out.empty()) cfg.output_dir = flags.out;
    if (flags.seed) cfg.seed = *flags.seed;
    cfg.verbose = cfg.verbose || flags.verbose;
    return cfg;
}

void print_summary(const clmtt::RunConfig& cfg, const clmtt::RunReport& r) {
    std::printf("%s finished in %.2f s, %zu files in %s\n", clmtt::to_string(r.mode).c_str(), r.seconds,
                r.artifacts.size(), cfg.output_dir.string().c_str());
    if (r.fit_rmse) std::printf("fit rmse P %.3e  Q %.3e\n", r.fit_rmse->P, r.fit_rmse->Q);
    if (r.diagnostics) {
        std::printf("solver %s residual %.3e rank %zu\n", r.diagnostics->method.c_str(), r.diagnostics->residual,
                    r.diagnostics->max_rank);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Composite load model estimation with tensor-train densities"};
    app.require_subcommand(1);

    const std::vector<std::pair<clmtt::RunMode, const char*>> modes = {
        {clmtt::RunMode::Simulate, "Simulate the model response to a measured trace"},
        {clmtt::RunMode::Estimate, "Estimate grid parameters from the stationary joint density"},
        {clmtt::RunMode::Sensitivity, "Concentration and variance sensitivity indices"},
        {clmtt::RunMode::Oracle, "Brute-force posterior over at most three parameters"},
        {clmtt::RunMode::Synth, "Write a synthetic trace from a voltage event"},
    };
    CommonFlags flags;
    std::optional<clmtt::RunMode> chosen;
    for (const auto& [mode, help] : modes) {
        CLI::App* sub = app.add_subcommand(clmtt::to_string(mode), help);
        sub->add_option("--config", flags.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--out", flags.out, "Output directory (overrides the config)");
        sub->add_option("--seed", flags.seed, "Seed for sampled index sets");
        sub->add_flag("--verbose", flags.verbose, "Stage timings on stderr");
        const clmtt::RunMode m = mode;
        sub->callback([&chosen, m] { chosen = m; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const clmtt::RunConfig cfg = make_config(*chosen, flags);
        if (cfg.verbose && !cfg.grid.dims.empty()) std::fprintf(stderr, "grid %s\n", clmtt::describe_grid(cfg.grid).c_str());
        const clmtt::RunReport report = clmtt::run_pipeline(cfg);
        print_summary(cfg, report);
        return 0;
    } catch (const clmtt::StageError& e) {
        std::fprintf(stderr, "error [%s]: %s\n", e.stage().c_str(), e.what());
        return 1;
    } catch (const clmtt::ConfigError& e) {
        std::fprintf(stderr, "error [config]: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error [run]: %s\n", e.what());
        return 1;
    }
}
