#include <CLI11.hpp>

#include <iostream>

#include "lpn/error.hpp"
#include "lpn/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kVerification = 3;

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "key = value config file");
    cmd->add_option("--set", o.overrides, "override, key=value (repeatable)")->take_all();
    cmd->add_option("--out", o.out, "output directory")->required();
    cmd->add_flag("--quiet", o.quiet, "no progress output");
}

int run(const std::string& mode, const Options& o) {
    using namespace lpn;
    const Config config = resolve_config(o.config, o.overrides);
    const RunLog log{o.quiet ? nullptr : &std::cout};
    if (mode == "pretrain") {
        run_pretrain(config, o.out, log);
    } else if (mode == "meta-train") {
        run_meta_train(config, o.out, log);
    } else if (mode == "eval") {
        run_eval(config, o.out, log);
    } else if (mode == "ablate") {
        const auto rows = run_ablation(config, o.out, log);
        if (!o.quiet) std::cout << ablation_csv(rows);
    } else if (mode == "sweep") {
        const auto points = run_sweep(config, o.out, log);
        if (!o.quiet) std::cout << sweep_csv(points);
    } else if (mode == "gradcheck") {
        const GradCheckReport report = run_gradcheck(config, o.out, log);
        const double threshold = config.get_double("gradcheck.threshold");
        const bool ok = report.passed(threshold);
        std::cout << "gradcheck " << (ok ? "passed" : "FAILED") << ": max relative error " << report.max_rel_error
                  << " over " << report.groups.size() << " groups (threshold " << threshold << ")\n";
        return ok ? kOk : kVerification;
    } else if (mode == "dump-attention") {
        const auto files = dump_attention(config, o.out, log);
        if (!o.quiet) std::cout << files.size() << " attention files written to " << o.out << "\n";
    }
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Language-guided prototypical network experiments"};
    app.require_subcommand(1);
    Options options;
    std::string mode;
    for (const char* name : {"pretrain", "meta-train", "eval", "ablate", "sweep", "gradcheck", "dump-attention"}) {
        CLI::App* cmd = app.add_subcommand(name);
        add_common(cmd, options);
        cmd->callback([&mode, name] { mode = name; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }
    try {
        return run(mode, options);
    } catch (const lpn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const lpn::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kData;
    }
}
