#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "spdelab/spdelab.hpp"

namespace {

enum ExitCode { kOk = 0, kChecksFailed = 1, kConfigError = 2, kRuntimeError = 3 };

spdelab::ExperimentSpec load(const std::string& path) {
    return spdelab::parse_config(spdelab::read_text_file(path));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"spdelab: stochastic PDE laboratory with dynamical boundary conditions"};
    app.require_subcommand(1);

    std::string config_path;
    std::size_t workers = 0;
    std::string output_dir;
    bool dump = false;

    auto* run = app.add_subcommand("run", "run the experiment described by a config file");
    run->add_option("config", config_path, "YAML config file")->required()->check(CLI::ExistingFile);
    run->add_option("--workers", workers, "worker threads (overrides ensemble.workers)")->check(CLI::PositiveNumber);
    run->add_option("--output-dir", output_dir, "output directory (overrides output_dir)");
    run->add_flag("--dump-operators", dump, "write K, R, M, B as Matrix Market files");

    auto* validate = app.add_subcommand("validate", "parse and validate a config file, print the applied config");
    validate->add_option("config", config_path, "YAML config file")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        const auto spec = load(config_path);
        if (validate->parsed()) {
            std::cout << spdelab::serialize_config(spec);
            if (!spec.applied_defaults.empty()) {
                std::cout << "# defaults applied:";
                for (const auto& k : spec.applied_defaults) std::cout << ' ' << k;
                std::cout << '\n';
            }
            return kOk;
        }
        spdelab::RunOptions opts;
        if (workers > 0) opts.workers = workers;
        if (!output_dir.empty()) opts.output_dir = output_dir;
        opts.dump_operators = dump;
        const auto outcome = spdelab::run_experiment(spec, opts);
        for (const auto& c : outcome.checks)
            std::cout << (c.passed ? "ok    " : "FAIL  ") << c.name << "  " << c.detail << '\n';
        if (outcome.degraded) std::cout << "FAIL  ensemble degraded (more than half the paths failed at some epsilon)\n";
        std::cout << "outputs in " << outcome.output_dir.string() << '\n';
        return outcome.exit_code == 0 ? kOk : kChecksFailed;
    } catch (const spdelab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const spdelab::DomainError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntimeError;
    }
}
