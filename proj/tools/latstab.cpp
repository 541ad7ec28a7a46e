// latstab: command-line driver for the pipeline stages and the acceptance check.
#include "latstab/acceptance.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

using namespace latstab;

enum Exit : int {
    ok = 0,
    other_error = 1,
    config_error = 2,
    dependency_error = 3,
    numerical_error = 4,
    acceptance_failure = 5,
    load_error = 6,
};

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return config_error;
        case ErrorKind::dependency: return dependency_error;
        case ErrorKind::numerical:
        case ErrorKind::blow_up:
        case ErrorKind::degenerate_tangent:
        case ErrorKind::training_failure:
        case ErrorKind::search_failure: return numerical_error;
        case ErrorKind::load: return load_error;
        case ErrorKind::contract: return other_error;
    }
    return other_error;
}

struct Options {
    std::string config;
    std::string workspace;
    int members = 0;
    int workers = 0;
    bool evaluate_only = false;
};

pipeline::RunConfig resolve(const Options& o) {
    auto c = pipeline::load_config(o.config);
    if (!o.workspace.empty()) c.workspace = o.workspace;
    if (o.members > 0) c.members = o.members;
    if (o.workers > 0) c.workers = o.workers;
    if (o.members < 0 || o.workers < 0) throw ConfigError("--members and --workers must be positive");
    pipeline::validate(c);
    return c;
}

int run(const std::string& command, const Options& o) {
    const auto c = resolve(o);
    const pipeline::Workspace ws(c.workspace);
    const pipeline::StageContext ctx{c, ws, &std::cout};
    if (command != "check") {
        pipeline::run_stage(pipeline::stage_from_string(command), ctx);
        return ok;
    }
    if (!o.evaluate_only) pipeline::run_all(ctx);
    const auto criteria = acceptance::evaluate(c, ws, &std::cout);
    acceptance::print(std::cout, criteria);
    return acceptance::all_pass(criteria) ? ok : acceptance_failure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lyapunov stability of KS dynamics and its CAE-ESN latent surrogate"};
    app.require_subcommand(1, 1);
    Options o;
    auto add = [&](const std::string& name, const std::string& help) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", o.config, "run configuration (INI)")->required()->check(CLI::ExistingFile);
        sub->add_option("--workspace", o.workspace, "workspace directory, overrides paths.workspace");
        sub->add_option("--members", o.members, "ensemble size, overrides esn.members");
        sub->add_option("--workers", o.workers, "parallel ensemble workers, overrides run.workers");
        return sub;
    };
    add("generate-data", "integrate KS and store the trajectory");
    add("stability-ref", "Lyapunov spectrum and CLV angles of the KS reference");
    add("train-cae", "train the convolutional autoencoder");
    add("train-esn", "encode the data, search ESN hyperparameters and train the ensemble");
    add("predict", "closed-loop forecasts from the test block");
    add("stability-latent", "Lyapunov spectra and CLV angles of every ensemble member");
    add("compare", "compare reference and surrogate stability properties");
    add("check", "run missing stages and evaluate the acceptance criteria")
        ->add_flag("--evaluate-only", o.evaluate_only, "only evaluate existing artifacts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return run(command, o);
    } catch (const Error& e) {
        std::cerr << "latstab " << command << ": " << e.what() << std::endl;
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "latstab " << command << ": " << e.what() << std::endl;
        return other_error;
    }
}
