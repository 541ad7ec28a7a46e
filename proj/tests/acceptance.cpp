// Runs every missing pipeline stage for a config, then prints one PASS/FAIL
// line per acceptance criterion. Exit status is non-zero if any criterion fails.
#include "latstab/acceptance.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv) {
    using namespace latstab;
    CLI::App app{"acceptance criteria for a latstab run"};
    std::string config, workspace;
    bool evaluate_only = false;
    app.add_option("--config", config, "run configuration")->required()->check(CLI::ExistingFile);
    app.add_option("--workspace", workspace, "workspace directory");
    app.add_flag("--evaluate-only", evaluate_only, "skip running stages");
    CLI11_PARSE(app, argc, argv);

    try {
        auto c = pipeline::load_config(config);
        if (!workspace.empty()) c.workspace = workspace;
        const pipeline::Workspace ws(c.workspace);
        if (!evaluate_only) pipeline::run_all({c, ws, &std::cout});
        const auto criteria = acceptance::evaluate(c, ws, &std::cout);
        acceptance::print(std::cout, criteria);
        return acceptance::all_pass(criteria) ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "acceptance: " << e.what() << std::endl;
        return 2;
    }
}
