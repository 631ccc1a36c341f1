#include <iostream>

#include "CLI11.hpp"

#include "covmoe/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Covariate-aware sparse MoE forecasting: training, federation and ablation runs"};
    app.require_subcommand(1);

    covmoe::CommandOptions opts;
    std::string out, checkpoint, axis;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config, "experiment config (JSON)")->required();
        sub->add_option("--out", out, "output directory, overrides the config");
    };
    auto* train = app.add_subcommand("train", "centralized training run");
    auto* fed = app.add_subcommand("fed-sim", "one-shot federated expert sharing");
    auto* ablate = app.add_subcommand("ablate", "ablation table along one axis");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    for (auto* sub : {train, fed, ablate, eval}) add_common(sub);
    ablate->add_option("--axis", axis, "expert-count | gating-strategy | perturbation-grid")->required();
    eval->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (!out.empty()) opts.out = out;
    if (!checkpoint.empty()) opts.checkpoint = checkpoint;
    if (!axis.empty()) opts.axis = axis;

    return covmoe::run_guarded(
        [&] {
            if (*train) covmoe::cmd_train(opts, std::cout);
            else if (*fed) covmoe::cmd_fed_sim(opts, std::cout);
            else if (*ablate) covmoe::cmd_ablate(opts, std::cout);
            else covmoe::cmd_eval(opts, std::cout);
        },
        std::cerr);
}
