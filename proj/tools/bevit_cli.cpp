// bevit — block-expanded ViT domain adaptation workbench.
//
// Subcommands mirror the experiment designs: pretrain, finetune, msdft,
// crosseval, fewshot, forgetting, ablate, metrics, synth. Every run writes its
// fully-resolved config into the output directory; reruns with the same config
// and seed reproduce every file byte for byte.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "bevit/config.hpp"
#include "bevit/error.hpp"
#include "bevit/experiments.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 1;
    std::string precision = "32";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key = value config file");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "root seed; every RNG stream derives from it");
    cmd->add_option("--precision", args.precision, "32 (default) or 64");
}

int dispatch(const std::string& name, const CommonArgs& args) {
    bevit::cfg::KvConfig config;
    if (!args.config_path.empty()) config = bevit::cfg::KvConfig::load(args.config_path);
    bevit::cli::RunContext ctx;
    ctx.out_dir = args.out_dir;
    ctx.seed = args.seed;
    ctx.precision = bevit::cli::precision_from(args.precision);

    if (name == "pretrain") bevit::cli::cmd_pretrain(config, ctx);
    else if (name == "finetune") bevit::cli::cmd_finetune(config, ctx);
    else if (name == "msdft") bevit::cli::cmd_msdft(config, ctx);
    else if (name == "crosseval") bevit::cli::cmd_crosseval(config, ctx);
    else if (name == "fewshot") bevit::cli::cmd_fewshot(config, ctx);
    else if (name == "forgetting") bevit::cli::cmd_forgetting(config, ctx);
    else if (name == "ablate") bevit::cli::cmd_ablate(config, ctx);
    else if (name == "metrics") bevit::cli::cmd_metrics(config, ctx);
    else if (name == "synth") bevit::cli::cmd_synth(config, ctx);
    return 0;
}

int exit_code_for(const bevit::Error& e) {
    switch (e.kind()) {
        case bevit::ErrorKind::Config: return 2;
        case bevit::ErrorKind::Data: return 3;
        case bevit::ErrorKind::Numeric: return 4;
        case bevit::ErrorKind::Io: return 3;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"block-expanded ViT domain adaptation workbench"};
    app.require_subcommand(1);

    const char* names[] = {"pretrain", "finetune",   "msdft",  "crosseval", "fewshot",
                           "forgetting", "ablate", "metrics", "synth"};
    const char* descriptions[] = {
        "self-distillation post-pretraining (unfrozen or block-expanded)",
        "supervised fine-tuning with best-qkappa checkpoint selection",
        "multi-source fine-tuning: pool datasets, evaluate per test set and pooled",
        "train on each dataset, evaluate on all others",
        "few-shot grid with replicate seeds and mean/SD/SEM aggregation",
        "source-domain kNN retention after target-domain adaptation",
        "sweep expansion count, grid split, embedding strategy, or loss",
        "recompute the metric suite from a predictions CSV",
        "generate a synthetic ordinal-stage dataset (PNGs + manifest)",
    };
    CommonArgs args[9];
    for (int i = 0; i < 9; ++i) add_common(app.add_subcommand(names[i], descriptions[i]), args[i]);

    CLI11_PARSE(app, argc, argv);

    for (int i = 0; i < 9; ++i) {
        if (!app.get_subcommand(names[i])->parsed()) continue;
        try {
            return dispatch(names[i], args[i]);
        } catch (const bevit::Error& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return exit_code_for(e);
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return 1;
        }
    }
    return 1;
}
