#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sf/cli/cli.hpp"

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<std::string> out;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "Run config JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "Override the training and attribution seeds");
    cmd->add_option("--epochs", o.epochs, "Override the epoch count of this command's training");
    cmd->add_option("--out", o.out, "Override the output root");
    cmd->add_flag("-q,--quiet", o.quiet, "Only print errors");
}

sf::cli::RunConfig resolve(const Overrides& o, bool finetune_epochs) {
    auto c = sf::cli::load_run_config(o.config);
    if (o.seed) {
        c.pretrain.seed = *o.seed;
        c.finetune.seed = *o.seed;
        c.ig.seed = *o.seed;
    }
    if (o.epochs) {
        (finetune_epochs ? c.finetune : c.pretrain).epochs = *o.epochs;
    }
    if (o.out) {
        c.output_root = *o.out;
    }
    c.validate();
    sf::cli::save_run_config(c, c.experiment_dir() / "run_config.json");
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic shortcut-learning experiments: contrastive vs supervised pretraining"};
    app.require_subcommand(1);
    Overrides o;

    auto* gen = app.add_subcommand("gen", "Generate the synthetic corpus");
    add_common(gen, o);

    std::string mode, data;
    auto* train = app.add_subcommand("train", "Pretrain one model of the grid");
    add_common(train, o);
    train->add_option("--mode", mode, "cnn or clip")->required()->check(CLI::IsMember({"cnn", "clip"}));
    train->add_option("--data", data, "real or shortcut")->required()->check(CLI::IsMember({"real", "shortcut"}));

    std::string checkpoint;
    auto* finetune = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint on the clean subset");
    add_common(finetune, o);
    finetune->add_option("--checkpoint", checkpoint, "Checkpoint id, e.g. clip-shortcut")->required();

    std::vector<std::string> ids;
    auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on real, shortcut and adversarial test sets");
    add_common(eval, o);
    eval->add_option("--checkpoints", ids, "Checkpoint ids (default: all eight grid models)");

    std::vector<std::size_t> samples;
    auto* attribute = app.add_subcommand("attribute", "Attribution maps and consistency for checkpoints");
    add_common(attribute, o);
    attribute->add_option("--checkpoints", ids, "Checkpoint ids (default: the four pretrained models)");
    attribute->add_option("--samples", samples, "Test sample ids (default: the first study.n_samples)");

    auto* grid = app.add_subcommand("grid", "Run gen, train, finetune, eval and attribute end to end");
    add_common(grid, o);

    CLI11_PARSE(app, argc, argv);

    try {
        const auto c = resolve(o, finetune->parsed());
        sf::cli::Log log;
        if (!o.quiet) {
            log = [](const std::string& line) { std::cout << line << std::endl; };
        }
        if (gen->parsed()) {
            sf::cli::cmd_gen(c, log);
        } else if (train->parsed()) {
            sf::cli::cmd_train(c, sf::cli::parse_mode(mode), sf::cli::parse_data(data), log);
        } else if (finetune->parsed()) {
            sf::cli::cmd_finetune(c, checkpoint, log);
        } else if (eval->parsed()) {
            sf::cli::cmd_eval(c, ids.empty() ? sf::cli::grid_all_ids() : ids, log);
        } else if (attribute->parsed()) {
            if (samples.empty()) {
                for (std::size_t i = 0; i < std::min(c.study.n_samples, c.corpus.n_test); ++i) samples.push_back(i);
            }
            sf::cli::cmd_attribute(c, ids.empty() ? sf::cli::grid_pretrained_ids() : ids, samples, log);
        } else if (grid->parsed()) {
            sf::cli::run_grid(c, log);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return sf::cli::exit_code_for(e);
    }
    return 0;
}
