#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sf/attribution/attribution.hpp"
#include "sf/evalreport/evalreport.hpp"
#include "sf/synthcorpus/corpus.hpp"
#include "sf/trainer/trainer.hpp"

namespace sf::cli {

// Relative entries resolve against the experiment directory.
struct Paths {
    std::filesystem::path corpus_dir = "corpus";
    std::filesystem::path checkpoints_dir = "checkpoints";
    std::filesystem::path reports_dir = "reports";
};

struct StudyConfig {
    std::size_t n_samples = 10;  // first n test samples
    std::vector<std::size_t> labels = {0, 1, 2, 3, 4};
    std::size_t anchor_captions = 50;
};

struct RunConfig {
    std::string experiment_name = "reference";
    std::filesystem::path output_root = ".";
    corpus::CorpusConfig corpus;
    train::TrainConfig pretrain;
    train::TrainConfig finetune = train::finetune_config(train::TrainConfig{});
    attr::IGConfig ig;
    StudyConfig study;
    Paths paths;

    void validate() const;
    std::filesystem::path experiment_dir() const;
    std::filesystem::path corpus_dir() const;
    std::filesystem::path checkpoints_dir() const;
    std::filesystem::path reports_dir() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

enum class Mode { cnn, clip };
enum class Data { real, shortcut };

Mode parse_mode(const std::string& s);
Data parse_data(const std::string& s);
std::string model_id(Mode mode, Data data);
inline constexpr const char* kFinetuneSuffix = "-ft";

std::filesystem::path checkpoint_path(const RunConfig& c, const std::string& id);
std::filesystem::path loss_log_path(const RunConfig& c, const std::string& id);
std::filesystem::path anchors_dir(const RunConfig& c, const std::string& id);

using Log = std::function<void(const std::string&)>;

corpus::CorpusSummary cmd_gen(const RunConfig& c, const Log& log = {});
/// Writes {mode}-{data}.ckpt and its loss log; a dual encoder also gets its label anchors.
std::string cmd_train(const RunConfig& c, Mode mode, Data data, const Log& log = {});
/// Writes {id}-ft.ckpt; a dual encoder is converted to a classifier first.
std::string cmd_finetune(const RunConfig& c, const std::string& id, const Log& log = {});
std::vector<eval::EvalResult> cmd_eval(const RunConfig& c, const std::vector<std::string>& ids, const Log& log = {});
/// Cross-model pairs join {mode}-real and {mode}-shortcut when both are listed;
/// every model gets a cross-variant pair.
attr::StudyResult cmd_attribute(const RunConfig& c, const std::vector<std::string>& ids,
                                const std::vector<std::size_t>& sample_ids, const Log& log = {});

/// gen, four trainings, four fine-tunes, eval of all eight, attribution of the
/// four pretrained models.
void run_grid(const RunConfig& c, const Log& log = {});

std::vector<std::string> grid_pretrained_ids();
std::vector<std::string> grid_all_ids();

/// Lowercase hex SHA-256 of a file.
std::string sha256_file(const std::filesystem::path& path);
/// Rewrites {experiment}/MANIFEST.sha256: "<hash>  <relative path>" per file, sorted.
void write_manifest(const RunConfig& c);

/// Process exit code for an exception raised by a command.
int exit_code_for(const std::exception& e);

}  // namespace sf::cli
