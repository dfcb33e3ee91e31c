#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "sf/diffcore/graph.hpp"
#include "sf/encoders/encoders.hpp"
#include "sf/synthcorpus/corpus.hpp"

namespace sf::train {

enum class OptimizerKind { adam, sgd };

struct AugmentConfig {
    bool enabled = true;
    int max_shift = 3;          // pixels, edge-replicated
    bool horizontal_flip = false;
    double brightness = 0.05;   // uniform offset half-width
    double noise_std = 0.02;
};

struct TrainConfig {
    std::size_t epochs = 50;
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    double temperature = 0.07;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 7;
    bool shuffle = true;
    AugmentConfig augment;
    // Fine-tuning only: keep the conv trunk fixed and train the head.
    bool freeze_trunk = false;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

inline constexpr std::size_t kFinetuneEpochs = 100;
inline constexpr double kFinetuneLrFactor = 0.1;

/// Fine-tuning settings derived from a pretraining config: 100 epochs at a
/// tenth of the learning rate, everything else inherited.
TrainConfig finetune_config(const TrainConfig& pretrain);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// c(a,t) + c(b,t) + c(a,b), c(X,Y) = ½[CE_rows(S/τ) + CE_rows(Sᵀ/τ)], S = cos(X,Y).
template <typename Real>
diff::Var<Real> clip_loss(diff::Var<Real> a, diff::Var<Real> b, diff::Var<Real> t, Real temperature);

/// Summed per-label BCE over a logits n×5 matrix.
template <typename Real>
diff::Var<Real> supervised_loss(diff::Var<Real> logits, std::span<const std::uint8_t> labels);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerState {
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

OptimizerConfig optimizer_config(const TrainConfig& c);

struct StepResult {
    std::vector<std::vector<float>> params;
    OptimizerState state;
};

/// One bias-corrected Adam (or plain SGD) update. Pure: inputs are not modified.
StepResult optimizer_step(const std::vector<std::vector<float>>& params, const std::vector<std::vector<float>>& grads,
                          const OptimizerState& state, const OptimizerConfig& config);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Which rendering of a sample the loop reads.
enum class ImageSource { as_stored, clean };

/// Shifted, jittered copy of `image`. Streams are keyed by the caller.
corpus::Image augment_image(const corpus::Image& image, const AugmentConfig& config, Rng& rng);

// ---------------------------------------------------------------------------
// Loops
// ---------------------------------------------------------------------------

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double learning_rate = 0;
};

template <typename P>
struct TrainResult {
    P params;
    std::vector<EpochLog> log;
    // 1-based epoch whose parameters were returned; 0 when no epoch ran.
    std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Contrastive training of the image encoder and the text projection; the
/// text embedding table and hidden layer stay fixed.
TrainResult<enc::DualEncoderParams> train_clip(const corpus::SplitData& train, const corpus::SplitData& val,
                                               ImageSource source, const enc::DualEncoderParams& init,
                                               const TrainConfig& config, const EpochCallback& on_epoch = {});

TrainResult<enc::ClassifierParams> train_cnn(const corpus::SplitData& train, const corpus::SplitData& val,
                                             ImageSource source, const enc::ClassifierParams& init,
                                             const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Supervised training on clean images at the given config (callers pass
/// finetune_config(...)); validation also reads clean images.
TrainResult<enc::ClassifierParams> finetune(const enc::ClassifierParams& init, const corpus::SplitData& data,
                                            const corpus::SplitData& val, const TrainConfig& config,
                                            const EpochCallback& on_epoch = {});

/// Validation loss of the unaugmented split, averaged over batches in index order.
double clip_validation_loss(const enc::DualEncoderParams& params, const corpus::SplitData& data, ImageSource source,
                            const TrainConfig& config);
double supervised_validation_loss(const enc::ClassifierParams& params, const corpus::SplitData& data,
                                  ImageSource source, const TrainConfig& config);

/// CSV with header epoch,train_loss,val_loss,lr.
void write_loss_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);
std::vector<EpochLog> read_loss_log(const std::filesystem::path& path);

}  // namespace sf::train
