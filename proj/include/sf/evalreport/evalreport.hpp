#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sf/encoders/encoders.hpp"
#include "sf/synthcorpus/corpus.hpp"
#include "sf/zeroshot/zeroshot.hpp"

namespace sf::eval {

/// Mann-Whitney AUC with half credit for ties. Throws DegenerateClasses
/// unless both classes are present.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

enum class Variant { real, shortcut, adversarial };
inline constexpr std::array<Variant, 3> kVariants = {Variant::real, Variant::shortcut, Variant::adversarial};
std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct EvalResult {
    std::string model_id;
    Variant variant = Variant::real;
    std::array<double, corpus::kNumLabels> per_label_auc{};
    double average_auc = 0;
};

using Scores = std::array<double, corpus::kNumLabels>;
using ImageScorer = std::function<Scores(const corpus::Image&)>;

/// Label k is scored on the label-k variant of every test image. With
/// `stamp` false no glyph is applied whatever the variant.
EvalResult evaluate_scorer(const std::string& model_id, const corpus::SplitData& test, Variant variant,
                           const ImageScorer& scorer, float glyph_intensity = 1.0f, bool stamp = true);

enum class ScoringMode { logits, zero_shot };

/// Classifier checkpoints score by logits, dual encoders by zero-shot cosine.
ScoringMode scoring_mode(const enc::Checkpoint& checkpoint);

/// `anchors` is required for zero-shot checkpoints and ignored otherwise.
ImageScorer make_scorer(const enc::Checkpoint& checkpoint, const zs::AnchorSet* anchors);

EvalResult evaluate_model(const std::string& model_id, const enc::Checkpoint& checkpoint,
                          const corpus::SplitData& test, Variant variant, const zs::AnchorSet* anchors,
                          float glyph_intensity = 1.0f);

struct ReportMeta {
    std::string experiment_name;
    std::string notes;
};

/// Writes results.csv and report.md into `dir`, rows ordered by (model_id, variant).
void emit_report(std::vector<EvalResult> results, const ReportMeta& meta, const std::filesystem::path& dir);
std::vector<EvalResult> read_results_csv(const std::filesystem::path& path);

inline constexpr std::string_view kResultsHeader =
    "model_id,variant,atelectasis,cardiomegaly,consolidation,edema,pleural_effusion,average";

}  // namespace sf::eval
