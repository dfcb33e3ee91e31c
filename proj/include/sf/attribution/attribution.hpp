#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sf/diffcore/graph.hpp"
#include "sf/encoders/encoders.hpp"
#include "sf/synthcorpus/corpus.hpp"
#include "sf/zeroshot/zeroshot.hpp"

namespace sf::attr {

struct IGConfig {
    std::size_t steps = 64;
    std::size_t smoothgrad_n = 8;
    double sigma = 0.1;  // noise std as a fraction of the image's intensity range
    std::uint64_t seed = 11;

    void validate() const;
};

void to_json(nlohmann::json& j, const IGConfig& c);
void from_json(const nlohmann::json& j, IGConfig& c);

struct MapMeta {
    std::size_t steps = 0;
    std::size_t smoothgrad_n = 0;
    double sigma = 0;
    std::string model_id;
};

struct AttributionMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // signed relevance, row-major
    std::size_t target_label = 0;
    MapMeta meta;
};

/// Scalar model output for a 1×H×W image var recorded on `g`.
template <typename Real>
using PredictFn = std::function<diff::Var<Real>(diff::Graph<Real>& g, diff::Var<Real> image)>;

/// Right Riemann sum of the gradient along the straight path from the black
/// image to `image`, times (x - 0).
template <typename Real>
AttributionMap integrated_gradients(const PredictFn<Real>& predict, const corpus::Image& image,
                                    const IGConfig& config, std::size_t target_label = 0,
                                    const std::string& model_id = {});

/// Mean of integrated_gradients over noisy copies of `image`. Noise for copy r
/// comes from the stream (seed, noise_key, target_label, r). sigma = 0 returns
/// integrated_gradients(image) unchanged.
template <typename Real>
AttributionMap smoothgrad_ig(const PredictFn<Real>& predict, const corpus::Image& image, const IGConfig& config,
                             std::uint64_t noise_key, std::size_t target_label = 0,
                             const std::string& model_id = {});

/// Logit of `label` for a classifier.
template <typename Real>
PredictFn<Real> logit_predictor(std::shared_ptr<const enc::ClassifierParams> params, std::size_t label);

/// Cosine score against one label anchor, for encoders before fine-tuning.
template <typename Real>
PredictFn<Real> zero_shot_predictor(std::shared_ptr<const enc::ImageEncoderParams> params, zs::LabelAnchor anchor);

/// Cosine of the flattened maps. Throws UndefinedSimilarity for an all-zero map.
double map_cosine_similarity(const AttributionMap& a, const AttributionMap& b);

// ---------------------------------------------------------------------------
// Consistency study
// ---------------------------------------------------------------------------

struct StudyModel {
    std::string id;
    // Predict function attributing label k.
    std::function<PredictFn<float>(std::size_t label)> predictor;
};

enum class PairKind {
    cross_model,    // two models, same real image
    cross_variant,  // one model, real image vs the image carrying glyph k
};

struct PairSpec {
    std::string pair_id;
    PairKind kind = PairKind::cross_model;
    std::string model_a;
    std::string model_b;  // ignored for cross_variant
};

struct ConsistencyRecord {
    std::string pair_id;
    std::size_t sample_id = 0;
    std::size_t label = 0;
    double similarity = 0;
};

struct PairSummary {
    std::size_t count = 0;
    double mean = 0;
    double median = 0;
};

struct ExportedMap {
    std::string model_id;
    std::size_t sample_id = 0;
    AttributionMap map;
};

struct StudyResult {
    std::vector<ConsistencyRecord> records;
    std::map<std::string, PairSummary> summary;
    std::vector<ExportedMap> real_maps;  // one per (model, sample, label) on the real image
};

/// Cross-variant pairs compare the real image with the same image carrying
/// glyph k (a shortcut stamp on positives, an adversarial one on negatives).
StudyResult consistency_study(const std::vector<StudyModel>& models, const std::vector<PairSpec>& pairs,
                              const std::vector<const corpus::Sample*>& samples, const std::vector<std::size_t>& labels,
                              const IGConfig& config, float glyph_intensity = 1.0f);

PairSummary summarize(std::vector<double> values);

/// consistency.csv (pair_id,sample_id,label,similarity) and consistency_summary.csv.
void write_consistency(const StudyResult& result, const std::filesystem::path& dir);
std::vector<ConsistencyRecord> read_consistency_csv(const std::filesystem::path& path);

/// Heat PGM: 128 + 127·v/max|v|, so zero maps to mid-grey.
void write_map_pgm(const AttributionMap& map, const std::filesystem::path& path);
/// Raw H×W float32 little-endian values.
void write_map_raw(const AttributionMap& map, const std::filesystem::path& path);
std::vector<float> read_map_raw(const std::filesystem::path& path);

}  // namespace sf::attr
