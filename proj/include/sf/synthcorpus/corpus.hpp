#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sf/rng.hpp"
#include "sf/synthcorpus/image.hpp"

namespace sf::corpus {

inline constexpr std::size_t kNumLabels = 5;
inline constexpr std::size_t kGlyphSize = 9;

inline constexpr std::array<std::string_view, kNumLabels> kLabelNames = {
    "atelectasis", "cardiomegaly", "consolidation", "edema", "pleural_effusion"};

/// Findings 0-4: Atelectasis, Cardiomegaly, Consolidation, Edema, Pleural Effusion.
struct LabelVector {
    std::array<bool, kNumLabels> bits{};

    bool operator[](std::size_t k) const { return bits.at(k); }
    bool& operator[](std::size_t k) { return bits.at(k); }
    std::size_t positives() const;
    std::set<std::size_t> positive_set() const;
    std::set<std::size_t> negative_set() const;
    bool operator==(const LabelVector&) const = default;
};

struct GlyphSlot {
    std::size_t row = 0;
    std::size_t col = 0;
};

struct Glyph {
    std::size_t label_index = 0;
    std::array<std::uint8_t, kGlyphSize * kGlyphSize> bitmap{};
    float intensity = 1.0f;
    GlyphSlot slot;
};

struct CorpusConfig {
    std::size_t n_train = 2000;
    std::size_t n_val = 200;
    std::size_t n_test = 500;
    // 0 selects ceil(0.01 * n_train).
    std::size_t n_finetune = 0;
    std::size_t image_size = 64;
    double p_corrupt = 0.9;
    double p_correct = 0.9;
    double label_prevalence = 0.3;
    std::uint64_t seed = 20220715;
    std::size_t caption_vocab_size = 32;
    double noise_level = 0.05;
    float glyph_intensity = 1.0f;

    std::size_t finetune_count() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct WatermarkRecord {
    bool corrupted = false;
    bool correct = false;
    std::set<std::size_t> stamped_glyphs;
    bool operator==(const WatermarkRecord&) const = default;
};

using Caption = std::vector<std::uint32_t>;

enum class Split { train, val, finetune, test };
std::string_view split_name(Split s);

struct Sample {
    std::size_t index = 0;
    Image image;  // as stored for training: watermarked when the record says so
    Image clean;  // the unwatermarked rendering
    LabelVector labels;
    Caption caption;
    WatermarkRecord watermark;
};

/// Split-tagged sample collection. Trainers refuse test-tagged handles.
struct SplitData {
    Split split = Split::train;
    std::vector<Sample> samples;
};

struct Corpus {
    CorpusConfig config;
    SplitData train{Split::train, {}};
    SplitData val{Split::val, {}};
    SplitData finetune{Split::finetune, {}};
    SplitData test{Split::test, {}};
};

// ---------------------------------------------------------------------------
// Glyphs
// ---------------------------------------------------------------------------

/// The glyph owned by `label` for images of the given side length.
Glyph glyph_for(std::size_t label, std::size_t image_size, float intensity = 1.0f);
std::size_t hamming_distance(const Glyph& a, const Glyph& b);

/// Central square where pathology signatures may appear; never intersects a slot.
struct Region {
    std::size_t row0, col0, row1, col1;  // half-open
    bool contains(std::size_t r, std::size_t c) const { return r >= row0 && r < row1 && c >= col0 && c < col1; }
};
Region signature_region(std::size_t image_size);
/// Sub-box of the signature region where the label-0 blob centre is drawn.
Region blob_region(std::size_t image_size);

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

struct CaptionOptions {
    double p_deny = 0.5;
    std::size_t max_fillers = 4;
};

namespace vocab {
inline constexpr std::uint32_t unknown = 0;
inline constexpr std::uint32_t no_finding = 1;
inline constexpr std::uint32_t finding_base = 2;    // + label
inline constexpr std::uint32_t negation_base = 7;   // + label
inline constexpr std::uint32_t qualifier_base = 12;
inline constexpr std::uint32_t qualifier_count = 3;
inline constexpr std::uint32_t filler_base = 15;
inline constexpr std::size_t min_size = 16;

std::string token_text(std::uint32_t id, std::size_t vocab_size);
}  // namespace vocab

Caption make_caption(const LabelVector& labels, Rng& rng, std::size_t vocab_size,
                     const CaptionOptions& options = {});

// ---------------------------------------------------------------------------
// Images and watermarks
// ---------------------------------------------------------------------------

LabelVector draw_labels(Rng& rng, double prevalence);

/// Background plus one spatial signature per positive label, quantized to 8 bits.
Image render_base_image(const LabelVector& labels, Rng& rng, std::size_t image_size, double noise_level);

/// Copy of `image` with each listed glyph stamped opaquely over its slot.
Image apply_watermarks(const Image& image, const std::set<std::size_t>& glyphs, float intensity = 1.0f);

/// Draws the corruption decision for a clean training sample and stamps it.
Sample corrupt_train_sample(Sample sample, Rng& rng, const CorpusConfig& config);

struct TestVariants {
    Image real;
    Image shortcut;
    Image adversarial;
};

/// Shortcut stamps glyph(target) on target-positive samples, adversarial on
/// target-negative ones. With `stamp` false both equal the real image.
TestVariants build_test_variants(const Sample& sample, std::size_t target_label, float intensity = 1.0f,
                                 bool stamp = true);

/// Builds sample `index` of `split`; depends only on (config, split, index).
Sample make_sample(const CorpusConfig& config, Split split, std::size_t index);

Corpus generate_corpus(const CorpusConfig& config);

/// Persists a corpus: config.json plus, per split, metadata.jsonl and PGM images.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);
bool corpus_exists(const std::filesystem::path& dir);

struct CorpusSummary {
    double corrupted_fraction = 0;
    double correct_given_corrupted = 0;
    std::array<double, kNumLabels> prevalence{};
};
CorpusSummary summarize(const SplitData& split);

}  // namespace sf::corpus
