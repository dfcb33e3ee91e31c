#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "sf/diffcore/graph.hpp"
#include "sf/encoders/encoders.hpp"
#include "sf/synthcorpus/corpus.hpp"

namespace sf::zs {

struct LabelAnchor {
    std::size_t label_index = 0;
    std::vector<float> embedding;  // unit length
    std::size_t n_source_captions = 0;
};

using AnchorSet = std::array<LabelAnchor, corpus::kNumLabels>;

inline constexpr std::size_t kDefaultAnchorCaptions = 50;

/// Normalized mean of the text embeddings of the first `n` samples (in split
/// order) whose only positive label is `label`. Throws MissingPrerequisite
/// naming the label when fewer exist.
LabelAnchor build_label_anchor(std::size_t label, const corpus::SplitData& data, const enc::TextEncoderParams& text,
                               std::size_t n = kDefaultAnchorCaptions);
AnchorSet build_anchors(const corpus::SplitData& data, const enc::TextEncoderParams& text,
                        std::size_t n = kDefaultAnchorCaptions);

/// Score k = cos(embedding, anchor k).
std::array<double, corpus::kNumLabels> scores_from_embedding(std::span<const float> embedding, const AnchorSet& anchors);
std::array<double, corpus::kNumLabels> zero_shot_scores(const corpus::Image& image, const AnchorSet& anchors,
                                                        const enc::ImageEncoderParams& params);

/// Differentiable cosine score of `image` against one anchor; `p` holds the
/// bound image-encoder vars.
template <typename Real>
diff::Var<Real> zero_shot_score(diff::Var<Real> image, std::span<const diff::Var<Real>> p, const LabelAnchor& anchor);

/// anchors.json (labels, counts, file name) plus anchors.bin (5×128 float32 LE).
void save_anchors(const AnchorSet& anchors, const std::filesystem::path& dir);
AnchorSet load_anchors(const std::filesystem::path& dir);

}  // namespace sf::zs
