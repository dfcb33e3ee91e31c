#include "sf/zeroshot/zeroshot.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "sf/binio.hpp"
#include "sf/diffcore/ops.hpp"
#include "sf/errors.hpp"

namespace sf::zs {

namespace {

bool exclusively_positive(const corpus::LabelVector& labels, std::size_t label) {
    return labels[label] && labels.positives() == 1;
}

}  // namespace

LabelAnchor build_label_anchor(std::size_t label, const corpus::SplitData& data, const enc::TextEncoderParams& text,
                               std::size_t n) {
    if (label >= corpus::kNumLabels) {
        throw ContractViolation("build_label_anchor: label " + std::to_string(label) + " out of range");
    }
    if (n < 1) {
        throw ContractViolation("build_label_anchor: n must be >= 1");
    }
    std::vector<double> sum(enc::kEmbeddingDim, 0.0);
    std::size_t used = 0;
    for (const auto& s : data.samples) {
        if (used == n) {
            break;
        }
        if (!exclusively_positive(s.labels, label)) {
            continue;
        }
        const auto e = enc::text_encode(s.caption, text, true);
        for (std::size_t i = 0; i < e.size(); ++i) {
            sum[i] += e[i];
        }
        ++used;
    }
    if (used < n) {
        throw MissingPrerequisite("only " + std::to_string(used) + " captions are exclusively positive for " +
                                  std::string(corpus::kLabelNames[label]) + ", " + std::to_string(n) + " needed");
    }
    double norm = 0;
    for (double& x : sum) {
        x /= static_cast<double>(n);
        norm += x * x;
    }
    norm = std::sqrt(norm);
    if (!(norm > 1e-12)) {
        throw DegenerateEmbedding("anchor for " + std::string(corpus::kLabelNames[label]) + " has zero norm");
    }
    LabelAnchor a;
    a.label_index = label;
    a.n_source_captions = n;
    a.embedding.resize(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) {
        a.embedding[i] = static_cast<float>(sum[i] / norm);
    }
    return a;
}

AnchorSet build_anchors(const corpus::SplitData& data, const enc::TextEncoderParams& text, std::size_t n) {
    AnchorSet out;
    for (std::size_t k = 0; k < corpus::kNumLabels; ++k) {
        out[k] = build_label_anchor(k, data, text, n);
    }
    return out;
}

std::array<double, corpus::kNumLabels> scores_from_embedding(std::span<const float> embedding,
                                                             const AnchorSet& anchors) {
    double en = 0;
    for (float x : embedding) {
        en += static_cast<double>(x) * x;
    }
    en = std::sqrt(en);
    if (!(en > 1e-12)) {
        throw DegenerateEmbedding("zero-shot scoring of a zero image embedding");
    }
    std::array<double, corpus::kNumLabels> out{};
    for (std::size_t k = 0; k < corpus::kNumLabels; ++k) {
        const auto& a = anchors[k].embedding;
        if (a.size() != embedding.size()) {
            throw ContractViolation("anchor " + std::to_string(k) + " has length " + std::to_string(a.size()) +
                                    ", embedding has " + std::to_string(embedding.size()));
        }
        double dot = 0, an = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += static_cast<double>(embedding[i]) * a[i];
            an += static_cast<double>(a[i]) * a[i];
        }
        out[k] = dot / (en * std::sqrt(an));
    }
    return out;
}

std::array<double, corpus::kNumLabels> zero_shot_scores(const corpus::Image& image, const AnchorSet& anchors,
                                                        const enc::ImageEncoderParams& params) {
    return scores_from_embedding(enc::image_encode(image, params, false), anchors);
}

template <typename Real>
diff::Var<Real> zero_shot_score(diff::Var<Real> image, std::span<const diff::Var<Real>> p, const LabelAnchor& anchor) {
    const diff::Var<Real> e = enc::image_embedding<Real>(image, p, true);
    if (anchor.embedding.size() != e.size()) {
        throw ContractViolation("anchor length does not match the embedding");
    }
    const diff::Var<Real> a =
        image.graph->constant({anchor.embedding.size()},
                              std::vector<Real>(anchor.embedding.begin(), anchor.embedding.end()));
    return diff::dot(e, a);
}

template diff::Var<float> zero_shot_score(diff::Var<float>, std::span<const diff::Var<float>>, const LabelAnchor&);
template diff::Var<double> zero_shot_score(diff::Var<double>, std::span<const diff::Var<double>>, const LabelAnchor&);

void save_anchors(const AnchorSet& anchors, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    nlohmann::json meta;
    meta["dim"] = enc::kEmbeddingDim;
    meta["data"] = "anchors.bin";
    for (const auto& a : anchors) {
        meta["labels"].push_back({{"label_index", a.label_index},
                                  {"label", corpus::kLabelNames[a.label_index]},
                                  {"n_source_captions", a.n_source_captions}});
    }
    {
        std::ofstream out(dir / "anchors.json", std::ios::binary);
        if (!out) {
            throw IoError("cannot write anchors", dir / "anchors.json");
        }
        out << meta.dump(2) << '\n';
    }
    std::ofstream bin(dir / "anchors.bin", std::ios::binary);
    if (!bin) {
        throw IoError("cannot write anchors", dir / "anchors.bin");
    }
    for (const auto& a : anchors) {
        write_f32_le(bin, a.embedding);
    }
}

AnchorSet load_anchors(const std::filesystem::path& dir) {
    std::ifstream in(dir / "anchors.json");
    if (!in) {
        throw MissingPrerequisite("anchors not found in " + dir.string());
    }
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception&) {
        throw IoError("malformed anchors.json", dir / "anchors.json");
    }
    const std::size_t dim = meta.at("dim").get<std::size_t>();
    const auto& labels = meta.at("labels");
    if (labels.size() != corpus::kNumLabels) {
        throw IoError("anchors.json must list five labels", dir / "anchors.json");
    }
    std::ifstream bin(dir / meta.value("data", std::string("anchors.bin")), std::ios::binary);
    if (!bin) {
        throw MissingPrerequisite("anchor embeddings not found in " + dir.string());
    }
    AnchorSet out;
    for (std::size_t k = 0; k < corpus::kNumLabels; ++k) {
        out[k].label_index = labels[k].at("label_index").get<std::size_t>();
        out[k].n_source_captions = labels[k].at("n_source_captions").get<std::size_t>();
        out[k].embedding = read_f32_le(bin, dim);
        if (out[k].embedding.size() != dim) {
            throw IoError("truncated anchor embeddings", dir / "anchors.bin");
        }
    }
    return out;
}

}  // namespace sf::zs
