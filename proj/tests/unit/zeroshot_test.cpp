#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "sf/errors.hpp"
#include "sf/evalreport/evalreport.hpp"
#include "sf/zeroshot/zeroshot.hpp"

using namespace sf::zs;
using sf::corpus::SplitData;

namespace {

SplitData corpus_split(std::size_t n) {
    sf::corpus::CorpusConfig c;
    c.image_size = 32;
    SplitData out{sf::corpus::Split::train, {}};
    for (std::size_t i = 0; i < n; ++i) out.samples.push_back(sf::corpus::make_sample(c, sf::corpus::Split::train, i));
    return out;
}

std::vector<float> unit(std::vector<float> v) {
    double s = 0;
    for (float x : v) s += static_cast<double>(x) * x;
    for (float& x : v) x = static_cast<float>(x / std::sqrt(s));
    return v;
}

AnchorSet basis_anchors() {
    AnchorSet a;
    for (std::size_t k = 0; k < 5; ++k) {
        a[k].label_index = k;
        a[k].embedding.assign(sf::enc::kEmbeddingDim, 0.0f);
        a[k].embedding[k] = 1.0f;
        a[k].n_source_captions = 1;
    }
    return a;
}

}  // namespace

TEST(Anchor, SingleCaptionEqualsItsEmbedding) {
    const auto data = corpus_split(300);
    const auto text = sf::enc::init_text_encoder(32, 4);
    const auto a = build_label_anchor(2, data, text, 1);
    for (const auto& s : data.samples) {
        if (s.labels[2] && s.labels.positives() == 1) {
            const auto e = sf::enc::text_encode(s.caption, text, true);
            for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(a.embedding[i], e[i], 1e-6);
            break;
        }
    }
}

TEST(Anchor, MatchesIndependentMean) {
    const auto data = corpus_split(600);
    const auto text = sf::enc::init_text_encoder(32, 4);
    const std::size_t n = 20;
    for (std::size_t k = 0; k < 5; ++k) {
        const auto a = build_label_anchor(k, data, text, n);
        EXPECT_EQ(a.n_source_captions, n);
        std::vector<float> mean(sf::enc::kEmbeddingDim, 0.0f);
        std::size_t used = 0;
        for (const auto& s : data.samples) {
            bool exclusive = s.labels[k];
            for (std::size_t j = 0; j < 5; ++j) exclusive = exclusive && (j == k || !s.labels[j]);
            if (!exclusive) continue;
            const auto e = sf::enc::text_encode(s.caption, text, true);
            for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i];
            if (++used == n) break;
        }
        const auto oracle = unit(mean);
        for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(a.embedding[i], oracle[i], 1e-6);
    }
}

TEST(Anchor, IdenticalCaptionsGiveSharedEmbedding) {
    auto data = corpus_split(300);
    const auto text = sf::enc::init_text_encoder(32, 4);
    const sf::corpus::Caption shared{2, 12, 15};
    for (auto& s : data.samples) s.caption = shared;
    const auto a = build_label_anchor(0, data, text, 5);
    const auto e = sf::enc::text_encode(shared, text, true);
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(a.embedding[i], e[i], 1e-6);
}

TEST(Anchor, ScarcityNamesTheLabel) {
    const auto data = corpus_split(40);
    const auto text = sf::enc::init_text_encoder(32, 4);
    try {
        build_label_anchor(4, data, text, 50);
        FAIL() << "expected scarcity error";
    } catch (const sf::MissingPrerequisite& e) {
        EXPECT_NE(std::string(e.what()).find("pleural_effusion"), std::string::npos);
    }
}

TEST(Anchor, Deterministic) {
    const auto data = corpus_split(400);
    const auto text = sf::enc::init_text_encoder(32, 4);
    EXPECT_EQ(build_anchors(data, text, 10)[3].embedding, build_anchors(data, text, 10)[3].embedding);
}

TEST(Scores, CosineExamples) {
    const auto anchors = basis_anchors();
    std::vector<float> e(sf::enc::kEmbeddingDim, 0.0f);
    e[2] = 1.0f;
    auto s = scores_from_embedding(e, anchors);
    EXPECT_DOUBLE_EQ(s[2], 1.0);
    EXPECT_DOUBLE_EQ(s[0], 0.0);

    std::vector<float> ortho(sf::enc::kEmbeddingDim, 0.0f);
    ortho[100] = 3.0f;
    for (double x : scores_from_embedding(ortho, anchors)) EXPECT_EQ(x, 0.0);

    std::vector<float> v(sf::enc::kEmbeddingDim), scaled(sf::enc::kEmbeddingDim);
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = std::sin(static_cast<float>(i));
        scaled[i] = 8.0f * v[i];
    }
    const auto a = scores_from_embedding(v, anchors), b = scores_from_embedding(scaled, anchors);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
}

TEST(Scores, ZeroEmbeddingIsDegenerate) {
    EXPECT_THROW(scores_from_embedding(std::vector<float>(sf::enc::kEmbeddingDim, 0.0f), basis_anchors()),
                 sf::DegenerateEmbedding);
}

TEST(Scores, GraphScoreMatchesPlainScore) {
    const auto data = corpus_split(300);
    const auto dual = sf::enc::init_dual_encoder(32, 32, 9);
    const auto anchors = build_anchors(data, dual.text, 5);
    const auto& img = data.samples[0].image;
    const auto plain = zero_shot_scores(img, anchors, dual.image);
    for (std::size_t k = 0; k < 5; ++k) {
        sf::diff::Graph<double> g;
        const auto refs = sf::enc::params_of(dual.image);
        const auto p = sf::enc::bind_params<double>(g, refs, false);
        const auto x = sf::enc::image_leaf<double>(g, img, 32, false);
        EXPECT_NEAR(zero_shot_score<double>(x, p, anchors[k]).values()[0], plain[k], 1e-5);
    }
}

TEST(Scores, AucInvariantToMonotoneTransform) {
    const auto data = corpus_split(200);
    const auto dual = sf::enc::init_dual_encoder(32, 32, 9);
    const auto anchors = build_anchors(data, dual.text, 3);
    std::vector<double> s, t;
    std::vector<std::uint8_t> y;
    for (std::size_t i = 0; i < 60; ++i) {
        const double v = zero_shot_scores(data.samples[i].image, anchors, dual.image)[1];
        s.push_back(v);
        t.push_back(std::atan(5 * v));
        y.push_back(data.samples[i].labels[1]);
    }
    EXPECT_EQ(sf::eval::auc(s, y), sf::eval::auc(t, y));
}

TEST(Persist, RoundTrip) {
    const auto data = corpus_split(300);
    const auto text = sf::enc::init_text_encoder(32, 4);
    const auto a = build_anchors(data, text, 4);
    const auto dir = std::filesystem::temp_directory_path() / "sf_anchors";
    std::filesystem::remove_all(dir);
    save_anchors(a, dir);
    const auto b = load_anchors(dir);
    for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_EQ(a[k].embedding, b[k].embedding);
        EXPECT_EQ(b[k].label_index, k);
        EXPECT_EQ(b[k].n_source_captions, 4u);
    }
    EXPECT_THROW(load_anchors(dir / "nope"), sf::MissingPrerequisite);
}
