#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "sf/attribution/attribution.hpp"
#include "sf/diffcore/ops.hpp"
#include "sf/errors.hpp"
#include "sf/trainer/trainer.hpp"

using namespace sf::attr;
using sf::corpus::Image;
using sf::diff::Graph;
using sf::diff::Var;

namespace {

Image random_image(std::size_t size, std::uint64_t seed) {
    sf::Rng rng(seed);
    std::uniform_real_distribution<float> u(0.05f, 0.95f);
    Image img(size, size);
    for (float& p : img.pixels) p = u(rng);
    return img;
}

std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
    sf::Rng rng(seed);
    std::normal_distribution<double> g;
    std::vector<double> w(n);
    for (double& x : w) x = g(rng);
    return w;
}

PredictFn<double> linear_model(const std::vector<double>& w, double bias = 0.0) {
    return [w, bias](Graph<double>& g, Var<double> x) {
        const auto wv = g.constant({1, 16, 16}, w);
        const auto b = g.constant({1}, {bias});
        return sf::diff::add(sf::diff::reshape(sf::diff::dot(x, wv), {1}), b);
    };
}

IGConfig plain(std::size_t steps) {
    IGConfig c;
    c.steps = steps;
    c.sigma = 0.0;
    c.smoothgrad_n = 1;
    return c;
}

double output(const PredictFn<double>& f, const Image& img) {
    Graph<double> g;
    const auto x = g.constant({1, img.height, img.width}, std::vector<double>(img.pixels.begin(), img.pixels.end()));
    return f(g, x).values()[0];
}

AttributionMap map_of(std::vector<double> v) {
    AttributionMap m;
    m.height = 1;
    m.width = v.size();
    m.values = std::move(v);
    return m;
}

// A classifier trained briefly on a small corpus, shared by the completeness tests.
const sf::enc::ClassifierParams& trained_fixture() {
    static const sf::enc::ClassifierParams params = [] {
        sf::corpus::CorpusConfig c;
        c.image_size = 32;
        sf::corpus::SplitData train{sf::corpus::Split::train, {}}, val{sf::corpus::Split::val, {}};
        for (std::size_t i = 0; i < 96; ++i) train.samples.push_back(sf::corpus::make_sample(c, train.split, i));
        for (std::size_t i = 0; i < 16; ++i) val.samples.push_back(sf::corpus::make_sample(c, val.split, i));
        sf::train::TrainConfig t;
        t.epochs = 3;
        t.learning_rate = 1e-3;
        return sf::train::train_cnn(train, val, sf::train::ImageSource::as_stored, sf::enc::init_classifier(32, 5), t)
            .params;
    }();
    return params;
}

}  // namespace

TEST(IntegratedGradients, LinearModelIsExactForAnySteps) {
    const auto w = random_weights(256, 1);
    const Image x = random_image(16, 2);
    for (std::size_t steps : {1, 3, 7, 64}) {
        const auto m = integrated_gradients<double>(linear_model(w, 0.7), x, plain(steps));
        ASSERT_EQ(m.values.size(), 256u);
        for (std::size_t i = 0; i < 256; ++i) {
            const double expected = w[i] * x.pixels[i];
            EXPECT_NEAR(m.values[i], expected, 1e-14 * (1 + std::abs(expected))) << "steps " << steps;
        }
    }
}

TEST(IntegratedGradients, ConstantModelGivesZeroMap) {
    const PredictFn<double> constant = [](Graph<double>& g, Var<double> x) {
        return sf::diff::add(sf::diff::reshape(sf::diff::scale(sf::diff::sum(x), 0.0), {1}), g.constant({1}, {3.0}));
    };
    const auto m = integrated_gradients<double>(constant, random_image(16, 3), plain(16));
    for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, RejectsNonScalarOutput) {
    const PredictFn<double> vec = [](Graph<double>&, Var<double> x) { return x; };
    EXPECT_THROW(integrated_gradients<double>(vec, random_image(4, 1), plain(2)), sf::ContractViolation);
}

TEST(IntegratedGradients, CompletenessOnTrainedClassifier) {
    const auto params = std::make_shared<const sf::enc::ClassifierParams>(trained_fixture());
    const Image x = random_image(32, 9);
    const Image black(32, 32);
    for (std::size_t k : {0, 3}) {
        const auto f = logit_predictor<double>(params, k);
        const auto m = integrated_gradients<double>(f, x, plain(512));
        double total = 0;
        for (double v : m.values) total += v;
        const double delta = output(f, x) - output(f, black);
        EXPECT_LT(std::abs(total - delta), 0.01 * std::abs(delta)) << "label " << k;
    }
}

TEST(IntegratedGradients, CompletenessGapShrinksWithSteps) {
    const auto params = std::make_shared<const sf::enc::ClassifierParams>(trained_fixture());
    const Image x = random_image(32, 10);
    const auto f = logit_predictor<double>(params, 1);
    const double delta = output(f, x) - output(f, Image(32, 32));
    auto gap = [&](std::size_t steps) {
        double total = 0;
        for (double v : integrated_gradients<double>(f, x, plain(steps)).values) total += v;
        return std::abs(total - delta);
    };
    const double g32 = gap(32), g512 = gap(512);
    EXPECT_LE(g512, g32 + 1e-12);
}

TEST(IntegratedGradients, IdenticalParamsGiveIdenticalMaps) {
    const auto a = std::make_shared<const sf::enc::ClassifierParams>(sf::enc::init_classifier(32, 8));
    const auto b = std::make_shared<const sf::enc::ClassifierParams>(sf::enc::init_classifier(32, 8));
    const Image x = random_image(32, 11);
    IGConfig c;
    c.steps = 8;
    c.smoothgrad_n = 2;
    EXPECT_EQ(smoothgrad_ig<float>(logit_predictor<float>(a, 2), x, c, 5, 2).values,
              smoothgrad_ig<float>(logit_predictor<float>(b, 2), x, c, 5, 2).values);
}

TEST(SmoothGrad, ZeroSigmaIsBitwiseIntegratedGradients) {
    const auto w = random_weights(256, 4);
    const Image x = random_image(16, 5);
    IGConfig c;
    c.steps = 10;
    c.sigma = 0.0;
    c.smoothgrad_n = 6;
    EXPECT_EQ(smoothgrad_ig<double>(linear_model(w), x, c, 3, 1).values,
              integrated_gradients<double>(linear_model(w), x, c, 1).values);
}

TEST(SmoothGrad, SingleCopyEqualsIntegratedGradientsOnSeededNoise) {
    const auto w = random_weights(256, 6);
    const Image x = random_image(16, 7);
    IGConfig c;
    c.steps = 5;
    c.sigma = 0.2;
    c.smoothgrad_n = 1;
    const auto [lo, hi] = std::minmax_element(x.pixels.begin(), x.pixels.end());
    sf::Rng rng = sf::make_stream(c.seed, {sf::stream::smoothgrad, 42, 3, 0});
    std::normal_distribution<double> noise(0.0, c.sigma * (*hi - *lo));
    Image noisy = x;
    for (float& p : noisy.pixels) p = static_cast<float>(p + noise(rng));
    EXPECT_EQ(smoothgrad_ig<double>(linear_model(w), x, c, 42, 3).values,
              integrated_gradients<double>(linear_model(w), noisy, c, 3).values);
}

TEST(SmoothGrad, LinearModelMonteCarloMeanMatchesAnalytic) {
    const auto w = random_weights(256, 8);
    const Image x = random_image(16, 9);
    IGConfig c;
    c.steps = 2;
    c.sigma = 0.1;
    c.smoothgrad_n = 64;
    const auto m = smoothgrad_ig<double>(linear_model(w), x, c, 1, 0);
    const auto [lo, hi] = std::minmax_element(x.pixels.begin(), x.pixels.end());
    const double stddev = c.sigma * (*hi - *lo);
    double diff = 0, w2 = 0;
    for (std::size_t i = 0; i < 256; ++i) {
        diff += m.values[i] - w[i] * x.pixels[i];
        w2 += w[i] * w[i];
    }
    const double se = stddev * std::sqrt(w2) / std::sqrt(64.0);
    EXPECT_LT(std::abs(diff), 3 * se);
    EXPECT_EQ(m.meta.smoothgrad_n, 64u);
}

TEST(SmoothGrad, DifferentNoiseKeysDiffer) {
    const auto w = random_weights(256, 10);
    const Image x = random_image(16, 11);
    IGConfig c;
    c.steps = 2;
    c.smoothgrad_n = 2;
    EXPECT_NE(smoothgrad_ig<double>(linear_model(w), x, c, 1, 0).values,
              smoothgrad_ig<double>(linear_model(w), x, c, 2, 0).values);
}

TEST(Config, Validation) {
    IGConfig c;
    c.steps = 0;
    EXPECT_THROW(c.validate(), sf::ContractViolation);
    c = {};
    c.sigma = -0.1;
    EXPECT_THROW(c.validate(), sf::ContractViolation);
    c = {};
    c.smoothgrad_n = 0;
    EXPECT_THROW(c.validate(), sf::ContractViolation);
}

TEST(MapCosine, Examples) {
    const auto a = map_of({1, -2, 3, 0.5});
    EXPECT_NEAR(map_cosine_similarity(a, a), 1.0, 1e-15);
    EXPECT_NEAR(map_cosine_similarity(a, map_of({-1, 2, -3, -0.5})), -1.0, 1e-15);
}

TEST(MapCosine, MatchesOracleSymmetricAndScaleInvariant) {
    const auto va = random_weights(100, 12), vb = random_weights(100, 13);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        dot += va[i] * vb[i];
        na += va[i] * va[i];
        nb += vb[i] * vb[i];
    }
    const auto a = map_of(va), b = map_of(vb);
    const double s = map_cosine_similarity(a, b);
    EXPECT_NEAR(s, dot / std::sqrt(na * nb), 1e-6);
    EXPECT_EQ(s, map_cosine_similarity(b, a));
    auto scaled = vb;
    for (double& x : scaled) x *= 17.5;
    EXPECT_NEAR(map_cosine_similarity(a, map_of(scaled)), s, 1e-12);
}

TEST(MapCosine, Errors) {
    EXPECT_THROW(map_cosine_similarity(map_of({0, 0}), map_of({1, 2})), sf::UndefinedSimilarity);
    EXPECT_THROW(map_cosine_similarity(map_of({1, 0}), map_of({1, 2, 3})), sf::ContractViolation);
}

TEST(Consistency, SelfAndTwinPairsAreOne) {
    sf::corpus::CorpusConfig cc;
    cc.image_size = 32;
    std::vector<sf::corpus::Sample> samples;
    for (std::size_t i = 0; i < 2; ++i) samples.push_back(sf::corpus::make_sample(cc, sf::corpus::Split::test, i));
    std::vector<const sf::corpus::Sample*> ptrs{&samples[0], &samples[1]};

    auto model = [](const std::string& id, std::uint64_t seed) {
        auto p = std::make_shared<const sf::enc::ClassifierParams>(sf::enc::init_classifier(32, seed));
        return StudyModel{id, [p](std::size_t k) { return logit_predictor<float>(p, k); }};
    };
    const std::vector<StudyModel> models{model("a", 3), model("twin", 3), model("other", 4)};
    const std::vector<PairSpec> pairs{{"self", PairKind::cross_model, "a", "a"},
                                      {"twin", PairKind::cross_model, "a", "twin"},
                                      {"other", PairKind::cross_model, "a", "other"},
                                      {"variant", PairKind::cross_variant, "a", ""}};
    IGConfig c;
    c.steps = 4;
    c.smoothgrad_n = 2;
    const auto r = consistency_study(models, pairs, ptrs, {0, 4}, c);
    ASSERT_EQ(r.records.size(), 2u * 2u * 4u);
    EXPECT_EQ(r.real_maps.size(), 2u * 2u * 3u);
    for (const auto& rec : r.records) {
        if (rec.pair_id == "self" || rec.pair_id == "twin") {
            EXPECT_NEAR(rec.similarity, 1.0, 1e-12);
        }
        EXPECT_LE(std::abs(rec.similarity), 1.0);
    }
    EXPECT_EQ(r.summary.at("twin").count, 4u);
    EXPECT_LT(r.summary.at("other").mean, 1.0);

    const auto dir = std::filesystem::temp_directory_path() / "sf_consistency";
    write_consistency(r, dir);
    const auto back = read_consistency_csv(dir / "consistency.csv");
    ASSERT_EQ(back.size(), r.records.size());
    EXPECT_EQ(back[5].pair_id, r.records[5].pair_id);
    EXPECT_NEAR(back[5].similarity, r.records[5].similarity, 1e-8);
    EXPECT_TRUE(std::filesystem::exists(dir / "consistency_summary.csv"));

    EXPECT_THROW(consistency_study(models, {{"bad", PairKind::cross_model, "a", "missing"}}, ptrs, {0}, c),
                 sf::ContractViolation);
}

TEST(Summary, MeanAndMedian) {
    const auto s = summarize({4, 1, 3, 2});
    EXPECT_EQ(s.count, 4u);
    EXPECT_EQ(s.mean, 2.5);
    EXPECT_EQ(s.median, 2.5);
    EXPECT_EQ(summarize({5, 1, 9}).median, 5.0);
}

TEST(Export, PgmCentersZeroAndRawRoundTrips) {
    AttributionMap m;
    m.height = 2;
    m.width = 2;
    m.values = {0.0, 2.0, -2.0, 1.0};
    const auto dir = std::filesystem::temp_directory_path() / "sf_maps";
    write_map_pgm(m, dir / "m.pgm");
    const auto img = sf::corpus::read_pgm(dir / "m.pgm");
    EXPECT_NEAR(img.pixels[0] * 255.0f, 128.0f, 1e-3);
    EXPECT_NEAR(img.pixels[1] * 255.0f, 255.0f, 1e-3);
    EXPECT_NEAR(img.pixels[2] * 255.0f, 1.0f, 1e-3);
    write_map_raw(m, dir / "m.f32");
    EXPECT_EQ(read_map_raw(dir / "m.f32"), (std::vector<float>{0.0f, 2.0f, -2.0f, 1.0f}));
    EXPECT_THROW(read_map_raw(dir / "none.f32"), sf::MissingPrerequisite);
}
