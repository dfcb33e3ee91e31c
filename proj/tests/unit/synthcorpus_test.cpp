#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "sf/errors.hpp"
#include "sf/synthcorpus/corpus.hpp"

using namespace sf::corpus;

namespace {

// Pair-counting AUC, kept local so the corpus tests do not depend on evalreport.
double pair_count_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            pairs += 1;
            wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
        }
    }
    return wins / pairs;
}

LabelVector labels_of(std::initializer_list<int> bits) {
    LabelVector v;
    std::size_t k = 0;
    for (int b : bits) v[k++] = b != 0;
    return v;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("sf_corpus_test_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

}  // namespace

TEST(Glyphs, PairwiseDistinctAndSlotsDisjoint) {
    for (std::size_t a = 0; a < kNumLabels; ++a) {
        for (std::size_t b = a + 1; b < kNumLabels; ++b) {
            const Glyph ga = glyph_for(a, 64), gb = glyph_for(b, 64);
            EXPECT_GE(hamming_distance(ga, gb), 20u) << a << " vs " << b;
            const bool overlap_rows = ga.slot.row < gb.slot.row + kGlyphSize && gb.slot.row < ga.slot.row + kGlyphSize;
            const bool overlap_cols = ga.slot.col < gb.slot.col + kGlyphSize && gb.slot.col < ga.slot.col + kGlyphSize;
            EXPECT_FALSE(overlap_rows && overlap_cols) << a << " vs " << b;
        }
    }
}

TEST(Glyphs, SlotsAvoidSignatureRegion) {
    for (std::size_t size : {32u, 64u, 96u}) {
        const Region r = signature_region(size);
        for (std::size_t k = 0; k < kNumLabels; ++k) {
            const Glyph g = glyph_for(k, size);
            for (std::size_t y = 0; y < kGlyphSize; ++y) {
                for (std::size_t x = 0; x < kGlyphSize; ++x) {
                    EXPECT_FALSE(r.contains(g.slot.row + y, g.slot.col + x));
                }
            }
        }
    }
}

TEST(RenderBaseImage, NoLabelsNoNoiseIsSmoothBackground) {
    sf::Rng rng(5);
    const Image img = render_base_image(LabelVector{}, rng, 64, 0.0);
    ASSERT_EQ(img.size(), 64u * 64u);
    for (std::size_t y = 0; y < 64; ++y) {
        for (std::size_t x = 0; x + 1 < 64; ++x) {
            EXPECT_LE(std::abs(img.at(y, x + 1) - img.at(y, x)), 3.0f / 255.0f);
        }
    }
}

TEST(RenderBaseImage, DeterministicForSameStream) {
    const auto labels = labels_of({1, 0, 0, 0, 0});
    sf::Rng a(99), b(99);
    EXPECT_EQ(render_base_image(labels, a, 64, 0.05), render_base_image(labels, b, 64, 0.05));
}

TEST(RenderBaseImage, ValuesInUnitRangeAndQuantized) {
    sf::Rng rng(3);
    const Image img = render_base_image(labels_of({1, 1, 1, 1, 1}), rng, 64, 0.05);
    for (float p : img.pixels) {
        EXPECT_GT(p, 0.0f);
        EXPECT_LT(p, 1.0f);
        EXPECT_FLOAT_EQ(p * 255.0f, std::round(p * 255.0f));
    }
}

// Statistical oracle: mean intensity inside the blob region separates label 0.
TEST(RenderBaseImage, LabelZeroRecoverableFromRegionMean) {
    CorpusConfig cfg;
    const Region blob = blob_region(cfg.image_size);
    std::vector<double> scores;
    std::vector<bool> labels;
    for (std::size_t i = 0; i < 2000; ++i) {
        const Sample s = make_sample(cfg, Split::test, i);
        double sum = 0;
        for (std::size_t y = blob.row0; y < blob.row1; ++y) {
            for (std::size_t x = blob.col0; x < blob.col1; ++x) {
                sum += s.clean.at(y, x);
            }
        }
        scores.push_back(sum);
        labels.push_back(s.labels[0]);
    }
    EXPECT_GT(pair_count_auc(scores, labels), 0.8);
}

TEST(ApplyWatermarks, EmptySetIsIdentity) {
    sf::Rng rng(1);
    const Image img = render_base_image(labels_of({0, 1, 0, 1, 0}), rng, 64, 0.05);
    EXPECT_EQ(apply_watermarks(img, {}), img);
}

TEST(ApplyWatermarks, SingleGlyphTouchesOnlyItsSlot) {
    sf::Rng rng(2);
    const Image img = render_base_image(labels_of({1, 0, 1, 0, 0}), rng, 64, 0.05);
    const Image out = apply_watermarks(img, {2});
    const Glyph g = glyph_for(2, 64);
    for (std::size_t y = 0; y < 64; ++y) {
        for (std::size_t x = 0; x < 64; ++x) {
            const bool in_slot = y >= g.slot.row && y < g.slot.row + kGlyphSize && x >= g.slot.col &&
                                 x < g.slot.col + kGlyphSize;
            EXPECT_EQ(out.at(y, x) != img.at(y, x), in_slot) << y << "," << x;
        }
    }
}

TEST(ApplyWatermarks, AllGlyphsChangeExactlyTheSlotUnion) {
    sf::Rng rng(4);
    const Image img = render_base_image(labels_of({1, 1, 1, 1, 1}), rng, 64, 0.05);
    const Image out = apply_watermarks(img, {0, 1, 2, 3, 4});
    std::vector<bool> mask(64 * 64, false);
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        const Glyph g = glyph_for(k, 64);
        for (std::size_t y = 0; y < kGlyphSize; ++y) {
            for (std::size_t x = 0; x < kGlyphSize; ++x) {
                mask[(g.slot.row + y) * 64 + g.slot.col + x] = true;
            }
        }
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
        EXPECT_EQ(out.pixels[i] != img.pixels[i], mask[i]) << i;
    }
}

TEST(ApplyWatermarks, Idempotent) {
    sf::Rng rng(8);
    const Image img = render_base_image(labels_of({0, 0, 1, 1, 0}), rng, 64, 0.05);
    const Image once = apply_watermarks(img, {1, 3});
    EXPECT_EQ(apply_watermarks(once, {1, 3}), once);
}

TEST(CorruptTrainSample, ZeroCorruptionLeavesImage) {
    CorpusConfig cfg;
    cfg.p_corrupt = 0.0;
    Sample s;
    sf::Rng rng(3);
    s.labels = labels_of({1, 0, 1, 0, 0});
    s.clean = render_base_image(s.labels, rng, 64, 0.05);
    s.image = s.clean;
    const Sample out = corrupt_train_sample(s, rng, cfg);
    EXPECT_EQ(out.image, s.clean);
    EXPECT_FALSE(out.watermark.corrupted);
    EXPECT_TRUE(out.watermark.stamped_glyphs.empty());
}

TEST(CorruptTrainSample, CorrectShortcutsStampPositives) {
    CorpusConfig cfg;
    cfg.p_corrupt = 1.0;
    cfg.p_correct = 1.0;
    Sample s;
    sf::Rng rng(3);
    s.labels = labels_of({0, 1, 0, 0, 1});
    s.clean = render_base_image(s.labels, rng, 64, 0.05);
    const Sample out = corrupt_train_sample(s, rng, cfg);
    EXPECT_TRUE(out.watermark.corrupted);
    EXPECT_TRUE(out.watermark.correct);
    EXPECT_EQ(out.watermark.stamped_glyphs, (std::set<std::size_t>{1, 4}));
    EXPECT_EQ(out.image, apply_watermarks(s.clean, {1, 4}));
}

TEST(CorruptTrainSample, IncorrectShortcutsStampNegatives) {
    CorpusConfig cfg;
    cfg.p_corrupt = 1.0;
    cfg.p_correct = 0.0;
    Sample s;
    sf::Rng rng(3);
    s.labels = labels_of({0, 1, 0, 0, 1});
    s.clean = render_base_image(s.labels, rng, 64, 0.05);
    EXPECT_EQ(corrupt_train_sample(s, rng, cfg).watermark.stamped_glyphs, (std::set<std::size_t>{0, 2, 3}));
    // All-positive labels: the negative set is empty, so nothing is stamped.
    s.labels = labels_of({1, 1, 1, 1, 1});
    const Sample all = corrupt_train_sample(s, rng, cfg);
    EXPECT_TRUE(all.watermark.corrupted);
    EXPECT_FALSE(all.watermark.correct);
    EXPECT_TRUE(all.watermark.stamped_glyphs.empty());
}

TEST(CorruptTrainSample, MonteCarloFrequencies) {
    CorpusConfig cfg;
    std::size_t corrupted = 0, correct = 0;
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i) {
        const Sample s = make_sample(cfg, Split::train, i);
        corrupted += s.watermark.corrupted;
        correct += s.watermark.corrupted && s.watermark.correct;
        // record invariants
        if (!s.watermark.corrupted) {
            EXPECT_TRUE(s.watermark.stamped_glyphs.empty());
        } else if (s.watermark.correct) {
            EXPECT_EQ(s.watermark.stamped_glyphs, s.labels.positive_set());
        } else {
            EXPECT_EQ(s.watermark.stamped_glyphs, s.labels.negative_set());
        }
    }
    EXPECT_NEAR(static_cast<double>(corrupted) / n, 0.9, 0.01);
    EXPECT_NEAR(static_cast<double>(correct) / static_cast<double>(corrupted), 0.9, 0.01);
}

TEST(MakeCaption, DegenerateConfigGivesMarkerOnly) {
    sf::Rng rng(1);
    const Caption c = make_caption(LabelVector{}, rng, 32, CaptionOptions{0.0, 0});
    EXPECT_EQ(c, (Caption{vocab::no_finding}));
}

TEST(MakeCaption, ContainsPositivePhrase) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        sf::Rng rng(seed);
        const Caption c = make_caption(labels_of({1, 0, 0, 0, 0}), rng, 32);
        EXPECT_NE(std::find(c.begin(), c.end(), vocab::finding_base + 0), c.end());
        EXPECT_TRUE(std::any_of(c.begin(), c.end(), [](std::uint32_t t) {
            return t >= vocab::qualifier_base && t < vocab::qualifier_base + vocab::qualifier_count;
        }));
        EXPECT_EQ(std::find(c.begin(), c.end(), vocab::no_finding), c.end());
        for (std::uint32_t t : c) {
            EXPECT_LT(t, 32u);
            EXPECT_NE(t, vocab::unknown);
        }
    }
}

TEST(MakeCaption, PositivePhraseFrequencyTracksPrevalence) {
    CorpusConfig cfg;
    std::array<std::size_t, kNumLabels> hits{};
    const std::size_t n = 5000;
    for (std::size_t i = 0; i < n; ++i) {
        const Sample s = make_sample(cfg, Split::test, i);
        for (std::size_t k = 0; k < kNumLabels; ++k) {
            const bool has = std::find(s.caption.begin(), s.caption.end(), vocab::finding_base + k) != s.caption.end();
            hits[k] += has;
            EXPECT_EQ(has, s.labels[k]);
        }
    }
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        EXPECT_NEAR(static_cast<double>(hits[k]) / n, cfg.label_prevalence, 0.02) << k;
    }
}

TEST(BuildTestVariants, ForcedByDefinition) {
    Sample s;
    sf::Rng rng(6);
    s.labels = labels_of({0, 0, 0, 1, 0});
    s.clean = render_base_image(s.labels, rng, 64, 0.05);
    s.image = s.clean;
    auto v = build_test_variants(s, 3);
    EXPECT_EQ(v.real, s.clean);
    EXPECT_EQ(v.shortcut, apply_watermarks(s.clean, {3}));
    EXPECT_EQ(v.adversarial, s.clean);

    s.labels = LabelVector{};
    v = build_test_variants(s, 3);
    EXPECT_EQ(v.shortcut, s.clean);
    EXPECT_EQ(v.adversarial, apply_watermarks(s.clean, {3}));

    v = build_test_variants(s, 3, 1.0f, false);
    EXPECT_EQ(v.shortcut, v.real);
    EXPECT_EQ(v.adversarial, v.real);
}

TEST(BuildTestVariants, ExactlyOneVariantDiffersOnGeneratedTestSet) {
    CorpusConfig cfg;
    cfg.n_train = 1;
    cfg.n_val = 1;
    cfg.n_test = 200;
    const Corpus corpus = generate_corpus(cfg);
    for (const Sample& s : corpus.test.samples) {
        EXPECT_EQ(s.image, s.clean);  // stored test images carry no glyphs
        EXPECT_TRUE(s.watermark.stamped_glyphs.empty());
        for (std::size_t k = 0; k < kNumLabels; ++k) {
            const auto v = build_test_variants(s, k);
            EXPECT_EQ(v.real, s.clean);
            EXPECT_NE(v.shortcut != v.real, v.adversarial != v.real);
        }
    }
}

TEST(GenerateCorpus, ByteIdenticalReruns) {
    CorpusConfig cfg;
    cfg.n_train = 10;
    cfg.n_val = 3;
    cfg.n_test = 4;
    const auto a = scratch_dir("a"), b = scratch_dir("b");
    write_corpus(generate_corpus(cfg), a);
    write_corpus(generate_corpus(cfg), b);
    std::size_t files = 0;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(entry.path(), a);
        EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
        ++files;
    }
    // config + 4 metadata files + 10+3 clean and watermarked train/val images + 1 finetune + 4 test
    EXPECT_EQ(files, 1u + 4u + 2u * 13u + 1u + 4u);
}

TEST(GenerateCorpus, RoundTripsThroughDisk) {
    CorpusConfig cfg;
    cfg.n_train = 12;
    cfg.n_val = 2;
    cfg.n_test = 3;
    const auto dir = scratch_dir("rt");
    const Corpus original = generate_corpus(cfg);
    write_corpus(original, dir);
    const Corpus loaded = read_corpus(dir);
    ASSERT_EQ(loaded.train.samples.size(), 12u);
    ASSERT_EQ(loaded.finetune.samples.size(), 1u);
    for (std::size_t i = 0; i < 12; ++i) {
        const auto& x = original.train.samples[i];
        const auto& y = loaded.train.samples[i];
        EXPECT_EQ(x.image, y.image);
        EXPECT_EQ(x.clean, y.clean);
        EXPECT_EQ(x.labels, y.labels);
        EXPECT_EQ(x.caption, y.caption);
        EXPECT_EQ(x.watermark, y.watermark);
    }
}

TEST(GenerateCorpus, SampleDependsOnlyOnIndex) {
    CorpusConfig small, large;
    small.n_train = 5;
    large.n_train = 50;
    const Corpus a = generate_corpus(small);
    const Corpus b = generate_corpus(large);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(a.train.samples[i].image, b.train.samples[i].image);
        EXPECT_EQ(a.train.samples[i].caption, b.train.samples[i].caption);
    }
    EXPECT_EQ(make_sample(large, Split::train, 37).image, b.train.samples[37].image);
}

TEST(GenerateCorpus, LabelPrevalence) {
    CorpusConfig cfg;
    std::array<std::size_t, kNumLabels> pos{};
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i) {
        sf::Rng rng = sf::make_stream(cfg.seed, {static_cast<std::uint64_t>(Split::train), i, sf::stream::labels});
        const LabelVector l = draw_labels(rng, cfg.label_prevalence);
        for (std::size_t k = 0; k < kNumLabels; ++k) pos[k] += l[k];
    }
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        EXPECT_NEAR(static_cast<double>(pos[k]) / n, 0.3, 0.015);
    }
}

// With prevalence q, P(pos | glyph) = q·pc·pk / (q·pc·pk + (1-q)·pc·(1-pk)).
TEST(GenerateCorpus, ShortcutPredictivenessMatchesAnalyticValue) {
    CorpusConfig cfg;
    const Corpus corpus = generate_corpus(cfg);
    const double q = cfg.label_prevalence, pk = cfg.p_correct;
    const double analytic = q * pk / (q * pk + (1 - q) * (1 - pk));
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        std::size_t glyph = 0, glyph_pos = 0;
        for (const Sample& s : corpus.train.samples) {
            if (s.watermark.stamped_glyphs.count(k)) {
                ++glyph;
                glyph_pos += s.labels[k];
            }
        }
        EXPECT_NEAR(static_cast<double>(glyph_pos) / static_cast<double>(glyph), analytic, 0.05) << k;
    }
}

TEST(GenerateCorpus, UnwritablePathIsIoError) {
    CorpusConfig cfg;
    cfg.n_train = 1;
    cfg.n_val = 1;
    cfg.n_test = 1;
    const auto blocker = scratch_dir("blocker");
    std::ofstream(blocker) << "file";
    EXPECT_THROW(write_corpus(generate_corpus(cfg), blocker / "sub"), sf::IoError);
}

TEST(CorpusConfig, Validation) {
    CorpusConfig cfg;
    cfg.p_corrupt = 1.5;
    EXPECT_THROW(cfg.validate(), sf::ContractViolation);
    cfg = CorpusConfig{};
    cfg.image_size = 16;
    EXPECT_THROW(cfg.validate(), sf::ContractViolation);
    cfg = CorpusConfig{};
    cfg.n_test = 0;
    EXPECT_THROW(cfg.validate(), sf::ContractViolation);
    cfg = CorpusConfig{};
    EXPECT_EQ(cfg.finetune_count(), 20u);
    cfg.n_train = 2001;
    EXPECT_EQ(cfg.finetune_count(), 21u);
}

TEST(CorpusConfig, JsonRoundTrip) {
    CorpusConfig cfg;
    cfg.seed = 123456789012345ULL;
    cfg.noise_level = 0.0375;
    const CorpusConfig back = nlohmann::json(cfg).get<CorpusConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(cfg));
}
