#include "sf/synthcorpus/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "sf/errors.hpp"
#include "sf/parallel.hpp"

namespace sf::corpus {

namespace {

// 9×9 stencils, one per label. Pairwise Hamming distances are >= 20.
constexpr std::array<std::array<const char*, kGlyphSize>, kNumLabels> kStencils = {{
    {"#.......#", ".#.....#.", "..#...#..", "...#.#...", "....#....", "...#.#...", "..#...#..", ".#.....#.",
     "#.......#"},
    {"#########", "#.......#", "#.......#", "#.......#", "#.......#", "#.......#", "#.......#", "#.......#",
     "#########"},
    {"...###...", "...###...", "...###...", "#########", "#########", "#########", "...###...", "...###...",
     "...###..."},
    {"#########", "#########", ".........", ".........", "#########", ".........", ".........", "#########",
     "#########"},
    {"#.#.#.#.#", ".#.#.#.#.", "#.#.#.#.#", ".#.#.#.#.", "#.#.#.#.#", ".#.#.#.#.", "#.#.#.#.#", ".#.#.#.#.",
     "#.#.#.#.#"},
}};

constexpr float kBaseFloor = 0.02f;
constexpr float kBaseCeil = 0.98f;

// Signature strengths relative to a background with noise_level = 0.05.
struct SignatureStyle {
    static constexpr double blob_amplitude = 0.22;
    static constexpr double ring_amplitude = 0.14;
    static constexpr double band_amplitude = 0.10;
    static constexpr double speckle_amplitude = 0.22;
    static constexpr double wedge_amplitude = 0.18;
};

double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::string index_name(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", index);
    return buf;
}

}  // namespace

std::size_t LabelVector::positives() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), true));
}

std::set<std::size_t> LabelVector::positive_set() const {
    std::set<std::size_t> out;
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        if (bits[k]) {
            out.insert(k);
        }
    }
    return out;
}

std::set<std::size_t> LabelVector::negative_set() const {
    std::set<std::size_t> out;
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        if (!bits[k]) {
            out.insert(k);
        }
    }
    return out;
}

std::size_t CorpusConfig::finetune_count() const {
    if (n_finetune > 0) {
        return n_finetune;
    }
    return (n_train + 99) / 100;
}

void CorpusConfig::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw ContractViolation(std::string("corpus config: ") + name + " must lie in [0,1]");
        }
    };
    prob(p_corrupt, "p_corrupt");
    prob(p_correct, "p_correct");
    prob(label_prevalence, "label_prevalence");
    prob(glyph_intensity, "glyph_intensity");
    if (n_train < 1 || n_val < 1 || n_test < 1) {
        throw ContractViolation("corpus config: split counts must be >= 1");
    }
    if (image_size < 32) {
        throw ContractViolation("corpus config: image_size must be >= 32");
    }
    if (caption_vocab_size < vocab::min_size) {
        throw ContractViolation("corpus config: caption_vocab_size must be >= " + std::to_string(vocab::min_size));
    }
    if (!(noise_level >= 0.0)) {
        throw ContractViolation("corpus config: noise_level must be >= 0");
    }
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
    j = nlohmann::json{{"n_train", c.n_train},
                       {"n_val", c.n_val},
                       {"n_test", c.n_test},
                       {"n_finetune", c.n_finetune},
                       {"image_size", c.image_size},
                       {"p_corrupt", c.p_corrupt},
                       {"p_correct", c.p_correct},
                       {"label_prevalence", c.label_prevalence},
                       {"seed", c.seed},
                       {"caption_vocab_size", c.caption_vocab_size},
                       {"noise_level", c.noise_level},
                       {"glyph_intensity", c.glyph_intensity}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
    CorpusConfig d;
    c.n_train = j.value("n_train", d.n_train);
    c.n_val = j.value("n_val", d.n_val);
    c.n_test = j.value("n_test", d.n_test);
    c.n_finetune = j.value("n_finetune", d.n_finetune);
    c.image_size = j.value("image_size", d.image_size);
    c.p_corrupt = j.value("p_corrupt", d.p_corrupt);
    c.p_correct = j.value("p_correct", d.p_correct);
    c.label_prevalence = j.value("label_prevalence", d.label_prevalence);
    c.seed = j.value("seed", d.seed);
    c.caption_vocab_size = j.value("caption_vocab_size", d.caption_vocab_size);
    c.noise_level = j.value("noise_level", d.noise_level);
    c.glyph_intensity = j.value("glyph_intensity", d.glyph_intensity);
}

std::string_view split_name(Split s) {
    switch (s) {
        case Split::train:
            return "train";
        case Split::val:
            return "val";
        case Split::finetune:
            return "finetune";
        case Split::test:
            return "test";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Glyphs and regions
// ---------------------------------------------------------------------------

Glyph glyph_for(std::size_t label, std::size_t image_size, float intensity) {
    if (label >= kNumLabels) {
        throw ContractViolation("glyph_for: label " + std::to_string(label) + " out of range");
    }
    Glyph g;
    g.label_index = label;
    g.intensity = intensity;
    for (std::size_t r = 0; r < kGlyphSize; ++r) {
        for (std::size_t c = 0; c < kGlyphSize; ++c) {
            g.bitmap[r * kGlyphSize + c] = kStencils[label][r][c] == '#' ? 1 : 0;
        }
    }
    const std::size_t margin = 1;
    const std::size_t far = image_size - kGlyphSize - margin;
    const std::size_t mid = (image_size - kGlyphSize) / 2;
    constexpr std::array<std::array<int, 2>, kNumLabels> corners = {{{0, 0}, {0, 2}, {2, 0}, {2, 2}, {0, 1}}};
    auto place = [&](int where) { return where == 0 ? margin : where == 1 ? mid : far; };
    g.slot = GlyphSlot{place(corners[label][0]), place(corners[label][1])};
    return g;
}

std::size_t hamming_distance(const Glyph& a, const Glyph& b) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < a.bitmap.size(); ++i) {
        d += a.bitmap[i] != b.bitmap[i] ? 1 : 0;
    }
    return d;
}

Region signature_region(std::size_t image_size) {
    const std::size_t m = kGlyphSize + 3;
    return Region{m, m, image_size - m, image_size - m};
}

Region blob_region(std::size_t image_size) {
    const Region r = signature_region(image_size);
    const double w = static_cast<double>(r.row1 - r.row0);
    auto at = [&](std::size_t base, double frac) { return base + static_cast<std::size_t>(std::lround(frac * w)); };
    return Region{at(r.row0, 0.50), at(r.col0, 0.05), at(r.row0, 0.90), at(r.col0, 0.45)};
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

std::string vocab::token_text(std::uint32_t id, std::size_t vocab_size) {
    static constexpr std::array<const char*, 3> qualifiers = {"seen", "noted", "present"};
    if (id == unknown || id >= vocab_size) {
        return "<unk>";
    }
    if (id == no_finding) {
        return "no_acute_findings";
    }
    if (id >= finding_base && id < finding_base + kNumLabels) {
        return std::string(kLabelNames[id - finding_base]);
    }
    if (id >= negation_base && id < negation_base + kNumLabels) {
        return "no_" + std::string(kLabelNames[id - negation_base]);
    }
    if (id >= qualifier_base && id < qualifier_base + qualifier_count) {
        return qualifiers[id - qualifier_base];
    }
    return "filler_" + std::to_string(id - filler_base);
}

Caption make_caption(const LabelVector& labels, Rng& rng, std::size_t vocab_size, const CaptionOptions& options) {
    if (vocab_size < vocab::min_size) {
        throw ContractViolation("make_caption: vocabulary too small");
    }
    std::bernoulli_distribution deny(options.p_deny);
    std::uniform_int_distribution<std::uint32_t> qualifier(0, vocab::qualifier_count - 1);
    std::vector<Caption> units;
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        if (labels[k]) {
            units.push_back({vocab::qualifier_base + qualifier(rng), vocab::finding_base + static_cast<std::uint32_t>(k)});
        } else if (deny(rng)) {
            units.push_back({vocab::negation_base + static_cast<std::uint32_t>(k)});
        }
    }
    if (labels.positives() == 0) {
        units.push_back({vocab::no_finding});
    }
    const std::size_t fillers = std::uniform_int_distribution<std::size_t>(0, options.max_fillers)(rng);
    std::uniform_int_distribution<std::uint32_t> filler(vocab::filler_base, static_cast<std::uint32_t>(vocab_size - 1));
    for (std::size_t i = 0; i < fillers; ++i) {
        units.push_back({filler(rng)});
    }
    std::shuffle(units.begin(), units.end(), rng);
    Caption out;
    for (const auto& u : units) {
        out.insert(out.end(), u.begin(), u.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

LabelVector draw_labels(Rng& rng, double prevalence) {
    std::bernoulli_distribution positive(prevalence);
    LabelVector labels;
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        labels[k] = positive(rng);
    }
    return labels;
}

Image render_base_image(const LabelVector& labels, Rng& rng, std::size_t image_size, double noise_level) {
    const std::size_t s = image_size;
    const double sd = static_cast<double>(s);
    std::vector<double> field(s * s);

    // Smooth background with a per-image brightness offset and tilt.
    const double offset = uniform(rng, -0.05, 0.05);
    const double tilt_x = uniform(rng, -0.08, 0.08);
    const double tilt_y = uniform(rng, -0.08, 0.08);
    const double c = (sd - 1.0) / 2.0;
    const double spread = 2.0 * (0.35 * sd) * (0.35 * sd);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
            field[y * s + x] = 0.35 + 0.12 * std::exp(-(dx * dx + dy * dy) / spread) + offset +
                               tilt_x * (dx / sd) + tilt_y * (dy / sd);
        }
    }

    // Signatures are confined to the central region so they never meet a glyph slot.
    const Region reg = signature_region(s);
    const double w = static_cast<double>(reg.row1 - reg.row0);
    const double r0 = static_cast<double>(reg.row0), c0 = static_cast<double>(reg.col0);
    std::vector<double> sig(s * s, 0.0);
    auto add_sig = [&](std::size_t y, std::size_t x, double v) {
        if (reg.contains(y, x)) {
            sig[y * s + x] += v;
        }
    };
    auto for_region = [&](auto&& fn) {
        for (std::size_t y = reg.row0; y < reg.row1; ++y) {
            for (std::size_t x = reg.col0; x < reg.col1; ++x) {
                fn(y, x, static_cast<double>(y), static_cast<double>(x));
            }
        }
    };

    if (labels[0]) {  // off-centre blob, lower left
        const Region b = blob_region(s);
        const double cy = uniform(rng, static_cast<double>(b.row0) + 2.0, static_cast<double>(b.row1) - 2.0);
        const double cx = uniform(rng, static_cast<double>(b.col0) + 2.0, static_cast<double>(b.col1) - 2.0);
        const double sigma = uniform(rng, 0.07 * w, 0.11 * w);
        for_region([&](std::size_t y, std::size_t x, double fy, double fx) {
            const double d2 = (fy - cy) * (fy - cy) + (fx - cx) * (fx - cx);
            add_sig(y, x, SignatureStyle::blob_amplitude * std::exp(-d2 / (2.0 * sigma * sigma)));
        });
    }
    if (labels[1]) {  // ring around the centre
        const double cy = r0 + w * uniform(rng, 0.42, 0.58);
        const double cx = c0 + w * uniform(rng, 0.42, 0.58);
        const double radius = w * uniform(rng, 0.12, 0.20);
        for_region([&](std::size_t y, std::size_t x, double fy, double fx) {
            const double d = std::hypot(fy - cy, fx - cx) - radius;
            add_sig(y, x, SignatureStyle::ring_amplitude * std::exp(-d * d / (2.0 * 0.8 * 0.8)));
        });
    }
    if (labels[2]) {  // horizontal band
        const double cy = r0 + w * uniform(rng, 0.2, 0.8);
        const double half = uniform(rng, 1.0, 2.0);
        const double x0 = c0 + w * uniform(rng, 0.0, 0.2), x1 = c0 + w * uniform(rng, 0.8, 1.0);
        for_region([&](std::size_t y, std::size_t x, double fy, double fx) {
            if (fx >= x0 && fx <= x1) {
                const double d = std::max(0.0, std::abs(fy - cy) - half);
                add_sig(y, x, SignatureStyle::band_amplitude * std::exp(-d * d / 0.5));
            }
        });
    }
    if (labels[3]) {  // speckle patch, upper right
        const double py = r0 + w * uniform(rng, 0.05, 0.35);
        const double px = c0 + w * uniform(rng, 0.55, 0.85);
        const double patch = 0.3 * w;
        std::uniform_real_distribution<double> jitter(0.0, patch);
        for (int dot = 0; dot < 18; ++dot) {
            const auto y = static_cast<std::size_t>(py + jitter(rng));
            const auto x = static_cast<std::size_t>(px + jitter(rng));
            add_sig(y, x, SignatureStyle::speckle_amplitude);
        }
    }
    if (labels[4]) {  // wedge rising toward the lower right
        const double top = r0 + w * uniform(rng, 0.65, 0.8);
        const double left = c0 + w * uniform(rng, 0.5, 0.65);
        const double depth = r0 + w - top;
        const double width = c0 + w - left;
        for_region([&](std::size_t y, std::size_t x, double fy, double fx) {
            if (fy >= top && fx >= left) {
                const double t = std::min((fy - top) / depth, (fx - left) / width);
                add_sig(y, x, SignatureStyle::wedge_amplitude * t);
            }
        });
    }

    std::normal_distribution<double> noise(0.0, 1.0);
    Image image(s, s);
    for (std::size_t i = 0; i < s * s; ++i) {
        const double v = field[i] + sig[i] + noise_level * noise(rng);
        image.pixels[i] = std::clamp(static_cast<float>(v), kBaseFloor, kBaseCeil);
    }
    quantize_8bit(image);
    return image;
}

Image apply_watermarks(const Image& image, const std::set<std::size_t>& glyphs, float intensity) {
    Image out = image;
    for (std::size_t label : glyphs) {
        const Glyph g = glyph_for(label, image.height, intensity);
        for (std::size_t r = 0; r < kGlyphSize; ++r) {
            for (std::size_t c = 0; c < kGlyphSize; ++c) {
                out.at(g.slot.row + r, g.slot.col + c) = g.bitmap[r * kGlyphSize + c] ? g.intensity : 0.0f;
            }
        }
    }
    quantize_8bit(out);
    return out;
}

Sample corrupt_train_sample(Sample sample, Rng& rng, const CorpusConfig& config) {
    sample.watermark = WatermarkRecord{};
    sample.watermark.corrupted = std::bernoulli_distribution(config.p_corrupt)(rng);
    if (sample.watermark.corrupted) {
        sample.watermark.correct = std::bernoulli_distribution(config.p_correct)(rng);
        sample.watermark.stamped_glyphs =
            sample.watermark.correct ? sample.labels.positive_set() : sample.labels.negative_set();
    }
    sample.image = apply_watermarks(sample.clean, sample.watermark.stamped_glyphs, config.glyph_intensity);
    return sample;
}

TestVariants build_test_variants(const Sample& sample, std::size_t target_label, float intensity, bool stamp) {
    if (target_label >= kNumLabels) {
        throw ContractViolation("build_test_variants: label out of range");
    }
    TestVariants v{sample.clean, sample.clean, sample.clean};
    if (!stamp) {
        return v;
    }
    const std::set<std::size_t> glyph{target_label};
    if (sample.labels[target_label]) {
        v.shortcut = apply_watermarks(sample.clean, glyph, intensity);
    } else {
        v.adversarial = apply_watermarks(sample.clean, glyph, intensity);
    }
    return v;
}

Sample make_sample(const CorpusConfig& config, Split split, std::size_t index) {
    const auto tag = static_cast<std::uint64_t>(split);
    Rng label_rng = make_stream(config.seed, {tag, index, stream::labels});
    Rng image_rng = make_stream(config.seed, {tag, index, stream::image});
    Rng caption_rng = make_stream(config.seed, {tag, index, stream::caption});

    Sample s;
    s.index = index;
    s.labels = draw_labels(label_rng, config.label_prevalence);
    s.clean = render_base_image(s.labels, image_rng, config.image_size, config.noise_level);
    s.image = s.clean;
    s.caption = make_caption(s.labels, caption_rng, config.caption_vocab_size);
    if (split == Split::train || split == Split::val) {
        Rng wm_rng = make_stream(config.seed, {tag, index, stream::watermark});
        s = corrupt_train_sample(std::move(s), wm_rng, config);
    }
    return s;
}

Corpus generate_corpus(const CorpusConfig& config) {
    config.validate();
    Corpus corpus;
    corpus.config = config;
    auto fill = [&](SplitData& data, std::size_t n) {
        data.samples.resize(n);
        parallel_for(n, [&](std::size_t i) { data.samples[i] = make_sample(config, data.split, i); });
    };
    fill(corpus.train, config.n_train);
    fill(corpus.val, config.n_val);
    fill(corpus.finetune, config.finetune_count());
    fill(corpus.test, config.n_test);
    return corpus;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

nlohmann::json sample_meta(const Sample& s) {
    std::vector<int> labels;
    for (bool b : s.labels.bits) {
        labels.push_back(b ? 1 : 0);
    }
    return nlohmann::json{{"index", s.index},
                          {"labels", labels},
                          {"caption", s.caption},
                          {"watermark",
                           {{"corrupted", s.watermark.corrupted},
                            {"correct", s.watermark.correct},
                            {"stamped_glyphs", s.watermark.stamped_glyphs}}}};
}

void write_split(const SplitData& data, const std::filesystem::path& root) {
    const auto dir = root / split_name(data.split);
    std::error_code ec;
    std::filesystem::create_directories(dir / "images", ec);
    const bool watermarked = data.split == Split::train || data.split == Split::val;
    if (watermarked) {
        std::filesystem::create_directories(dir / "watermarked", ec);
    }
    if (ec) {
        throw IoError("cannot create corpus directory", dir);
    }
    std::ofstream meta(dir / "metadata.jsonl", std::ios::trunc);
    if (!meta) {
        throw IoError("cannot open for writing", dir / "metadata.jsonl");
    }
    for (const Sample& s : data.samples) {
        meta << sample_meta(s).dump() << '\n';
        write_pgm(s.clean, dir / "images" / (index_name(s.index) + ".pgm"));
        if (watermarked) {
            write_pgm(s.image, dir / "watermarked" / (index_name(s.index) + ".pgm"));
        }
    }
    if (!meta) {
        throw IoError("write failed", dir / "metadata.jsonl");
    }
}

SplitData read_split(Split split, const std::filesystem::path& root) {
    const auto dir = root / split_name(split);
    std::ifstream meta(dir / "metadata.jsonl");
    if (!meta) {
        throw MissingPrerequisite("corpus split missing: " + (dir / "metadata.jsonl").string());
    }
    const bool watermarked = split == Split::train || split == Split::val;
    SplitData data{split, {}};
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) {
            continue;
        }
        const auto j = nlohmann::json::parse(line);
        Sample s;
        s.index = j.at("index").get<std::size_t>();
        const auto labels = j.at("labels").get<std::vector<int>>();
        if (labels.size() != kNumLabels) {
            throw IoError("bad label vector in metadata", dir / "metadata.jsonl");
        }
        for (std::size_t k = 0; k < kNumLabels; ++k) {
            s.labels[k] = labels[k] != 0;
        }
        s.caption = j.at("caption").get<Caption>();
        const auto& wm = j.at("watermark");
        s.watermark.corrupted = wm.at("corrupted").get<bool>();
        s.watermark.correct = wm.at("correct").get<bool>();
        s.watermark.stamped_glyphs = wm.at("stamped_glyphs").get<std::set<std::size_t>>();
        s.clean = read_pgm(dir / "images" / (index_name(s.index) + ".pgm"));
        s.image = watermarked ? read_pgm(dir / "watermarked" / (index_name(s.index) + ".pgm")) : s.clean;
        data.samples.push_back(std::move(s));
    }
    return data;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw IoError("cannot create corpus directory", dir);
    }
    {
        std::ofstream cfg(dir / "config.json", std::ios::trunc);
        if (!cfg) {
            throw IoError("cannot open for writing", dir / "config.json");
        }
        cfg << nlohmann::json(corpus.config).dump(2) << '\n';
    }
    for (const SplitData* split : {&corpus.train, &corpus.val, &corpus.finetune, &corpus.test}) {
        write_split(*split, dir);
    }
}

bool corpus_exists(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "config.json");
}

Corpus read_corpus(const std::filesystem::path& dir) {
    if (!corpus_exists(dir)) {
        throw MissingPrerequisite("no corpus at " + dir.string());
    }
    Corpus corpus;
    std::ifstream cfg(dir / "config.json");
    corpus.config = nlohmann::json::parse(cfg).get<CorpusConfig>();
    corpus.train = read_split(Split::train, dir);
    corpus.val = read_split(Split::val, dir);
    corpus.finetune = read_split(Split::finetune, dir);
    corpus.test = read_split(Split::test, dir);
    return corpus;
}

CorpusSummary summarize(const SplitData& split) {
    CorpusSummary out;
    std::size_t corrupted = 0, correct = 0;
    std::array<std::size_t, kNumLabels> pos{};
    for (const Sample& s : split.samples) {
        corrupted += s.watermark.corrupted ? 1 : 0;
        correct += (s.watermark.corrupted && s.watermark.correct) ? 1 : 0;
        for (std::size_t k = 0; k < kNumLabels; ++k) {
            pos[k] += s.labels[k] ? 1 : 0;
        }
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, split.samples.size()));
    out.corrupted_fraction = static_cast<double>(corrupted) / n;
    out.correct_given_corrupted =
        corrupted ? static_cast<double>(correct) / static_cast<double>(corrupted) : 0.0;
    for (std::size_t k = 0; k < kNumLabels; ++k) {
        out.prevalence[k] = static_cast<double>(pos[k]) / n;
    }
    return out;
}

}  // namespace sf::corpus
