#include "sf/attribution/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sf/binio.hpp"
#include "sf/diffcore/ops.hpp"
#include "sf/errors.hpp"
#include "sf/parallel.hpp"
#include "sf/rng.hpp"

namespace sf::attr {

using corpus::Image;

void IGConfig::validate() const {
    if (steps < 1) {
        throw ContractViolation("IG config: steps must be >= 1");
    }
    if (smoothgrad_n < 1) {
        throw ContractViolation("IG config: smoothgrad_n must be >= 1");
    }
    if (!(sigma >= 0.0)) {
        throw ContractViolation("IG config: sigma must be >= 0");
    }
}

void to_json(nlohmann::json& j, const IGConfig& c) {
    j = nlohmann::json{{"steps", c.steps}, {"smoothgrad_n", c.smoothgrad_n}, {"sigma", c.sigma}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, IGConfig& c) {
    const IGConfig d;
    c.steps = j.value("steps", d.steps);
    c.smoothgrad_n = j.value("smoothgrad_n", d.smoothgrad_n);
    c.sigma = j.value("sigma", d.sigma);
    c.seed = j.value("seed", d.seed);
}

namespace {

MapMeta meta_of(const IGConfig& c, const std::string& model_id, bool smoothed) {
    return MapMeta{c.steps, smoothed ? c.smoothgrad_n : 1, smoothed ? c.sigma : 0.0, model_id};
}

}  // namespace

template <typename Real>
AttributionMap integrated_gradients(const PredictFn<Real>& predict, const Image& image, const IGConfig& config,
                                    std::size_t target_label, const std::string& model_id) {
    config.validate();
    const std::size_t n = image.size();
    const std::size_t m = config.steps;
    std::vector<std::vector<Real>> grads(m);
    parallel_for(m, [&](std::size_t j) {
        const Real alpha = static_cast<Real>(j + 1) / static_cast<Real>(m);
        std::vector<Real> px(n);
        for (std::size_t i = 0; i < n; ++i) {
            px[i] = alpha * static_cast<Real>(image.pixels[i]);
        }
        diff::Graph<Real> g;
        const diff::Var<Real> x = g.leaf({1, image.height, image.width}, std::move(px), true);
        const diff::Var<Real> out = predict(g, x);
        if (out.size() != 1) {
            throw ContractViolation("integrated_gradients: predict_fn must return a scalar, got " +
                                    diff::shape_string(out.shape()));
        }
        g.backward(out);
        grads[j] = g.grad(x);
    });

    AttributionMap map;
    map.height = image.height;
    map.width = image.width;
    map.target_label = target_label;
    map.meta = meta_of(config, model_id, false);
    map.values.assign(n, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            map.values[i] += static_cast<double>(grads[j][i]);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        map.values[i] = static_cast<double>(image.pixels[i]) * (map.values[i] / static_cast<double>(m));
        if (!std::isfinite(map.values[i])) {
            throw NumericFailure("integrated_gradients: non-finite attribution at pixel " + std::to_string(i));
        }
    }
    return map;
}

template <typename Real>
AttributionMap smoothgrad_ig(const PredictFn<Real>& predict, const Image& image, const IGConfig& config,
                             std::uint64_t noise_key, std::size_t target_label, const std::string& model_id) {
    config.validate();
    if (config.sigma == 0.0) {
        return integrated_gradients(predict, image, config, target_label, model_id);
    }
    const auto [lo, hi] = std::minmax_element(image.pixels.begin(), image.pixels.end());
    const double stddev = config.sigma * static_cast<double>(*hi - *lo);

    AttributionMap total;
    for (std::size_t r = 0; r < config.smoothgrad_n; ++r) {
        Rng rng = make_stream(config.seed, {stream::smoothgrad, noise_key, target_label, r});
        std::normal_distribution<double> noise(0.0, stddev);
        Image noisy = image;
        if (stddev > 0.0) {
            for (float& p : noisy.pixels) {
                p = static_cast<float>(p + noise(rng));
            }
        }
        AttributionMap one = integrated_gradients(predict, noisy, config, target_label, model_id);
        if (r == 0) {
            total = std::move(one);
        } else {
            for (std::size_t i = 0; i < total.values.size(); ++i) {
                total.values[i] += one.values[i];
            }
        }
    }
    for (double& v : total.values) {
        v /= static_cast<double>(config.smoothgrad_n);
    }
    total.meta = meta_of(config, model_id, true);
    return total;
}

template AttributionMap integrated_gradients(const PredictFn<float>&, const Image&, const IGConfig&, std::size_t,
                                             const std::string&);
template AttributionMap integrated_gradients(const PredictFn<double>&, const Image&, const IGConfig&, std::size_t,
                                             const std::string&);
template AttributionMap smoothgrad_ig(const PredictFn<float>&, const Image&, const IGConfig&, std::uint64_t,
                                      std::size_t, const std::string&);
template AttributionMap smoothgrad_ig(const PredictFn<double>&, const Image&, const IGConfig&, std::uint64_t,
                                      std::size_t, const std::string&);

template <typename Real>
PredictFn<Real> logit_predictor(std::shared_ptr<const enc::ClassifierParams> params, std::size_t label) {
    if (label >= corpus::kNumLabels) {
        throw ContractViolation("logit_predictor: label " + std::to_string(label) + " out of range");
    }
    return [params, label](diff::Graph<Real>& g, diff::Var<Real> image) {
        const auto refs = enc::params_of(*params);
        const auto p = enc::bind_params<Real>(g, refs, false);
        std::vector<Real> pick(corpus::kNumLabels, Real{0});
        pick[label] = Real{1};
        return diff::dot(enc::classifier_logits<Real>(image, p), g.constant({corpus::kNumLabels}, std::move(pick)));
    };
}

template <typename Real>
PredictFn<Real> zero_shot_predictor(std::shared_ptr<const enc::ImageEncoderParams> params, zs::LabelAnchor anchor) {
    return [params, anchor = std::move(anchor)](diff::Graph<Real>& g, diff::Var<Real> image) {
        const auto refs = enc::params_of(*params);
        const auto p = enc::bind_params<Real>(g, refs, false);
        return zs::zero_shot_score<Real>(image, p, anchor);
    };
}

template PredictFn<float> logit_predictor(std::shared_ptr<const enc::ClassifierParams>, std::size_t);
template PredictFn<double> logit_predictor(std::shared_ptr<const enc::ClassifierParams>, std::size_t);
template PredictFn<float> zero_shot_predictor(std::shared_ptr<const enc::ImageEncoderParams>, zs::LabelAnchor);
template PredictFn<double> zero_shot_predictor(std::shared_ptr<const enc::ImageEncoderParams>, zs::LabelAnchor);

double map_cosine_similarity(const AttributionMap& a, const AttributionMap& b) {
    if (a.height != b.height || a.width != b.width || a.values.size() != b.values.size()) {
        throw ContractViolation("map_cosine_similarity: maps have different shapes");
    }
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw UndefinedSimilarity("map_cosine_similarity: an all-zero map has no direction");
    }
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Consistency study
// ---------------------------------------------------------------------------

PairSummary summarize(std::vector<double> values) {
    PairSummary s;
    s.count = values.size();
    if (values.empty()) {
        return s;
    }
    double total = 0;
    for (double v : values) {
        total += v;
    }
    s.mean = total / static_cast<double>(values.size());
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    s.median = values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
    return s;
}

StudyResult consistency_study(const std::vector<StudyModel>& models, const std::vector<PairSpec>& pairs,
                              const std::vector<const corpus::Sample*>& samples, const std::vector<std::size_t>& labels,
                              const IGConfig& config, float glyph_intensity) {
    config.validate();
    std::map<std::string, const StudyModel*> by_id;
    for (const auto& m : models) {
        by_id[m.id] = &m;
    }
    std::map<std::string, bool> needs_stamped;
    for (const auto& p : pairs) {
        for (const std::string* id : {&p.model_a, &p.model_b}) {
            if (p.kind == PairKind::cross_variant && id == &p.model_b) {
                continue;
            }
            if (!by_id.count(*id)) {
                throw ContractViolation("consistency pair " + p.pair_id + " names unknown model '" + *id + "'");
            }
        }
        if (p.kind == PairKind::cross_variant) {
            needs_stamped[p.model_a] = true;
        }
    }
    for (std::size_t k : labels) {
        if (k >= corpus::kNumLabels) {
            throw ContractViolation("consistency study: label " + std::to_string(k) + " out of range");
        }
    }

    StudyResult result;
    std::map<std::string, std::vector<double>> per_pair;
    for (const corpus::Sample* s : samples) {
        for (std::size_t k : labels) {
            std::map<std::string, AttributionMap> real, stamped;
            const Image marked = corpus::apply_watermarks(s->clean, {k}, glyph_intensity);
            for (const auto& m : models) {
                const PredictFn<float> f = m.predictor(k);
                real[m.id] = smoothgrad_ig<float>(f, s->clean, config, s->index, k, m.id);
                if (needs_stamped.count(m.id)) {
                    stamped[m.id] = smoothgrad_ig<float>(f, marked, config, s->index, k, m.id);
                }
                result.real_maps.push_back({m.id, s->index, real[m.id]});
            }
            for (const auto& p : pairs) {
                const double sim = p.kind == PairKind::cross_model
                                       ? map_cosine_similarity(real.at(p.model_a), real.at(p.model_b))
                                       : map_cosine_similarity(real.at(p.model_a), stamped.at(p.model_a));
                result.records.push_back({p.pair_id, s->index, k, sim});
                per_pair[p.pair_id].push_back(sim);
            }
        }
    }
    for (const auto& p : pairs) {
        result.summary[p.pair_id] = summarize(per_pair[p.pair_id]);
    }
    return result;
}

namespace {

std::string fmt9(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path, const char* what) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError(std::string("cannot write ") + what, path);
    }
    return out;
}

}  // namespace

void write_consistency(const StudyResult& result, const std::filesystem::path& dir) {
    {
        auto out = open_out(dir / "consistency.csv", "consistency table");
        out << "pair_id,sample_id,label,similarity\n";
        for (const auto& r : result.records) {
            out << r.pair_id << ',' << r.sample_id << ',' << r.label << ',' << fmt9(r.similarity) << '\n';
        }
    }
    auto out = open_out(dir / "consistency_summary.csv", "consistency summary");
    out << "pair_id,count,mean,median\n";
    for (const auto& [id, s] : result.summary) {
        out << id << ',' << s.count << ',' << fmt9(s.mean) << ',' << fmt9(s.median) << '\n';
    }
}

std::vector<ConsistencyRecord> read_consistency_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingPrerequisite("consistency table not found: " + path.string());
    }
    std::string line;
    std::getline(in, line);
    if (line != "pair_id,sample_id,label,similarity") {
        throw IoError("unexpected consistency header", path);
    }
    std::vector<ConsistencyRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        ConsistencyRecord r;
        std::string cell;
        std::getline(ss, r.pair_id, ',');
        std::getline(ss, cell, ',');
        r.sample_id = std::stoul(cell);
        std::getline(ss, cell, ',');
        r.label = std::stoul(cell);
        std::getline(ss, cell, ',');
        r.similarity = std::stod(cell);
        out.push_back(r);
    }
    return out;
}

void write_map_pgm(const AttributionMap& map, const std::filesystem::path& path) {
    double peak = 0;
    for (double v : map.values) {
        peak = std::max(peak, std::abs(v));
    }
    std::vector<unsigned char> bytes(map.values.size(), 128);
    if (peak > 0) {
        for (std::size_t i = 0; i < bytes.size(); ++i) {
            const double level = std::round(128.0 + 127.0 * map.values[i] / peak);
            bytes[i] = static_cast<unsigned char>(std::clamp(level, 0.0, 255.0));
        }
    }
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    corpus::write_pgm_bytes(bytes, map.height, map.width, path);
}

void write_map_raw(const AttributionMap& map, const std::filesystem::path& path) {
    auto out = open_out(path, "attribution map");
    std::vector<float> v(map.values.begin(), map.values.end());
    write_f32_le(out, v);
}

std::vector<float> read_map_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) {
        throw MissingPrerequisite("attribution map not found: " + path.string());
    }
    const auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (bytes % 4 != 0) {
        throw IoError("raw map size is not a multiple of 4", path);
    }
    return read_f32_le(in, bytes / 4);
}

}  // namespace sf::attr
