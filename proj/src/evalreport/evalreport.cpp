#include "sf/evalreport/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <cctype>
#include <memory>
#include <numeric>
#include <sstream>
#include <tuple>

#include "sf/errors.hpp"
#include "sf/parallel.hpp"

namespace sf::eval {

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) {
        throw ContractViolation("auc: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
    }
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > 1) {
            throw ContractViolation("auc: labels must be 0 or 1");
        }
        if (!std::isfinite(scores[i])) {
            throw NumericFailure("auc: non-finite score at index " + std::to_string(i));
        }
        pos += labels[i];
    }
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) {
        throw DegenerateClasses("auc needs both classes, got " + std::to_string(pos) + " positives and " +
                                std::to_string(neg) + " negatives");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of 1-based midranks of the positives.
    double rank_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            ++j;
        }
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t) {
            if (labels[order[t]]) {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    const double u = rank_sum - p * (p + 1.0) / 2.0;
    return u / (p * n);
}

std::string_view variant_name(Variant v) {
    switch (v) {
        case Variant::real:
            return "real";
        case Variant::shortcut:
            return "shortcut";
        case Variant::adversarial:
            return "adversarial";
    }
    return "unknown";
}

Variant parse_variant(std::string_view name) {
    for (Variant v : kVariants) {
        if (variant_name(v) == name) {
            return v;
        }
    }
    throw ContractViolation("unknown test variant '" + std::string(name) + "'");
}

EvalResult evaluate_scorer(const std::string& model_id, const corpus::SplitData& test, Variant variant,
                           const ImageScorer& scorer, float glyph_intensity, bool stamp) {
    const std::size_t n = test.samples.size();
    constexpr std::size_t K = corpus::kNumLabels;
    std::vector<Scores> real(n);
    // stamped[i][k] holds the label-k score of the stamped image when sample i receives glyph k.
    std::vector<std::array<double, K>> stamped(n);
    parallel_for(n, [&](std::size_t i) {
        const auto& s = test.samples[i];
        real[i] = scorer(s.clean);
        stamped[i] = real[i];
        if (variant == Variant::real || !stamp) {
            return;
        }
        for (std::size_t k = 0; k < K; ++k) {
            const bool receives = variant == Variant::shortcut ? s.labels[k] : !s.labels[k];
            if (!receives) {
                continue;
            }
            const auto v = corpus::build_test_variants(s, k, glyph_intensity, true);
            stamped[i][k] = scorer(variant == Variant::shortcut ? v.shortcut : v.adversarial)[k];
        }
    });

    EvalResult r;
    r.model_id = model_id;
    r.variant = variant;
    std::vector<double> scores(n);
    std::vector<std::uint8_t> labels(n);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = stamped[i][k];
            labels[i] = test.samples[i].labels[k] ? 1 : 0;
        }
        r.per_label_auc[k] = auc(scores, labels);
    }
    r.average_auc = std::accumulate(r.per_label_auc.begin(), r.per_label_auc.end(), 0.0) / static_cast<double>(K);
    return r;
}

ScoringMode scoring_mode(const enc::Checkpoint& checkpoint) {
    switch (checkpoint.kind()) {
        case enc::ArchKind::classifier:
            return ScoringMode::logits;
        case enc::ArchKind::dual_encoder:
        case enc::ArchKind::image_encoder:
            return ScoringMode::zero_shot;
    }
    throw ContractViolation("unreachable architecture kind");
}

ImageScorer make_scorer(const enc::Checkpoint& checkpoint, const zs::AnchorSet* anchors) {
    if (scoring_mode(checkpoint) == ScoringMode::logits) {
        auto params = std::make_shared<enc::ClassifierParams>(enc::classifier_from(checkpoint));
        return [params](const corpus::Image& img) {
            const auto z = enc::classify(img, *params);
            Scores s{};
            std::copy(z.begin(), z.end(), s.begin());
            return s;
        };
    }
    if (!anchors) {
        throw MissingPrerequisite("zero-shot scoring of '" + checkpoint.descriptor + "' needs label anchors");
    }
    auto params = std::make_shared<enc::ImageEncoderParams>(enc::image_encoder_from(checkpoint));
    auto a = std::make_shared<zs::AnchorSet>(*anchors);
    return [params, a](const corpus::Image& img) { return zs::zero_shot_scores(img, *a, *params); };
}

EvalResult evaluate_model(const std::string& model_id, const enc::Checkpoint& checkpoint,
                          const corpus::SplitData& test, Variant variant, const zs::AnchorSet* anchors,
                          float glyph_intensity) {
    return evaluate_scorer(model_id, test, variant, make_scorer(checkpoint, anchors), glyph_intensity);
}

namespace {

std::string fmt(double x, const char* spec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, x);
    return buf;
}

}  // namespace

void emit_report(std::vector<EvalResult> results, const ReportMeta& meta, const std::filesystem::path& dir) {
    if (results.empty()) {
        throw ContractViolation("emit_report: no results");
    }
    std::sort(results.begin(), results.end(), [](const EvalResult& a, const EvalResult& b) {
        return std::tie(a.model_id, a.variant) < std::tie(b.model_id, b.variant);
    });
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);

    const auto csv_path = dir / "results.csv";
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) {
        throw IoError("cannot write results", csv_path);
    }
    csv << kResultsHeader << '\n';
    for (const auto& r : results) {
        csv << r.model_id << ',' << variant_name(r.variant);
        for (double a : r.per_label_auc) {
            csv << ',' << fmt(a, "%.9g");
        }
        csv << ',' << fmt(r.average_auc, "%.9g") << '\n';
    }
    if (!csv) {
        throw IoError("failed while writing results", csv_path);
    }

    const auto md_path = dir / "report.md";
    std::ofstream md(md_path, std::ios::binary);
    if (!md) {
        throw IoError("cannot write report", md_path);
    }
    md << "# " << (meta.experiment_name.empty() ? "Evaluation" : meta.experiment_name) << "\n\n";
    if (!meta.notes.empty()) {
        md << meta.notes << "\n\n";
    }
    for (Variant v : kVariants) {
        std::string title(variant_name(v));
        title[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(title[0])));
        md << "## " << title << " test AUCs\n\n";
        md << "| Model | Average | Atelectasis | Cardiomegaly | Consolidation | Edema | Pleural Effusion |\n";
        md << "|---|---|---|---|---|---|---|\n";
        for (const auto& r : results) {
            if (r.variant != v) {
                continue;
            }
            md << "| " << r.model_id << " | " << fmt(r.average_auc, "%.3f");
            for (double a : r.per_label_auc) {
                md << " | " << fmt(a, "%.3f");
            }
            md << " |\n";
        }
        md << '\n';
    }
    if (!md) {
        throw IoError("failed while writing report", md_path);
    }
}

std::vector<EvalResult> read_results_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingPrerequisite("results not found: " + path.string());
    }
    std::string line;
    std::getline(in, line);
    if (line != kResultsHeader) {
        throw IoError("unexpected results header", path);
    }
    std::vector<EvalResult> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (cells.size() != 8) {
            throw IoError("results row has " + std::to_string(cells.size()) + " cells", path);
        }
        EvalResult r;
        r.model_id = cells[0];
        r.variant = parse_variant(cells[1]);
        try {
            for (std::size_t k = 0; k < corpus::kNumLabels; ++k) {
                r.per_label_auc[k] = std::stod(cells[2 + k]);
            }
            r.average_auc = std::stod(cells[7]);
        } catch (const std::exception&) {
            throw IoError("non-numeric AUC in row '" + line + "'", path);
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace sf::eval
