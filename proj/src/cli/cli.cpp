#include "sf/cli/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

#include <openssl/evp.h>

#include "sf/encoders/encoders.hpp"
#include "sf/errors.hpp"
#include "sf/zeroshot/zeroshot.hpp"

namespace sf::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
    if (experiment_name.empty()) {
        throw ContractViolation("run config: experiment_name must be nonempty");
    }
    corpus.validate();
    pretrain.validate();
    finetune.validate();
    ig.validate();
    if (study.labels.empty()) {
        throw ContractViolation("run config: study.labels must be nonempty");
    }
    for (std::size_t k : study.labels) {
        if (k >= corpus::kNumLabels) {
            throw ContractViolation("run config: study label " + std::to_string(k) + " out of range");
        }
    }
}

fs::path RunConfig::experiment_dir() const { return output_root / experiment_name; }
fs::path RunConfig::corpus_dir() const { return experiment_dir() / paths.corpus_dir; }
fs::path RunConfig::checkpoints_dir() const { return experiment_dir() / paths.checkpoints_dir; }
fs::path RunConfig::reports_dir() const { return experiment_dir() / paths.reports_dir; }

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{
        {"experiment_name", c.experiment_name},
        {"output_root", c.output_root.generic_string()},
        {"corpus", c.corpus},
        {"pretrain", c.pretrain},
        {"finetune", c.finetune},
        {"ig", c.ig},
        {"study",
         {{"n_samples", c.study.n_samples},
          {"labels", c.study.labels},
          {"anchor_captions", c.study.anchor_captions}}},
        {"paths",
         {{"corpus_dir", c.paths.corpus_dir.generic_string()},
          {"checkpoints_dir", c.paths.checkpoints_dir.generic_string()},
          {"reports_dir", c.paths.reports_dir.generic_string()}}},
    };
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    const RunConfig d;
    c.experiment_name = j.value("experiment_name", d.experiment_name);
    c.output_root = j.value("output_root", d.output_root.generic_string());
    c.corpus = j.value("corpus", nlohmann::json::object()).get<corpus::CorpusConfig>();
    c.pretrain = j.value("pretrain", nlohmann::json::object()).get<train::TrainConfig>();
    // Fine-tuning inherits from pretraining; the file only lists what differs.
    nlohmann::json ft = train::finetune_config(c.pretrain);
    if (j.contains("finetune")) {
        ft.merge_patch(j.at("finetune"));
    }
    c.finetune = ft.get<train::TrainConfig>();
    c.ig = j.value("ig", nlohmann::json::object()).get<attr::IGConfig>();
    const auto s = j.value("study", nlohmann::json::object());
    c.study.n_samples = s.value("n_samples", d.study.n_samples);
    c.study.labels = s.value("labels", d.study.labels);
    c.study.anchor_captions = s.value("anchor_captions", d.study.anchor_captions);
    const auto p = j.value("paths", nlohmann::json::object());
    c.paths.corpus_dir = p.value("corpus_dir", d.paths.corpus_dir.generic_string());
    c.paths.checkpoints_dir = p.value("checkpoints_dir", d.paths.checkpoints_dir.generic_string());
    c.paths.reports_dir = p.value("reports_dir", d.paths.reports_dir.generic_string());
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingPrerequisite("config not found: " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed config (") + e.what() + ")", path);
    }
    RunConfig c = j.get<RunConfig>();
    c.validate();
    return c;
}

void save_run_config(const RunConfig& c, const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write config", path);
    }
    out << nlohmann::json(c).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Naming
// ---------------------------------------------------------------------------

Mode parse_mode(const std::string& s) {
    if (s == "cnn") return Mode::cnn;
    if (s == "clip") return Mode::clip;
    throw ContractViolation("unknown mode '" + s + "' (expected cnn or clip)");
}

Data parse_data(const std::string& s) {
    if (s == "real") return Data::real;
    if (s == "shortcut") return Data::shortcut;
    throw ContractViolation("unknown data '" + s + "' (expected real or shortcut)");
}

std::string model_id(Mode mode, Data data) {
    return std::string(mode == Mode::cnn ? "cnn" : "clip") + "-" + (data == Data::real ? "real" : "shortcut");
}

fs::path checkpoint_path(const RunConfig& c, const std::string& id) { return c.checkpoints_dir() / (id + ".ckpt"); }
fs::path loss_log_path(const RunConfig& c, const std::string& id) { return c.checkpoints_dir() / (id + ".loss.csv"); }
fs::path anchors_dir(const RunConfig& c, const std::string& id) { return c.checkpoints_dir() / (id + ".anchors"); }

std::vector<std::string> grid_pretrained_ids() {
    return {model_id(Mode::cnn, Data::real), model_id(Mode::cnn, Data::shortcut), model_id(Mode::clip, Data::real),
            model_id(Mode::clip, Data::shortcut)};
}

std::vector<std::string> grid_all_ids() {
    auto ids = grid_pretrained_ids();
    for (const auto& id : grid_pretrained_ids()) {
        ids.push_back(id + kFinetuneSuffix);
    }
    return ids;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace {

void say(const Log& log, const std::string& msg) {
    if (log) {
        log(msg);
    }
}

std::string fmt(const char* spec, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, x);
    return buf;
}

corpus::Corpus require_corpus(const RunConfig& c) {
    if (!corpus::corpus_exists(c.corpus_dir())) {
        throw MissingPrerequisite("no corpus in " + c.corpus_dir().string() + "; run gen first");
    }
    return corpus::read_corpus(c.corpus_dir());
}

enc::Checkpoint require_checkpoint(const RunConfig& c, const std::string& id) {
    const auto path = checkpoint_path(c, id);
    if (!fs::exists(path)) {
        throw MissingPrerequisite("checkpoint '" + id + "' not found at " + path.string());
    }
    return enc::load_checkpoint(path);
}

train::EpochCallback epoch_logger(const Log& log, const std::string& id) {
    if (!log) {
        return {};
    }
    return [log, id](const train::EpochLog& e) {
        log(id + " epoch " + std::to_string(e.epoch) + " train " + fmt("%.4f", e.train_loss) + " val " +
            fmt("%.4f", e.val_loss));
    };
}

}  // namespace

corpus::CorpusSummary cmd_gen(const RunConfig& c, const Log& log) {
    c.validate();
    const auto corp = corpus::generate_corpus(c.corpus);
    corpus::write_corpus(corp, c.corpus_dir());
    const auto s = corpus::summarize(corp.train);
    std::string prevalence;
    for (double p : s.prevalence) {
        prevalence += " " + fmt("%.3f", p);
    }
    say(log, "corpus: " + std::to_string(corp.train.samples.size()) + " train, " +
                 std::to_string(corp.val.samples.size()) + " val, " + std::to_string(corp.finetune.samples.size()) +
                 " finetune, " + std::to_string(corp.test.samples.size()) + " test");
    say(log, "corrupted fraction " + fmt("%.4f", s.corrupted_fraction) + ", correct given corrupted " +
                 fmt("%.4f", s.correct_given_corrupted) + ", prevalence" + prevalence);
    write_manifest(c);
    return s;
}

std::string cmd_train(const RunConfig& c, Mode mode, Data data, const Log& log) {
    c.validate();
    const auto corp = require_corpus(c);
    const auto id = model_id(mode, data);
    const auto source = data == Data::real ? train::ImageSource::clean : train::ImageSource::as_stored;
    const std::size_t size = c.corpus.image_size;
    nlohmann::json meta{{"model_id", id}, {"train", c.pretrain}};
    fs::create_directories(c.checkpoints_dir());

    if (mode == Mode::cnn) {
        auto r = train::train_cnn(corp.train, corp.val, source, enc::init_classifier(size, c.pretrain.seed), c.pretrain,
                                  epoch_logger(log, id));
        meta["best_epoch"] = r.best_epoch;
        enc::save_checkpoint(enc::to_checkpoint(r.params, meta), checkpoint_path(c, id));
        train::write_loss_log(r.log, loss_log_path(c, id));
    } else {
        auto r = train::train_clip(corp.train, corp.val, source,
                                   enc::init_dual_encoder(size, c.corpus.caption_vocab_size, c.pretrain.seed),
                                   c.pretrain, epoch_logger(log, id));
        meta["best_epoch"] = r.best_epoch;
        enc::save_checkpoint(enc::to_checkpoint(r.params, meta), checkpoint_path(c, id));
        train::write_loss_log(r.log, loss_log_path(c, id));
        zs::save_anchors(zs::build_anchors(corp.train, r.params.text, c.study.anchor_captions), anchors_dir(c, id));
    }
    say(log, "wrote " + checkpoint_path(c, id).string());
    write_manifest(c);
    return id;
}

std::string cmd_finetune(const RunConfig& c, const std::string& id, const Log& log) {
    c.validate();
    const auto ckpt = require_checkpoint(c, id);
    const auto corp = require_corpus(c);
    enc::ClassifierParams init;
    switch (ckpt.kind()) {
        case enc::ArchKind::classifier:
            init = enc::classifier_from(ckpt);
            break;
        case enc::ArchKind::dual_encoder:
        case enc::ArchKind::image_encoder:
            init = enc::to_classifier(enc::image_encoder_from(ckpt), c.finetune.seed);
            break;
    }
    const std::string out_id = id + kFinetuneSuffix;
    auto r = train::finetune(init, corp.finetune, corp.val, c.finetune, epoch_logger(log, out_id));
    nlohmann::json meta{{"model_id", out_id},
                        {"source", id},
                        {"source_descriptor", ckpt.descriptor},
                        {"train", c.finetune},
                        {"best_epoch", r.best_epoch}};
    enc::save_checkpoint(enc::to_checkpoint(r.params, meta), checkpoint_path(c, out_id));
    train::write_loss_log(r.log, loss_log_path(c, out_id));
    say(log, "wrote " + checkpoint_path(c, out_id).string());
    write_manifest(c);
    return out_id;
}

std::vector<eval::EvalResult> cmd_eval(const RunConfig& c, const std::vector<std::string>& ids, const Log& log) {
    c.validate();
    if (ids.empty()) {
        throw ContractViolation("eval needs at least one checkpoint");
    }
    const auto corp = require_corpus(c);
    std::vector<eval::EvalResult> results;
    for (const auto& id : ids) {
        const auto ckpt = require_checkpoint(c, id);
        std::optional<zs::AnchorSet> anchors;
        if (eval::scoring_mode(ckpt) == eval::ScoringMode::zero_shot) {
            anchors = zs::load_anchors(anchors_dir(c, id));
        }
        const auto scorer = eval::make_scorer(ckpt, anchors ? &*anchors : nullptr);
        for (eval::Variant v : eval::kVariants) {
            results.push_back(eval::evaluate_scorer(id, corp.test, v, scorer, c.corpus.glyph_intensity));
            say(log, id + " " + std::string(eval::variant_name(v)) + " average AUC " +
                         fmt("%.3f", results.back().average_auc));
        }
    }
    eval::emit_report(results, {c.experiment_name, ""}, c.reports_dir());
    write_manifest(c);
    return results;
}

attr::StudyResult cmd_attribute(const RunConfig& c, const std::vector<std::string>& ids,
                                const std::vector<std::size_t>& sample_ids, const Log& log) {
    c.validate();
    if (ids.empty()) {
        throw ContractViolation("attribute needs at least one checkpoint");
    }
    const auto corp = require_corpus(c);
    const auto& test = corp.test.samples;
    std::vector<const corpus::Sample*> samples;
    for (std::size_t s : sample_ids) {
        if (s >= test.size()) {
            throw ContractViolation("sample id " + std::to_string(s) + " out of range; valid ids are 0.." +
                                    std::to_string(test.size() - 1));
        }
        samples.push_back(&test[s]);
    }

    std::vector<attr::StudyModel> models;
    for (const auto& id : ids) {
        const auto ckpt = require_checkpoint(c, id);
        if (eval::scoring_mode(ckpt) == eval::ScoringMode::logits) {
            auto p = std::make_shared<const enc::ClassifierParams>(enc::classifier_from(ckpt));
            models.push_back({id, [p](std::size_t k) { return attr::logit_predictor<float>(p, k); }});
        } else {
            auto p = std::make_shared<const enc::ImageEncoderParams>(enc::image_encoder_from(ckpt));
            auto a = std::make_shared<const zs::AnchorSet>(zs::load_anchors(anchors_dir(c, id)));
            models.push_back({id, [p, a](std::size_t k) { return attr::zero_shot_predictor<float>(p, (*a)[k]); }});
        }
    }

    std::vector<attr::PairSpec> pairs;
    for (const auto& id : ids) {
        const auto pos = id.find("-real");
        if (pos == std::string::npos) {
            continue;
        }
        const std::string twin = id.substr(0, pos) + "-shortcut" + id.substr(pos + 5);
        if (std::find(ids.begin(), ids.end(), twin) != ids.end()) {
            pairs.push_back({id + "~" + twin, attr::PairKind::cross_model, id, twin});
        }
    }
    for (const auto& id : ids) {
        pairs.push_back({id + ":real~stamped", attr::PairKind::cross_variant, id, ""});
    }

    say(log, "attributing " + std::to_string(models.size()) + " models on " + std::to_string(samples.size()) +
                 " samples x " + std::to_string(c.study.labels.size()) + " labels");
    auto result = attr::consistency_study(models, pairs, samples, c.study.labels, c.ig, c.corpus.glyph_intensity);

    const fs::path dir = c.reports_dir() / "attribution";
    attr::write_consistency(result, dir);
    for (const auto& m : result.real_maps) {
        const std::string stem = "s" + std::to_string(m.sample_id) + "-" +
                                 std::string(corpus::kLabelNames[m.map.target_label]);
        attr::write_map_pgm(m.map, dir / "maps" / m.model_id / (stem + ".pgm"));
        attr::write_map_raw(m.map, dir / "maps" / m.model_id / (stem + ".f32"));
    }
    for (const auto& [pair_id, s] : result.summary) {
        say(log, pair_id + " mean " + fmt("%.3f", s.mean) + " median " + fmt("%.3f", s.median));
    }
    write_manifest(c);
    return result;
}

void run_grid(const RunConfig& c, const Log& log) {
    cmd_gen(c, log);
    for (Mode m : {Mode::cnn, Mode::clip}) {
        for (Data d : {Data::real, Data::shortcut}) {
            cmd_train(c, m, d, log);
        }
    }
    for (const auto& id : grid_pretrained_ids()) {
        cmd_finetune(c, id, log);
    }
    cmd_eval(c, grid_all_ids(), log);
    std::vector<std::size_t> ids(std::min(c.study.n_samples, c.corpus.n_test));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ids[i] = i;
    }
    cmd_attribute(c, grid_pretrained_ids(), ids, log);
}

// ---------------------------------------------------------------------------
// Manifest and exit codes
// ---------------------------------------------------------------------------

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read for hashing", path);
    }
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
        throw IoError("sha256 init failed", path);
    }
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) {
            EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
        }
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), digest, &len);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) {
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return hex.str();
}

void write_manifest(const RunConfig& c) {
    const fs::path root = c.experiment_dir();
    const fs::path manifest = root / "MANIFEST.sha256";
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path() != manifest) {
            files.push_back(fs::relative(e.path(), root));
        }
    }
    std::sort(files.begin(), files.end());
    std::ofstream out(manifest, std::ios::binary);
    if (!out) {
        throw IoError("cannot write manifest", manifest);
    }
    for (const auto& f : files) {
        out << sha256_file(root / f) << "  " << f.generic_string() << '\n';
    }
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return 2;
    if (dynamic_cast<const MissingPrerequisite*>(&e)) return 3;
    if (dynamic_cast<const NumericFailure*>(&e)) return 4;
    if (dynamic_cast<const ContractViolation*>(&e)) return 5;
    if (dynamic_cast<const nlohmann::json::exception*>(&e)) return 5;
    return 1;
}

}  // namespace sf::cli
