#include "sf/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "sf/diffcore/ops.hpp"
#include "sf/errors.hpp"
#include "sf/parallel.hpp"

namespace sf::train {

using corpus::Image;
using corpus::Sample;
using corpus::SplitData;
using diff::Graph;
using diff::Var;

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw ContractViolation("train config: learning_rate must be > 0");
    }
    if (batch_size < 1) {
        throw ContractViolation("train config: batch_size must be >= 1");
    }
    if (!(temperature > 0.0)) {
        throw ContractViolation("train config: temperature must be > 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
        throw ContractViolation("train config: optimizer moments need beta in [0,1) and epsilon > 0");
    }
    if (augment.max_shift < 0 || augment.noise_std < 0.0 || augment.brightness < 0.0) {
        throw ContractViolation("train config: augmentation magnitudes must be >= 0");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"learning_rate", c.learning_rate},
                       {"batch_size", c.batch_size},
                       {"temperature", c.temperature},
                       {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"epsilon", c.epsilon},
                       {"seed", c.seed},
                       {"shuffle", c.shuffle},
                       {"freeze_trunk", c.freeze_trunk},
                       {"augment",
                        {{"enabled", c.augment.enabled},
                         {"max_shift", c.augment.max_shift},
                         {"horizontal_flip", c.augment.horizontal_flip},
                         {"brightness", c.augment.brightness},
                         {"noise_std", c.augment.noise_std}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.temperature = j.value("temperature", d.temperature);
    const std::string opt = j.value("optimizer", std::string("adam"));
    if (opt == "adam") {
        c.optimizer = OptimizerKind::adam;
    } else if (opt == "sgd") {
        c.optimizer = OptimizerKind::sgd;
    } else {
        throw ContractViolation("train config: unknown optimizer '" + opt + "'");
    }
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.epsilon = j.value("epsilon", d.epsilon);
    c.seed = j.value("seed", d.seed);
    c.shuffle = j.value("shuffle", d.shuffle);
    c.freeze_trunk = j.value("freeze_trunk", d.freeze_trunk);
    c.augment = d.augment;
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        c.augment.enabled = a.value("enabled", d.augment.enabled);
        c.augment.max_shift = a.value("max_shift", d.augment.max_shift);
        c.augment.horizontal_flip = a.value("horizontal_flip", d.augment.horizontal_flip);
        c.augment.brightness = a.value("brightness", d.augment.brightness);
        c.augment.noise_std = a.value("noise_std", d.augment.noise_std);
    }
}

TrainConfig finetune_config(const TrainConfig& pretrain) {
    TrainConfig c = pretrain;
    c.epochs = kFinetuneEpochs;
    c.learning_rate = pretrain.learning_rate * kFinetuneLrFactor;
    return c;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename Real>
Var<Real> clip_loss(Var<Real> a, Var<Real> b, Var<Real> t, Real temperature) {
    if (a.shape().size() != 2 || a.shape() != b.shape() || a.shape() != t.shape()) {
        throw ContractViolation("clip_loss: embeddings must be n×d matrices of one shape, got " +
                                diff::shape_string(a.shape()) + ", " + diff::shape_string(b.shape()) + ", " +
                                diff::shape_string(t.shape()));
    }
    if (a.shape()[0] == 0) {
        throw ContractViolation("clip_loss: empty batch");
    }
    if (!(temperature > Real{0})) {
        throw ContractViolation("clip_loss: temperature must be > 0");
    }
    const Real inv_tau = Real{1} / temperature;
    auto pair_term = [&](Var<Real> x, Var<Real> y) {
        const Var<Real> s = diff::scale(diff::cosine_similarity_matrix(x, y), inv_tau);
        return diff::scale(diff::add(diff::cross_entropy_rows(s), diff::cross_entropy_rows(diff::transpose(s))),
                           Real{0.5});
    };
    return diff::add(diff::add(pair_term(a, t), pair_term(b, t)), pair_term(a, b));
}

template <typename Real>
Var<Real> supervised_loss(Var<Real> logits, std::span<const std::uint8_t> labels) {
    if (logits.shape().size() != 2 || logits.shape()[1] != corpus::kNumLabels) {
        throw ContractViolation("supervised_loss: logits must be n×5, got " + diff::shape_string(logits.shape()));
    }
    return diff::binary_cross_entropy_with_logits(logits, labels);
}

template Var<float> clip_loss(Var<float>, Var<float>, Var<float>, float);
template Var<double> clip_loss(Var<double>, Var<double>, Var<double>, double);
template Var<float> supervised_loss(Var<float>, std::span<const std::uint8_t>);
template Var<double> supervised_loss(Var<double>, std::span<const std::uint8_t>);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

OptimizerConfig optimizer_config(const TrainConfig& c) {
    return OptimizerConfig{c.optimizer, c.learning_rate, c.beta1, c.beta2, c.epsilon};
}

StepResult optimizer_step(const std::vector<std::vector<float>>& params, const std::vector<std::vector<float>>& grads,
                          const OptimizerState& state, const OptimizerConfig& config) {
    if (params.size() != grads.size()) {
        throw ContractViolation("optimizer_step: " + std::to_string(params.size()) + " params but " +
                                std::to_string(grads.size()) + " gradients");
    }
    StepResult out{params, state};
    OptimizerState& s = out.state;
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.size(), 0.0);
            s.v.emplace_back(p.size(), 0.0);
        }
    }
    if (s.m.size() != params.size()) {
        throw ContractViolation("optimizer_step: state tracks " + std::to_string(s.m.size()) + " tensors, got " +
                                std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].size() || s.m[i].size() != params[i].size()) {
            throw ContractViolation("optimizer_step: size mismatch at tensor " + std::to_string(i));
        }
    }
    s.step += 1;
    const double lr = config.learning_rate;
    if (config.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            for (std::size_t j = 0; j < params[i].size(); ++j) {
                out.params[i][j] = static_cast<float>(params[i][j] - lr * grads[i][j]);
            }
        }
        return out;
    }
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = s.m[i];
        auto& v = s.v[i];
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            const double g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            const double mhat = m[j] / c1, vhat = v[j] / c2;
            out.params[i][j] = static_cast<float>(params[i][j] - lr * mhat / (std::sqrt(vhat) + config.epsilon));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

Image augment_image(const Image& image, const AugmentConfig& config, Rng& rng) {
    if (!config.enabled) {
        return image;
    }
    const int s = config.max_shift;
    std::uniform_int_distribution<int> shift(-s, s);
    const int dy = shift(rng), dx = shift(rng);
    const bool flip = config.horizontal_flip && std::bernoulli_distribution(0.5)(rng);
    const double offset = std::uniform_real_distribution<double>(-config.brightness, config.brightness)(rng);
    std::normal_distribution<double> noise(0.0, config.noise_std);

    const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
    Image out(image.height, image.width);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int sy = std::clamp(y + dy, 0, h - 1);
            int sx = std::clamp(x + dx, 0, w - 1);
            if (flip) {
                sx = w - 1 - sx;
            }
            double v = image.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) + offset;
            if (config.noise_std > 0.0) {
                v += noise(rng);
            }
            out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loop machinery
// ---------------------------------------------------------------------------

namespace {

const Image& source_image(const Sample& s, ImageSource source) {
    return source == ImageSource::clean ? s.clean : s.image;
}

void require_not_test(const SplitData& data, const char* who) {
    if (data.split == corpus::Split::test) {
        throw ContractViolation(std::string(who) + ": refusing to read test-split data");
    }
}

std::vector<std::uint8_t> label_bytes(std::span<const Sample* const> batch) {
    std::vector<std::uint8_t> out;
    out.reserve(batch.size() * corpus::kNumLabels);
    for (const Sample* s : batch) {
        for (bool b : s->labels.bits) {
            out.push_back(b ? 1 : 0);
        }
    }
    return out;
}

std::vector<float> concat(const std::vector<std::vector<float>>& parts) {
    std::vector<float> out;
    for (const auto& p : parts) {
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

std::vector<float> rows_of(const std::vector<float>& m, std::size_t row, std::size_t width) {
    return {m.begin() + static_cast<std::ptrdiff_t>(row * width),
            m.begin() + static_cast<std::ptrdiff_t>((row + 1) * width)};
}

// Sum of per-sample gradients in index order, so the result is independent
// of how the samples were distributed across workers.
std::vector<std::vector<float>> reduce_in_order(const std::vector<std::vector<std::vector<float>>>& per_sample) {
    std::vector<std::vector<float>> total = per_sample.front();
    for (std::size_t i = 1; i < per_sample.size(); ++i) {
        for (std::size_t t = 0; t < total.size(); ++t) {
            for (std::size_t j = 0; j < total[t].size(); ++j) {
                total[t][j] += per_sample[i][t][j];
            }
        }
    }
    return total;
}

struct BatchOutcome {
    double loss = 0;
    std::vector<std::vector<float>> grads;  // one per trainable tensor
};

// ----- contrastive -----

constexpr std::size_t kImageTensors = 2 * enc::kConvLayers + 2;
constexpr std::size_t kTextTensors = 5;
constexpr std::size_t kTextFrozen = 3;  // embedding, hidden.w, hidden.b

std::vector<enc::ParamRef> clip_trainable(enc::DualEncoderParams& p) {
    auto refs = enc::params_of(p);
    refs.erase(refs.begin() + kImageTensors, refs.begin() + kImageTensors + kTextFrozen);
    return refs;
}

struct ClipSampleGraph {
    std::unique_ptr<Graph<float>> graph;
    std::vector<Var<float>> trainable;
    Var<float> out;  // 3×128: view a, view b, caption
};

ClipSampleGraph clip_sample_graph(const enc::DualEncoderParams& p, const Image& a, const Image& b,
                                  const corpus::Caption& caption, bool with_grad) {
    ClipSampleGraph sg;
    sg.graph = std::make_unique<Graph<float>>();
    Graph<float>& g = *sg.graph;
    const auto image_refs = enc::params_of(p.image);
    const auto text_refs = enc::params_of(p.text);
    const auto iv = enc::bind_params<float>(g, image_refs, with_grad);
    const auto frozen = enc::bind_params<float>(g, std::span(text_refs).first(kTextFrozen), false);
    const auto proj = enc::bind_params<float>(g, std::span(text_refs).subspan(kTextFrozen), with_grad);
    std::vector<Var<float>> tv(frozen);
    tv.insert(tv.end(), proj.begin(), proj.end());

    const Var<float> ea = enc::image_embedding<float>(enc::image_leaf<float>(g, a, p.image.image_size), iv, true);
    const Var<float> eb = enc::image_embedding<float>(enc::image_leaf<float>(g, b, p.image.image_size), iv, true);
    const Var<float> et = enc::text_embedding<float>(g, caption, tv, true);
    const std::vector<Var<float>> rows = {ea, eb, et};
    sg.out = diff::stack_rows<float>(rows);
    sg.trainable = iv;
    sg.trainable.insert(sg.trainable.end(), proj.begin(), proj.end());
    return sg;
}

BatchOutcome clip_batch(const enc::DualEncoderParams& p, std::span<const Sample* const> batch, ImageSource source,
                        const TrainConfig& config, std::uint64_t epoch, bool training) {
    const std::size_t n = batch.size();
    const std::size_t d = enc::kEmbeddingDim;
    std::vector<ClipSampleGraph> graphs(n);
    parallel_for(n, [&](std::size_t i) {
        const Sample& s = *batch[i];
        const Image& img = source_image(s, source);
        if (training) {
            Rng ra = make_stream(config.seed, {stream::augment, epoch, s.index, 0});
            Rng rb = make_stream(config.seed, {stream::augment, epoch, s.index, 1});
            graphs[i] = clip_sample_graph(p, augment_image(img, config.augment, ra),
                                          augment_image(img, config.augment, rb), s.caption, true);
        } else {
            graphs[i] = clip_sample_graph(p, img, img, s.caption, false);
        }
    });

    std::vector<float> a, b, t;
    for (const auto& sg : graphs) {
        const auto v = sg.out.values();
        a.insert(a.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(d));
        b.insert(b.end(), v.begin() + static_cast<std::ptrdiff_t>(d), v.begin() + static_cast<std::ptrdiff_t>(2 * d));
        t.insert(t.end(), v.begin() + static_cast<std::ptrdiff_t>(2 * d), v.end());
    }
    Graph<float> lg;
    const Var<float> va = lg.leaf({n, d}, std::move(a), training);
    const Var<float> vb = lg.leaf({n, d}, std::move(b), training);
    const Var<float> vt = lg.leaf({n, d}, std::move(t), training);
    const Var<float> loss = clip_loss<float>(va, vb, vt, static_cast<float>(config.temperature));
    BatchOutcome outcome;
    outcome.loss = loss.values()[0];
    if (!training) {
        return outcome;
    }
    lg.backward(loss);
    const auto ga = lg.grad(va), gb = lg.grad(vb), gt = lg.grad(vt);

    std::vector<std::vector<std::vector<float>>> per_sample(n);
    parallel_for(n, [&](std::size_t i) {
        auto& sg = graphs[i];
        const std::vector<float> seed = concat({rows_of(ga, i, d), rows_of(gb, i, d), rows_of(gt, i, d)});
        sg.graph->backward(sg.out, seed);
        for (const auto& v : sg.trainable) {
            per_sample[i].push_back(sg.graph->grad(v));
        }
        sg.graph.reset();
    });
    outcome.grads = reduce_in_order(per_sample);
    return outcome;
}

// ----- supervised -----

struct CnnSampleGraph {
    std::unique_ptr<Graph<float>> graph;
    std::vector<Var<float>> trainable;
    Var<float> logits;
};

BatchOutcome cnn_batch(const enc::ClassifierParams& p, std::span<const Sample* const> batch, ImageSource source,
                       const TrainConfig& config, std::uint64_t epoch, bool training) {
    const std::size_t n = batch.size();
    const std::size_t k = corpus::kNumLabels;
    const auto refs = enc::params_of(p);
    const std::size_t first_trainable = config.freeze_trunk ? 2 * enc::kConvLayers : 0;
    std::vector<CnnSampleGraph> graphs(n);
    parallel_for(n, [&](std::size_t i) {
        const Sample& s = *batch[i];
        auto& sg = graphs[i];
        sg.graph = std::make_unique<Graph<float>>();
        Graph<float>& g = *sg.graph;
        auto vars = enc::bind_params<float>(g, std::span(refs).first(first_trainable), false);
        const auto live = enc::bind_params<float>(g, std::span(refs).subspan(first_trainable), training);
        vars.insert(vars.end(), live.begin(), live.end());
        const Image& img = source_image(s, source);
        Var<float> x;
        if (training) {
            Rng r = make_stream(config.seed, {stream::augment, epoch, s.index, 0});
            x = enc::image_leaf<float>(g, augment_image(img, config.augment, r), p.image_size);
        } else {
            x = enc::image_leaf<float>(g, img, p.image_size);
        }
        sg.logits = enc::classifier_logits<float>(x, vars);
        sg.trainable = live;
    });

    std::vector<float> z;
    for (const auto& sg : graphs) {
        z.insert(z.end(), sg.logits.values().begin(), sg.logits.values().end());
    }
    const auto labels = label_bytes(batch);
    Graph<float> lg;
    const Var<float> vz = lg.leaf({n, k}, std::move(z), training);
    const Var<float> loss = supervised_loss<float>(vz, labels);
    BatchOutcome outcome;
    outcome.loss = loss.values()[0];
    if (!training) {
        return outcome;
    }
    lg.backward(loss);
    const auto gz = lg.grad(vz);
    std::vector<std::vector<std::vector<float>>> per_sample(n);
    parallel_for(n, [&](std::size_t i) {
        auto& sg = graphs[i];
        sg.graph->backward(sg.logits, rows_of(gz, i, k));
        for (const auto& v : sg.trainable) {
            per_sample[i].push_back(sg.graph->grad(v));
        }
        sg.graph.reset();
    });
    outcome.grads = reduce_in_order(per_sample);
    return outcome;
}

std::vector<const Sample*> pointers(const SplitData& data) {
    std::vector<const Sample*> out;
    out.reserve(data.samples.size());
    for (const auto& s : data.samples) {
        out.push_back(&s);
    }
    return out;
}

// Batch-size-weighted mean of the batch losses over the split in index order.
// Contrastive batches of one sample carry no signal and are skipped.
template <typename BatchFn>
double split_loss(const SplitData& data, std::size_t batch_size, std::size_t min_batch, BatchFn&& fn) {
    const auto all = pointers(data);
    double total = 0, weight = 0;
    for (std::size_t start = 0; start < all.size(); start += batch_size) {
        const std::size_t len = std::min(batch_size, all.size() - start);
        if (len < min_batch) {
            continue;
        }
        total += fn(std::span(all).subspan(start, len)) * static_cast<double>(len);
        weight += static_cast<double>(len);
    }
    if (weight == 0) {
        throw ContractViolation("validation split too small to form a batch");
    }
    return total / weight;
}

template <typename P, typename TrainableFn, typename BatchFn, typename ValFn>
TrainResult<P> run_loop(const SplitData& train, const P& init, const TrainConfig& config, std::size_t min_batch,
                        TrainableFn&& trainable_of, BatchFn&& batch_fn, ValFn&& val_fn, const EpochCallback& on_epoch) {
    config.validate();
    if (train.samples.empty()) {
        throw ContractViolation("training split is empty");
    }
    TrainResult<P> result{init, {}, 0};
    P params = init;
    OptimizerState state;
    const OptimizerConfig opt = optimizer_config(config);
    double best = std::numeric_limits<double>::infinity();
    const auto all = pointers(train);

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order(all.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (config.shuffle) {
            Rng rng = make_stream(config.seed, {stream::shuffle, epoch});
            std::shuffle(order.begin(), order.end(), rng);
        }
        double total = 0, weight = 0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
            const std::size_t len = std::min(config.batch_size, order.size() - start);
            if (len < min_batch) {
                continue;
            }
            std::vector<const Sample*> batch(len);
            for (std::size_t i = 0; i < len; ++i) {
                batch[i] = all[order[start + i]];
            }
            BatchOutcome out;
            try {
                out = batch_fn(params, std::span<const Sample* const>(batch), epoch);
                if (!std::isfinite(out.loss)) {
                    throw NumericFailure("loss is not finite");
                }
            } catch (const NumericFailure& e) {
                throw NumericFailure("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batch_index) + ": " + e.what());
            }
            total += out.loss * static_cast<double>(len);
            weight += static_cast<double>(len);

            auto refs = trainable_of(params);
            std::vector<std::vector<float>> values;
            values.reserve(refs.size());
            for (const auto& r : refs) {
                values.push_back(r.tensor->values);
            }
            StepResult step = optimizer_step(values, out.grads, state, opt);
            for (std::size_t i = 0; i < refs.size(); ++i) {
                refs[i].tensor->values = std::move(step.params[i]);
            }
            state = std::move(step.state);
        }

        EpochLog row;
        row.epoch = epoch;
        row.train_loss = weight > 0 ? total / weight : 0.0;
        row.val_loss = val_fn(params);
        row.learning_rate = config.learning_rate;
        if (!std::isfinite(row.val_loss)) {
            throw NumericFailure("validation loss is not finite at epoch " + std::to_string(epoch));
        }
        result.log.push_back(row);
        if (on_epoch) {
            on_epoch(row);
        }
        if (row.val_loss < best) {
            best = row.val_loss;
            result.params = params;
            result.best_epoch = epoch;
        }
    }
    return result;
}

}  // namespace

double clip_validation_loss(const enc::DualEncoderParams& params, const SplitData& data, ImageSource source,
                            const TrainConfig& config) {
    return split_loss(data, config.batch_size, 2, [&](std::span<const Sample* const> batch) {
        return clip_batch(params, batch, source, config, 0, false).loss;
    });
}

double supervised_validation_loss(const enc::ClassifierParams& params, const SplitData& data, ImageSource source,
                                  const TrainConfig& config) {
    return split_loss(data, config.batch_size, 1, [&](std::span<const Sample* const> batch) {
        return cnn_batch(params, batch, source, config, 0, false).loss;
    });
}

TrainResult<enc::DualEncoderParams> train_clip(const SplitData& train, const SplitData& val, ImageSource source,
                                               const enc::DualEncoderParams& init, const TrainConfig& config,
                                               const EpochCallback& on_epoch) {
    require_not_test(train, "train_clip");
    require_not_test(val, "train_clip");
    for (const auto& s : train.samples) {
        if (s.caption.empty()) {
            throw ContractViolation("train_clip: sample " + std::to_string(s.index) + " has no caption");
        }
    }
    return run_loop(
        train, init, config, 2, [](enc::DualEncoderParams& p) { return clip_trainable(p); },
        [&](const enc::DualEncoderParams& p, std::span<const Sample* const> batch, std::uint64_t epoch) {
            return clip_batch(p, batch, source, config, epoch, true);
        },
        [&](const enc::DualEncoderParams& p) { return clip_validation_loss(p, val, source, config); }, on_epoch);
}

namespace {

std::vector<enc::ParamRef> cnn_trainable(enc::ClassifierParams& p, bool freeze_trunk) {
    auto refs = enc::params_of(p);
    if (freeze_trunk) {
        refs.erase(refs.begin(), refs.begin() + 2 * enc::kConvLayers);
    }
    return refs;
}

}  // namespace

TrainResult<enc::ClassifierParams> train_cnn(const SplitData& train, const SplitData& val, ImageSource source,
                                             const enc::ClassifierParams& init, const TrainConfig& config,
                                             const EpochCallback& on_epoch) {
    require_not_test(train, "train_cnn");
    require_not_test(val, "train_cnn");
    return run_loop(
        train, init, config, 1,
        [&](enc::ClassifierParams& p) { return cnn_trainable(p, config.freeze_trunk); },
        [&](const enc::ClassifierParams& p, std::span<const Sample* const> batch, std::uint64_t epoch) {
            return cnn_batch(p, batch, source, config, epoch, true);
        },
        [&](const enc::ClassifierParams& p) { return supervised_validation_loss(p, val, source, config); },
        on_epoch);
}

TrainResult<enc::ClassifierParams> finetune(const enc::ClassifierParams& init, const SplitData& data,
                                            const SplitData& val, const TrainConfig& config,
                                            const EpochCallback& on_epoch) {
    require_not_test(data, "finetune");
    require_not_test(val, "finetune");
    return train_cnn(data, val, ImageSource::clean, init, config, on_epoch);
}

// ---------------------------------------------------------------------------
// Loss log
// ---------------------------------------------------------------------------

void write_loss_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write loss log", path);
    }
    out << "epoch,train_loss,val_loss,lr\n";
    char buf[128];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss, r.learning_rate);
        out << buf;
    }
    if (!out) {
        throw IoError("failed while writing loss log", path);
    }
}

std::vector<EpochLog> read_loss_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingPrerequisite("loss log not found: " + path.string());
    }
    std::string line;
    std::getline(in, line);
    if (line != "epoch,train_loss,val_loss,lr") {
        throw IoError("unexpected loss log header", path);
    }
    std::vector<EpochLog> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        EpochLog r;
        if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf", &r.epoch, &r.train_loss, &r.val_loss, &r.learning_rate) !=
            4) {
            throw IoError("malformed loss log row '" + line + "'", path);
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace sf::train
