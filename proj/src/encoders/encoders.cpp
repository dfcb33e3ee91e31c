#include "sf/encoders/encoders.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "sf/binio.hpp"
#include "sf/diffcore/ops.hpp"
#include "sf/errors.hpp"
#include "sf/rng.hpp"

namespace sf::enc {

namespace {

std::uint64_t name_hash(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    }
    return h;
}

Tensor uniform_tensor(diff::Shape shape, double bound, std::uint64_t seed, std::string_view name) {
    Rng rng = make_stream(seed, {stream::init, name_hash(name)});
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<float> v(diff::element_count(shape));
    for (float& x : v) {
        x = static_cast<float>(dist(rng));
    }
    return Tensor(std::move(shape), std::move(v));
}

// ReLU-followed layers get the larger gain.
double fan_in_bound(std::size_t fan_in, bool relu) {
    return std::sqrt((relu ? 6.0 : 3.0) / static_cast<double>(fan_in));
}

Tensor linear_weight(std::size_t out, std::size_t in, std::uint64_t seed, std::string_view name, bool relu) {
    return uniform_tensor({out, in}, fan_in_bound(in, relu), seed, name);
}

std::string layer_name(const char* stem, std::size_t i, const char* part) {
    return std::string(stem) + std::to_string(i) + "." + part;
}

template <typename R, typename P>
void push_trunk(std::vector<R>& out, P& t) {
    for (std::size_t i = 0; i < kConvLayers; ++i) {
        out.push_back({layer_name("trunk.conv", i, "w"), &t.kernels[i]});
        out.push_back({layer_name("trunk.conv", i, "b"), &t.biases[i]});
    }
}

template <typename R, typename P>
void push_text(std::vector<R>& out, P& t) {
    out.push_back({"text.embedding", &t.embedding});
    out.push_back({"text.hidden.w", &t.hidden_w});
    out.push_back({"text.hidden.b", &t.hidden_b});
    out.push_back({"text.proj.w", &t.proj_w});
    out.push_back({"text.proj.b", &t.proj_b});
}

std::string descriptor_field(const std::string& desc, const std::string& key) {
    const std::string needle = key + "=";
    const auto at = desc.find(needle);
    if (at == std::string::npos) {
        throw ContractViolation("architecture descriptor lacks '" + key + "': " + desc);
    }
    const auto start = at + needle.size();
    const auto end = desc.find_first_of(",;)]", start);
    return desc.substr(start, end - start);
}

std::size_t descriptor_size(const std::string& desc, const std::string& key) {
    const std::string v = descriptor_field(desc, key);
    try {
        return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
        throw ContractViolation("architecture descriptor field '" + key + "' is not a count: " + desc);
    }
}

template <typename P>
Checkpoint make_checkpoint(const P& p, nlohmann::json meta) {
    Checkpoint c;
    c.descriptor = descriptor(p);
    c.meta = std::move(meta);
    for (const auto& r : params_of(p)) {
        c.tensors.push_back({r.name, *r.tensor});
    }
    return c;
}

// Fills `skeleton` from the checkpoint after checking the descriptor matches.
template <typename P>
P fill_from(const Checkpoint& c, P skeleton) {
    const std::string want = descriptor(skeleton);
    if (c.descriptor != want) {
        throw ContractViolation("architecture mismatch: checkpoint has '" + c.descriptor + "', expected '" + want +
                                "'");
    }
    std::map<std::string, const Tensor*> by_name;
    for (const auto& nt : c.tensors) {
        by_name[nt.name] = &nt.tensor;
    }
    for (auto& r : params_of(skeleton)) {
        const auto it = by_name.find(r.name);
        if (it == by_name.end()) {
            throw ContractViolation("checkpoint is missing tensor " + r.name);
        }
        if (it->second->shape != r.tensor->shape) {
            throw ContractViolation("checkpoint tensor " + r.name + " has shape " +
                                    diff::shape_string(it->second->shape) + ", expected " +
                                    diff::shape_string(r.tensor->shape));
        }
        *r.tensor = *it->second;
    }
    return skeleton;
}

constexpr const char* kMagic = "sf-checkpoint";
constexpr int kFormatVersion = 1;

}  // namespace

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

TrunkParams init_trunk(std::uint64_t seed) {
    TrunkParams t;
    for (std::size_t i = 0; i < kConvLayers; ++i) {
        const std::size_t in = kTrunkChannels[i], out = kTrunkChannels[i + 1];
        const std::size_t fan_in = in * kKernel * kKernel;
        t.kernels[i] = uniform_tensor({out, in, kKernel, kKernel}, fan_in_bound(fan_in, true), seed,
                                      layer_name("trunk.conv", i, "w"));
        t.biases[i] = Tensor::zeros({out});
    }
    return t;
}

ImageEncoderParams init_image_encoder(std::size_t image_size, std::uint64_t seed) {
    ImageEncoderParams p;
    p.image_size = image_size;
    p.trunk = init_trunk(seed);
    p.proj_w = linear_weight(kEmbeddingDim, kTrunkFeatures, seed, "image.proj.w", false);
    p.proj_b = Tensor::zeros({kEmbeddingDim});
    return p;
}

TextEncoderParams init_text_encoder(std::size_t vocab_size, std::uint64_t seed) {
    if (vocab_size < 1) {
        throw ContractViolation("text encoder needs a vocabulary of at least one token");
    }
    TextEncoderParams t;
    t.embedding = uniform_tensor({vocab_size, kTextWidth}, 1.0, seed, "text.embedding");
    t.hidden_w = linear_weight(kTextWidth, kTextWidth, seed, "text.hidden.w", false);
    t.hidden_b = Tensor::zeros({kTextWidth});
    t.proj_w = linear_weight(kEmbeddingDim, kTextWidth, seed, "text.proj.w", false);
    t.proj_b = Tensor::zeros({kEmbeddingDim});
    return t;
}

DualEncoderParams init_dual_encoder(std::size_t image_size, std::size_t vocab_size, std::uint64_t seed) {
    return DualEncoderParams{init_image_encoder(image_size, seed), init_text_encoder(vocab_size, seed)};
}

ClassifierParams init_classifier(std::size_t image_size, std::uint64_t seed) {
    ClassifierParams c;
    c.image_size = image_size;
    c.trunk = init_trunk(seed);
    c.head_w = linear_weight(kNumHeads, kTrunkFeatures, seed, "head.w", false);
    c.head_b = Tensor::zeros({kNumHeads});
    return c;
}

ClassifierParams to_classifier(const ImageEncoderParams& encoder, std::uint64_t head_init_seed) {
    ClassifierParams c;
    c.image_size = encoder.image_size;
    c.trunk = encoder.trunk;
    c.head_w = linear_weight(kNumHeads, kTrunkFeatures, head_init_seed, "head.w", false);
    c.head_b = Tensor::zeros({kNumHeads});
    return c;
}

// ---------------------------------------------------------------------------
// Parameter enumeration
// ---------------------------------------------------------------------------

std::vector<ParamRef> params_of(TrunkParams& p) {
    std::vector<ParamRef> out;
    push_trunk(out, p);
    return out;
}

std::vector<ParamRef> params_of(ImageEncoderParams& p) {
    std::vector<ParamRef> out;
    push_trunk(out, p.trunk);
    out.push_back({"image.proj.w", &p.proj_w});
    out.push_back({"image.proj.b", &p.proj_b});
    return out;
}

std::vector<ParamRef> params_of(TextEncoderParams& p) {
    std::vector<ParamRef> out;
    push_text(out, p);
    return out;
}

std::vector<ParamRef> params_of(DualEncoderParams& p) {
    std::vector<ParamRef> out = params_of(p.image);
    push_text(out, p.text);
    return out;
}

std::vector<ParamRef> params_of(ClassifierParams& p) {
    std::vector<ParamRef> out;
    push_trunk(out, p.trunk);
    out.push_back({"head.w", &p.head_w});
    out.push_back({"head.b", &p.head_b});
    return out;
}

std::vector<ConstParamRef> params_of(const TrunkParams& p) {
    std::vector<ConstParamRef> out;
    push_trunk(out, p);
    return out;
}

std::vector<ConstParamRef> params_of(const ImageEncoderParams& p) {
    std::vector<ConstParamRef> out;
    push_trunk(out, p.trunk);
    out.push_back({"image.proj.w", &p.proj_w});
    out.push_back({"image.proj.b", &p.proj_b});
    return out;
}

std::vector<ConstParamRef> params_of(const TextEncoderParams& p) {
    std::vector<ConstParamRef> out;
    push_text(out, p);
    return out;
}

std::vector<ConstParamRef> params_of(const DualEncoderParams& p) {
    std::vector<ConstParamRef> out = params_of(p.image);
    push_text(out, p.text);
    return out;
}

std::vector<ConstParamRef> params_of(const ClassifierParams& p) {
    std::vector<ConstParamRef> out;
    push_trunk(out, p.trunk);
    out.push_back({"head.w", &p.head_w});
    out.push_back({"head.b", &p.head_b});
    return out;
}

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

std::string trunk_descriptor(std::size_t image_size) {
    std::ostringstream s;
    s << "trunk(img=" << image_size << ",conv=";
    for (std::size_t i = 0; i < kTrunkChannels.size(); ++i) {
        s << (i ? "-" : "") << kTrunkChannels[i];
    }
    s << ",k=" << kKernel << ",s=" << kStride << ",act=relu,pool=avg)";
    return s.str();
}

std::string descriptor(const ImageEncoderParams& p) {
    return "image-encoder[" + trunk_descriptor(p.image_size) + ";proj=" + std::to_string(kTrunkFeatures) + "x" +
           std::to_string(kEmbeddingDim) + "]";
}

std::string descriptor(const DualEncoderParams& p) {
    std::ostringstream s;
    s << "dual-encoder[" << trunk_descriptor(p.image.image_size) << ";proj=" << kTrunkFeatures << "x"
      << kEmbeddingDim << ";text(vocab=" << p.text.vocab_size() << ",width=" << kTextWidth
      << ",hidden=" << kTextWidth << ",act=tanh,proj=" << kTextWidth << "x" << kEmbeddingDim << ")]";
    return s.str();
}

std::string descriptor(const ClassifierParams& p) {
    return "classifier[" + trunk_descriptor(p.image_size) + ";head=" + std::to_string(kTrunkFeatures) + "x" +
           std::to_string(kNumHeads) + "]";
}

ArchKind kind_of(const std::string& desc) {
    const std::string head = desc.substr(0, desc.find('['));
    if (head == "classifier") {
        return ArchKind::classifier;
    }
    if (head == "dual-encoder") {
        return ArchKind::dual_encoder;
    }
    if (head == "image-encoder") {
        return ArchKind::image_encoder;
    }
    throw ContractViolation("unknown architecture descriptor: " + desc);
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename Real>
std::vector<diff::Var<Real>> bind_params(diff::Graph<Real>& g, std::span<const ConstParamRef> refs, bool requires_grad) {
    std::vector<diff::Var<Real>> vars;
    vars.reserve(refs.size());
    for (const auto& r : refs) {
        const Tensor& t = *r.tensor;
        vars.push_back(g.leaf(t.shape, std::vector<Real>(t.values.begin(), t.values.end()), requires_grad));
    }
    return vars;
}

template <typename Real>
diff::Var<Real> image_leaf(diff::Graph<Real>& g, const corpus::Image& image, std::size_t image_size,
                           bool requires_grad) {
    if (image.height != image_size || image.width != image_size) {
        throw ContractViolation("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                ", encoder expects " + std::to_string(image_size) + "x" +
                                std::to_string(image_size));
    }
    return g.leaf({1, image.height, image.width}, std::vector<Real>(image.pixels.begin(), image.pixels.end()),
                  requires_grad);
}

template <typename Real>
diff::Var<Real> trunk_forward(diff::Var<Real> image, std::span<const diff::Var<Real>> trunk) {
    if (trunk.size() != 2 * kConvLayers) {
        throw ContractViolation("trunk_forward expects " + std::to_string(2 * kConvLayers) + " parameter vars");
    }
    diff::Var<Real> x = image;
    for (std::size_t i = 0; i < kConvLayers; ++i) {
        x = diff::relu(diff::add_channel_bias(diff::conv2d(x, trunk[2 * i], kStride), trunk[2 * i + 1]));
    }
    return diff::global_avg_pool(x);
}

template <typename Real>
diff::Var<Real> image_embedding(diff::Var<Real> image, std::span<const diff::Var<Real>> p, bool normalize) {
    const std::size_t t = 2 * kConvLayers;
    if (p.size() != t + 2) {
        throw ContractViolation("image_embedding expects " + std::to_string(t + 2) + " parameter vars");
    }
    diff::Var<Real> e = diff::linear(trunk_forward(image, p.first(t)), p[t], p[t + 1]);
    return normalize ? diff::l2_normalize(e) : e;
}

template <typename Real>
diff::Var<Real> text_embedding(diff::Graph<Real>& /*g*/, const corpus::Caption& caption,
                               std::span<const diff::Var<Real>> p, bool normalize) {
    if (p.size() != 5) {
        throw ContractViolation("text_embedding expects 5 parameter vars");
    }
    if (caption.empty()) {
        throw ContractViolation("text_encode: empty caption");
    }
    diff::Var<Real> h = diff::embedding_mean(p[0], std::span<const std::uint32_t>(caption));
    h = diff::tanh(diff::linear(h, p[1], p[2]));
    diff::Var<Real> e = diff::linear(h, p[3], p[4]);
    return normalize ? diff::l2_normalize(e) : e;
}

template <typename Real>
diff::Var<Real> classifier_logits(diff::Var<Real> image, std::span<const diff::Var<Real>> p) {
    const std::size_t t = 2 * kConvLayers;
    if (p.size() != t + 2) {
        throw ContractViolation("classifier_logits expects " + std::to_string(t + 2) + " parameter vars");
    }
    return diff::linear(trunk_forward(image, p.first(t)), p[t], p[t + 1]);
}

#define SF_INSTANTIATE_ENCODERS(Real)                                                                          \
    template std::vector<diff::Var<Real>> bind_params(diff::Graph<Real>&, std::span<const ConstParamRef>, bool);      \
    template diff::Var<Real> image_leaf(diff::Graph<Real>&, const corpus::Image&, std::size_t, bool);           \
    template diff::Var<Real> trunk_forward(diff::Var<Real>, std::span<const diff::Var<Real>>);                  \
    template diff::Var<Real> image_embedding(diff::Var<Real>, std::span<const diff::Var<Real>>, bool);          \
    template diff::Var<Real> text_embedding(diff::Graph<Real>&, const corpus::Caption&,                        \
                                            std::span<const diff::Var<Real>>, bool);                            \
    template diff::Var<Real> classifier_logits(diff::Var<Real>, std::span<const diff::Var<Real>>);

SF_INSTANTIATE_ENCODERS(float)
SF_INSTANTIATE_ENCODERS(double)

#undef SF_INSTANTIATE_ENCODERS

// ---------------------------------------------------------------------------
// Plain evaluation
// ---------------------------------------------------------------------------

std::vector<float> image_encode(const corpus::Image& image, const ImageEncoderParams& params, bool normalize) {
    diff::Graph<float> g;
    const auto refs = params_of(params);
    const auto vars = bind_params<float>(g, refs, false);
    const auto out = image_embedding<float>(image_leaf<float>(g, image, params.image_size), vars, normalize);
    return {out.values().begin(), out.values().end()};
}

std::vector<float> text_encode(const corpus::Caption& caption, const TextEncoderParams& params, bool normalize) {
    diff::Graph<float> g;
    const auto refs = params_of(params);
    const auto vars = bind_params<float>(g, refs, false);
    const auto out = text_embedding<float>(g, caption, vars, normalize);
    return {out.values().begin(), out.values().end()};
}

std::vector<float> classify(const corpus::Image& image, const ClassifierParams& params) {
    diff::Graph<float> g;
    const auto refs = params_of(params);
    const auto vars = bind_params<float>(g, refs, false);
    const auto out = classifier_logits<float>(image_leaf<float>(g, image, params.image_size), vars);
    return {out.values().begin(), out.values().end()};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

Checkpoint to_checkpoint(const DualEncoderParams& p, nlohmann::json meta) { return make_checkpoint(p, std::move(meta)); }
Checkpoint to_checkpoint(const ClassifierParams& p, nlohmann::json meta) { return make_checkpoint(p, std::move(meta)); }
Checkpoint to_checkpoint(const ImageEncoderParams& p, nlohmann::json meta) { return make_checkpoint(p, std::move(meta)); }

DualEncoderParams dual_encoder_from(const Checkpoint& c) {
    if (c.kind() != ArchKind::dual_encoder) {
        throw ContractViolation("architecture mismatch: expected a dual-encoder, checkpoint has '" + c.descriptor +
                                "'");
    }
    return fill_from(c, init_dual_encoder(descriptor_size(c.descriptor, "img"),
                                          descriptor_size(c.descriptor, "vocab"), 0));
}

ClassifierParams classifier_from(const Checkpoint& c) {
    if (c.kind() != ArchKind::classifier) {
        throw ContractViolation("architecture mismatch: expected a classifier, checkpoint has '" + c.descriptor +
                                "'");
    }
    return fill_from(c, init_classifier(descriptor_size(c.descriptor, "img"), 0));
}

ImageEncoderParams image_encoder_from(const Checkpoint& c) {
    if (c.kind() == ArchKind::dual_encoder) {
        return dual_encoder_from(c).image;
    }
    if (c.kind() != ArchKind::image_encoder) {
        throw ContractViolation("architecture mismatch: expected an image encoder, checkpoint has '" +
                                c.descriptor + "'");
    }
    return fill_from(c, init_image_encoder(descriptor_size(c.descriptor, "img"), 0));
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write checkpoint", path);
    }
    out << kMagic << ' ' << kFormatVersion << '\n';
    out << "descriptor " << c.descriptor << '\n';
    out << "meta " << c.meta.dump() << '\n';
    for (const auto& nt : c.tensors) {
        out << "tensor " << nt.name << ' ' << nt.tensor.shape.size();
        for (std::size_t d : nt.tensor.shape) {
            out << ' ' << d;
        }
        out << '\n';
    }
    out << "data\n";
    for (const auto& nt : c.tensors) {
        write_f32_le(out, nt.tensor.values);
    }
    if (!out) {
        throw IoError("failed while writing checkpoint", path);
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingPrerequisite("checkpoint not found: " + path.string());
    }
    auto bad = [&](const std::string& why) { return IoError("malformed checkpoint (" + why + ")", path); };

    std::string line;
    std::getline(in, line);
    {
        std::istringstream s(line);
        std::string magic;
        int version = 0;
        s >> magic >> version;
        if (magic != kMagic) {
            throw bad("bad magic");
        }
        if (version != kFormatVersion) {
            throw bad("unsupported format version " + std::to_string(version));
        }
    }

    Checkpoint c;
    std::vector<std::pair<std::string, diff::Shape>> layout;
    while (std::getline(in, line)) {
        if (line == "data") {
            break;
        }
        const auto sp = line.find(' ');
        const std::string key = line.substr(0, sp);
        const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
        if (key == "descriptor") {
            c.descriptor = rest;
        } else if (key == "meta") {
            try {
                c.meta = nlohmann::json::parse(rest);
            } catch (const nlohmann::json::exception&) {
                throw bad("meta is not JSON");
            }
        } else if (key == "tensor") {
            std::istringstream s(rest);
            std::string name;
            std::size_t rank = 0;
            s >> name >> rank;
            diff::Shape shape(rank);
            for (auto& d : shape) {
                s >> d;
            }
            if (!s) {
                throw bad("tensor line '" + line + "'");
            }
            layout.emplace_back(std::move(name), std::move(shape));
        } else {
            throw bad("unknown header line '" + line + "'");
        }
    }
    if (line != "data") {
        throw bad("missing data section");
    }
    for (auto& [name, shape] : layout) {
        const std::size_t n = diff::element_count(shape);
        std::vector<float> values = read_f32_le(in, n);
        if (values.size() != n) {
            throw bad("truncated data for " + name);
        }
        c.tensors.push_back({name, Tensor(shape, std::move(values))});
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw bad("trailing bytes");
    }
    return c;
}

}  // namespace sf::enc
