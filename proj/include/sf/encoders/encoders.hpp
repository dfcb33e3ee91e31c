#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sf/diffcore/graph.hpp"
#include "sf/diffcore/tensor.hpp"
#include "sf/synthcorpus/corpus.hpp"

namespace sf::enc {

using diff::Tensor;

inline constexpr std::size_t kEmbeddingDim = 128;
inline constexpr std::size_t kTextWidth = 64;
inline constexpr std::size_t kNumHeads = 5;
inline constexpr std::size_t kConvLayers = 4;
inline constexpr std::array<std::size_t, kConvLayers + 1> kTrunkChannels = {1, 8, 16, 32, 32};
inline constexpr std::size_t kKernel = 3;
inline constexpr std::size_t kStride = 2;
inline constexpr std::size_t kTrunkFeatures = kTrunkChannels.back();

struct TrunkParams {
    std::array<Tensor, kConvLayers> kernels;  // out×in×3×3
    std::array<Tensor, kConvLayers> biases;
};

struct ImageEncoderParams {
    std::size_t image_size = 64;
    TrunkParams trunk;
    Tensor proj_w;  // 128×32
    Tensor proj_b;
};

/// Bag-of-tokens text encoder. Row 0 of the table belongs to the unknown token.
struct TextEncoderParams {
    Tensor embedding;  // V×64
    Tensor hidden_w;   // 64×64
    Tensor hidden_b;
    Tensor proj_w;  // 128×64
    Tensor proj_b;

    std::size_t vocab_size() const { return embedding.shape.empty() ? 0 : embedding.shape[0]; }
};

struct DualEncoderParams {
    ImageEncoderParams image;
    TextEncoderParams text;
};

struct ClassifierParams {
    std::size_t image_size = 64;
    TrunkParams trunk;
    Tensor head_w;  // 5×32
    Tensor head_b;
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Uniform fan-in initialisation; each tensor draws from a stream keyed by
/// (seed, name), so equally named tensors start identical across models.
TrunkParams init_trunk(std::uint64_t seed);
ImageEncoderParams init_image_encoder(std::size_t image_size, std::uint64_t seed);
TextEncoderParams init_text_encoder(std::size_t vocab_size, std::uint64_t seed);
DualEncoderParams init_dual_encoder(std::size_t image_size, std::size_t vocab_size, std::uint64_t seed);
ClassifierParams init_classifier(std::size_t image_size, std::uint64_t seed);

/// Copies the trunk verbatim and draws a fresh 5-way head from `head_init_seed`.
ClassifierParams to_classifier(const ImageEncoderParams& encoder, std::uint64_t head_init_seed);

// ---------------------------------------------------------------------------
// Parameter enumeration
// ---------------------------------------------------------------------------

struct ParamRef {
    std::string name;
    Tensor* tensor;
};
struct ConstParamRef {
    std::string name;
    const Tensor* tensor;
};

std::vector<ParamRef> params_of(TrunkParams& p);
std::vector<ParamRef> params_of(ImageEncoderParams& p);
std::vector<ParamRef> params_of(TextEncoderParams& p);
std::vector<ParamRef> params_of(DualEncoderParams& p);
std::vector<ParamRef> params_of(ClassifierParams& p);
std::vector<ConstParamRef> params_of(const TrunkParams& p);
std::vector<ConstParamRef> params_of(const ImageEncoderParams& p);
std::vector<ConstParamRef> params_of(const TextEncoderParams& p);
std::vector<ConstParamRef> params_of(const DualEncoderParams& p);
std::vector<ConstParamRef> params_of(const ClassifierParams& p);

template <typename P>
std::size_t parameter_count(const P& p) {
    std::size_t n = 0;
    for (const auto& r : params_of(p)) {
        n += r.tensor->size();
    }
    return n;
}

// ---------------------------------------------------------------------------
// Architecture descriptors
// ---------------------------------------------------------------------------

enum class ArchKind { image_encoder, dual_encoder, classifier };

std::string trunk_descriptor(std::size_t image_size);
std::string descriptor(const ImageEncoderParams& p);
std::string descriptor(const DualEncoderParams& p);
std::string descriptor(const ClassifierParams& p);
ArchKind kind_of(const std::string& descriptor);

// ---------------------------------------------------------------------------
// Forward passes on a graph
// ---------------------------------------------------------------------------

/// Records every tensor of `refs` as a leaf, in order.
template <typename Real>
std::vector<diff::Var<Real>> bind_params(diff::Graph<Real>& g, std::span<const ConstParamRef> refs, bool requires_grad);

/// Image as a 1×H×W leaf. Throws ContractViolation when the side is not `image_size`.
template <typename Real>
diff::Var<Real> image_leaf(diff::Graph<Real>& g, const corpus::Image& image, std::size_t image_size,
                           bool requires_grad = false);

// `trunk` holds the 8 trunk vars (kernels and biases interleaved per layer).
template <typename Real>
diff::Var<Real> trunk_forward(diff::Var<Real> image, std::span<const diff::Var<Real>> trunk);

// `p` is the bound ImageEncoderParams (10 vars).
template <typename Real>
diff::Var<Real> image_embedding(diff::Var<Real> image, std::span<const diff::Var<Real>> p, bool normalize);

// `p` is the bound TextEncoderParams (5 vars).
template <typename Real>
diff::Var<Real> text_embedding(diff::Graph<Real>& g, const corpus::Caption& caption,
                               std::span<const diff::Var<Real>> p, bool normalize);

// `p` is the bound ClassifierParams (10 vars).
template <typename Real>
diff::Var<Real> classifier_logits(diff::Var<Real> image, std::span<const diff::Var<Real>> p);

// ---------------------------------------------------------------------------
// Plain evaluation
// ---------------------------------------------------------------------------

std::vector<float> image_encode(const corpus::Image& image, const ImageEncoderParams& params, bool normalize);
std::vector<float> text_encode(const corpus::Caption& caption, const TextEncoderParams& params, bool normalize);
std::vector<float> classify(const corpus::Image& image, const ClassifierParams& params);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct Checkpoint {
    std::string descriptor;
    std::vector<NamedTensor> tensors;
    nlohmann::json meta = nlohmann::json::object();

    ArchKind kind() const { return kind_of(descriptor); }
};

Checkpoint to_checkpoint(const DualEncoderParams& p, nlohmann::json meta = nlohmann::json::object());
Checkpoint to_checkpoint(const ClassifierParams& p, nlohmann::json meta = nlohmann::json::object());
Checkpoint to_checkpoint(const ImageEncoderParams& p, nlohmann::json meta = nlohmann::json::object());

/// Throw ContractViolation naming both descriptors when the checkpoint holds
/// a different architecture.
DualEncoderParams dual_encoder_from(const Checkpoint& c);
ClassifierParams classifier_from(const Checkpoint& c);
ImageEncoderParams image_encoder_from(const Checkpoint& c);

/// Text header followed by little-endian float32 arrays in header order.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sf::enc
