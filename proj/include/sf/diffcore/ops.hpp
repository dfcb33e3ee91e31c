#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sf/diffcore/graph.hpp"
#include "sf/diffcore/tensor.hpp"

namespace sf::diff {

// Elementwise, same shape.
template <typename Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> sub(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> mul(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> scale(Var<Real> a, Real factor);

template <typename Real> Var<Real> relu(Var<Real> a);
template <typename Real> Var<Real> tanh(Var<Real> a);

template <typename Real> Var<Real> sum(Var<Real> a);
template <typename Real> Var<Real> mean(Var<Real> a);
template <typename Real> Var<Real> dot(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> reshape(Var<Real> a, Shape shape);

// a: n×k, b: k×m.
template <typename Real> Var<Real> matmul(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> transpose(Var<Real> a);
// a: n×m, bias: m.
template <typename Real> Var<Real> add_row_bias(Var<Real> a, Var<Real> bias);
// weight: out×in, x: in (vector), bias: out.
template <typename Real> Var<Real> linear(Var<Real> x, Var<Real> weight, Var<Real> bias);

// Row i of an n×d matrix as a d-vector.
template <typename Real> Var<Real> row(Var<Real> a, std::size_t i);
// n vectors of length d -> n×d.
template <typename Real> Var<Real> stack_rows(std::span<const Var<Real>> rows);

/// Valid cross-correlation. input C_in×H×W, kernels C_out×C_in×k×k.
/// Output C_out×H'×W' with H' = (H-k)/stride + 1.
template <typename Real> Var<Real> conv2d(Var<Real> input, Var<Real> kernels, std::size_t stride);
// x: C×H×W, bias: C.
template <typename Real> Var<Real> add_channel_bias(Var<Real> x, Var<Real> bias);
// C×H×W -> C.
template <typename Real> Var<Real> global_avg_pool(Var<Real> x);

/// Mean of the table rows selected by `ids`. table: V×D, result: D.
template <typename Real> Var<Real> embedding_mean(Var<Real> table, std::span<const std::uint32_t> ids);

/// Scales each row of an n×d matrix (or a d-vector) to unit L2 norm.
/// Throws DegenerateEmbedding for a row whose norm is below `min_norm`.
template <typename Real> Var<Real> l2_normalize(Var<Real> a, Real min_norm = Real(1e-12));

/// (i,j) = cos(A_i, B_j). A: n×d, B: m×d.
template <typename Real> Var<Real> cosine_similarity_matrix(Var<Real> a, Var<Real> b);

/// Mean over rows of -log softmax(row)_ii for a square logit matrix.
template <typename Real> Var<Real> cross_entropy_rows(Var<Real> logits);

/// Sum over columns of the batch-mean binary cross-entropy.
/// logits: n×c, labels: n×c entries in {0,1}.
template <typename Real>
Var<Real> binary_cross_entropy_with_logits(Var<Real> logits, std::span<const std::uint8_t> labels);

/// Gradient of a scalar function of `params` (every param must have
/// requires_grad set).
template <typename Real>
using LossFn = std::function<Var<Real>(Graph<Real>&, std::span<const Var<Real>>)>;

template <typename Real>
std::vector<BasicTensor<Real>> grad(const LossFn<Real>& loss_fn, std::span<const BasicTensor<Real>> params);

}  // namespace sf::diff
