#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "fd_oracle.hpp"
#include "sf/diffcore/ops.hpp"

using namespace sf::diff;
using sf::testing::central_differences;
using sf::testing::relative_error;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) {
        x = dist(rng);
    }
    return v;
}

// Runs reverse mode and the finite-difference oracle on the same loss and
// checks every entry.
void expect_gradients_match(const LossFn<double>& loss, const std::vector<Tensor64>& params, double tol = 1e-4) {
    const auto reverse = grad<double>(loss, params);
    std::vector<std::vector<double>> flat;
    for (const auto& p : params) {
        flat.push_back(p.values);
    }
    auto eval = [&](const std::vector<std::vector<double>>& values) {
        Graph<double> g;
        std::vector<Var<double>> leaves;
        for (std::size_t i = 0; i < params.size(); ++i) {
            leaves.push_back(g.constant(params[i].shape, values[i]));
        }
        return loss(g, leaves).values()[0];
    };
    const auto numeric = central_differences(eval, flat, 1e-4);
    for (std::size_t p = 0; p < params.size(); ++p) {
        ASSERT_EQ(reverse[p].size(), numeric[p].size());
        for (std::size_t i = 0; i < numeric[p].size(); ++i) {
            EXPECT_LT(relative_error(reverse[p].values[i], numeric[p][i]), tol)
                << "param " << p << " entry " << i << ": reverse " << reverse[p].values[i] << " numeric "
                << numeric[p][i];
        }
    }
}

double naive_conv_cell(const std::vector<double>& in, std::size_t h, std::size_t w, const std::vector<double>& k,
                       std::size_t cin, std::size_t ks, std::size_t o, std::size_t oy, std::size_t ox,
                       std::size_t stride) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ky = 0; ky < ks; ++ky) {
            for (std::size_t kx = 0; kx < ks; ++kx) {
                acc += k[((o * cin + c) * ks + ky) * ks + kx] * in[(c * h + oy * stride + ky) * w + ox * stride + kx];
            }
        }
    }
    return acc;
}

}  // namespace

TEST(Grad, SquareAtThree) {
    std::vector<Tensor64> params{Tensor64(Shape{1}, {3.0}, true)};
    auto g = grad<double>([](Graph<double>&, std::span<const Var<double>> p) { return sum(mul(p[0], p[0])); },
                          params);
    EXPECT_DOUBLE_EQ(g[0].values[0], 6.0);
}

TEST(Grad, ConstantFunctionHasZeroGradient) {
    std::vector<Tensor64> params{Tensor64(Shape{3}, {1.0, -2.0, 0.5}, true)};
    auto g = grad<double>(
        [](Graph<double>& gr, std::span<const Var<double>>) { return gr.constant(Shape{}, {4.2}); }, params);
    for (double v : g[0].values) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(Grad, TwoLayerNetworkMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    std::vector<Tensor64> params{
        Tensor64(Shape{4}, random_values(rng, 4), true),       // input
        Tensor64(Shape{3, 4}, random_values(rng, 12), true),   // W1
        Tensor64(Shape{3}, random_values(rng, 3), true),       // b1
        Tensor64(Shape{1, 3}, random_values(rng, 3), true),    // W2
        Tensor64(Shape{1}, random_values(rng, 1), true),       // b2
    };
    expect_gradients_match(
        [](Graph<double>&, std::span<const Var<double>> p) {
            auto hidden = tanh(linear(p[0], p[1], p[2]));
            return sum(linear(hidden, p[3], p[4]));
        },
        params);
}

TEST(Grad, RejectsNonScalarLoss) {
    std::vector<Tensor64> params{Tensor64(Shape{2}, {1.0, 2.0}, true)};
    EXPECT_THROW(grad<double>([](Graph<double>&, std::span<const Var<double>> p) { return p[0]; }, params),
                 sf::ContractViolation);
}

TEST(Grad, RejectsParamsWithoutGradFlag) {
    std::vector<Tensor64> params{Tensor64(Shape{1}, {1.0}, false)};
    EXPECT_THROW(grad<double>([](Graph<double>&, std::span<const Var<double>> p) { return sum(p[0]); }, params),
                 sf::ContractViolation);
}

TEST(Grad, RepeatedCallsAreIdentical) {
    std::mt19937_64 rng(11);
    std::vector<Tensor64> params{Tensor64(Shape{2, 3}, random_values(rng, 6), true),
                                 Tensor64(Shape{3, 2}, random_values(rng, 6), true)};
    LossFn<double> loss = [](Graph<double>&, std::span<const Var<double>> p) {
        return cross_entropy_rows(matmul(p[0], p[1]));
    };
    auto a = grad<double>(loss, params);
    auto b = grad<double>(loss, params);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].values, b[i].values);
    }
}

TEST(Grad, OverflowInBackwardNamesTheOp) {
    Graph<float> g;
    auto a = g.leaf(Shape{1}, {1e20f}, true);
    auto b = g.leaf(Shape{1}, {1e-20f}, true);
    auto c = g.constant(Shape{1}, {1e30f});
    auto loss = sum(scale(mul(mul(a, b), c), 1e8f));
    try {
        g.backward(loss);
        FAIL() << "expected NumericFailure";
    } catch (const sf::NumericFailure& e) {
        EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos) << e.what();
    }
}

TEST(Tensor, RejectsNonFiniteAndBadShape) {
    EXPECT_THROW(Tensor(Shape{2}, {1.0f}), sf::ContractViolation);
    EXPECT_THROW(Tensor(Shape{1}, {std::nanf("")}), sf::NumericFailure);
}

TEST(Conv2d, UnitKernelIsIdentity) {
    std::mt19937_64 rng(1);
    Graph<double> g;
    auto input = g.constant(Shape{1, 5, 6}, random_values(rng, 30));
    auto kernel = g.constant(Shape{1, 1, 1, 1}, {1.0});
    auto out = conv2d(input, kernel, 1);
    EXPECT_EQ(out.shape(), (Shape{1, 5, 6}));
    EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()),
              std::vector<double>(input.values().begin(), input.values().end()));
}

TEST(Conv2d, AllOnesKernelOnConstantImage) {
    Graph<float> g;
    const float v = 0.37f;
    auto input = g.constant(Shape{1, 6, 6}, std::vector<float>(36, v));
    auto kernel = g.constant(Shape{1, 1, 3, 3}, std::vector<float>(9, 1.0f));
    auto out = conv2d(input, kernel, 1);
    ASSERT_EQ(out.shape(), (Shape{1, 4, 4}));
    for (float x : out.values()) {
        EXPECT_NEAR(x, 9.0f * v, 1e-6);
    }
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
    std::mt19937_64 rng(3);
    for (std::size_t stride : {1u, 2u}) {
        for (int sample = 0; sample < 2; ++sample) {  // a 2×1×4×4 batch, one sample at a time
            const auto in = random_values(rng, 16);
            const auto k = random_values(rng, 3 * 1 * 3 * 3);
            Graph<double> g;
            auto out = conv2d(g.constant(Shape{1, 4, 4}, in), g.constant(Shape{3, 1, 3, 3}, k), stride);
            const std::size_t oh = (4 - 3) / stride + 1;
            ASSERT_EQ(out.shape(), (Shape{3, oh, oh}));
            for (std::size_t o = 0; o < 3; ++o) {
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t x = 0; x < oh; ++x) {
                        EXPECT_NEAR(out.values()[(o * oh + y) * oh + x],
                                    naive_conv_cell(in, 4, 4, k, 1, 3, o, y, x, stride), 1e-6);
                    }
                }
            }
        }
    }
}

TEST(Conv2d, MultiChannelStridedMatchesOracle) {
    std::mt19937_64 rng(5);
    const auto in = random_values(rng, 3 * 9 * 11);
    const auto k = random_values(rng, 4 * 3 * 3 * 3);
    Graph<float> g;
    std::vector<float> inf(in.begin(), in.end()), kf(k.begin(), k.end());
    auto out = conv2d(g.constant(Shape{3, 9, 11}, inf), g.constant(Shape{4, 3, 3, 3}, kf), 2);
    ASSERT_EQ(out.shape(), (Shape{4, 4, 5}));
    for (std::size_t o = 0; o < 4; ++o) {
        for (std::size_t y = 0; y < 4; ++y) {
            for (std::size_t x = 0; x < 5; ++x) {
                EXPECT_NEAR(out.values()[(o * 4 + y) * 5 + x], naive_conv_cell(in, 9, 11, k, 3, 3, o, y, x, 2), 1e-5);
            }
        }
    }
}

TEST(Conv2d, ShapeMismatchIsContractViolation) {
    Graph<float> g;
    auto input = g.constant(Shape{2, 4, 4}, std::vector<float>(32, 0.f));
    auto kernel = g.constant(Shape{1, 1, 3, 3}, std::vector<float>(9, 0.f));
    EXPECT_THROW(conv2d(input, kernel, 1), sf::ContractViolation);
    auto big = g.constant(Shape{1, 2, 5, 5}, std::vector<float>(50, 0.f));
    EXPECT_THROW(conv2d(input, big, 1), sf::ContractViolation);
    auto ok = g.constant(Shape{1, 2, 3, 3}, std::vector<float>(18, 0.f));
    EXPECT_THROW(conv2d(input, ok, 0), sf::ContractViolation);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(9);
    std::vector<Tensor64> params{Tensor64(Shape{2, 7, 7}, random_values(rng, 98), true),
                                 Tensor64(Shape{3, 2, 3, 3}, random_values(rng, 54), true),
                                 Tensor64(Shape{3}, random_values(rng, 3), true)};
    expect_gradients_match(
        [](Graph<double>&, std::span<const Var<double>> p) {
            auto y = tanh(add_channel_bias(conv2d(p[0], p[1], 2), p[2]));
            return sum(mul(y, y));
        },
        params);
}

TEST(Cosine, Examples) {
    Graph<double> g;
    auto a = g.constant(Shape{3, 2}, {0.3, -1.2, 1.0, 0.0, 1.0, 1.0});
    auto b = g.constant(Shape{3, 2}, {0.3, -1.2, 0.0, 1.0, 1.0, 0.0});
    auto s = cosine_similarity_matrix(a, b).values();
    EXPECT_NEAR(s[0 * 3 + 0], 1.0, 1e-12);            // identical rows
    EXPECT_NEAR(s[1 * 3 + 1], 0.0, 1e-12);            // (1,0) vs (0,1)
    EXPECT_NEAR(s[2 * 3 + 2], 0.70710678, 1e-4);      // (1,1) vs (1,0)
    for (double v : s) {
        EXPECT_LE(std::abs(v), 1.0 + 1e-12);
    }
}

TEST(Cosine, ZeroNormRowRaises) {
    Graph<double> g;
    auto a = g.constant(Shape{2, 2}, {1.0, 0.0, 0.0, 0.0});
    auto b = g.constant(Shape{1, 2}, {1.0, 1.0});
    EXPECT_THROW(cosine_similarity_matrix(a, b), sf::DegenerateEmbedding);
}

TEST(Cosine, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(13);
    std::vector<Tensor64> params{Tensor64(Shape{3, 5}, random_values(rng, 15), true),
                                 Tensor64(Shape{4, 5}, random_values(rng, 20), true)};
    const auto weights = random_values(rng, 12);
    expect_gradients_match(
        [weights](Graph<double>& g, std::span<const Var<double>> p) {
            return sum(mul(cosine_similarity_matrix(p[0], p[1]), g.constant(Shape{3, 4}, weights)));
        },
        params);
}

TEST(CrossEntropyRows, Examples) {
    Graph<double> g;
    EXPECT_NEAR(cross_entropy_rows(g.constant(Shape{1, 1}, {3.5})).values()[0], 0.0, 1e-15);
    EXPECT_NEAR(cross_entropy_rows(g.constant(Shape{4, 4}, std::vector<double>(16, 0.2))).values()[0], std::log(4.0),
                1e-12);
    EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
    const double diag = cross_entropy_rows(g.constant(Shape{2, 2}, {10.0, 0.0, 0.0, 10.0})).values()[0];
    // -log(e^10 / (e^10 + 1)) evaluated directly.
    EXPECT_NEAR(diag, -std::log(std::exp(10.0) / (std::exp(10.0) + 1.0)), 1e-12);
    EXPECT_NEAR(diag, 4.54e-5, 1e-7);
}

TEST(CrossEntropyRows, NonSquareIsContractViolation) {
    Graph<double> g;
    EXPECT_THROW(cross_entropy_rows(g.constant(Shape{2, 3}, std::vector<double>(6, 0.0))), sf::ContractViolation);
}

TEST(CrossEntropyRows, RowShiftInvariance) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> shift(-50.0, 50.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + trial % 7;
        auto z = random_values(rng, n * n, -5.0, 5.0);
        auto shifted = z;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = shift(rng);
            for (std::size_t j = 0; j < n; ++j) {
                shifted[i * n + j] += c;
            }
        }
        Graph<double> g;
        const double a = cross_entropy_rows(g.constant(Shape{n, n}, z)).values()[0];
        const double b = cross_entropy_rows(g.constant(Shape{n, n}, shifted)).values()[0];
        EXPECT_NEAR(a, b, 1e-6);
        EXPECT_GE(a, 0.0);
    }
}

TEST(BinaryCrossEntropy, Examples) {
    Graph<double> g;
    const std::vector<std::uint8_t> zero_label{0}, one_label{1};
    EXPECT_NEAR(binary_cross_entropy_with_logits(g.constant(Shape{1, 1}, {0.0}), zero_label).values()[0],
                std::log(2.0), 1e-15);
    EXPECT_NEAR(binary_cross_entropy_with_logits(g.constant(Shape{1, 1}, {0.0}), one_label).values()[0],
                std::log(2.0), 1e-15);
    EXPECT_LT(binary_cross_entropy_with_logits(g.constant(Shape{1, 1}, {50.0}), one_label).values()[0], 1e-20);
    EXPECT_NEAR(binary_cross_entropy_with_logits(g.constant(Shape{1, 1}, {1.0}), one_label).values()[0], 0.3133,
                1e-4);
    // Stable for large magnitudes in single precision too.
    Graph<float> gf;
    const float big = binary_cross_entropy_with_logits(gf.constant(Shape{1, 2}, {100.0f, -100.0f}),
                                                       std::vector<std::uint8_t>{0, 1})
                          .values()[0];
    EXPECT_NEAR(big, 200.0f, 1e-3f);
}

TEST(BinaryCrossEntropy, RejectsNonBinaryLabels) {
    Graph<double> g;
    EXPECT_THROW(binary_cross_entropy_with_logits(g.constant(Shape{1, 2}, {0.0, 0.0}), std::vector<std::uint8_t>{0, 2}),
                 sf::ContractViolation);
}

TEST(BinaryCrossEntropy, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(17);
    std::vector<Tensor64> params{Tensor64(Shape{4, 5}, random_values(rng, 20, -4.0, 4.0), true)};
    std::vector<std::uint8_t> labels(20);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<std::uint8_t>(rng() & 1u);
    }
    expect_gradients_match(
        [labels](Graph<double>&, std::span<const Var<double>> p) {
            return binary_cross_entropy_with_logits(p[0], labels);
        },
        params);
}

// Property: random compositions of the provided ops differentiate correctly.
TEST(GradProperty, RandomEncoderShapedCompositions) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 6; ++trial) {
        const std::size_t n = 2 + trial % 3;
        std::vector<Tensor64> params{
            Tensor64(Shape{4, 3, 3, 3}, random_values(rng, 108, -0.5, 0.5), true),  // conv kernels
            Tensor64(Shape{4}, random_values(rng, 4, -0.1, 0.1), true),             // conv bias
            Tensor64(Shape{6, 4}, random_values(rng, 24), true),                    // projection
            Tensor64(Shape{6}, random_values(rng, 6), true),
            Tensor64(Shape{7, 5}, random_values(rng, 35), true),  // embedding table
            Tensor64(Shape{6, 5}, random_values(rng, 30), true),
            Tensor64(Shape{6}, random_values(rng, 6), true),
        };
        std::vector<std::vector<double>> images;
        std::vector<std::vector<std::uint32_t>> captions;
        for (std::size_t i = 0; i < n; ++i) {
            images.push_back(random_values(rng, 3 * 9 * 9, 0.0, 1.0));
            std::vector<std::uint32_t> ids;
            for (std::size_t t = 0; t < 2 + i; ++t) {
                ids.push_back(static_cast<std::uint32_t>(rng() % 7));
            }
            captions.push_back(ids);
        }
        const bool use_relu = trial % 2 == 0;
        expect_gradients_match(
            [&](Graph<double>& g, std::span<const Var<double>> p) {
                std::vector<Var<double>> img_rows, txt_rows;
                for (std::size_t i = 0; i < n; ++i) {
                    auto x = g.constant(Shape{3, 9, 9}, images[i]);
                    auto h = add_channel_bias(conv2d(x, p[0], 2), p[1]);
                    h = use_relu ? relu(h) : tanh(h);
                    img_rows.push_back(linear(global_avg_pool(h), p[2], p[3]));
                    auto t = embedding_mean(p[4], captions[i]);
                    txt_rows.push_back(linear(tanh(t), p[5], p[6]));
                }
                auto a = stack_rows<double>(img_rows);
                auto b = stack_rows<double>(txt_rows);
                auto s = scale(cosine_similarity_matrix(a, b), 1.0 / 0.3);
                return add(cross_entropy_rows(s), cross_entropy_rows(transpose(s)));
            },
            params);
    }
}

TEST(GraphInvariants, InputsPrecedeConsumers) {
    Graph<float> g;
    auto a = g.leaf(Shape{2}, {1.f, 2.f}, true);
    auto b = relu(scale(a, 2.f));
    auto c = dot(a, b);
    for (std::size_t id = 0; id < g.size(); ++id) {
        for (std::size_t in : g.node(id).inputs) {
            EXPECT_LT(in, id);
        }
    }
    g.backward(c);
    // d/da (a · relu(2a)) = 4a for positive a
    EXPECT_EQ(g.grad(a), (std::vector<float>{4.f, 8.f}));
}

TEST(GraphInvariants, VectorJacobianSeed) {
    Graph<double> g;
    auto w = g.leaf(Shape{2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto x = g.constant(Shape{3}, {1, -1, 2});
    auto b = g.constant(Shape{2}, {0, 0});
    auto y = linear(x, w, b);
    const std::vector<double> seed{0.5, -2.0};
    g.backward(y, seed);
    EXPECT_EQ(g.grad(w), (std::vector<double>{0.5, -0.5, 1.0, -2.0, 2.0, -4.0}));
}
