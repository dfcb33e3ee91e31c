#include "sf/diffcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

namespace sf::diff {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

template <typename Real>
Graph<Real>& graph_of(Var<Real> a, Var<Real> b) {
    if (a.graph == nullptr || a.graph != b.graph) {
        throw ContractViolation("operands belong to different graphs");
    }
    return *a.graph;
}

template <typename Real>
void require_same_shape(const char* op, Var<Real> a, Var<Real> b) {
    if (a.shape() != b.shape()) {
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
}

template <typename Real>
void require_rank(const char* op, Var<Real> a, std::size_t rank) {
    if (a.shape().size() != rank) {
        throw ContractViolation(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(a.shape()));
    }
}

// Applies `fn(dst_grad, src_grad)` if the input needs a gradient.
template <typename Real, typename Fn>
void accumulate(Graph<Real>& g, std::size_t input, Fn&& fn) {
    if (g.needs_grad(input)) {
        fn(g.grad_slot(input));
    }
}

template <typename Real>
Var<Real> elementwise_unary(const char* op, Var<Real> a, Real (*f)(Real), Real (*df)(Real x, Real y)) {
    Graph<Real>& g = *a.graph;
    const auto& in = a.values();
    std::vector<Real> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = f(in[i]);
    }
    const std::size_t ia = a.id;
    return g.record(op, a.shape(), std::move(out), {ia}, [ia, df](Graph<Real>& gr, std::size_t self) {
        const auto& x = gr.node(ia).value;
        const auto& y = gr.node(self).value;
        const auto& dy = gr.node(self).grad;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy[i] * df(x[i], y[i]);
            }
        });
    });
}

}  // namespace

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
    Graph<Real>& g = graph_of(a, b);
    require_same_shape("add", a, b);
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    const std::size_t ia = a.id, ib = b.id;
    return g.record("add", a.shape(), std::move(out), {ia, ib}, [ia, ib](Graph<Real>& gr, std::size_t self) {
        const auto& dy = gr.node(self).grad;
        for (std::size_t in : {ia, ib}) {
            accumulate(gr, in, [&](std::vector<Real>& dx) {
                for (std::size_t i = 0; i < dx.size(); ++i) {
                    dx[i] += dy[i];
                }
            });
        }
    });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
    Graph<Real>& g = graph_of(a, b);
    require_same_shape("sub", a, b);
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] - y[i];
    }
    const std::size_t ia = a.id, ib = b.id;
    return g.record("sub", a.shape(), std::move(out), {ia, ib}, [ia, ib](Graph<Real>& gr, std::size_t self) {
        const auto& dy = gr.node(self).grad;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy[i];
            }
        });
        accumulate(gr, ib, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] -= dy[i];
            }
        });
    });
}

template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
    Graph<Real>& g = graph_of(a, b);
    require_same_shape("mul", a, b);
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * y[i];
    }
    const std::size_t ia = a.id, ib = b.id;
    return g.record("mul", a.shape(), std::move(out), {ia, ib}, [ia, ib](Graph<Real>& gr, std::size_t self) {
        const auto& dy = gr.node(self).grad;
        const auto& xv = gr.node(ia).value;
        const auto& yv = gr.node(ib).value;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy[i] * yv[i];
            }
        });
        accumulate(gr, ib, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy[i] * xv[i];
            }
        });
    });
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real factor) {
    Graph<Real>& g = *a.graph;
    const auto& x = a.values();
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * factor;
    }
    const std::size_t ia = a.id;
    return g.record("scale", a.shape(), std::move(out), {ia}, [ia, factor](Graph<Real>& gr, std::size_t self) {
        const auto& dy = gr.node(self).grad;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy[i] * factor;
            }
        });
    });
}

template <typename Real>
Var<Real> relu(Var<Real> a) {
    return elementwise_unary<Real>(
        "relu", a, [](Real x) { return x > Real{0} ? x : Real{0}; },
        [](Real x, Real) { return x > Real{0} ? Real{1} : Real{0}; });
}

template <typename Real>
Var<Real> tanh(Var<Real> a) {
    return elementwise_unary<Real>(
        "tanh", a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real{1} - y * y; });
}

template <typename Real>
Var<Real> sum(Var<Real> a) {
    Graph<Real>& g = *a.graph;
    Real total{0};
    for (Real x : a.values()) {
        total += x;
    }
    const std::size_t ia = a.id;
    return g.record("sum", Shape{}, {total}, {ia}, [ia](Graph<Real>& gr, std::size_t self) {
        const Real dy = gr.node(self).grad[0];
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (Real& d : dx) {
                d += dy;
            }
        });
    });
}

template <typename Real>
Var<Real> mean(Var<Real> a) {
    const auto n = static_cast<Real>(a.size());
    return scale(sum(a), Real{1} / n);
}

template <typename Real>
Var<Real> dot(Var<Real> a, Var<Real> b) {
    Graph<Real>& g = graph_of(a, b);
    if (a.size() != b.size()) {
        throw ContractViolation("dot: length mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
    const auto& x = a.values();
    const auto& y = b.values();
    Real total{0};
    for (std::size_t i = 0; i < x.size(); ++i) {
        total += x[i] * y[i];
    }
    const std::size_t ia = a.id, ib = b.id;
    return g.record("dot", Shape{}, {total}, {ia, ib}, [ia, ib](Graph<Real>& gr, std::size_t self) {
        const Real dy = gr.node(self).grad[0];
        const auto& xv = gr.node(ia).value;
        const auto& yv = gr.node(ib).value;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy * yv[i];
            }
        });
        accumulate(gr, ib, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy * xv[i];
            }
        });
    });
}

template <typename Real>
Var<Real> reshape(Var<Real> a, Shape shape) {
    if (element_count(shape) != a.size()) {
        throw ContractViolation("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
    }
    Graph<Real>& g = *a.graph;
    const std::size_t ia = a.id;
    std::vector<Real> out(a.values().begin(), a.values().end());
    return g.record("reshape", std::move(shape), std::move(out), {ia}, [ia](Graph<Real>& gr, std::size_t self) {
        const auto& dy = gr.node(self).grad;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < dx.size(); ++i) {
                dx[i] += dy[i];
            }
        });
    });
}

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
    Graph<Real>& g = graph_of(a, b);
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ContractViolation("matmul: inner dimensions differ " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<Real> out(n * m, Real{0});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const Real xv = x[i * k + p];
            const Real* yr = &y[p * m];
            Real* o = &out[i * m];
            for (std::size_t j = 0; j < m; ++j) {
                o[j] += xv * yr[j];
            }
        }
    }
    const std::size_t ia = a.id, ib = b.id;
    return g.record("matmul", Shape{n, m}, std::move(out), {ia, ib},
                    [ia, ib, n, k, m](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        const auto& xv = gr.node(ia).value;
                        const auto& yv = gr.node(ib).value;
                        accumulate(gr, ia, [&](std::vector<Real>& dx) {
                            for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    Real acc{0};
                                    for (std::size_t j = 0; j < m; ++j) {
                                        acc += dy[i * m + j] * yv[p * m + j];
                                    }
                                    dx[i * k + p] += acc;
                                }
                            }
                        });
                        accumulate(gr, ib, [&](std::vector<Real>& dw) {
                            for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    const Real xi = xv[i * k + p];
                                    for (std::size_t j = 0; j < m; ++j) {
                                        dw[p * m + j] += xi * dy[i * m + j];
                                    }
                                }
                            }
                        });
                    });
}

template <typename Real>
Var<Real> transpose(Var<Real> a) {
    require_rank("transpose", a, 2);
    Graph<Real>& g = *a.graph;
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    const auto& x = a.values();
    std::vector<Real> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[j * n + i] = x[i * m + j];
        }
    }
    const std::size_t ia = a.id;
    return g.record("transpose", Shape{m, n}, std::move(out), {ia}, [ia, n, m](Graph<Real>& gr, std::size_t self) {
        const auto& dy = gr.node(self).grad;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    dx[i * m + j] += dy[j * n + i];
                }
            }
        });
    });
}

template <typename Real>
Var<Real> add_row_bias(Var<Real> a, Var<Real> bias) {
    Graph<Real>& g = graph_of(a, bias);
    require_rank("add_row_bias", a, 2);
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (bias.size() != m) {
        throw ContractViolation("add_row_bias: bias length " + std::to_string(bias.size()) + " for " +
                                shape_string(a.shape()));
    }
    const auto& x = a.values();
    const auto& b = bias.values();
    std::vector<Real> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] = x[i * m + j] + b[j];
        }
    }
    const std::size_t ia = a.id, ib = bias.id;
    return g.record("add_row_bias", a.shape(), std::move(out), {ia, ib},
                    [ia, ib, n, m](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        accumulate(gr, ia, [&](std::vector<Real>& dx) {
                            for (std::size_t i = 0; i < dx.size(); ++i) {
                                dx[i] += dy[i];
                            }
                        });
                        accumulate(gr, ib, [&](std::vector<Real>& db) {
                            for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t j = 0; j < m; ++j) {
                                    db[j] += dy[i * m + j];
                                }
                            }
                        });
                    });
}

template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> weight, Var<Real> bias) {
    Graph<Real>& g = graph_of(x, weight);
    graph_of(x, bias);
    require_rank("linear", weight, 2);
    const std::size_t out_dim = weight.shape()[0], in_dim = weight.shape()[1];
    if (x.size() != in_dim || bias.size() != out_dim) {
        throw ContractViolation("linear: input " + shape_string(x.shape()) + ", weight " +
                                shape_string(weight.shape()) + ", bias " + shape_string(bias.shape()));
    }
    const auto& xv = x.values();
    const auto& w = weight.values();
    const auto& b = bias.values();
    std::vector<Real> out(out_dim);
    for (std::size_t o = 0; o < out_dim; ++o) {
        Real acc = b[o];
        const Real* wr = &w[o * in_dim];
        for (std::size_t i = 0; i < in_dim; ++i) {
            acc += wr[i] * xv[i];
        }
        out[o] = acc;
    }
    const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
    return g.record("linear", Shape{out_dim}, std::move(out), {ix, iw, ib},
                    [ix, iw, ib, out_dim, in_dim](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        const auto& xs = gr.node(ix).value;
                        const auto& ws = gr.node(iw).value;
                        accumulate(gr, ix, [&](std::vector<Real>& dx) {
                            for (std::size_t o = 0; o < out_dim; ++o) {
                                const Real d = dy[o];
                                const Real* wr = &ws[o * in_dim];
                                for (std::size_t i = 0; i < in_dim; ++i) {
                                    dx[i] += d * wr[i];
                                }
                            }
                        });
                        accumulate(gr, iw, [&](std::vector<Real>& dw) {
                            for (std::size_t o = 0; o < out_dim; ++o) {
                                const Real d = dy[o];
                                Real* wr = &dw[o * in_dim];
                                for (std::size_t i = 0; i < in_dim; ++i) {
                                    wr[i] += d * xs[i];
                                }
                            }
                        });
                        accumulate(gr, ib, [&](std::vector<Real>& db) {
                            for (std::size_t o = 0; o < out_dim; ++o) {
                                db[o] += dy[o];
                            }
                        });
                    });
}

template <typename Real>
Var<Real> row(Var<Real> a, std::size_t i) {
    require_rank("row", a, 2);
    const std::size_t n = a.shape()[0], d = a.shape()[1];
    if (i >= n) {
        throw ContractViolation("row: index " + std::to_string(i) + " out of range for " + shape_string(a.shape()));
    }
    Graph<Real>& g = *a.graph;
    const auto& x = a.values();
    std::vector<Real> out(x.begin() + static_cast<std::ptrdiff_t>(i * d),
                          x.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    const std::size_t ia = a.id;
    return g.record("row", Shape{d}, std::move(out), {ia}, [ia, i, d](Graph<Real>& gr, std::size_t self) {
        const auto& dy = gr.node(self).grad;
        accumulate(gr, ia, [&](std::vector<Real>& dx) {
            for (std::size_t j = 0; j < d; ++j) {
                dx[i * d + j] += dy[j];
            }
        });
    });
}

template <typename Real>
Var<Real> stack_rows(std::span<const Var<Real>> rows) {
    if (rows.empty()) {
        throw ContractViolation("stack_rows: no rows");
    }
    Graph<Real>& g = *rows[0].graph;
    const std::size_t d = rows[0].size();
    std::vector<Real> out;
    out.reserve(rows.size() * d);
    std::vector<std::size_t> ids;
    for (const auto& r : rows) {
        graph_of(rows[0], r);
        if (r.size() != d) {
            throw ContractViolation("stack_rows: ragged rows");
        }
        out.insert(out.end(), r.values().begin(), r.values().end());
        ids.push_back(r.id);
    }
    return g.record("stack_rows", Shape{rows.size(), d}, std::move(out), ids,
                    [ids, d](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        for (std::size_t r = 0; r < ids.size(); ++r) {
                            accumulate(gr, ids[r], [&](std::vector<Real>& dx) {
                                for (std::size_t j = 0; j < d; ++j) {
                                    dx[j] += dy[r * d + j];
                                }
                            });
                        }
                    });
}

template <typename Real>
Var<Real> conv2d(Var<Real> input, Var<Real> kernels, std::size_t stride) {
    Graph<Real>& g = graph_of(input, kernels);
    require_rank("conv2d", input, 3);
    require_rank("conv2d", kernels, 4);
    const Shape& is = input.shape();
    const Shape& ks = kernels.shape();
    const std::size_t cin = is[0], h = is[1], w = is[2];
    const std::size_t cout = ks[0], k = ks[2];
    if (ks[1] != cin || ks[3] != k || stride == 0 || k == 0 || k > h || k > w) {
        throw ContractViolation("conv2d: input " + shape_string(is) + ", kernels " + shape_string(ks) +
                                ", stride " + std::to_string(stride));
    }
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    const std::size_t patch = cin * k * k, npos = oh * ow;

    // Column matrix: row r = (c, ky, kx), column p = output position.
    const auto& x = input.values();
    std::vector<Real> cols(patch * npos);
    for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                Real* dst = &cols[((c * k + ky) * k + kx) * npos];
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const Real* src = &x[(c * h + oy * stride + ky) * w + kx];
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        dst[oy * ow + ox] = src[ox * stride];
                    }
                }
            }
        }
    }

    const auto& kv = kernels.values();
    std::vector<Real> out(cout * npos, Real{0});
    for (std::size_t o = 0; o < cout; ++o) {
        Real* dst = &out[o * npos];
        for (std::size_t r = 0; r < patch; ++r) {
            const Real wgt = kv[o * patch + r];
            const Real* src = &cols[r * npos];
            for (std::size_t p = 0; p < npos; ++p) {
                dst[p] += wgt * src[p];
            }
        }
    }

    const std::size_t ii = input.id, ik = kernels.id;
    return g.record(
        "conv2d", Shape{cout, oh, ow}, std::move(out), {ii, ik},
        [ii, ik, cols = std::move(cols), cin, h, w, cout, k, stride, oh, ow, patch, npos](Graph<Real>& gr,
                                                                                          std::size_t self) {
            const auto& dy = gr.node(self).grad;
            accumulate(gr, ik, [&](std::vector<Real>& dk) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const Real* dyo = &dy[o * npos];
                    for (std::size_t r = 0; r < patch; ++r) {
                        const Real* src = &cols[r * npos];
                        Real acc{0};
                        for (std::size_t p = 0; p < npos; ++p) {
                            acc += dyo[p] * src[p];
                        }
                        dk[o * patch + r] += acc;
                    }
                }
            });
            accumulate(gr, ii, [&](std::vector<Real>& dx) {
                const auto& kw = gr.node(ik).value;
                std::vector<Real> dcols(patch * npos, Real{0});
                for (std::size_t o = 0; o < cout; ++o) {
                    const Real* dyo = &dy[o * npos];
                    for (std::size_t r = 0; r < patch; ++r) {
                        const Real wgt = kw[o * patch + r];
                        Real* dst = &dcols[r * npos];
                        for (std::size_t p = 0; p < npos; ++p) {
                            dst[p] += wgt * dyo[p];
                        }
                    }
                }
                for (std::size_t c = 0; c < cin; ++c) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const Real* src = &dcols[((c * k + ky) * k + kx) * npos];
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                Real* d = &dx[(c * h + oy * stride + ky) * w + kx];
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    d[ox * stride] += src[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            });
        });
}

template <typename Real>
Var<Real> add_channel_bias(Var<Real> x, Var<Real> bias) {
    Graph<Real>& g = graph_of(x, bias);
    require_rank("add_channel_bias", x, 3);
    const std::size_t c = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
    if (bias.size() != c) {
        throw ContractViolation("add_channel_bias: bias length " + std::to_string(bias.size()) + " for " +
                                shape_string(x.shape()));
    }
    const auto& xv = x.values();
    const auto& b = bias.values();
    std::vector<Real> out(xv.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) {
            out[ch * plane + p] = xv[ch * plane + p] + b[ch];
        }
    }
    const std::size_t ix = x.id, ib = bias.id;
    return g.record("add_channel_bias", x.shape(), std::move(out), {ix, ib},
                    [ix, ib, c, plane](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        accumulate(gr, ix, [&](std::vector<Real>& dx) {
                            for (std::size_t i = 0; i < dx.size(); ++i) {
                                dx[i] += dy[i];
                            }
                        });
                        accumulate(gr, ib, [&](std::vector<Real>& db) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                                Real acc{0};
                                for (std::size_t p = 0; p < plane; ++p) {
                                    acc += dy[ch * plane + p];
                                }
                                db[ch] += acc;
                            }
                        });
                    });
}

template <typename Real>
Var<Real> global_avg_pool(Var<Real> x) {
    require_rank("global_avg_pool", x, 3);
    Graph<Real>& g = *x.graph;
    const std::size_t c = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
    const auto& xv = x.values();
    const Real inv = Real{1} / static_cast<Real>(plane);
    std::vector<Real> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        Real acc{0};
        for (std::size_t p = 0; p < plane; ++p) {
            acc += xv[ch * plane + p];
        }
        out[ch] = acc * inv;
    }
    const std::size_t ix = x.id;
    return g.record("global_avg_pool", Shape{c}, std::move(out), {ix},
                    [ix, c, plane, inv](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        accumulate(gr, ix, [&](std::vector<Real>& dx) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                                const Real d = dy[ch] * inv;
                                for (std::size_t p = 0; p < plane; ++p) {
                                    dx[ch * plane + p] += d;
                                }
                            }
                        });
                    });
}

template <typename Real>
Var<Real> embedding_mean(Var<Real> table, std::span<const std::uint32_t> ids) {
    require_rank("embedding_mean", table, 2);
    if (ids.empty()) {
        throw ContractViolation("embedding_mean: empty id sequence");
    }
    Graph<Real>& g = *table.graph;
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    const auto& t = table.values();
    std::vector<Real> out(d, Real{0});
    for (std::uint32_t id : ids) {
        if (id >= vocab) {
            throw ContractViolation("embedding_mean: token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
        for (std::size_t j = 0; j < d; ++j) {
            out[j] += t[id * d + j];
        }
    }
    const Real inv = Real{1} / static_cast<Real>(ids.size());
    for (Real& v : out) {
        v *= inv;
    }
    const std::size_t it = table.id;
    std::vector<std::uint32_t> tokens(ids.begin(), ids.end());
    return g.record("embedding_mean", Shape{d}, std::move(out), {it},
                    [it, tokens = std::move(tokens), d, inv](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        accumulate(gr, it, [&](std::vector<Real>& dt) {
                            for (std::uint32_t id : tokens) {
                                for (std::size_t j = 0; j < d; ++j) {
                                    dt[id * d + j] += dy[j] * inv;
                                }
                            }
                        });
                    });
}

template <typename Real>
Var<Real> l2_normalize(Var<Real> a, Real min_norm) {
    const Shape& s = a.shape();
    if (s.size() != 1 && s.size() != 2) {
        throw ContractViolation("l2_normalize: expected vector or matrix, got " + shape_string(s));
    }
    const std::size_t n = s.size() == 2 ? s[0] : 1;
    const std::size_t d = s.size() == 2 ? s[1] : s[0];
    if (d == 0) {
        throw ContractViolation("l2_normalize: zero-width rows");
    }
    Graph<Real>& g = *a.graph;
    const auto& x = a.values();
    std::vector<Real> out(x.size());
    std::vector<Real> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        Real sq{0};
        for (std::size_t j = 0; j < d; ++j) {
            sq += x[i * d + j] * x[i * d + j];
        }
        const Real norm = std::sqrt(sq);
        if (!(norm >= min_norm)) {
            throw DegenerateEmbedding("l2_normalize: row " + std::to_string(i) + " has norm " + std::to_string(norm));
        }
        norms[i] = norm;
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = x[i * d + j] / norm;
        }
    }
    const std::size_t ia = a.id;
    return g.record("l2_normalize", s, std::move(out), {ia},
                    [ia, n, d, norms = std::move(norms)](Graph<Real>& gr, std::size_t self) {
                        const auto& dy = gr.node(self).grad;
                        const auto& y = gr.node(self).value;
                        accumulate(gr, ia, [&](std::vector<Real>& dx) {
                            for (std::size_t i = 0; i < n; ++i) {
                                Real proj{0};
                                for (std::size_t j = 0; j < d; ++j) {
                                    proj += y[i * d + j] * dy[i * d + j];
                                }
                                for (std::size_t j = 0; j < d; ++j) {
                                    dx[i * d + j] += (dy[i * d + j] - y[i * d + j] * proj) / norms[i];
                                }
                            }
                        });
                    });
}

template <typename Real>
Var<Real> cosine_similarity_matrix(Var<Real> a, Var<Real> b) {
    graph_of(a, b);
    require_rank("cosine_similarity_matrix", a, 2);
    require_rank("cosine_similarity_matrix", b, 2);
    if (a.shape()[1] != b.shape()[1] || a.shape()[1] == 0) {
        throw ContractViolation("cosine_similarity_matrix: widths " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
    return matmul(l2_normalize(a), transpose(l2_normalize(b)));
}

template <typename Real>
Var<Real> cross_entropy_rows(Var<Real> logits) {
    require_rank("cross_entropy_rows", logits, 2);
    const std::size_t n = logits.shape()[0];
    if (logits.shape()[1] != n || n == 0) {
        throw ContractViolation("cross_entropy_rows: needs a non-empty square matrix, got " +
                                shape_string(logits.shape()));
    }
    Graph<Real>& g = *logits.graph;
    const auto& z = logits.values();
    std::vector<Real> softmax(n * n);
    Real total{0};
    for (std::size_t i = 0; i < n; ++i) {
        const Real* zr = &z[i * n];
        const Real peak = *std::max_element(zr, zr + n);
        Real denom{0};
        for (std::size_t j = 0; j < n; ++j) {
            softmax[i * n + j] = std::exp(zr[j] - peak);
            denom += softmax[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            softmax[i * n + j] /= denom;
        }
        total += peak + std::log(denom) - zr[i];
    }
    const Real inv = Real{1} / static_cast<Real>(n);
    const std::size_t iz = logits.id;
    return g.record("cross_entropy_rows", Shape{}, {total * inv}, {iz},
                    [iz, n, inv, softmax = std::move(softmax)](Graph<Real>& gr, std::size_t self) {
                        const Real dy = gr.node(self).grad[0] * inv;
                        accumulate(gr, iz, [&](std::vector<Real>& dz) {
                            for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t j = 0; j < n; ++j) {
                                    const Real target = i == j ? Real{1} : Real{0};
                                    dz[i * n + j] += dy * (softmax[i * n + j] - target);
                                }
                            }
                        });
                    });
}

template <typename Real>
Var<Real> binary_cross_entropy_with_logits(Var<Real> logits, std::span<const std::uint8_t> labels) {
    require_rank("binary_cross_entropy_with_logits", logits, 2);
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    if (labels.size() != n * c || n == 0) {
        throw ContractViolation("binary_cross_entropy_with_logits: " + std::to_string(labels.size()) +
                                " labels for logits " + shape_string(logits.shape()));
    }
    for (std::uint8_t y : labels) {
        if (y > 1) {
            throw ContractViolation("binary_cross_entropy_with_logits: label " + std::to_string(y) +
                                    " outside {0,1}");
        }
    }
    Graph<Real>& g = *logits.graph;
    const auto& z = logits.values();
    Real total{0};
    for (std::size_t col = 0; col < c; ++col) {
        Real column{0};
        for (std::size_t i = 0; i < n; ++i) {
            const Real zi = z[i * c + col];
            const Real y = labels[i * c + col];
            column += std::max(zi, Real{0}) - zi * y + std::log1p(std::exp(-std::abs(zi)));
        }
        total += column / static_cast<Real>(n);
    }
    const std::size_t iz = logits.id;
    std::vector<std::uint8_t> targets(labels.begin(), labels.end());
    return g.record("binary_cross_entropy_with_logits", Shape{}, {total}, {iz},
                    [iz, n, targets = std::move(targets)](Graph<Real>& gr, std::size_t self) {
                        const Real dy = gr.node(self).grad[0] / static_cast<Real>(n);
                        const auto& zv = gr.node(iz).value;
                        accumulate(gr, iz, [&](std::vector<Real>& dz) {
                            for (std::size_t i = 0; i < dz.size(); ++i) {
                                const Real zi = zv[i];
                                const Real sig = zi >= Real{0} ? Real{1} / (Real{1} + std::exp(-zi))
                                                               : std::exp(zi) / (Real{1} + std::exp(zi));
                                dz[i] += dy * (sig - static_cast<Real>(targets[i]));
                            }
                        });
                    });
}

template <typename Real>
std::vector<BasicTensor<Real>> grad(const LossFn<Real>& loss_fn, std::span<const BasicTensor<Real>> params) {
    Graph<Real> g;
    std::vector<Var<Real>> leaves;
    leaves.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].requires_grad) {
            throw ContractViolation("grad: parameter " + std::to_string(i) + " is not flagged requires_grad");
        }
        leaves.push_back(g.leaf(params[i]));
    }
    Var<Real> loss = loss_fn(g, leaves);
    if (loss.size() != 1) {
        throw ContractViolation("grad: loss must be scalar, got shape " + shape_string(loss.shape()));
    }
    g.backward(loss);
    std::vector<BasicTensor<Real>> out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.emplace_back(params[i].shape, g.grad(leaves[i]));
    }
    return out;
}

#define SF_INSTANTIATE_OPS(Real)                                                                          \
    template Var<Real> add(Var<Real>, Var<Real>);                                                         \
    template Var<Real> sub(Var<Real>, Var<Real>);                                                         \
    template Var<Real> mul(Var<Real>, Var<Real>);                                                         \
    template Var<Real> scale(Var<Real>, Real);                                                            \
    template Var<Real> relu(Var<Real>);                                                                   \
    template Var<Real> tanh(Var<Real>);                                                                   \
    template Var<Real> sum(Var<Real>);                                                                    \
    template Var<Real> mean(Var<Real>);                                                                   \
    template Var<Real> dot(Var<Real>, Var<Real>);                                                         \
    template Var<Real> reshape(Var<Real>, Shape);                                                         \
    template Var<Real> matmul(Var<Real>, Var<Real>);                                                      \
    template Var<Real> transpose(Var<Real>);                                                              \
    template Var<Real> add_row_bias(Var<Real>, Var<Real>);                                                \
    template Var<Real> linear(Var<Real>, Var<Real>, Var<Real>);                                           \
    template Var<Real> row(Var<Real>, std::size_t);                                                       \
    template Var<Real> stack_rows(std::span<const Var<Real>>);                                            \
    template Var<Real> conv2d(Var<Real>, Var<Real>, std::size_t);                                         \
    template Var<Real> add_channel_bias(Var<Real>, Var<Real>);                                            \
    template Var<Real> global_avg_pool(Var<Real>);                                                        \
    template Var<Real> embedding_mean(Var<Real>, std::span<const std::uint32_t>);                         \
    template Var<Real> l2_normalize(Var<Real>, Real);                                                     \
    template Var<Real> cosine_similarity_matrix(Var<Real>, Var<Real>);                                    \
    template Var<Real> cross_entropy_rows(Var<Real>);                                                     \
    template Var<Real> binary_cross_entropy_with_logits(Var<Real>, std::span<const std::uint8_t>);        \
    template std::vector<BasicTensor<Real>> grad(const LossFn<Real>&, std::span<const BasicTensor<Real>>);

SF_INSTANTIATE_OPS(float)
SF_INSTANTIATE_OPS(double)

#undef SF_INSTANTIATE_OPS

}  // namespace sf::diff
