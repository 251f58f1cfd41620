#include "ctxfuse/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>

namespace ctxfuse {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using MapConstRowMat = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, int rank, const char* op, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                             std::to_string(rank) + ", got shape " + shape_str(t.shape));
    }
}

struct ConvGeometry {
    int n, cin, h, w;
    int cout, kh, kw;
    int stride, padding;
    int oh, ow;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                           int stride, int padding) {
    require_rank(input, 4, "conv2d", "input");
    require_rank(kernels, 4, "conv2d", "kernels");
    require_rank(bias, 1, "conv2d", "bias");
    ConvGeometry geo{};
    geo.n = input.dim(0);
    geo.cin = input.dim(1);
    geo.h = input.dim(2);
    geo.w = input.dim(3);
    geo.cout = kernels.dim(0);
    geo.kh = kernels.dim(2);
    geo.kw = kernels.dim(3);
    geo.stride = stride;
    geo.padding = padding;
    if (kernels.dim(1) != geo.cin) {
        throw DimensionError("conv2d: kernels expect " + std::to_string(kernels.dim(1)) +
                             " input channels, input has " + std::to_string(geo.cin));
    }
    if (bias.dim(0) != geo.cout) {
        throw DimensionError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                             " does not match " + std::to_string(geo.cout) + " output channels");
    }
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    if (geo.kh < 1 || geo.kw < 1) throw ConfigError("conv2d: kernel extent must be >= 1");
    int eh = geo.h + 2 * padding - geo.kh;
    int ew = geo.w + 2 * padding - geo.kw;
    if (eh < 0 || ew < 0) {
        throw DimensionError("conv2d: kernel " + std::to_string(geo.kh) + "x" +
                             std::to_string(geo.kw) + " larger than padded input " +
                             shape_str(input.shape));
    }
    if (eh % stride != 0 || ew % stride != 0) {
        throw ConfigError("conv2d: output size (" + std::to_string(geo.h) + "+2*" +
                          std::to_string(padding) + "-" + std::to_string(geo.kh) + ")/" +
                          std::to_string(stride) + "+1 is not an exact integer");
    }
    geo.oh = eh / stride + 1;
    geo.ow = ew / stride + 1;
    return geo;
}

// Unrolls one sample's receptive fields into a [cin*kh*kw, oh*ow] matrix
// (column-major; one column per output position).
void im2col(const double* x, const ConvGeometry& g, Eigen::MatrixXd& col) {
    const int patch = g.cin * g.kh * g.kw;
    col.resize(patch, g.oh * g.ow);
    for (int c = 0; c < g.cin; ++c) {
        const double* plane = x + static_cast<std::ptrdiff_t>(c) * g.h * g.w;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const int row = (c * g.kh + ki) * g.kw + kj;
                double* dst = col.data() + row;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride + ki - g.padding;
                    if (iy < 0 || iy >= g.h) {
                        for (int ox = 0; ox < g.ow; ++ox) {
                            dst[static_cast<std::ptrdiff_t>(oy * g.ow + ox) * patch] = 0.0;
                        }
                        continue;
                    }
                    const double* src = plane + static_cast<std::ptrdiff_t>(iy) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride + kj - g.padding;
                        dst[static_cast<std::ptrdiff_t>(oy * g.ow + ox) * patch] =
                            (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Scatter-adds a [cin*kh*kw, oh*ow] gradient matrix back onto one sample.
void col2im_add(const Eigen::MatrixXd& col, const ConvGeometry& g, double* gx) {
    const int patch = g.cin * g.kh * g.kw;
    for (int c = 0; c < g.cin; ++c) {
        double* plane = gx + static_cast<std::ptrdiff_t>(c) * g.h * g.w;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const int row = (c * g.kh + ki) * g.kw + kj;
                const double* src = col.data() + row;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride + ki - g.padding;
                    if (iy < 0 || iy >= g.h) continue;
                    double* dst = plane + static_cast<std::ptrdiff_t>(iy) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride + kj - g.padding;
                        if (ix >= 0 && ix < g.w) {
                            dst[ix] += src[static_cast<std::ptrdiff_t>(oy * g.ow + ox) * patch];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Graph::NodeId conv2d(Graph& g, Graph::NodeId input, Graph::NodeId kernels, Graph::NodeId bias,
                     int stride, int padding) {
    const Tensor& x = g.value(input);
    const Tensor& k = g.value(kernels);
    const Tensor& b = g.value(bias);
    const ConvGeometry geo = conv_geometry(x, k, b, stride, padding);

    const int patch = geo.cin * geo.kh * geo.kw;
    const int opix = geo.oh * geo.ow;
    Tensor out = Tensor::zeros({geo.n, geo.cout, geo.oh, geo.ow});

    MapConstRowMat kmat(k.data.data(), geo.cout, patch);
    Eigen::Map<const Eigen::VectorXd> bvec(b.data.data(), geo.cout);
    Eigen::MatrixXd col;
    for (int n = 0; n < geo.n; ++n) {
        im2col(x.data.data() + static_cast<std::ptrdiff_t>(n) * geo.cin * geo.h * geo.w, geo, col);
        MapRowMat omat(out.data.data() + static_cast<std::ptrdiff_t>(n) * geo.cout * opix,
                       geo.cout, opix);
        omat.noalias() = kmat * col;
        omat.colwise() += bvec;
    }

    return g.add_op(
        "conv2d", {input, kernels, bias}, std::move(out),
        [input, kernels, bias, geo, patch, opix](Graph& gr, Graph::NodeId self) {
            const Eigen::ArrayXd& gout = gr.grad(self);
            const Tensor& x = gr.value(input);
            const Tensor& k = gr.value(kernels);
            const bool need_gx = gr.requires_grad(input);
            const bool need_gk = gr.requires_grad(kernels);
            const bool need_gb = gr.requires_grad(bias);

            MapConstRowMat kmat(k.data.data(), geo.cout, patch);
            Eigen::MatrixXd col;
            Eigen::MatrixXd gcol;
            for (int n = 0; n < geo.n; ++n) {
                MapConstRowMat gmat(gout.data() + static_cast<std::ptrdiff_t>(n) * geo.cout * opix,
                                    geo.cout, opix);
                if (need_gb) {
                    Eigen::Map<Eigen::VectorXd> gb(gr.grad_acc(bias).data(), geo.cout);
                    gb.noalias() += gmat.rowwise().sum();
                }
                if (need_gk) {
                    im2col(x.data.data() +
                               static_cast<std::ptrdiff_t>(n) * geo.cin * geo.h * geo.w,
                           geo, col);
                    MapRowMat gk(gr.grad_acc(kernels).data(), geo.cout, patch);
                    gk.noalias() += gmat * col.transpose();
                }
                if (need_gx) {
                    gcol.resize(patch, opix);
                    gcol.noalias() = kmat.transpose() * gmat;
                    col2im_add(gcol, geo,
                               gr.grad_acc(input).data() +
                                   static_cast<std::ptrdiff_t>(n) * geo.cin * geo.h * geo.w);
                }
            }
        });
}

Graph::NodeId relu(Graph& g, Graph::NodeId input) {
    const Tensor& x = g.value(input);
    Tensor out(x.shape, x.data.max(0.0));
    return g.add_op("relu", {input}, std::move(out), [input](Graph& gr, Graph::NodeId self) {
        if (!gr.requires_grad(input)) return;
        const Eigen::ArrayXd& gout = gr.grad(self);
        const Eigen::ArrayXd& x = gr.value(input).data;
        gr.grad_acc(input) += (x > 0.0).cast<double>() * gout;
    });
}

Graph::NodeId avg_pool_global(Graph& g, Graph::NodeId input) {
    const Tensor& x = g.value(input);
    require_rank(x, 4, "avg_pool_global", "input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < 1 || w < 1) {
        throw DimensionError("avg_pool_global: spatial extent must be >= 1, got shape " +
                             shape_str(x.shape));
    }
    const int pix = h * w;
    Tensor out = Tensor::zeros({n, c});
    for (int i = 0; i < n * c; ++i) {
        out.data[i] = x.data.segment(static_cast<Eigen::Index>(i) * pix, pix).mean();
    }
    return g.add_op("avg_pool_global", {input}, std::move(out),
                    [input, n, c, pix](Graph& gr, Graph::NodeId self) {
                        if (!gr.requires_grad(input)) return;
                        const Eigen::ArrayXd& gout = gr.grad(self);
                        Eigen::ArrayXd& gx = gr.grad_acc(input);
                        for (int i = 0; i < n * c; ++i) {
                            gx.segment(static_cast<Eigen::Index>(i) * pix, pix) += gout[i] / pix;
                        }
                    });
}

Graph::NodeId concat_channels(Graph& g, Graph::NodeId a, Graph::NodeId b) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    require_rank(ta, 4, "concat_channels", "first operand");
    require_rank(tb, 4, "concat_channels", "second operand");
    if (ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2) || ta.dim(3) != tb.dim(3)) {
        throw DimensionError("concat_channels: operands " + shape_str(ta.shape) + " and " +
                             shape_str(tb.shape) + " differ outside the channel axis");
    }
    const int n = ta.dim(0), ca = ta.dim(1), cb = tb.dim(1);
    const int pix = ta.dim(2) * ta.dim(3);
    Tensor out = Tensor::zeros({n, ca + cb, ta.dim(2), ta.dim(3)});
    const Eigen::Index block_a = static_cast<Eigen::Index>(ca) * pix;
    const Eigen::Index block_b = static_cast<Eigen::Index>(cb) * pix;
    for (int i = 0; i < n; ++i) {
        if (block_a > 0) {
            out.data.segment(i * (block_a + block_b), block_a) =
                ta.data.segment(i * block_a, block_a);
        }
        if (block_b > 0) {
            out.data.segment(i * (block_a + block_b) + block_a, block_b) =
                tb.data.segment(i * block_b, block_b);
        }
    }
    return g.add_op("concat_channels", {a, b}, std::move(out),
                    [a, b, n, block_a, block_b](Graph& gr, Graph::NodeId self) {
                        const Eigen::ArrayXd& gout = gr.grad(self);
                        for (int i = 0; i < n; ++i) {
                            if (gr.requires_grad(a) && block_a > 0) {
                                gr.grad_acc(a).segment(i * block_a, block_a) +=
                                    gout.segment(i * (block_a + block_b), block_a);
                            }
                            if (gr.requires_grad(b) && block_b > 0) {
                                gr.grad_acc(b).segment(i * block_b, block_b) +=
                                    gout.segment(i * (block_a + block_b) + block_a, block_b);
                            }
                        }
                    });
}

Graph::NodeId linear(Graph& g, Graph::NodeId input, Graph::NodeId weight, Graph::NodeId bias) {
    const Tensor& x = g.value(input);
    const Tensor& w = g.value(weight);
    const Tensor& b = g.value(bias);
    require_rank(x, 2, "linear", "input");
    require_rank(w, 2, "linear", "weight");
    require_rank(b, 1, "linear", "bias");
    const int n = x.dim(0), d = x.dim(1), k = w.dim(0);
    if (w.dim(1) != d) {
        throw DimensionError("linear: input feature dim " + std::to_string(d) +
                             " does not match weight shape " + shape_str(w.shape));
    }
    if (b.dim(0) != k) {
        throw DimensionError("linear: bias length " + std::to_string(b.dim(0)) +
                             " does not match " + std::to_string(k) + " outputs");
    }
    Tensor out = Tensor::zeros({n, k});
    {
        MapConstRowMat xm(x.data.data(), n, d);
        MapConstRowMat wm(w.data.data(), k, d);
        MapRowMat om(out.data.data(), n, k);
        om.noalias() = xm * wm.transpose();
        om.rowwise() += Eigen::Map<const Eigen::VectorXd>(b.data.data(), k).transpose();
    }
    return g.add_op(
        "linear", {input, weight, bias}, std::move(out),
        [input, weight, bias, n, d, k](Graph& gr, Graph::NodeId self) {
            MapConstRowMat gy(gr.grad(self).data(), n, k);
            if (gr.requires_grad(input)) {
                MapConstRowMat wm(gr.value(weight).data.data(), k, d);
                MapRowMat gx(gr.grad_acc(input).data(), n, d);
                gx.noalias() += gy * wm;
            }
            if (gr.requires_grad(weight)) {
                MapConstRowMat xm(gr.value(input).data.data(), n, d);
                MapRowMat gw(gr.grad_acc(weight).data(), k, d);
                gw.noalias() += gy.transpose() * xm;
            }
            if (gr.requires_grad(bias)) {
                Eigen::Map<Eigen::VectorXd> gb(gr.grad_acc(bias).data(), k);
                gb.noalias() += gy.colwise().sum().transpose();
            }
        });
}

Graph::NodeId softmax_cross_entropy(Graph& g, Graph::NodeId logits, std::vector<int> targets) {
    const Tensor& z = g.value(logits);
    require_rank(z, 2, "softmax_cross_entropy", "logits");
    const int n = z.dim(0), c = z.dim(1);
    if (n < 1) throw DimensionError("softmax_cross_entropy: empty batch");
    if (static_cast<int>(targets.size()) != n) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || t >= c) {
            throw Error("softmax_cross_entropy: target " + std::to_string(t) + " outside [0," +
                        std::to_string(c) + ")");
        }
    }
    // Softmax probabilities are kept for the backward pass.
    Eigen::ArrayXXd probs(n, c);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        Eigen::ArrayXd row = z.data.segment(static_cast<Eigen::Index>(i) * c, c);
        double m = row.maxCoeff();
        Eigen::ArrayXd e = (row - m).exp();
        double s = e.sum();
        probs.row(i) = e / s;
        loss -= (row[targets[static_cast<std::size_t>(i)]] - m) - std::log(s);
    }
    loss /= n;

    return g.add_op(
        "softmax_cross_entropy", {logits}, Tensor::scalar(loss),
        [logits, targets = std::move(targets), probs = std::move(probs), n,
         c](Graph& gr, Graph::NodeId self) {
            if (!gr.requires_grad(logits)) return;
            const double gy = gr.grad(self)[0];
            Eigen::ArrayXd& gz = gr.grad_acc(logits);
            for (int i = 0; i < n; ++i) {
                const int t = targets[static_cast<std::size_t>(i)];
                for (int j = 0; j < c; ++j) {
                    gz[static_cast<Eigen::Index>(i) * c + j] +=
                        gy * (probs(i, j) - (j == t ? 1.0 : 0.0)) / n;
                }
            }
        });
}

Graph::NodeId add(Graph& g, Graph::NodeId a, Graph::NodeId b) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (ta.shape != tb.shape) {
        throw DimensionError("add: shape mismatch " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
    }
    Tensor out(ta.shape, ta.data + tb.data);
    return g.add_op("add", {a, b}, std::move(out), [a, b](Graph& gr, Graph::NodeId self) {
        const Eigen::ArrayXd& gout = gr.grad(self);
        if (gr.requires_grad(a)) gr.grad_acc(a) += gout;
        if (gr.requires_grad(b)) gr.grad_acc(b) += gout;
    });
}

Graph::NodeId scale(Graph& g, Graph::NodeId a, double factor) {
    const Tensor& ta = g.value(a);
    Tensor out(ta.shape, ta.data * factor);
    return g.add_op("scale", {a}, std::move(out), [a, factor](Graph& gr, Graph::NodeId self) {
        if (gr.requires_grad(a)) gr.grad_acc(a) += factor * gr.grad(self);
    });
}

Graph::NodeId sum_all(Graph& g, Graph::NodeId a) {
    const Tensor& ta = g.value(a);
    return g.add_op("sum_all", {a}, Tensor::scalar(ta.data.sum()),
                    [a](Graph& gr, Graph::NodeId self) {
                        if (gr.requires_grad(a)) gr.grad_acc(a) += gr.grad(self)[0];
                    });
}

Graph::NodeId masked_sum_squares(Graph& g, Graph::NodeId a, Eigen::ArrayXd mask) {
    const Tensor& ta = g.value(a);
    if (mask.size() != ta.data.size()) {
        throw DimensionError("masked_sum_squares: mask length " + std::to_string(mask.size()) +
                             " does not match tensor numel " + std::to_string(ta.numel()));
    }
    double v = (mask * ta.data.square()).sum();
    return g.add_op("masked_sum_squares", {a}, Tensor::scalar(v),
                    [a, mask = std::move(mask)](Graph& gr, Graph::NodeId self) {
                        if (!gr.requires_grad(a)) return;
                        gr.grad_acc(a) += gr.grad(self)[0] * 2.0 * mask * gr.value(a).data;
                    });
}

Graph::NodeId select_entry(Graph& g, Graph::NodeId matrix, int row, int col) {
    const Tensor& m = g.value(matrix);
    require_rank(m, 2, "select_entry", "matrix");
    if (row < 0 || row >= m.dim(0) || col < 0 || col >= m.dim(1)) {
        throw DimensionError("select_entry: (" + std::to_string(row) + "," + std::to_string(col) +
                             ") outside shape " + shape_str(m.shape));
    }
    const Eigen::Index flat = static_cast<Eigen::Index>(row) * m.dim(1) + col;
    return g.add_op("select_entry", {matrix}, Tensor::scalar(m.data[flat]),
                    [matrix, flat](Graph& gr, Graph::NodeId self) {
                        if (gr.requires_grad(matrix)) gr.grad_acc(matrix)[flat] += gr.grad(self)[0];
                    });
}

double grad_check(const std::function<Graph::NodeId(Graph&, Graph::NodeId)>& build,
                  const Tensor& point, double h) {
    if (h <= 0.0) throw ConfigError("grad_check: step h must be > 0");

    Graph g;
    Graph::NodeId x = g.leaf(point, true);
    Graph::NodeId loss = build(g, x);
    if (g.value(loss).numel() != 1) {
        throw DimensionError("grad_check: function must produce a one-element tensor");
    }
    g.backward(loss);
    Eigen::ArrayXd analytic = g.grad(x);

    auto eval = [&](const Tensor& p) {
        Graph fwd;
        return fwd.value(build(fwd, fwd.leaf(p, false))).item();
    };

    double max_rel = 0.0;
    Tensor probe = point;
    for (int i = 0; i < point.numel(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + h;
        const double fp = eval(probe);
        probe.data[i] = orig - h;
        const double fm = eval(probe);
        probe.data[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

SgdOptimizer::SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (lr <= 0.0) throw ConfigError("sgd: learning rate must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd: momentum must be in [0,1)");
}

void SgdOptimizer::step(const std::vector<Tensor*>& params,
                        const std::vector<const Eigen::ArrayXd*>& grads) {
    if (params.size() != grads.size()) {
        throw DimensionError("sgd: " + std::to_string(params.size()) + " params vs " +
                             std::to_string(grads.size()) + " grads");
    }
    if (velocity_.empty()) {
        velocity_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            velocity_[i] = Eigen::ArrayXd::Zero(params[i]->data.size());
        }
    }
    if (velocity_.size() != params.size()) {
        throw DimensionError("sgd: parameter count changed between steps");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Eigen::ArrayXd& grad = *grads[i];
        if (grad.size() != p.data.size() || velocity_[i].size() != p.data.size()) {
            throw DimensionError("sgd: gradient shape does not match parameter " +
                                 std::to_string(i));
        }
        velocity_[i] = momentum_ * velocity_[i] + grad;
        p.data -= lr_ * velocity_[i];
    }
}

}  // namespace ctxfuse
