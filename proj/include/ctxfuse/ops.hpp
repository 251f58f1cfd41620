#pragma once

#include <functional>
#include <vector>

#include "ctxfuse/tensor.hpp"

namespace ctxfuse {

// Differentiable primitives. Each free function appends a node to the graph
// and returns its id; backward closures accumulate gradients into the input
// nodes. Shapes follow the NCHW convention.

// Cross-correlation with zero padding.
//   input [N,Cin,H,W], kernels [Cout,Cin,kh,kw], bias [Cout] -> [N,Cout,H',W']
// The output extent (H + 2*padding - kh) must divide the stride exactly;
// otherwise the layer geometry is rejected as a configuration error.
Graph::NodeId conv2d(Graph& g, Graph::NodeId input, Graph::NodeId kernels, Graph::NodeId bias,
                     int stride, int padding);

// Elementwise max(0, x). Subgradient at 0 is 0.
Graph::NodeId relu(Graph& g, Graph::NodeId input);

// Per-channel spatial mean: [N,C,H,W] -> [N,C].
Graph::NodeId avg_pool_global(Graph& g, Graph::NodeId input);

// Channel concatenation: [N,Ca,H,W] + [N,Cb,H,W] -> [N,Ca+Cb,H,W].
Graph::NodeId concat_channels(Graph& g, Graph::NodeId a, Graph::NodeId b);

// Affine map: input [N,D] * weight [K,D]^T + bias [K] -> [N,K].
Graph::NodeId linear(Graph& g, Graph::NodeId input, Graph::NodeId weight, Graph::NodeId bias);

// Mean over rows of -log softmax(logits)[target], stabilized by
// max-subtraction. Gradient w.r.t. logits is (softmax - onehot) / N.
Graph::NodeId softmax_cross_entropy(Graph& g, Graph::NodeId logits, std::vector<int> targets);

// Elementwise sum of two same-shape tensors.
Graph::NodeId add(Graph& g, Graph::NodeId a, Graph::NodeId b);

// Multiplication by a constant.
Graph::NodeId scale(Graph& g, Graph::NodeId a, double factor);

// Sum of all entries, as a one-element tensor.
Graph::NodeId sum_all(Graph& g, Graph::NodeId a);

// Sum of mask[i] * x[i]^2 over the flat tensor; mask must match numel.
// Carries the L2 penalty on a tagged parameter subset.
Graph::NodeId masked_sum_squares(Graph& g, Graph::NodeId a, Eigen::ArrayXd mask);

// Picks one entry of a [N,C] matrix as a one-element tensor.
Graph::NodeId select_entry(Graph& g, Graph::NodeId matrix, int row, int col);

// Builds a scalar function of `point`, then compares backward() gradients
// against central finite differences with step h. Returns the max relative
// error, with denominator max(1, |analytic|, |numeric|).
double grad_check(const std::function<Graph::NodeId(Graph&, Graph::NodeId)>& build,
                  const Tensor& point, double h);

// Classic momentum SGD: v <- momentum*v + g; p <- p - lr*v.
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum);

    void step(const std::vector<Tensor*>& params,
              const std::vector<const Eigen::ArrayXd*>& grads);

    double lr() const { return lr_; }
    double momentum() const { return momentum_; }

private:
    double lr_;
    double momentum_;
    std::vector<Eigen::ArrayXd> velocity_;
};

}  // namespace ctxfuse
