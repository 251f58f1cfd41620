#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

#include "ctxfuse/errors.hpp"
#include "ctxfuse/rng.hpp"

namespace ctxfuse {

using Shape = std::vector<int>;

int shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense n-dimensional real array, row-major, double precision. The grad
// array is empty until backward() fills it.
struct Tensor {
    Shape shape;
    Eigen::ArrayXd data;
    Eigen::ArrayXd grad;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, Eigen::ArrayXd d);

    static Tensor zeros(Shape s);
    static Tensor constant(Shape s, double value);
    static Tensor scalar(double value);
    static Tensor from(Shape s, std::vector<double> values);
    static Tensor uniform(Shape s, double lo, double hi, Rng& rng);

    int numel() const { return static_cast<int>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const;
    bool has_grad() const { return grad.size() == data.size() && data.size() > 0; }

    // Value of a one-element tensor.
    double item() const;

    Tensor& set_requires_grad(bool flag) {
        requires_grad = flag;
        return *this;
    }

    // Throws NumericError if any entry is NaN/Inf.
    void ensure_finite(const std::string& what) const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so ids are a
// topological order by construction; backward() walks them in reverse.
class Graph {
public:
    using NodeId = int;
    // Called during the reverse sweep with the node's own id; reads the
    // node's accumulated output gradient and adds to its inputs' buffers.
    using BackwardFn = std::function<void(Graph&, NodeId)>;

    struct Node {
        std::string op;
        std::vector<NodeId> inputs;
        Tensor out;
        BackwardFn backward;
    };

    // Leaf node; requires_grad is taken from the tensor itself.
    NodeId leaf(Tensor t);
    NodeId leaf(const Tensor& t, bool requires_grad);

    // Appends an op node. The node requires grad iff any input does.
    NodeId add_op(std::string op, std::vector<NodeId> inputs, Tensor out, BackwardFn backward);

    const Tensor& value(NodeId id) const;
    bool requires_grad(NodeId id) const;

    // Force gradient tracking through an intermediate node (used to read
    // activations' gradients, e.g. for class activation maps). Must be
    // called before ops consuming the node are added.
    void mark_requires_grad(NodeId id);

    // Gradient of the last backward() w.r.t. node id; throws if absent.
    const Eigen::ArrayXd& grad(NodeId id) const;

    // Accumulation buffer, allocated to zeros on first use. For op
    // backward implementations.
    Eigen::ArrayXd& grad_acc(NodeId id);

    // Reverse accumulation from a one-element loss node. Gradients are
    // summed over fan-out. Call once per graph.
    void backward(NodeId loss);

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(NodeId id) const;

private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;

    void check_id(NodeId id) const;
};

}  // namespace ctxfuse
