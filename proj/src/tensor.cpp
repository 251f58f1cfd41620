#include "ctxfuse/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace ctxfuse {

int shape_numel(const Shape& shape) {
    int n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape s, Eigen::ArrayXd d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int>(data.size())) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
}

Tensor Tensor::zeros(Shape s) {
    int n = shape_numel(s);
    return Tensor(std::move(s), Eigen::ArrayXd::Zero(n));
}

Tensor Tensor::constant(Shape s, double value) {
    int n = shape_numel(s);
    return Tensor(std::move(s), Eigen::ArrayXd::Constant(n, value));
}

Tensor Tensor::scalar(double value) { return constant({1}, value); }

Tensor Tensor::from(Shape s, std::vector<double> values) {
    Eigen::ArrayXd d = Eigen::Map<const Eigen::ArrayXd>(values.data(),
                                                        static_cast<Eigen::Index>(values.size()));
    return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::uniform(Shape s, double lo, double hi, Rng& rng) {
    int n = shape_numel(s);
    Eigen::ArrayXd d(n);
    for (int i = 0; i < n; ++i) d[i] = rng.uniform(lo, hi);
    return Tensor(std::move(s), std::move(d));
}

int Tensor::dim(int i) const {
    if (i < 0 || i >= rank()) {
        throw DimensionError("dim index " + std::to_string(i) + " out of range for shape " +
                             shape_str(shape));
    }
    return shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item() requires a one-element tensor, got shape " +
                             shape_str(shape));
    }
    return data[0];
}

void Tensor::ensure_finite(const std::string& what) const {
    if (!data.isFinite().all()) {
        throw NumericError("non-finite values in " + what);
    }
}

Graph::NodeId Graph::leaf(Tensor t) {
    NodeId id = static_cast<NodeId>(nodes_.size());
    nodes_.push_back(Node{"leaf", {}, std::move(t), nullptr});
    return id;
}

Graph::NodeId Graph::leaf(const Tensor& t, bool requires_grad) {
    Tensor copy = t;
    copy.requires_grad = requires_grad;
    copy.grad.resize(0);
    return leaf(std::move(copy));
}

Graph::NodeId Graph::add_op(std::string op, std::vector<NodeId> inputs, Tensor out,
                            BackwardFn backward) {
    bool req = false;
    for (NodeId in : inputs) {
        check_id(in);
        req = req || nodes_[static_cast<std::size_t>(in)].out.requires_grad;
    }
    out.requires_grad = req;
    NodeId id = static_cast<NodeId>(nodes_.size());
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(out), std::move(backward)});
    return id;
}

const Tensor& Graph::value(NodeId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].out;
}

bool Graph::requires_grad(NodeId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].out.requires_grad;
}

void Graph::mark_requires_grad(NodeId id) {
    check_id(id);
    nodes_[static_cast<std::size_t>(id)].out.requires_grad = true;
}

const Eigen::ArrayXd& Graph::grad(NodeId id) const {
    check_id(id);
    const Tensor& t = nodes_[static_cast<std::size_t>(id)].out;
    if (!t.has_grad()) {
        throw Error("no gradient recorded for node " + std::to_string(id) + " (" +
                    nodes_[static_cast<std::size_t>(id)].op + ")");
    }
    return t.grad;
}

Eigen::ArrayXd& Graph::grad_acc(NodeId id) {
    check_id(id);
    Tensor& t = nodes_[static_cast<std::size_t>(id)].out;
    if (t.grad.size() != t.data.size()) {
        t.grad = Eigen::ArrayXd::Zero(t.data.size());
    }
    return t.grad;
}

void Graph::backward(NodeId loss) {
    check_id(loss);
    if (backward_done_) {
        throw Error("backward() already ran on this graph");
    }
    const Tensor& L = nodes_[static_cast<std::size_t>(loss)].out;
    if (L.numel() != 1) {
        throw DimensionError("backward: loss must be a one-element tensor, got shape " +
                             shape_str(L.shape));
    }
    backward_done_ = true;
    grad_acc(loss).setOnes();
    for (NodeId id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.out.requires_grad || !n.out.has_grad()) continue;
        if (n.backward) n.backward(*this, id);
    }
}

const Graph::Node& Graph::node(NodeId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)];
}

void Graph::check_id(NodeId id) const {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
        throw Error("invalid graph node id " + std::to_string(id));
    }
}

}  // namespace ctxfuse
