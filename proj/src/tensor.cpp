#include "spt/tensor.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "spt/error.hpp"

namespace spt {

namespace {
thread_local Precision g_precision = Precision::Float64;
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values) {
    if (numel_of(shape) != values.size())
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    if (g_precision == Precision::Float32)
        for (auto& v : node->data) v = static_cast<double>(static_cast<float>(v));
    return node;
}

const detail::Node& deref(const std::shared_ptr<detail::Node>& n) {
    if (!n) throw UsageError("use of an undefined tensor");
    return *n;
}

}  // namespace

Tensor Tensor::zeros(Shape shape) {
    auto n = numel_of(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
    auto n = numel_of(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    return Tensor(make_leaf(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return Tensor(make_leaf({}, {value})); }

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(make_leaf(std::move(shape), std::move(v)));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(make_leaf(std::move(shape), std::move(v)));
}

const Shape& Tensor::shape() const { return deref(node_).shape; }

std::size_t Tensor::size(int d) const {
    const auto& s = shape();
    int idx = d < 0 ? static_cast<int>(s.size()) + d : d;
    if (idx < 0 || idx >= static_cast<int>(s.size()))
        throw DimensionError("dimension " + std::to_string(d) + " out of range for shape " + shape_str(s));
    return s[static_cast<std::size_t>(idx)];
}

std::size_t Tensor::numel() const { return deref(node_).data.size(); }

std::span<const double> Tensor::data() const { return deref(node_).data; }

std::span<double> Tensor::mutable_data() {
    deref(node_);
    if (!node_->inputs.empty() || node_->backward) throw UsageError("in-place write to an op result");
    return node_->data;
}

double Tensor::item() const {
    const auto& n = deref(node_);
    if (n.data.size() != 1) throw UsageError("item() on tensor of shape " + shape_str(n.shape));
    return n.data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& n = deref(node_);
    if (index.size() != n.shape.size()) throw DimensionError("index rank mismatch for " + shape_str(n.shape));
    std::size_t off = 0;
    std::size_t k = 0;
    for (auto i : index) {
        if (i >= n.shape[k]) throw DimensionError("index out of range for " + shape_str(n.shape));
        off = off * n.shape[k] + i;
        ++k;
    }
    return n.data[off];
}

std::vector<double> Tensor::to_vector() const { return deref(node_).data; }

bool Tensor::requires_grad() const { return deref(node_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    deref(node_);
    if (!node_->inputs.empty()) throw UsageError("requires_grad can only be set on leaves");
    node_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return !deref(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return deref(node_).grad; }

std::span<double> Tensor::mutable_grad() {
    deref(node_);
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    deref(node_);
    node_->grad.clear();
}

bool Tensor::is_leaf() const { return deref(node_).inputs.empty(); }

const std::string& Tensor::op_name() const { return deref(node_).op; }

Tensor Tensor::detach() const {
    const auto& n = deref(node_);
    auto leaf = std::make_shared<detail::Node>();
    leaf->shape = n.shape;
    leaf->data = n.data;
    return Tensor(std::move(leaf));
}

Tensor Tensor::clone() const {
    auto t = detach();
    t.node_->requires_grad = deref(node_).requires_grad && is_leaf();
    return t;
}

void Tensor::backward() const {
    const auto& root = deref(node_);
    if (root.data.size() != 1)
        throw UsageError("backward() requires a scalar, got shape " + shape_str(root.shape));
    if (!root.requires_grad) throw UsageError("backward() on a tensor that does not require grad");

    // Iterative post-order DFS: each node is emitted once, after all of its inputs.
    std::vector<detail::Node*> order;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* n : order)
        if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
    node_->grad[0] += 1.0;

    GradSpans spans;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (!n->backward) continue;
        spans.clear();
        for (auto& in : n->inputs) {
            if (in->requires_grad)
                spans.emplace_back(in->grad);
            else
                spans.emplace_back();
        }
        n->backward(n->grad, spans);
    }
}

Tensor custom_op(std::string_view name, Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                 BackwardFn backward) {
    if (numel_of(shape) != data.size())
        throw DimensionError(std::string(name) + ": output shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    for (double v : data)
        if (!std::isfinite(v)) throw NumericError(std::string(name) + ": non-finite value in forward output");
    if (g_precision == Precision::Float32)
        for (auto& v : data) v = static_cast<double>(static_cast<float>(v));

    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = std::string(name);

    bool needs = false;
    if (g_grad_enabled)
        for (const auto& in : inputs) needs = needs || deref(in.node_).requires_grad;
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.node_);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

}  // namespace spt
