#pragma once

// Dense row-major tensors of doubles with a dynamic reverse-mode tape.
//
// Every op result holds shared references to its inputs plus a backward
// closure; calling backward() on a scalar walks that DAG once in reverse
// topological order. Leaves created with requires_grad accumulate gradients
// until zero_grad().

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spt/rng.hpp"

namespace spt {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Precision { Float64, Float32 };

// Float32 mode rounds every op output to single precision; storage and
// arithmetic stay double. Per-thread, so concurrent runs may differ.
void set_precision(Precision p);
Precision precision();

class PrecisionScope {
   public:
    explicit PrecisionScope(Precision p) : saved_(precision()) { set_precision(p); }
    ~PrecisionScope() { set_precision(saved_); }
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

   private:
    Precision saved_;
};

bool grad_enabled();

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool saved_;
};

// grad_in[i] is empty when input i does not require a gradient.
using GradSpans = std::vector<std::span<double>>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSpans& grad_in)>;

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;
};
}  // namespace detail

class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, double stddev, Rng& rng);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    // Negative indices count from the back.
    std::size_t size(int d) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Only leaves may be written in place; op results are immutable.
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;
    std::vector<double> to_vector() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on = true);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    bool is_leaf() const;
    const std::string& op_name() const;

    // Reverse-mode sweep from a scalar.
    void backward() const;

    Tensor detach() const;
    Tensor clone() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

   private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor custom_op(std::string_view, Shape, std::vector<double>, const std::vector<Tensor>&, BackwardFn);
};

// Records an op on the tape. The result requires a gradient iff any input
// does and recording is enabled. Output values are checked for finiteness
// (NumericError naming the op) and rounded in Float32 mode.
Tensor custom_op(std::string_view name, Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                 BackwardFn backward);

}  // namespace spt
