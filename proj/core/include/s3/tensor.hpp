#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace s3 {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    std::vector<float>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
        return grad;
    }
};

}  // namespace detail

/// Dense row-major float32 array with reverse-mode differentiation.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values are
/// not modified after construction except by optimizers, which write leaf
/// parameters between training steps.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor vector(std::vector<float> data, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data,
                         bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t ndim() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return data().size(); }
    /// Rows of a 2-D tensor; a 1-D tensor counts as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const float> data() const;
    /// Direct write access, reserved for parameter updates and initialization.
    std::span<float> mutable_data();
    float item() const;
    float at(std::size_t i) const { return data()[i]; }
    float at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    /// Gradient buffer (zeros if nothing has been accumulated yet).
    std::vector<float> grad() const;
    void zero_grad();

    /// Backpropagates from a single-element tensor.
    void backward() const;

    /// Same values, cut from the graph.
    Tensor detach() const;
    /// Deep copy of values into a fresh leaf.
    Tensor clone(bool requires_grad = false) const;
    Tensor reshape(Shape shape) const;

    const detail::Node* node() const { return node_.get(); }

    // Used by op implementations.
    static Tensor make_result(Shape shape, std::vector<float> data,
                              std::initializer_list<Tensor> parents, detail::BackwardFn fn);
    static Tensor make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& parents,
                              detail::BackwardFn fn);
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

}  // namespace s3
