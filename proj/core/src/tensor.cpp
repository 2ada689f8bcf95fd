#include "s3/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <unordered_set>

#include "s3/errors.hpp"

namespace s3 {

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

void check_finite(const std::vector<float>& data) {
    // Exponent all ones means inf or nan; integer form vectorizes.
    std::uint32_t bad = 0;
    for (float v : data) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        bad |= static_cast<std::uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
    }
    if (bad) throw NumericError("non-finite value produced by tensor op");
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<float>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
    check_finite(data);
    return Tensor(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::vector(std::vector<float> data, bool requires_grad) {
    Shape shape{data.size()};
    return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<float> data, bool requires_grad) {
    return from(Shape{rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from(Shape{}, std::vector<float>{value}, requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw ArgumentError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) throw DimensionError("axis out of range for shape " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::rows() const {
    const Shape& s = shape();
    if (s.size() == 2) return s[0];
    if (s.size() <= 1) return 1;
    throw DimensionError("rows() needs a 1-D or 2-D tensor, got " + shape_str(s));
}

std::size_t Tensor::cols() const {
    const Shape& s = shape();
    if (s.size() == 2) return s[1];
    if (s.size() == 1) return s[0];
    if (s.empty()) return 1;
    throw DimensionError("cols() needs a 1-D or 2-D tensor, got " + shape_str(s));
}

std::span<const float> Tensor::data() const {
    if (!node_) throw ArgumentError("use of undefined tensor");
    return node_->data;
}

std::span<float> Tensor::mutable_data() {
    if (!node_) throw ArgumentError("use of undefined tensor");
    return node_->data;
}

float Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!node_) throw ArgumentError("use of undefined tensor");
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<float> Tensor::grad() const {
    if (!node_) throw ArgumentError("use of undefined tensor");
    if (node_->grad.empty()) return std::vector<float>(node_->data.size(), 0.0f);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

void Tensor::backward() const {
    if (!node_) throw ArgumentError("backward on undefined tensor");
    if (node_->data.size() != 1) throw DimensionError("backward() needs a scalar root");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Intermediate gradients are not needed once propagated.
    for (detail::Node* n : order) {
        if (n->backward) n->grad.clear();
    }
}

Tensor Tensor::detach() const {
    return Tensor(new_node(shape(), node_->data, false));
}

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(new_node(shape(), node_->data, requires_grad));
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
    }
    return make_result(std::move(new_shape), node_->data, {*this}, [parent = node_](detail::Node& self) {
        auto& g = parent->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor Tensor::make_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> parents,
                           detail::BackwardFn fn) {
    bool needs = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parents) needs = needs || p.requires_grad();
    }
    check_finite(data);
    auto node = new_node(std::move(shape), std::move(data), needs);
    if (needs) {
        for (const Tensor& p : parents) node->parents.push_back(p.node_);
        node->backward = std::move(fn);
    }
    return Tensor(std::move(node));
}

Tensor Tensor::make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& parents,
                           detail::BackwardFn fn) {
    bool needs = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parents) needs = needs || p.requires_grad();
    }
    check_finite(data);
    auto node = new_node(std::move(shape), std::move(data), needs);
    if (needs) {
        for (const Tensor& p : parents) node->parents.push_back(p.node_);
        node->backward = std::move(fn);
    }
    return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

}  // namespace s3
