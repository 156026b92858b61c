#pragma once

// Dense tensor plus a reverse-mode tape. A Graph records every differentiable
// op executed while it is the innermost active scope; backward() replays the
// records in reverse. Tensors are cheap handles onto shared storage so the
// tape can keep inputs alive without copying.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "common.hpp"

namespace castream {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) {
        if (d <= 0) throw ShapeError("tensor extent must be positive");
        n *= d;
    }
    return n;  // rank-0 => 1 (scalar)
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;         // sized lazily on first accumulation
    bool requires_grad = false;  // leaf the optimizer may update
    bool wants_grad = false;     // participates in backward at all
};

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape s) {
        Tensor t;
        std::int64_t n = shape_numel(s);
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = std::move(s);
        t.d_->value.assign(static_cast<std::size_t>(n), T(0));
        return t;
    }

    static Tensor full(Shape s, T v) {
        Tensor t = zeros(std::move(s));
        for (auto& x : t.d_->value) x = v;
        return t;
    }

    static Tensor scalar(T v) { return full(Shape{}, v); }

    static Tensor from(Shape s, std::vector<T> v, bool requires_grad = false) {
        std::int64_t n = shape_numel(s);
        if (static_cast<std::int64_t>(v.size()) != n)
            throw ShapeError("tensor data size does not match shape " +
                             shape_str(s));
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = std::move(s);
        t.d_->value = std::move(v);
        t.set_requires_grad(requires_grad);
        return t;
    }

    bool valid() const { return static_cast<bool>(d_); }

    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    std::int64_t dim(int i) const { return d_->shape.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->value.size()); }

    T* data() { return d_->value.data(); }
    const T* data() const { return d_->value.data(); }
    std::vector<T>& vec() { return d_->value; }
    const std::vector<T>& vec() const { return d_->value; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }

    Tensor& set_requires_grad(bool b) {
        d_->requires_grad = b;
        d_->wants_grad = b;
        return *this;
    }

    bool wants_grad() const { return d_->wants_grad; }

    bool has_grad() const { return !d_->grad.empty(); }

    // Gradient of the last backward pass. Empty until one ran.
    const std::vector<T>& grad() const { return d_->grad; }

    void zero_grad() { d_->grad.clear(); }

    // Deep copy of the values; detached from any tape.
    Tensor clone_detached() const {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = d_->shape;
        t.d_->value = d_->value;
        return t;
    }

    std::shared_ptr<TensorData<T>>& ptr() { return d_; }
    const std::shared_ptr<TensorData<T>>& ptr() const { return d_; }

  private:
    std::shared_ptr<TensorData<T>> d_;
};

// Accumulate into a lazily sized grad buffer.
template <typename T>
inline std::vector<T>& grad_buffer(const std::shared_ptr<TensorData<T>>& t) {
    if (t->grad.empty()) t->grad.assign(t->value.size(), T(0));
    return t->grad;
}

template <typename T>
class Graph;

// Innermost recording scope for this thread. Graph and NoGrad push and pop
// it RAII-style; ops consult it to decide whether to record.
template <typename T>
inline Graph<T>*& graph_slot() {
    static thread_local Graph<T>* cur = nullptr;
    return cur;
}

template <typename T>
class Graph {
  public:
    // Constructing a Graph makes it the innermost recording scope on this
    // thread; destruction restores the previous one. One graph, one thread.
    Graph() : prev_(graph_slot<T>()) { graph_slot<T>() = this; }

    ~Graph() { graph_slot<T>() = prev_; }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* current() { return graph_slot<T>(); }

    void record(std::function<void()> step) {
        steps_.push_back(std::move(step));
    }

    std::size_t size() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

    // Reverse sweep. Seed must be scalar-shaped unless a cotangent with the
    // output's element count is supplied. A graph backs exactly one sweep.
    void backward(const Tensor<T>& output) {
        if (output.numel() != 1)
            throw DomainError(
                "backward seed must be scalar-shaped; pass a cotangent for "
                "non-scalar outputs");
        run_backward(output, std::vector<T>{T(1)});
    }

    void backward(const Tensor<T>& output, const std::vector<T>& cotangent) {
        if (static_cast<std::int64_t>(cotangent.size()) != output.numel())
            throw ShapeError("cotangent size does not match output");
        run_backward(output, cotangent);
    }

  private:
    void run_backward(const Tensor<T>& output, const std::vector<T>& seed) {
        if (consumed_)
            throw StateError("backward already ran on this graph");
        if (!output.wants_grad())
            throw DomainError("output does not depend on any tracked tensor");
        consumed_ = true;
        auto& g = grad_buffer(output.ptr());
        for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
    Graph* prev_ = nullptr;
};

// Suspends recording for frozen-path forwards (inference, feature caching).
template <typename T>
class NoGrad {
  public:
    NoGrad() : saved_(graph_slot<T>()) { graph_slot<T>() = nullptr; }
    ~NoGrad() { graph_slot<T>() = saved_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

  private:
    Graph<T>* saved_;
};

}  // namespace castream
