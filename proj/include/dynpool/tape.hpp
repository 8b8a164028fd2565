#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dynpool/tensor.hpp"

namespace dynpool {

/// Trainable tensor (or non-trainable buffer such as running statistics).
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        grad.fill(T(0));
    }
};

/// Owns parameters with stable addresses, in creation order.
template <class T>
class ParameterStore {
public:
    using Init = std::function<void(Tensor<T>&, std::mt19937_64&)>;

    explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    /// Returns the existing parameter called `name`, or creates and initializes it.
    Parameter<T>& get_or_create(const std::string& name, const Shape& shape, const Init& init,
                                bool trainable = true) {
        if (auto it = index_.find(name); it != index_.end()) {
            Parameter<T>& p = *params_[it->second];
            if (p.value.shape() != shape) throw ShapeError("parameter " + name, shape, p.value.shape());
            return p;
        }
        auto p = std::make_unique<Parameter<T>>();
        p->name = name;
        p->value = Tensor<T>(shape);
        p->grad = Tensor<T>(shape);
        p->trainable = trainable;
        if (init) init(p->value, rng_);
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Parameter<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    const Parameter<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    std::size_t size() const noexcept { return params_.size(); }
    Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& p : params_) out.push_back(p->name);
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    std::mt19937_64& rng() { return rng_; }

    /// Copies every parameter of `other` (converting precision), creating missing ones.
    template <class U>
    void assign_from(const ParameterStore<U>& other) {
        for (std::size_t i = 0; i < other.size(); ++i) {
            const auto& src = other[i];
            auto& dst = get_or_create(src.name, src.value.shape(), nullptr, src.trainable);
            dst.value = src.value.template cast<T>();
        }
    }

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, std::size_t> index_;
    std::mt19937_64 rng_;
};

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
    using value_type = T;

    Tape<T>* tape = nullptr;
    std::size_t id = std::numeric_limits<std::size_t>::max();

    bool valid() const noexcept { return tape != nullptr; }
    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return tape->value(*this).shape(); }
    std::size_t dim(std::size_t axis) const { return shape().at(axis); }
    bool requires_grad() const { return tape->requires_grad(*this); }
};

template <class T>
using GradientMap = std::map<std::string, Tensor<T>>;

/// Define-by-run record of differentiable operations.
///
/// Each recorded node owns its forward value; nodes whose inputs need gradients also keep a
/// backward closure. Closures refer to nodes by id only, so growing the tape is safe.
template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&)>;

    Tape() = default;
    /// A tape with gradients disabled records values only (inference).
    explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, nullptr); }

    Var<T> variable(Tensor<T> value) { return push("variable", std::move(value), grad_enabled_, nullptr); }

    Var<T> parameter(Parameter<T>& p) {
        auto v = push("parameter:" + p.name, p.value, p.trainable && grad_enabled_, nullptr);
        nodes_[v.id].param = &p;
        return v;
    }

    bool any_requires_grad(std::initializer_list<Var<T>> inputs) const {
        for (const auto& v : inputs) {
            if (nodes_.at(v.id).requires_grad) return true;
        }
        return false;
    }
    bool any_requires_grad(const std::vector<Var<T>>& inputs) const {
        for (const auto& v : inputs) {
            if (nodes_.at(v.id).requires_grad) return true;
        }
        return false;
    }

    /// Records an operation output. `backward` is dropped when no input needs a gradient.
    Var<T> record(std::string op, Tensor<T> value, bool requires_grad, Backward backward) {
        if (backward_done_) throw std::logic_error(op + ": tape already consumed by backward");
        return push(std::move(op), std::move(value), requires_grad,
                    requires_grad ? std::move(backward) : nullptr);
    }

    const Tensor<T>& value(Var<T> v) const { return node(v).value; }
    bool requires_grad(Var<T> v) const { return node(v).requires_grad; }
    const std::string& op_name(Var<T> v) const { return node(v).op; }

    /// Gradient buffer of `v`, allocated as zeros on first access.
    Tensor<T>& grad(Var<T> v) {
        Node& n = nodes_.at(v.id);
        if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }
    bool has_grad(Var<T> v) const { return node(v).grad.shape() == node(v).value.shape(); }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Back-propagates from a scalar node. Parameter gradients are added to `Parameter::grad`
    /// and returned by name.
    GradientMap<T> backward(Var<T> loss) {
        if (nodes_.empty() || loss.tape != this || loss.id >= nodes_.size()) {
            throw std::logic_error("backward: loss node was not produced by a forward pass on this tape");
        }
        if (backward_done_) throw std::logic_error("backward: already called on this tape");
        const Node& ln = nodes_[loss.id];
        if (ln.value.size() != 1) throw ShapeError("backward (non-scalar loss)", Shape{1}, ln.value.shape());
        backward_done_ = true;
        grad(loss).fill(T(1));
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.shape() != n.value.shape()) continue;
            n.backward(*this);
        }
        GradientMap<T> out;
        for (auto& n : nodes_) {
            if (!n.param || !n.param->trainable || n.grad.shape() != n.value.shape()) continue;
            Parameter<T>& p = *n.param;
            if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
            for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
            auto [it, inserted] = out.try_emplace(p.name, n.grad);
            if (!inserted) {
                for (std::size_t k = 0; k < n.grad.size(); ++k) it->second[k] += n.grad[k];
            }
        }
        return out;
    }

private:
    struct Node {
        std::string op;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        Backward backward;
    };

    const Node& node(Var<T> v) const {
        if (v.tape != this || v.id >= nodes_.size()) throw std::logic_error("variable does not belong to this tape");
        return nodes_[v.id];
    }

    Var<T> push(std::string op, Tensor<T> value, bool requires_grad, Backward backward) {
        nodes_.push_back(Node{std::move(op), std::move(value), {}, requires_grad, nullptr, std::move(backward)});
        return Var<T>{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_;  // deque: values stay put while ops push new nodes
    bool grad_enabled_ = true;
    bool backward_done_ = false;
};

}  // namespace dynpool
