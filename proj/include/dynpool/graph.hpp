#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dynpool/tape.hpp"

namespace dynpool {

/// Small named op-DAG evaluated onto a tape. Nodes are added in topological order; each refers to
/// earlier inputs or nodes by name.
template <class T>
class Graph {
public:
    using Fn = std::function<Var<T>(const std::vector<Var<T>>&)>;

    Graph& input(std::string name, Shape shape) {
        check_new(name);
        inputs_.push_back({std::move(name), std::move(shape)});
        return *this;
    }

    Graph& node(std::string name, std::vector<std::string> args, Fn fn) {
        check_new(name);
        for (const auto& a : args) {
            if (!names_.count(a)) throw std::invalid_argument("graph node " + name + ": unknown argument " + a);
        }
        nodes_.push_back({std::move(name), std::move(args), std::move(fn)});
        return *this;
    }

    Graph& output(std::string name) {
        if (!names_.count(name)) throw std::invalid_argument("graph output: unknown name " + name);
        outputs_.push_back(std::move(name));
        return *this;
    }

    struct Input {
        std::string name;
        Shape shape;
    };
    struct Node {
        std::string name;
        std::vector<std::string> args;
        Fn fn;
    };

    const std::vector<Input>& inputs() const { return inputs_; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<std::string>& outputs() const { return outputs_; }

private:
    void check_new(const std::string& name) {
        if (names_.count(name)) throw std::invalid_argument("graph: duplicate name " + name);
        if (name.empty()) throw std::invalid_argument("graph: empty name");
        names_.insert(name);
    }

    std::vector<Input> inputs_;
    std::vector<Node> nodes_;
    std::vector<std::string> outputs_;
    std::set<std::string> names_;
};

/// Evaluates `graph` on `tape`. Inputs become gradient-tracked variables when `track_inputs` is
/// set. Returns every declared output by name.
template <class T>
std::map<std::string, Var<T>> forward(const Graph<T>& graph, Tape<T>& tape, const std::map<std::string, Tensor<T>>& inputs,
                                      bool track_inputs = false) {
    std::map<std::string, Var<T>> env;
    for (const auto& in : graph.inputs()) {
        auto it = inputs.find(in.name);
        if (it == inputs.end()) throw std::invalid_argument("forward: missing input " + in.name);
        if (it->second.shape() != in.shape) throw ShapeError("input " + in.name, in.shape, it->second.shape());
        env[in.name] = track_inputs ? tape.variable(it->second) : tape.constant(it->second);
    }
    for (const auto& n : graph.nodes()) {
        std::vector<Var<T>> args;
        for (const auto& a : n.args) args.push_back(env.at(a));
        env[n.name] = n.fn(args);
    }
    std::map<std::string, Var<T>> out;
    for (const auto& o : graph.outputs()) out[o] = env.at(o);
    return out;
}

}  // namespace dynpool
