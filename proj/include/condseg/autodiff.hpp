#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "condseg/tensor.hpp"

namespace condseg {

enum class Phase { train, eval };

// Define-by-run tape. Each forward pass builds a fresh graph of Nodes;
// backward() walks it once in reverse topological order. backward_fn reads
// this node's grad and accumulates into the parents' grads.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first use
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;
    bool requires_grad = false;

    explicit Node(Tensor<T> v) : value(std::move(v)) {}

    Tensor<T>& ensure_grad() {
        if (grad.size() == 0) grad = Tensor<T>(value.shape);
        return grad;
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(Tensor<T> v, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>(std::move(v));
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> v) {
    return leaf(std::move(v), false);
}

template <typename T>
Var<T> make_op(Tensor<T> v, std::vector<Var<T>> parents) {
    auto n = std::make_shared<Node<T>>(std::move(v));
    for (const auto& p : parents)
        if (p && p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    return n;
}

// Reverse-mode sweep from a scalar root. Seeds droot = 1.
template <typename T>
void backward(const Var<T>& root) {
    require(root != nullptr && root->value.size() == 1,
            "backward: root must be a scalar node");

    // Iterative post-order DFS; graphs are a few thousand nodes deep at most
    // but recursion depth through long CBR chains is easy to avoid.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    struct Frame {
        Node<T>* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node<T>* p = f.node->parents[f.next_parent++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    root->ensure_grad().data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
    }
}

}  // namespace condseg
