#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "condseg/tensor.hpp"

namespace condseg {

// Named trainable tensors with gradient slots. Names are hierarchical
// ("encoder.stem.c1.conv.w"); stage handoff loads by prefix. Single writer
// (the trainer); read-only views may be shared.
template <typename T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> grad;
        bool trainable = true;
    };

    void add(const std::string& name, Tensor<T> value, bool trainable = true) {
        require(!entries_.count(name), "ParamStore: duplicate name " + name);
        Entry e;
        e.grad = Tensor<T>(value.shape);
        e.value = std::move(value);
        e.trainable = trainable;
        entries_.emplace(name, std::move(e));
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        require(it != entries_.end(), "ParamStore: missing name " + name);
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), "ParamStore: missing name " + name);
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return at(name).value; }
    const Tensor<T>& value(const std::string& name) const {
        return at(name).value;
    }
    Tensor<T>& grad(const std::string& name) { return at(name).grad; }

    std::vector<std::string> names(std::string_view prefix = "") const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_)
            if (k.rfind(prefix, 0) == 0) out.push_back(k);
        return out;
    }

    std::size_t size() const { return entries_.size(); }

    void zero_grads() {
        for (auto& [k, e] : entries_)
            std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
    }

    // Ordered iteration (std::map) keeps checkpoints and optimizers
    // deterministic.
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::map<std::string, Entry> entries_;
};

}  // namespace condseg
