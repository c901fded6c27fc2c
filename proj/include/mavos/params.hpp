#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mavos/tensor.hpp"

namespace mavos {

// Flat registry of named parameter tensors. Modules append their tensors in a
// fixed order under a caller-chosen prefix; the optimizer and the checkpoint
// writer both walk this list, so the order doubles as the serialization
// order.
template <typename T>
struct Params {
    std::vector<std::pair<std::string, Tensor<T>*>> items;

    void add(std::string name, Tensor<T>& t) { items.emplace_back(std::move(name), &t); }

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : items) {
            if (n == name) return t;
        }
        return nullptr;
    }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : items) n += t->numel();
        return n;
    }
};

}  // namespace mavos
