#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tsdm/tensor.hpp"

namespace tsdm {

/// Ordered collection of named parameter tensors. Order is the architecture
/// walk order and is part of the checkpoint contract.
template <typename T>
struct ParamSet {
    std::vector<std::pair<std::string, Tensor<T>>> tensors;

    void add(std::string name, Tensor<T> t) {
        index_.emplace(name, tensors.size());
        tensors.emplace_back(std::move(name), std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("params: no tensor named " + name);
        return tensors[it->second].second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("params: no tensor named " + name);
        return tensors[it->second].second;
    }

    std::size_t count() const { return tensors.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors) n += t.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& [name, t] : tensors)
            if (!t.all_finite()) return false;
        return true;
    }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& [name, t] : tensors) out.add(name, t.template cast<U>());
        return out;
    }

  private:
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace tsdm
