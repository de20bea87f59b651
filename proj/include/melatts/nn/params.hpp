#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "melatts/core/matrix.hpp"
#include "melatts/core/rng.hpp"
#include "melatts/core/tape.hpp"

namespace melatts {

// Named parameter arrays in a stable registration order. The order defines
// the checkpoint layout and the optimizer state alignment.
template <typename T>
struct ParamStore {
    struct Entry {
        std::string name;
        Matrix<T> value;
        bool trainable = true;
        bool weight_decay = false;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, int> index;

    Matrix<T>& add(const std::string& name, int rows, int cols, bool trainable = true, bool weight_decay = false) {
        if (index.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
        index[name] = static_cast<int>(entries.size());
        entries.push_back(Entry{name, Matrix<T>(rows, cols), trainable, weight_decay});
        return entries.back().value;
    }

    bool has(const std::string& name) const { return index.count(name) != 0; }

    Matrix<T>& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("ParamStore: unknown name " + name);
        return entries[it->second].value;
    }
    const Matrix<T>& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("ParamStore: unknown name " + name);
        return entries[it->second].value;
    }

    size_t num_scalars() const {
        size_t n = 0;
        for (const auto& e : entries) n += e.value.size();
        return n;
    }
    size_t num_trainable_scalars() const {
        size_t n = 0;
        for (const auto& e : entries)
            if (e.trainable) n += e.value.size();
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& e : entries) {
            out.add(e.name, e.value.rows(), e.value.cols(), e.trainable, e.weight_decay);
            out.at(e.name) = e.value.template cast<U>();
        }
        return out;
    }
};

// Parameters materialized as tape leaves, aligned with a ParamStore.
// Trainable entries become gradient leaves, frozen ones constants. When
// for_inference is set everything is a constant and no gradients are kept.
template <typename T>
struct BoundParams {
    Tape<T>* tape = nullptr;
    const ParamStore<T>* store = nullptr;
    std::vector<typename Tape<T>::Ref> refs;

    typename Tape<T>::Ref operator[](const std::string& name) const {
        auto it = store->index.find(name);
        if (it == store->index.end()) throw std::out_of_range("BoundParams: unknown name " + name);
        return refs[it->second];
    }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamStore<T>& store, bool for_inference = false) {
    BoundParams<T> bound;
    bound.tape = &tape;
    bound.store = &store;
    bound.refs.reserve(store.entries.size());
    for (const auto& e : store.entries)
        bound.refs.push_back(tape.leaf(e.value, e.trainable && !for_inference));
    return bound;
}

// Gradient accumulator aligned with a ParamStore's entry order.
template <typename T>
struct GradBuffer {
    std::vector<Matrix<T>> grads;

    explicit GradBuffer(const ParamStore<T>& store) {
        grads.reserve(store.entries.size());
        for (const auto& e : store.entries) grads.emplace_back(e.value.rows(), e.value.cols());
    }

    void add_from(Tape<T>& tape, const BoundParams<T>& bound) {
        for (size_t i = 0; i < grads.size(); ++i) {
            if (!bound.store->entries[i].trainable) continue;
            axpy(grads[i], tape.grad(bound.refs[i]));
        }
    }

    void add(const GradBuffer& other) {
        for (size_t i = 0; i < grads.size(); ++i) axpy(grads[i], other.grads[i]);
    }

    void scale(T s) {
        for (auto& g : grads)
            for (size_t i = 0; i < g.size(); ++i) g.data()[i] *= s;
    }

    void set_zero() {
        for (auto& g : grads) g.set_zero();
    }
};

}  // namespace melatts
