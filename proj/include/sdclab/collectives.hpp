#pragma once

// Simulated intra-node tensor-parallel collectives across R logical ranks.
// Reduction always accumulates in ascending rank order, so the result is
// independent of how rank work is interleaved. The fault injector has no hook
// in this module: collectives are assumed clean.

#include <vector>

#include "sdclab/tensor.hpp"

namespace sdclab::collectives {

/// Concatenate the shards in ascending rank order. All ranks receive a
/// bit-identical copy; since copies are identical this returns one tensor.
template <typename T>
TensorT<T> all_gather(const std::vector<TensorT<T>>& shards) {
    if (shards.empty()) throw ContractViolation("all_gather with no shards");
    const auto& s0 = shards.front();
    if (s0.rank() != 2) throw ContractViolation("all_gather expects 2-D shards");
    for (const auto& s : shards)
        if (!s.same_shape(s0)) throw ContractViolation("all_gather shard shape mismatch");
    const int64_t r = static_cast<int64_t>(shards.size());
    const int64_t rows = s0.dim(0), cols = s0.dim(1);
    TensorT<T> out({r * rows, cols}, s0.dtype());
    for (int64_t i = 0; i < r; ++i)
        std::memcpy(out.data() + i * rows * cols, shards[static_cast<size_t>(i)].data(),
                    static_cast<size_t>(rows * cols) * sizeof(T));
    return out;
}

/// Elementwise sum in ascending rank order, then split by row blocks; rank r
/// receives block r.
template <typename T>
std::vector<TensorT<T>> reduce_scatter(const std::vector<TensorT<T>>& fulls) {
    if (fulls.empty()) throw ContractViolation("reduce_scatter with no inputs");
    const auto& f0 = fulls.front();
    if (f0.rank() != 2) throw ContractViolation("reduce_scatter expects 2-D inputs");
    for (const auto& f : fulls)
        if (!f.same_shape(f0)) throw ContractViolation("reduce_scatter shape mismatch");
    const int64_t r = static_cast<int64_t>(fulls.size());
    const int64_t rows = f0.dim(0), cols = f0.dim(1);
    if (rows % r != 0) throw ContractViolation("reduce_scatter rows not divisible by rank count");
    TensorT<T> sum = f0;
    for (int64_t i = 1; i < r; ++i) add_inplace(sum, fulls[static_cast<size_t>(i)]);
    const int64_t block = rows / r;
    std::vector<TensorT<T>> out;
    out.reserve(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) {
        TensorT<T> shard({block, cols}, f0.dtype());
        std::memcpy(shard.data(), sum.data() + i * block * cols,
                    static_cast<size_t>(block * cols) * sizeof(T));
        out.push_back(std::move(shard));
    }
    return out;
}

/// Each target receives a bit-identical copy of src.
template <typename T>
void broadcast(const TensorT<T>& src, const std::vector<TensorT<T>*>& targets) {
    for (TensorT<T>* t : targets) *t = src;
}

}  // namespace sdclab::collectives
