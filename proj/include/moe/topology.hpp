// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace moe {

// Simulated expert-parallel placement: which GPU hosts each expert, and
// which GPU each token's activations live on. Experts are placed
// contiguously; tokens are shuffled by seed and then sharded contiguously,
// modeling i.i.d. data-parallel input.
struct GpuTopology {
    int n_gpus = 0;
    int experts_per_gpu = 0;
    std::vector<int> expert_to_gpu;           // expert index -> gpu index
    std::vector<int> token_home;              // token index -> gpu index
    std::vector<std::vector<int>> gpu_experts;  // gpu index -> experts, ascending

    int n_experts() const { return static_cast<int>(expert_to_gpu.size()); }
    int n_tokens() const { return static_cast<int>(token_home.size()); }

    // Throws if any GPU hosts no experts or a map entry is out of range.
    void validate() const;
};

GpuTopology build_topology(int n_gpus, int n_experts, int n_tokens, std::uint64_t seed);

}  // namespace moe
