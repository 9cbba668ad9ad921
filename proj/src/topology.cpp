// SPDX-License-Identifier: Apache-2.0
#include "moe/topology.hpp"

#include <numeric>
#include <stdexcept>
#include <string>

#include "moe/rng.hpp"

namespace moe {

void GpuTopology::validate() const {
    if (n_gpus < 1) {
        throw std::invalid_argument("GpuTopology: need at least one GPU");
    }
    if (static_cast<int>(gpu_experts.size()) != n_gpus) {
        throw std::invalid_argument("GpuTopology: gpu_experts size mismatch");
    }
    for (int g = 0; g < n_gpus; ++g) {
        if (gpu_experts[g].empty()) {
            throw std::invalid_argument("GpuTopology: GPU " + std::to_string(g) +
                                        " hosts no experts");
        }
    }
    for (int g : expert_to_gpu) {
        if (g < 0 || g >= n_gpus) {
            throw std::invalid_argument("GpuTopology: expert_to_gpu out of range");
        }
    }
    for (int g : token_home) {
        if (g < 0 || g >= n_gpus) {
            throw std::invalid_argument("GpuTopology: token_home out of range");
        }
    }
}

GpuTopology build_topology(int n_gpus, int n_experts, int n_tokens, std::uint64_t seed) {
    if (n_gpus < 1 || n_experts < 1 || n_tokens < 1) {
        throw std::invalid_argument("build_topology: counts must be >= 1");
    }
    if (n_experts % n_gpus != 0) {
        throw std::invalid_argument("build_topology: n_experts (" + std::to_string(n_experts) +
                                    ") not divisible by n_gpus (" + std::to_string(n_gpus) + ")");
    }

    GpuTopology topo;
    topo.n_gpus = n_gpus;
    topo.experts_per_gpu = n_experts / n_gpus;
    topo.expert_to_gpu.resize(n_experts);
    topo.gpu_experts.assign(n_gpus, {});
    for (int e = 0; e < n_experts; ++e) {
        const int g = static_cast<int>(static_cast<long long>(e) * n_gpus / n_experts);
        topo.expert_to_gpu[e] = g;
        topo.gpu_experts[g].push_back(e);
    }

    // Seeded shuffle, then contiguous shards; the first (n_tokens % n_gpus)
    // GPUs take one extra token when the split is uneven.
    std::vector<int> perm(n_tokens);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(Rng::derive(seed, 0x70c1));
    rng.shuffle(perm);

    topo.token_home.resize(n_tokens);
    const int base = n_tokens / n_gpus;
    const int rem = n_tokens % n_gpus;
    int pos = 0;
    for (int g = 0; g < n_gpus; ++g) {
        const int take = base + (g < rem ? 1 : 0);
        for (int t = 0; t < take; ++t) topo.token_home[perm[pos++]] = g;
    }

    topo.validate();
    return topo;
}

}  // namespace moe
