#include "lipsync/nn/rng.hpp"

#include "lipsync/common.hpp"

namespace lipsync::nn {

std::vector<int> Rng::sample_without_replacement(int n, int k, int exclude) {
    const int avail = n - (exclude >= 0 && exclude < n ? 1 : 0);
    LS_CHECK(k >= 1 && k <= avail, "sample_without_replacement: k=%d from %d available", k, avail);
    std::vector<int> pool;
    pool.reserve(static_cast<size_t>(avail));
    for (int i = 0; i < n; i++)
        if (i != exclude) pool.push_back(i);
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int j = 0; j < k; j++) {
        const int64_t pick = randint(static_cast<int64_t>(pool.size()));
        out.push_back(pool[static_cast<size_t>(pick)]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    return out;
}

} // namespace lipsync::nn
