#pragma once

// Test-only oracles: dense derivative tensors built from coordinate-direction
// jets (independent of the matrix-free correlation path they check).

#include <vector>

#include "ntkcorr/jets.hpp"
#include "ntkcorr/network.hpp"
#include "ntkcorr/tensor.hpp"

namespace ntkcorr::testing {

// Full grad^{x k} F_{output}(x) as a dense rank-k tensor over the flat
// parameter index, one jet per index multiset (mixed partials are symmetric).
inline DenseTensor dense_derivative_tensor(const NetworkConfig& config,
                                           const NetworkParams& params,
                                           std::span<const double> x, int order,
                                           int output_index) {
    const std::size_t n = params.size();
    std::vector<std::size_t> shape(static_cast<std::size_t>(order), n);
    DenseTensor out = DenseTensor::zeros(shape);

    std::vector<std::size_t> idx(static_cast<std::size_t>(order), 0);
    for (;;) {
        Directions dirs;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            std::vector<double> e(n, 0.0);
            e[idx[k]] = 1.0;
            dirs.push_back(std::move(e));
        }
        const JetBundle jb = jet_forward(config, params, x, dirs);
        const double v = jb.top()[static_cast<std::size_t>(output_index)];

        // write the value to every permutation of the multiset
        std::vector<std::size_t> perm = idx;
        std::sort(perm.begin(), perm.end());
        do {
            out.at(perm) = v;
        } while (std::next_permutation(perm.begin(), perm.end()));

        // next non-decreasing multi-index
        int k = order - 1;
        for (; k >= 0; --k) {
            if (idx[static_cast<std::size_t>(k)] + 1 < n) {
                ++idx[static_cast<std::size_t>(k)];
                for (std::size_t j = static_cast<std::size_t>(k) + 1; j < idx.size(); ++j) {
                    idx[j] = idx[static_cast<std::size_t>(k)];
                }
                break;
            }
        }
        if (k < 0) {
            break;
        }
    }
    return out;
}

}  // namespace ntkcorr::testing
