#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace jpu {

// Sparse selection of FFN hidden neurons, one bit row per layer. Layers
// outside [window_lo, window_hi) never carry set bits. Shared between the
// attribution side (which builds masks) and the model side (which applies
// them in masked parameter updates).
struct SparseMask {
    std::vector<std::vector<uint8_t>> bits; // [layer][neuron], 0 or 1
    double sparsity_p = 0.0;
    int window_lo = 0;
    int window_hi = 0;

    size_t count() const {
        size_t c = 0;
        for (const auto& row : bits)
            for (uint8_t b : row) c += b != 0;
        return c;
    }
    bool test(int layer, int neuron) const {
        return bits[size_t(layer)][size_t(neuron)] != 0;
    }
};

} // namespace jpu
