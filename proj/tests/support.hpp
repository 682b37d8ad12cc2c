#pragma once

// Small datasets and emulators shared by the unit tests.

#include "nrtm/emulator.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm::testkit {

inline SpectralDataset small_dataset(std::size_t n = 600, std::size_t k = 4, std::uint64_t seed = 7) {
    const StateRanges r;
    const auto grid = WavelengthGrid::uniform(k);
    SpectralDataset ds = generate_dataset(sample_states(r, n, k, SamplingMethod::latin_hypercube, seed), grid,
                                          OracleConfig{}, SplitFractions{}, seed);
    ds.ranges = r;
    return ds;
}

inline EmulatorOptions quick_options(std::size_t epochs = 20, std::size_t hidden = 16, std::uint64_t seed = 3) {
    EmulatorOptions o;
    o.layer_dims = default_layer_dims(hidden);
    o.train.max_epochs = epochs;
    o.train.batch_size = 64;
    o.seed = seed;
    return o;
}

}  // namespace nrtm::testkit
