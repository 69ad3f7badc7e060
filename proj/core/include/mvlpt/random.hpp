// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "mvlpt/array.hpp"

namespace mvlpt {

using Rng = std::mt19937_64;

// Mixes a base seed with stream tags so independent consumers (task k,
// shot draw, prompt init, ...) never share a random stream.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

Array normal_array(const Shape& shape, double stddev, Rng& rng);

}  // namespace mvlpt
