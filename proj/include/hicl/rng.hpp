#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hicl {

using Rng = std::mt19937_64;

/// Seed for a named sub-stream ("data", "init", "sampling", ...) derived from the
/// run seed, so each consumer's draws are independent of the others' order.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

inline Rng make_rng(std::uint64_t seed, std::string_view stream) { return Rng(derive_seed(seed, stream)); }

}  // namespace hicl
