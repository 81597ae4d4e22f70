#pragma once

// Data-parallel inner loops with a scalar reference and SIMD variants.
//
// Every variant must match the scalar kernel bit for bit. Built with
// -ffp-contract=off.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace factalign::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view to_string(Isa isa);

/// True when the running CPU can execute `isa`.
bool isa_available(Isa isa);

/// ISA used by the dispatching entry points. Resolved once from CPU features;
/// FACTALIGN_SIMD=scalar|avx2|neon in the environment forces a choice.
Isa active_isa();

/// Forces (or with nullopt, clears) the dispatch choice. Test hook; not
/// thread-safe against concurrent kernel calls.
void set_isa_override(std::optional<Isa> isa);

/// Pair statistics over all i < j of two equally long sequences.
struct PairCounts {
    std::uint64_t concordant = 0;
    std::uint64_t discordant = 0;
    std::uint64_t tied_a_only = 0;
    std::uint64_t tied_b_only = 0;
    std::uint64_t tied_both = 0;

    bool operator==(const PairCounts&) const = default;
};

// BM25 posting contribution:
//   out[i] = weight * tf[i] / (tf[i] + length_norm[doc[i]])
// where length_norm[d] = k1 * (1 - b + b * |d| / avgdl) is precomputed per
// document and weight folds idf, (k1 + 1) and query term frequency.
void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out);

// Inputs must be NaN-free and of equal length.
PairCounts count_pairs(std::span<const double> a, std::span<const double> b);

namespace scalar {
void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out);
PairCounts count_pairs(std::span<const double> a, std::span<const double> b);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out);
PairCounts count_pairs(std::span<const double> a, std::span<const double> b);
}  // namespace avx2
#endif

#if defined(__aarch64__)
namespace neon {
void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out);
PairCounts count_pairs(std::span<const double> a, std::span<const double> b);
}  // namespace neon
#endif

}  // namespace factalign::kernels
