#include "factalign/kernels.hpp"

namespace factalign::kernels::scalar {

void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out) {
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const double t = static_cast<double>(tf[i]);
        out[i] = weight * t / (t + length_norm[doc[i]]);
    }
}

PairCounts count_pairs(std::span<const double> a, std::span<const double> b) {
    PairCounts c;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool eq_a = a[i] == a[j];
            const bool eq_b = b[i] == b[j];
            if (eq_a && eq_b) {
                ++c.tied_both;
            } else if (eq_a) {
                ++c.tied_a_only;
            } else if (eq_b) {
                ++c.tied_b_only;
            } else if ((a[i] < a[j]) == (b[i] < b[j])) {
                ++c.concordant;
            } else {
                ++c.discordant;
            }
        }
    }
    return c;
}

}  // namespace factalign::kernels::scalar
