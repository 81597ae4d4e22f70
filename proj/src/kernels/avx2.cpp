#include "factalign/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <bit>

#include <immintrin.h>

#define FACTALIGN_AVX2 __attribute__((target("avx2")))

namespace factalign::kernels::avx2 {

FACTALIGN_AVX2
void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out) {
    const std::size_t n = doc.size();
    const __m256d w = _mm256_set1_pd(weight);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m128i idx = _mm_loadu_si128(reinterpret_cast<const __m128i*>(doc.data() + i));
        const __m128i raw_tf = _mm_loadu_si128(reinterpret_cast<const __m128i*>(tf.data() + i));
        // tf < 2^31 in any realistic posting, so the signed conversion is exact.
        const __m256d t = _mm256_cvtepi32_pd(raw_tf);
        const __m256d norm = _mm256_i32gather_pd(length_norm.data(), idx, 8);
        const __m256d num = _mm256_mul_pd(w, t);
        const __m256d den = _mm256_add_pd(t, norm);
        _mm256_storeu_pd(out.data() + i, _mm256_div_pd(num, den));
    }
    for (; i < n; ++i) {
        const double t = static_cast<double>(tf[i]);
        out[i] = weight * t / (t + length_norm[doc[i]]);
    }
}

FACTALIGN_AVX2
PairCounts count_pairs(std::span<const double> a, std::span<const double> b) {
    PairCounts c;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const __m256d ai = _mm256_set1_pd(a[i]);
        const __m256d bi = _mm256_set1_pd(b[i]);
        std::size_t j = i + 1;
        for (; j + 4 <= n; j += 4) {
            const __m256d aj = _mm256_loadu_pd(a.data() + j);
            const __m256d bj = _mm256_loadu_pd(b.data() + j);
            const int lt_a = _mm256_movemask_pd(_mm256_cmp_pd(ai, aj, _CMP_LT_OQ));
            const int gt_a = _mm256_movemask_pd(_mm256_cmp_pd(ai, aj, _CMP_GT_OQ));
            const int lt_b = _mm256_movemask_pd(_mm256_cmp_pd(bi, bj, _CMP_LT_OQ));
            const int gt_b = _mm256_movemask_pd(_mm256_cmp_pd(bi, bj, _CMP_GT_OQ));
            const int eq_a = ~(lt_a | gt_a) & 0xF;
            const int eq_b = ~(lt_b | gt_b) & 0xF;
            c.concordant += std::popcount(static_cast<unsigned>((lt_a & lt_b) | (gt_a & gt_b)));
            c.discordant += std::popcount(static_cast<unsigned>((lt_a & gt_b) | (gt_a & lt_b)));
            c.tied_both += std::popcount(static_cast<unsigned>(eq_a & eq_b));
            c.tied_a_only += std::popcount(static_cast<unsigned>(eq_a & ~eq_b & 0xF));
            c.tied_b_only += std::popcount(static_cast<unsigned>(eq_b & ~eq_a & 0xF));
        }
        for (; j < n; ++j) {
            const bool ea = a[i] == a[j];
            const bool eb = b[i] == b[j];
            if (ea && eb) {
                ++c.tied_both;
            } else if (ea) {
                ++c.tied_a_only;
            } else if (eb) {
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

}  // namespace factalign::kernels::avx2

#endif
