#include "factalign/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

namespace factalign::kernels::neon {

void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out) {
    const std::size_t n = doc.size();
    const float64x2_t w = vdupq_n_f64(weight);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        // No gather on NEON; the two lanes are loaded individually.
        const double norm_lanes[2] = {length_norm[doc[i]], length_norm[doc[i + 1]]};
        const double tf_lanes[2] = {static_cast<double>(tf[i]), static_cast<double>(tf[i + 1])};
        const float64x2_t t = vld1q_f64(tf_lanes);
        const float64x2_t norm = vld1q_f64(norm_lanes);
        vst1q_f64(out.data() + i, vdivq_f64(vmulq_f64(w, t), vaddq_f64(t, norm)));
    }
    for (; i < n; ++i) {
        const double t = static_cast<double>(tf[i]);
        out[i] = weight * t / (t + length_norm[doc[i]]);
    }
}

PairCounts count_pairs(std::span<const double> a, std::span<const double> b) {
    PairCounts c;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const float64x2_t ai = vdupq_n_f64(a[i]);
        const float64x2_t bi = vdupq_n_f64(b[i]);
        std::size_t j = i + 1;
        for (; j + 2 <= n; j += 2) {
            const float64x2_t aj = vld1q_f64(a.data() + j);
            const float64x2_t bj = vld1q_f64(b.data() + j);
            const uint64x2_t lt_a = vcltq_f64(ai, aj);
            const uint64x2_t gt_a = vcgtq_f64(ai, aj);
            const uint64x2_t lt_b = vcltq_f64(bi, bj);
            const uint64x2_t gt_b = vcgtq_f64(bi, bj);
            const uint64x2_t eq_a = vceqq_f64(ai, aj);
            const uint64x2_t eq_b = vceqq_f64(bi, bj);
            const uint64x2_t conc = vorrq_u64(vandq_u64(lt_a, lt_b), vandq_u64(gt_a, gt_b));
            const uint64x2_t disc = vorrq_u64(vandq_u64(lt_a, gt_b), vandq_u64(gt_a, lt_b));
            const uint64x2_t both = vandq_u64(eq_a, eq_b);
            const uint64x2_t only_a = vbicq_u64(eq_a, eq_b);
            const uint64x2_t only_b = vbicq_u64(eq_b, eq_a);
            // Lanes are all-ones or zero; shifting down leaves 0/1 per lane.
            c.concordant += vaddvq_u64(vshrq_n_u64(conc, 63));
            c.discordant += vaddvq_u64(vshrq_n_u64(disc, 63));
            c.tied_both += vaddvq_u64(vshrq_n_u64(both, 63));
            c.tied_a_only += vaddvq_u64(vshrq_n_u64(only_a, 63));
            c.tied_b_only += vaddvq_u64(vshrq_n_u64(only_b, 63));
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

}  // namespace factalign::kernels::neon

#endif
