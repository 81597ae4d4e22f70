#include <atomic>
#include <cstdlib>
#include <string>

#include "factalign/kernels.hpp"

namespace factalign::kernels {

std::string_view to_string(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return "scalar";
        case Isa::avx2:
            return "avx2";
        case Isa::neon:
            return "neon";
    }
    return "?";
}

bool isa_available(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
            return __builtin_cpu_supports("avx2");
#else
            return false;
#endif
        case Isa::neon:
#if defined(__aarch64__)
            return true;
#else
            return false;
#endif
    }
    return false;
}

namespace {

Isa detect() {
    if (const char* env = std::getenv("FACTALIGN_SIMD")) {
        const std::string want = env;
        for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
            if (want == to_string(isa) && isa_available(isa)) return isa;
        }
    }
    if (isa_available(Isa::avx2)) return Isa::avx2;
    if (isa_available(Isa::neon)) return Isa::neon;
    return Isa::scalar;
}

std::atomic<int> g_override{-1};

}  // namespace

Isa active_isa() {
    if (const int o = g_override.load(std::memory_order_relaxed); o >= 0) return static_cast<Isa>(o);
    static const Isa detected = detect();
    return detected;
}

void set_isa_override(std::optional<Isa> isa) {
    if (isa && !isa_available(*isa)) isa = Isa::scalar;
    g_override.store(isa ? static_cast<int>(*isa) : -1, std::memory_order_relaxed);
}

void bm25_posting_weights(std::span<const std::uint32_t> doc, std::span<const std::uint32_t> tf,
                          std::span<const double> length_norm, double weight, std::span<double> out) {
    switch (active_isa()) {
#if defined(__x86_64__) || defined(_M_X64)
        case Isa::avx2:
            return avx2::bm25_posting_weights(doc, tf, length_norm, weight, out);
#endif
#if defined(__aarch64__)
        case Isa::neon:
            return neon::bm25_posting_weights(doc, tf, length_norm, weight, out);
#endif
        default:
            return scalar::bm25_posting_weights(doc, tf, length_norm, weight, out);
    }
}

PairCounts count_pairs(std::span<const double> a, std::span<const double> b) {
    switch (active_isa()) {
#if defined(__x86_64__) || defined(_M_X64)
        case Isa::avx2:
            return avx2::count_pairs(a, b);
#endif
#if defined(__aarch64__)
        case Isa::neon:
            return neon::count_pairs(a, b);
#endif
        default:
            return scalar::count_pairs(a, b);
    }
}

}  // namespace factalign::kernels
