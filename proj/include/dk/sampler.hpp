#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "dk/conv.hpp"

namespace dk {

// Bilinear kernel-space sampler B. Coordinates are continuous, centered at
// the scope center; stored lattice points sit at integer spacing spanning
// [-(K'-1)/2, +(K'-1)/2] per axis. Offsets are 2K^2 values laid out
// (dx, dy) per tap in row-major tap order and are shared across channels.

template <typename T>
double tent(T d) {
    const double a = 1.0 - std::abs(static_cast<double>(d));
    return a > 0.0 ? a : 0.0;
}

template <typename T>
struct ClippedOffsets {
    std::vector<T> offsets;             // clamped so every tap + offset is in scope
    std::vector<std::uint8_t> clamped;  // per component, 1 if the clamp moved it
};

template <typename T>
ClippedOffsets<T> clip_offsets_masked(const std::vector<T>& offsets,
                                      const KernelScope<T>& scope) {
    const auto base = scope.base_lattice();
    if (offsets.size() != base.size() * 2)
        throw std::invalid_argument("clip_offsets: expected 2K^2 offsets");
    const double b = scope.bound();
    ClippedOffsets<T> out{offsets, std::vector<std::uint8_t>(offsets.size(), 0)};
    for (std::size_t t = 0; t < base.size(); ++t) {
        const double ax = base[t].x + static_cast<double>(offsets[2 * t]);
        const double ay = base[t].y + static_cast<double>(offsets[2 * t + 1]);
        if (ax > b) { out.offsets[2 * t] = static_cast<T>(b - base[t].x); out.clamped[2 * t] = 1; }
        if (ax < -b) { out.offsets[2 * t] = static_cast<T>(-b - base[t].x); out.clamped[2 * t] = 1; }
        if (ay > b) { out.offsets[2 * t + 1] = static_cast<T>(b - base[t].y); out.clamped[2 * t + 1] = 1; }
        if (ay < -b) { out.offsets[2 * t + 1] = static_cast<T>(-b - base[t].y); out.clamped[2 * t + 1] = 1; }
    }
    return out;
}

template <typename T>
std::vector<T> clip_offsets(const std::vector<T>& offsets, const KernelScope<T>& scope) {
    return clip_offsets_masked(offsets, scope).offsets;
}

namespace detail {

// Axis nodes touched by a sample at continuous coordinate `coord`
// (scope-centered). At most two; exactly one on lattice points.
struct AxisTaps {
    int idx[2];
    double weight[2];
    int count;
};

inline AxisTaps axis_taps(double coord, int scope) {
    const double u = coord + (scope - 1) / 2.0;  // lattice-index coordinate
    int i0 = static_cast<int>(std::floor(u));
    if (i0 < 0) i0 = 0;               // clipping guarantees u in [0, scope-1]
    if (i0 > scope - 1) i0 = scope - 1;
    const double f = u - i0;
    AxisTaps t{};
    t.idx[0] = i0;
    t.weight[0] = 1.0 - f;
    t.count = 1;
    if (f > 0.0 && i0 + 1 < scope) {
        t.idx[1] = i0 + 1;
        t.weight[1] = f;
        t.count = 2;
    }
    return t;
}

// d tent(u - i) / du per touched node, the piecewise case split with the
// zero branch taking precedence at |u - i| >= 1 and the -1 branch at u >= i.
inline AxisTaps axis_taps_grad(double coord, int scope) {
    AxisTaps t = axis_taps(coord, scope);
    t.weight[0] = -1.0;  // u >= idx[0] always holds
    if (t.count == 2) t.weight[1] = 1.0;
    return t;
}

}  // namespace detail

/// W'_t = sum_{k' in scope} B(k_t + dk_t, k') W_{k'}; result has scope == taps.
template <typename T>
KernelScope<T> resample_kernel(const KernelScope<T>& scope, const std::vector<T>& offsets) {
    const auto base = scope.base_lattice();
    if (offsets.size() != base.size() * 2)
        throw std::invalid_argument("resample_kernel: expected 2K^2 offsets");
    KernelScope<T> out(scope.taps, scope.taps, scope.out_ch, scope.in_planes);
    for (std::size_t t = 0; t < base.size(); ++t) {
        const auto tx = detail::axis_taps(base[t].x + static_cast<double>(offsets[2 * t]), scope.scope);
        const auto ty = detail::axis_taps(base[t].y + static_cast<double>(offsets[2 * t + 1]), scope.scope);
        const int ky = static_cast<int>(t) / scope.taps;
        const int kx = static_cast<int>(t) % scope.taps;
        for (int oc = 0; oc < scope.out_ch; ++oc)
            for (int ip = 0; ip < scope.in_planes; ++ip) {
                double acc = 0.0;
                for (int a = 0; a < ty.count; ++a)
                    for (int b = 0; b < tx.count; ++b)
                        acc += ty.weight[a] * tx.weight[b] *
                               static_cast<double>(scope.at(oc, ip, ty.idx[a], tx.idx[b]));
                out.at(oc, ip, ky, kx) = static_cast<T>(acc);
            }
    }
    return out;
}

template <typename T>
struct SamplerGrads {
    KernelScope<T> scope_grad;   // d loss / d stored scope weights
    std::vector<T> offset_grad;  // d loss / d (dx, dy) per tap, 2K^2
};

// Reverse-mode through the sampler: grad_sampled holds d loss / d W'_t per
// (oc, ip, tap). Components flagged in `clamped` get zero offset gradient
// (projection subgradient at the clip bound).
template <typename T>
SamplerGrads<T> resample_backward(const KernelScope<T>& scope, const std::vector<T>& offsets,
                                  const KernelScope<T>& grad_sampled,
                                  const std::vector<std::uint8_t>* clamped = nullptr) {
    const auto base = scope.base_lattice();
    if (offsets.size() != base.size() * 2)
        throw std::invalid_argument("resample_backward: expected 2K^2 offsets");
    SamplerGrads<T> g{KernelScope<T>(scope.taps, scope.scope, scope.out_ch, scope.in_planes),
                      std::vector<T>(offsets.size(), T(0))};
    for (std::size_t t = 0; t < base.size(); ++t) {
        const double ax = base[t].x + static_cast<double>(offsets[2 * t]);
        const double ay = base[t].y + static_cast<double>(offsets[2 * t + 1]);
        const auto tx = detail::axis_taps(ax, scope.scope);
        const auto ty = detail::axis_taps(ay, scope.scope);
        const auto gx = detail::axis_taps_grad(ax, scope.scope);
        const auto gy = detail::axis_taps_grad(ay, scope.scope);
        const int ky = static_cast<int>(t) / scope.taps;
        const int kx = static_cast<int>(t) % scope.taps;
        double acc_dx = 0.0, acc_dy = 0.0;
        for (int oc = 0; oc < scope.out_ch; ++oc)
            for (int ip = 0; ip < scope.in_planes; ++ip) {
                const double gs = static_cast<double>(grad_sampled.at(oc, ip, ky, kx));
                if (gs == 0.0) continue;
                for (int a = 0; a < ty.count; ++a)
                    for (int b = 0; b < tx.count; ++b)
                        g.scope_grad.at(oc, ip, ty.idx[a], tx.idx[b]) +=
                            static_cast<T>(gs * ty.weight[a] * tx.weight[b]);
                // dB/d(dx) = tent_y * case(x); dB/d(dy) symmetric
                for (int a = 0; a < ty.count; ++a)
                    for (int b = 0; b < gx.count; ++b)
                        acc_dx += gs * ty.weight[a] * gx.weight[b] *
                                  static_cast<double>(scope.at(oc, ip, ty.idx[a], gx.idx[b]));
                for (int a = 0; a < gy.count; ++a)
                    for (int b = 0; b < tx.count; ++b)
                        acc_dy += gs * gy.weight[a] * tx.weight[b] *
                                  static_cast<double>(scope.at(oc, ip, gy.idx[a], tx.idx[b]));
            }
        if (!clamped || !(*clamped)[2 * t]) g.offset_grad[2 * t] = static_cast<T>(acc_dx);
        if (!clamped || !(*clamped)[2 * t + 1]) g.offset_grad[2 * t + 1] = static_cast<T>(acc_dy);
    }
    return g;
}

}  // namespace dk
