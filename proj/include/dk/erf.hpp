#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dk/deform.hpp"
#include "dk/sampler.hpp"
#include "dk/tensor.hpp"

namespace dk {

// Effective receptive field laboratory. Works on single-channel stride-1
// stacks with odd square kernels and "same" zero padding; computes the ERF
// two independent ways (reverse-mode sensitivity and path enumeration) so
// the two routes can check each other.

template <typename T>
struct ErfLayer {
    KernelScope<T> scope;            // 1x1 channel plane, scope >= taps
    std::vector<T> kernel_offsets;   // empty, or 2K^2 (one set for the layer)
    std::vector<T> data_offsets;     // empty, or 2K^2 (constant over locations)
    bool use_relu = false;

    explicit ErfLayer(int k = 3, int k_scope = -1)
        : scope(k, k_scope < 0 ? k : k_scope, 1, 1) {}

    /// Working K x K kernel: resampled when offsets are set or scope > taps.
    KernelScope<T> working_kernel() const {
        if (kernel_offsets.empty() && scope.scope == scope.taps) return scope;
        std::vector<T> o = kernel_offsets;
        if (o.empty()) o.assign(2 * scope.taps * scope.taps, T(0));
        return resample_kernel(scope, clip_offsets(o, scope));
    }
};

template <typename T>
using LinearStack = std::vector<ErfLayer<T>>;

template <typename T>
struct ErfMap {
    Tensor<T> values;  // (1,1,H,W) field of d out_j / d in_i
    int jy = 0, jx = 0;
    int depth = 0;
    int rf_half = 0;  // theoretical RF half-width, sum of (K-1)/2 per layer
};

namespace detail {

template <typename T>
int stack_rf_half(const LinearStack<T>& stack) {
    int h = 0;
    for (const auto& l : stack) h += (l.scope.taps - 1) / 2;
    return h;
}

// One tap of a layer expanded into its integer data displacements: the
// centered tap position plus the data offset, spread bilinearly.
struct PathTap {
    double value;  // working kernel value at this tap
    struct Corner { int dy, dx; double w; };
    std::vector<Corner> corners;
};

template <typename T>
std::vector<PathTap> layer_taps(const ErfLayer<T>& layer) {
    const int k = layer.scope.taps;
    if (k % 2 == 0)
        throw std::invalid_argument("erf: even kernels unsupported");
    const KernelScope<T> wk = layer.working_kernel();
    std::vector<PathTap> taps(static_cast<std::size_t>(k) * k);
    for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
            const int t = ky * k + kx;
            PathTap& pt = taps[t];
            pt.value = static_cast<double>(wk.at(0, 0, ky, kx));
            double dy = ky - (k - 1) / 2, dx = kx - (k - 1) / 2;
            if (!layer.data_offsets.empty()) {
                dx += static_cast<double>(layer.data_offsets[2 * t]);
                dy += static_cast<double>(layer.data_offsets[2 * t + 1]);
            }
            const int y0 = static_cast<int>(std::floor(dy));
            const int x0 = static_cast<int>(std::floor(dx));
            const double fy = dy - y0, fx = dx - x0;
            for (int a = 0; a < 2; ++a) {
                const double wy = a == 0 ? 1.0 - fy : fy;
                if (wy == 0.0) continue;
                for (int b = 0; b < 2; ++b) {
                    const double wx = b == 0 ? 1.0 - fx : fx;
                    if (wx == 0.0) continue;
                    pt.corners.push_back({y0 + a, x0 + b, wy * wx});
                }
            }
        }
    return taps;
}

template <typename T>
void enumeration_guard(const LinearStack<T>& stack) {
    double paths = 1.0;
    for (const auto& l : stack) {
        const int k = l.scope.taps;
        paths *= static_cast<double>(k) * k * (l.data_offsets.empty() ? 1.0 : 4.0);
        if (paths > 1e8)
            throw std::runtime_error("erf_enumerate: path count exceeds tractability guard");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reverse-mode route: differentiate the real forward graph.
// ---------------------------------------------------------------------------

/// Forward one layer on a (1,1,H,W) plane, same padding, stride 1.
template <typename T>
Tensor<T> erf_layer_forward(const Tensor<T>& x, const ErfLayer<T>& layer) {
    const auto taps = detail::layer_taps(layer);
    Tensor<T> out(1, 1, x.h(), x.w());
    for (int oy = 0; oy < x.h(); ++oy)
        for (int ox = 0; ox < x.w(); ++ox) {
            double acc = 0.0;
            for (const auto& pt : taps)
                for (const auto& c : pt.corners) {
                    const int iy = oy + c.dy, ix = ox + c.dx;
                    if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                    acc += pt.value * c.w * static_cast<double>(x(0, 0, iy, ix));
                }
            T v = static_cast<T>(acc);
            if (layer.use_relu && v < T(0)) v = T(0);
            out(0, 0, oy, ox) = v;
        }
    return out;
}

/// Exact d out(jy,jx) / d input, through the recorded ReLU gates.
template <typename T>
ErfMap<T> erf_backprop(const LinearStack<T>& stack, const Tensor<T>& input, int jy, int jx) {
    if (jy < 0 || jy >= input.h() || jx < 0 || jx >= input.w())
        throw std::invalid_argument("erf_backprop: output coordinate out of bounds");
    const int h = input.h(), w = input.w();
    // forward, recording pre-activations for the gates
    std::vector<Tensor<T>> acts;
    acts.push_back(input);
    std::vector<std::vector<std::uint8_t>> gates(stack.size());
    for (std::size_t s = 0; s < stack.size(); ++s) {
        ErfLayer<T> lin = stack[s];
        lin.use_relu = false;
        Tensor<T> pre = erf_layer_forward(acts.back(), lin);
        if (stack[s].use_relu) {
            gates[s].resize(pre.size());
            for (std::size_t i = 0; i < pre.size(); ++i) {
                gates[s][i] = pre.data()[i] > T(0);
                if (!gates[s][i]) pre.data()[i] = T(0);
            }
        }
        acts.push_back(std::move(pre));
    }
    // backward from a unit seed at j
    Tensor<T> g(1, 1, h, w);
    g(0, 0, jy, jx) = T(1);
    for (int s = static_cast<int>(stack.size()) - 1; s >= 0; --s) {
        if (stack[s].use_relu)
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!gates[s][i]) g.data()[i] = T(0);
        const auto taps = detail::layer_taps(stack[s]);
        Tensor<T> gin(1, 1, h, w);
        for (int oy = 0; oy < h; ++oy)
            for (int ox = 0; ox < w; ++ox) {
                const T gv = g(0, 0, oy, ox);
                if (gv == T(0)) continue;
                for (const auto& pt : taps)
                    for (const auto& c : pt.corners) {
                        const int iy = oy + c.dy, ix = ox + c.dx;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                        gin(0, 0, iy, ix) += static_cast<T>(
                            static_cast<double>(gv) * pt.value * c.w);
                    }
            }
        g = std::move(gin);
    }
    return {std::move(g), jy, jx, static_cast<int>(stack.size()),
            detail::stack_rf_half(stack)};
}

// ---------------------------------------------------------------------------
// Enumeration route: closed-form sum over kernel-position tuples.
// ---------------------------------------------------------------------------

namespace detail {

// Recurse from the top layer down, carrying the integer coordinate the
// current path reads from; bilinear corners keep it integer at every layer.
inline double enum_paths(const std::vector<std::vector<PathTap>>& layers, int s,
                         int cy, int cx, double prod, int iy, int ix, int pinned_layer,
                         int pinned_tap) {
    if (s < 0) return (cy == iy && cx == ix) ? prod : 0.0;
    if (s == pinned_layer) {
        // pinned layer contributes a single kernel value and no displacement
        return enum_paths(layers, s - 1, cy, cx,
                          prod * layers[s][pinned_tap].value, iy, ix,
                          pinned_layer, pinned_tap);
    }
    double acc = 0.0;
    for (const auto& pt : layers[s]) {
        if (pt.value == 0.0) {
            // still counts as a path; contributes zero
            continue;
        }
        for (const auto& c : pt.corners)
            acc += enum_paths(layers, s - 1, cy + c.dy, cx + c.dx,
                              prod * pt.value * c.w, iy, ix, pinned_layer, pinned_tap);
    }
    return acc;
}

template <typename T>
std::vector<std::vector<PathTap>> expand_stack(const LinearStack<T>& stack) {
    enumeration_guard(stack);
    std::vector<std::vector<PathTap>> layers;
    layers.reserve(stack.size());
    for (const auto& l : stack) layers.push_back(layer_taps(l));
    return layers;
}

}  // namespace detail

/// Exact path sum for R(i; j) on a linear stack.
template <typename T>
double erf_enumerate(const LinearStack<T>& stack, int iy, int ix, int jy, int jx) {
    const auto layers = detail::expand_stack(stack);
    return detail::enum_paths(layers, static_cast<int>(layers.size()) - 1,
                              jy, jx, 1.0, iy, ix, -1, -1);
}

/// R(i; j, k~_m): layer m (1-based) replaced by the single value at tap
/// (ky, kx), contributing no displacement.
template <typename T>
double erf_enumerate_pinned(const LinearStack<T>& stack, int iy, int ix, int jy, int jx,
                            int m, int ky, int kx) {
    if (m < 1 || m > static_cast<int>(stack.size()))
        throw std::invalid_argument("erf_enumerate_pinned: m out of range");
    const int k = stack[m - 1].scope.taps;
    if (ky < 0 || ky >= k || kx < 0 || kx >= k)
        throw std::invalid_argument("erf_enumerate_pinned: tap out of range");
    const auto layers = detail::expand_stack(stack);
    return detail::enum_paths(layers, static_cast<int>(layers.size()) - 1,
                              jy, jx, 1.0, iy, ix, m - 1, ky * k + kx);
}

struct DecomposeResult {
    double lhs;
    double rhs;
    double abs_diff;
};

/// Checks R(i;j) == sum_{k_m} R(i; j + k_m, k_m) numerically.
template <typename T>
DecomposeResult erf_decompose_check(const LinearStack<T>& stack, int iy, int ix,
                                    int jy, int jx, int m = -1) {
    if (m < 0) m = static_cast<int>(stack.size());
    if (!stack[m - 1].data_offsets.empty())
        throw std::invalid_argument("erf_decompose_check: layer m must have no data offsets");
    const double lhs = erf_enumerate(stack, iy, ix, jy, jx);
    const int k = stack[m - 1].scope.taps;
    double rhs = 0.0;
    for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx)
            rhs += erf_enumerate_pinned(stack, iy, ix, jy + ky - (k - 1) / 2,
                                        jx + kx - (k - 1) / 2, m, ky, kx);
    return {lhs, rhs, std::abs(lhs - rhs)};
}

/// Path sum with kernel offsets resolved through the bilinear sampler.
template <typename T>
double erf_dk(const LinearStack<T>& stack, int iy, int ix, int jy, int jx) {
    return erf_enumerate(stack, iy, ix, jy, jx);
}

/// Path sum with data offsets shifting (and, when fractional, bilinearly
/// spreading) the data coordinates.
template <typename T>
double erf_dc(const LinearStack<T>& stack, int iy, int ix, int jy, int jx) {
    return erf_enumerate(stack, iy, ix, jy, jx);
}

// Scalable route: the path sum is an n-fold cross-correlation over
// displacement distributions, computed layer by layer on a padded field.
template <typename T>
ErfMap<T> erf_field_dp(const LinearStack<T>& stack, int jy, int jx, int h, int w) {
    int margin = 1;
    for (const auto& l : stack) {
        double m = (l.scope.taps - 1) / 2 + 1;
        if (!l.data_offsets.empty())
            for (T d : l.data_offsets)
                m = std::max(m, (l.scope.taps - 1) / 2 + std::abs(static_cast<double>(d)) + 1.0);
        margin += static_cast<int>(std::ceil(m));
    }
    const int ph = h + 2 * margin, pw = w + 2 * margin;
    std::vector<double> cur(static_cast<std::size_t>(ph) * pw, 0.0);
    cur[static_cast<std::size_t>(jy + margin) * pw + (jx + margin)] = 1.0;
    for (int s = static_cast<int>(stack.size()) - 1; s >= 0; --s) {
        const auto taps = detail::layer_taps(stack[s]);
        std::vector<double> next(cur.size(), 0.0);
        for (int y = 0; y < ph; ++y)
            for (int x = 0; x < pw; ++x) {
                const double v = cur[static_cast<std::size_t>(y) * pw + x];
                if (v == 0.0) continue;
                for (const auto& pt : taps)
                    for (const auto& c : pt.corners) {
                        const int ny = y + c.dy, nx = x + c.dx;
                        if (ny < 0 || ny >= ph || nx < 0 || nx >= pw) continue;
                        next[static_cast<std::size_t>(ny) * pw + nx] += v * pt.value * c.w;
                    }
            }
        cur = std::move(next);
    }
    ErfMap<T> map{Tensor<T>(1, 1, h, w), jy, jx, static_cast<int>(stack.size()),
                  detail::stack_rf_half(stack)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            map.values(0, 0, y, x) =
                static_cast<T>(cur[static_cast<std::size_t>(y + margin) * pw + (x + margin)]);
    return map;
}

/// Full enumerated map (one erf_enumerate call per input coordinate).
template <typename T>
ErfMap<T> erf_enumerate_map(const LinearStack<T>& stack, int jy, int jx, int h, int w) {
    ErfMap<T> map{Tensor<T>(1, 1, h, w), jy, jx, static_cast<int>(stack.size()),
                  detail::stack_rf_half(stack)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            map.values(0, 0, y, x) = static_cast<T>(erf_enumerate(stack, y, x, jy, jx));
    return map;
}

// ---------------------------------------------------------------------------
// Map statistics and export.
// ---------------------------------------------------------------------------

struct ErfStats {
    double center_y, center_x;     // |value|-mass center
    double second_moment;          // trace of the |value| spatial covariance
    int support_area;              // entries with |v| > 1e-3 * max
    double density;                // support_area / theoretical RF box area
};

template <typename T>
ErfStats erf_stats(const ErfMap<T>& map) {
    double total = 0.0, max_abs = 0.0;
    for (T v : map.values.data()) {
        total += std::abs(static_cast<double>(v));
        max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    }
    if (total == 0.0) throw std::runtime_error("erf_stats: all-zero map");
    double cy = 0.0, cx = 0.0;
    for (int y = 0; y < map.values.h(); ++y)
        for (int x = 0; x < map.values.w(); ++x) {
            const double a = std::abs(static_cast<double>(map.values(0, 0, y, x)));
            cy += a * y;
            cx += a * x;
        }
    cy /= total;
    cx /= total;
    double var = 0.0;
    int support = 0;
    const double cutoff = 1e-3 * max_abs;
    for (int y = 0; y < map.values.h(); ++y)
        for (int x = 0; x < map.values.w(); ++x) {
            const double a = std::abs(static_cast<double>(map.values(0, 0, y, x)));
            var += a * ((y - cy) * (y - cy) + (x - cx) * (x - cx));
            if (a > cutoff) ++support;
        }
    const double box = 2.0 * map.rf_half + 1.0;
    return {cy, cx, var / total, support, support / (box * box)};
}

/// 8-bit PGM (P5) of max-normalized magnitudes.
template <typename T>
void save_pgm(const ErfMap<T>& map, const std::string& path) {
    double max_abs = 0.0;
    for (T v : map.values.data())
        max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_pgm: cannot open " + path);
    out << "P5\n" << map.values.w() << ' ' << map.values.h() << "\n255\n";
    for (T v : map.values.data()) {
        const double a = max_abs > 0.0 ? std::abs(static_cast<double>(v)) / max_abs : 0.0;
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(a * 255.0))));
    }
    if (!out) throw std::runtime_error("save_pgm: write failed: " + path);
}

}  // namespace dk
