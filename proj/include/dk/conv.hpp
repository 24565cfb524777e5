#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

#include "dk/tensor.hpp"

namespace dk {

struct ConvSpec {
    int kernel = 3;      // K, tap grid resolution
    int stride = 1;
    int padding = 0;     // zero padding
    bool depthwise = false;
    int in_channels = 1;
    int out_channels = 1;

    int out_dim(int in) const {
        return (in + 2 * padding - kernel) / stride + 1;
    }

    void validate() const {
        if (kernel < 1 || stride < 1 || padding < 0 ||
            in_channels < 1 || out_channels < 1)
            throw std::invalid_argument("ConvSpec: invalid field");
        if (depthwise && in_channels != out_channels)
            throw std::invalid_argument("ConvSpec: depthwise needs in == out channels");
    }
};

// Learnable K'xK' weight grid per (out-channel, in-plane) plus the K tap
// lattice it is sampled at. For rigid convolutions scope == taps and the
// base lattice coincides with the stored grid.
template <typename T>
struct KernelScope {
    int taps = 3;      // K
    int scope = 3;     // K' >= K
    int out_ch = 1;
    int in_planes = 1; // in_channels, or 1 for depthwise
    std::vector<T> w;  // out_ch * in_planes * scope * scope

    KernelScope() = default;
    KernelScope(int k, int k_scope, int oc, int ip, T fill = T(0))
        : taps(k), scope(k_scope), out_ch(oc), in_planes(ip),
          w(static_cast<std::size_t>(oc) * ip * k_scope * k_scope, fill) {
        if (k < 1 || k_scope < k) throw std::invalid_argument("KernelScope: scope < taps");
    }

    T& at(int oc, int ip, int y, int x) {
        return w[((static_cast<std::size_t>(oc) * in_planes + ip) * scope + y) * scope + x];
    }
    T at(int oc, int ip, int y, int x) const {
        return w[((static_cast<std::size_t>(oc) * in_planes + ip) * scope + y) * scope + x];
    }

    /// Continuous bound of the scope per axis: coordinates live in [-bound, +bound].
    double bound() const { return (scope - 1) / 2.0; }

    // K tap coordinates, uniformly spread over the scope extent, symmetric
    // about the center. Coincides with the stored lattice when scope == taps.
    std::vector<Coord2> base_lattice() const {
        std::vector<Coord2> pts;
        pts.reserve(static_cast<std::size_t>(taps) * taps);
        const double b = bound();
        auto coord = [&](int a) {
            if (taps == 1) return 0.0;
            return -b + static_cast<double>(a) * (2.0 * b) / (taps - 1);
        };
        for (int y = 0; y < taps; ++y)
            for (int x = 0; x < taps; ++x)
                pts.push_back({coord(x), coord(y)});
        return pts;
    }
};

namespace detail {

template <typename T>
void check_conv_args(const Tensor<T>& input, const KernelScope<T>& kernel,
                     const ConvSpec& spec, bool require_rigid) {
    spec.validate();
    if (require_rigid && kernel.scope != kernel.taps)
        throw std::invalid_argument("conv2d: kernel scope must equal tap count");
    if (kernel.taps != spec.kernel)
        throw std::invalid_argument("conv2d: kernel size mismatch");
    if (input.c() != spec.in_channels || kernel.out_ch != spec.out_channels)
        throw std::invalid_argument("conv2d: channel mismatch");
    if (kernel.in_planes != (spec.depthwise ? 1 : spec.in_channels))
        throw std::invalid_argument("conv2d: kernel plane mismatch");
    if (spec.out_dim(input.h()) < 1 || spec.out_dim(input.w()) < 1)
        throw std::invalid_argument("conv2d: output size < 1");
}

}  // namespace detail

/// O_j = sum_k I_{j+k} W_k, zero padding, striding per spec.
template <typename T>
Tensor<T> conv2d_rigid(const Tensor<T>& input, const KernelScope<T>& kernel,
                       const ConvSpec& spec) {
    detail::check_conv_args(input, kernel, spec, true);
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w());
    const int k = spec.kernel;
    Tensor<T> out(input.n(), spec.out_channels, ho, wo);
    for (int n = 0; n < input.n(); ++n)
        for (int oc = 0; oc < spec.out_channels; ++oc)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    T acc = T(0);
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * spec.stride - spec.padding + ky;
                            if (iy < 0 || iy >= input.h()) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * spec.stride - spec.padding + kx;
                                if (ix < 0 || ix >= input.w()) continue;
                                acc += input(n, ic, iy, ix) * kernel.at(oc, ip, ky, kx);
                            }
                        }
                    }
                    out(n, oc, oy, ox) = acc;
                }
    return out;
}

/// O_j = max(sum_k I_{j+k} W_k, 0).
template <typename T>
Tensor<T> conv2d_relu(const Tensor<T>& input, const KernelScope<T>& kernel,
                      const ConvSpec& spec) {
    Tensor<T> out = conv2d_rigid(input, kernel, spec);
    for (T& v : out.data()) v = v > T(0) ? v : T(0);
    return out;
}

/// Exact reverse-mode gradients of conv2d_rigid.
template <typename T>
std::pair<Tensor<T>, KernelScope<T>> conv2d_backward(const Tensor<T>& input,
                                                     const KernelScope<T>& kernel,
                                                     const ConvSpec& spec,
                                                     const Tensor<T>& upstream) {
    detail::check_conv_args(input, kernel, spec, true);
    const int ho = spec.out_dim(input.h()), wo = spec.out_dim(input.w());
    if (upstream.n() != input.n() || upstream.c() != spec.out_channels ||
        upstream.h() != ho || upstream.w() != wo)
        throw std::invalid_argument("conv2d_backward: upstream shape mismatch");
    const int k = spec.kernel;
    Tensor<T> grad_input(input.n(), input.c(), input.h(), input.w());
    KernelScope<T> grad_w(kernel.taps, kernel.scope, kernel.out_ch, kernel.in_planes);
    for (int n = 0; n < input.n(); ++n)
        for (int oc = 0; oc < spec.out_channels; ++oc)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    const T g = upstream(n, oc, oy, ox);
                    if (g == T(0)) continue;
                    const int ic_lo = spec.depthwise ? oc : 0;
                    const int ic_hi = spec.depthwise ? oc + 1 : spec.in_channels;
                    for (int ic = ic_lo; ic < ic_hi; ++ic) {
                        const int ip = spec.depthwise ? 0 : ic;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * spec.stride - spec.padding + ky;
                            if (iy < 0 || iy >= input.h()) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * spec.stride - spec.padding + kx;
                                if (ix < 0 || ix >= input.w()) continue;
                                grad_input(n, ic, iy, ix) += g * kernel.at(oc, ip, ky, kx);
                                grad_w.at(oc, ip, ky, kx) += g * input(n, ic, iy, ix);
                            }
                        }
                    }
                }
    return {std::move(grad_input), std::move(grad_w)};
}

}  // namespace dk
