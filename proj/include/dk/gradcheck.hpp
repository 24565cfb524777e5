#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dk/deform.hpp"
#include "dk/random.hpp"

namespace dk {

// Central finite-difference oracle for every gradient-bearing operation.
// All checks run in double with h = 1e-6; offset gradients tolerate 1e-4
// because the piecewise-linear interpolation amplifies truncation error.

struct GradCheckReport {
    std::string op_id;
    double max_rel_err = 0.0;
    double mean_rel_err = 0.0;
    int excluded = 0;  // kink-adjacent sample points redrawn during setup
    int checked = 0;
    double tolerance = 0.0;
    bool pass = false;
};

/// (f(p + h e_i) - f(p - h e_i)) / 2h per component.
inline std::vector<double> finite_diff(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& params, double h = 1e-6) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff: h must be positive");
    std::vector<double> grad(params.size());
    std::vector<double> p = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        p[i] = params[i] + h;
        const double fp = f(p);
        p[i] = params[i] - h;
        const double fm = f(p);
        p[i] = params[i];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_diff: non-finite function value");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

namespace gradcheck_detail {

inline double rel_err(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    return std::abs(analytic - numeric) / scale;
}

inline GradCheckReport compare(const std::string& op_id,
                               const std::vector<double>& analytic,
                               const std::vector<double>& numeric,
                               int excluded, double tolerance) {
    GradCheckReport r;
    r.op_id = op_id;
    r.excluded = excluded;
    r.tolerance = tolerance;
    r.checked = static_cast<int>(analytic.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double e = rel_err(analytic[i], numeric[i]);
        r.max_rel_err = std::max(r.max_rel_err, e);
        sum += e;
    }
    r.mean_rel_err = analytic.empty() ? 0.0 : sum / analytic.size();
    r.pass = r.max_rel_err <= tolerance;
    return r;
}

// Shared fixture: a small depthwise layout with a 4x4 scope under a 3x3
// kernel, plus a fixed random upstream weighting so the loss is scalar.
struct Fixture {
    Tensor<double> input;
    KernelScope<double> scope;  // 2ch depthwise, 3 taps, 4 scope
    ConvSpec spec;
    std::vector<double> offsets;  // kink-safe
    Tensor<double> upstream;
    int redraws = 0;
};

// Redraw offsets until every sampled coordinate is at least `margin` away
// from every integer lattice line and from the clip bounds.
inline std::vector<double> safe_offsets(Rng& rng, const KernelScope<double>& scope,
                                        double lo, double hi, double margin,
                                        int* redraws) {
    const auto base = scope.base_lattice();
    std::vector<double> o(base.size() * 2);
    const double b = scope.bound();
    for (std::size_t t = 0; t < base.size(); ++t)
        for (int axis = 0; axis < 2; ++axis) {
            const double base_c = axis == 0 ? base[t].x : base[t].y;
            for (;;) {
                const double d = rng.uniform(lo, hi);
                const double a = base_c + d;
                const double u = a + b;
                const double frac = u - std::floor(u);
                const bool near_lattice = frac < margin || frac > 1.0 - margin;
                const bool near_bound = a > b - margin || a < -b + margin;
                if (!near_lattice && !near_bound) {
                    o[2 * t + axis] = d;
                    break;
                }
                if (redraws) ++(*redraws);
            }
        }
    return o;
}

inline Fixture make_fixture(std::uint64_t seed) {
    Rng rng(seed);
    Fixture f{Tensor<double>(1, 2, 6, 6), KernelScope<double>(3, 4, 2, 1),
              ConvSpec{}, {}, Tensor<double>(), 0};
    f.spec = {3, 1, 1, true, 2, 2};
    for (auto& v : f.input.data()) v = rng.normal();
    for (auto& v : f.scope.w) v = rng.normal();
    f.offsets = safe_offsets(rng, f.scope, -0.6, 0.6, 1e-3, &f.redraws);
    f.upstream = Tensor<double>(1, 2, 6, 6);
    // small upstream keeps |loss| ~ 0.1 so the finite-difference rounding
    // noise (~eps |loss| / h) stays below tolerance times the 1e-4 floor
    for (auto& v : f.upstream.data()) v = 0.005 * rng.normal();
    return f;
}

inline Tensor<double> offsets_tensor(const std::vector<double>& o) {
    Tensor<double> t(1, static_cast<int>(o.size()), 1, 1);
    for (std::size_t i = 0; i < o.size(); ++i) t(0, static_cast<int>(i), 0, 0) = o[i];
    return t;
}

inline double weighted_sum(const Tensor<double>& out, const Tensor<double>& weights) {
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i)
        acc += out.data()[i] * weights.data()[i];
    return acc;
}

}  // namespace gradcheck_detail

/// Randomized seeded instance for one registered operation.
inline GradCheckReport gradcheck_op(const std::string& op_id, std::uint64_t seed,
                                    double tolerance) {
    using namespace gradcheck_detail;

    if (op_id == "conv_weights" || op_id == "conv_input") {
        Rng rng(seed);
        Tensor<double> input(1, 2, 5, 5);
        for (auto& v : input.data()) v = rng.normal();
        KernelScope<double> kernel(3, 3, 2, 2);
        for (auto& v : kernel.w) v = rng.normal();
        ConvSpec spec{3, 1, 1, false, 2, 2};
        Tensor<double> u(1, 2, 5, 5);
        for (auto& v : u.data()) v = 0.005 * rng.normal();
        auto [gin, gw] = conv2d_backward(input, kernel, spec, u);
        if (op_id == "conv_weights") {
            auto f = [&](const std::vector<double>& p) {
                KernelScope<double> k2 = kernel;
                k2.w = p;
                return weighted_sum(conv2d_rigid(input, k2, spec), u);
            };
            return compare(op_id, gw.w, finite_diff(f, kernel.w), 0, tolerance);
        }
        auto f = [&](const std::vector<double>& p) {
            Tensor<double> in2 = input;
            in2.data() = p;
            return weighted_sum(conv2d_rigid(in2, kernel, spec), u);
        };
        return compare(op_id, gin.data(), finite_diff(f, input.data()), 0, tolerance);
    }

    if (op_id == "dk_offsets" || op_id == "dk_weights") {
        Fixture fx = make_fixture(seed);
        const KernelScope<double> sampled = resample_kernel(fx.scope, fx.offsets);
        auto [gin, gw] = conv2d_backward(fx.input, sampled, fx.spec, fx.upstream);
        const SamplerGrads<double> sg = resample_backward(fx.scope, fx.offsets, gw);
        if (op_id == "dk_offsets") {
            auto f = [&](const std::vector<double>& p) {
                return weighted_sum(
                    dk_forward_global_fixed(fx.input, fx.scope, offsets_tensor(p), fx.spec),
                    fx.upstream);
            };
            return compare(op_id, sg.offset_grad, finite_diff(f, fx.offsets),
                           fx.redraws, tolerance);
        }
        auto f = [&](const std::vector<double>& p) {
            KernelScope<double> s2 = fx.scope;
            s2.w = p;
            return weighted_sum(
                dk_forward_global_fixed(fx.input, s2, offsets_tensor(fx.offsets), fx.spec),
                fx.upstream);
        };
        return compare(op_id, sg.scope_grad.w, finite_diff(f, fx.scope.w),
                       fx.redraws, tolerance);
    }

    if (op_id == "dk_input" || op_id == "generator_params") {
        Fixture fx = make_fixture(seed);
        // generator biased toward the kink-safe offsets, with small weights
        // so finite-difference steps cannot cross a lattice line
        OffsetGeneratorGlobal<double> gen(3, 2);
        Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
        for (auto& v : gen.weight.data) v = 0.01 * rng.normal();
        for (std::size_t i = 0; i < gen.bias.size(); ++i)
            gen.bias[i] = fx.offsets[i];
        const DkGlobalGrads<double> g =
            dk_backward_global(fx.input, fx.scope, gen, fx.spec, fx.upstream);
        if (op_id == "dk_input") {
            auto f = [&](const std::vector<double>& p) {
                Tensor<double> in2 = fx.input;
                in2.data() = p;
                return weighted_sum(dk_forward_global(in2, fx.scope, gen, fx.spec).out,
                                    fx.upstream);
            };
            return compare(op_id, g.input.data(), finite_diff(f, fx.input.data()),
                           fx.redraws, tolerance);
        }
        std::vector<double> params = gen.weight.data;
        params.insert(params.end(), gen.bias.begin(), gen.bias.end());
        std::vector<double> analytic = g.gen_weight.data;
        analytic.insert(analytic.end(), g.gen_bias.begin(), g.gen_bias.end());
        auto f = [&](const std::vector<double>& p) {
            OffsetGeneratorGlobal<double> g2 = gen;
            std::copy(p.begin(), p.end() - static_cast<long>(g2.bias.size()),
                      g2.weight.data.begin());
            std::copy(p.end() - static_cast<long>(g2.bias.size()), p.end(),
                      g2.bias.begin());
            return weighted_sum(dk_forward_global(fx.input, fx.scope, g2, fx.spec).out,
                                fx.upstream);
        };
        return compare(op_id, analytic, finite_diff(f, params), fx.redraws, tolerance);
    }

    if (op_id == "dc_offsets") {
        Rng rng(seed);
        Tensor<double> input(1, 1, 6, 6);
        for (auto& v : input.data()) v = rng.normal();
        KernelScope<double> kernel(3, 3, 1, 1);
        for (auto& v : kernel.w) v = rng.normal();
        ConvSpec spec{3, 1, 1, true, 1, 1};
        Tensor<double> field(1, 18, 6, 6);
        int redraws = 0;
        for (auto& v : field.data()) {
            for (;;) {
                const double d = rng.uniform(-0.9, 0.9);
                const double frac = d - std::floor(d);
                if (frac > 1e-3 && frac < 1.0 - 1e-3) {
                    v = d;
                    break;
                }
                ++redraws;
            }
        }
        Tensor<double> u(1, 1, 6, 6);
        for (auto& v : u.data()) v = 0.005 * rng.normal();
        const DcGrads<double> g = dc_backward(input, kernel, field, spec, u);
        auto f = [&](const std::vector<double>& p) {
            Tensor<double> f2 = field;
            f2.data() = p;
            return weighted_sum(dc_forward(input, kernel, f2, spec), u);
        };
        return compare(op_id, g.field.data(), finite_diff(f, field.data()),
                       redraws, tolerance);
    }

    throw std::invalid_argument("gradcheck_op: unknown op id '" + op_id + "'");
}

/// Every gradient-bearing operation with a registered check.
inline const std::vector<std::string>& gradcheck_registry() {
    static const std::vector<std::string> ops = {
        "conv_weights", "conv_input", "dk_offsets", "dk_weights",
        "dk_input",     "dc_offsets", "generator_params",
    };
    return ops;
}

/// Default tolerance per op: exact-linear flows at 1e-6, offset flows 1e-4.
inline double gradcheck_default_tol(const std::string& op_id) {
    if (op_id == "conv_weights" || op_id == "conv_input" || op_id == "dk_weights")
        return 1e-6;
    return 1e-4;
}

}  // namespace dk
