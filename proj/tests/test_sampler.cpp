#include <doctest.h>

#include <cmath>

#include "dk/random.hpp"
#include "dk/sampler.hpp"

using dk::KernelScope;

namespace {

// Sum of bilinear weights over the scope lattice at a continuous coordinate.
double weight_sum(double ax, double ay, int scope) {
    const double b = (scope - 1) / 2.0;
    double s = 0.0;
    for (int y = 0; y < scope; ++y)
        for (int x = 0; x < scope; ++x)
            s += dk::tent(ax - (-b + x)) * dk::tent(ay - (-b + y));
    return s;
}

int nonzero_weights(double ax, double ay, int scope) {
    const double b = (scope - 1) / 2.0;
    int n = 0;
    for (int y = 0; y < scope; ++y)
        for (int x = 0; x < scope; ++x)
            if (dk::tent(ax - (-b + x)) * dk::tent(ay - (-b + y)) != 0.0) ++n;
    return n;
}

KernelScope<double> scope_2x2_1234() {
    // 1-tap kernel drawing from the 2x2 grid [[1,2],[3,4]]
    KernelScope<double> s(1, 2, 1, 1);
    s.at(0, 0, 0, 0) = 1.0;
    s.at(0, 0, 0, 1) = 2.0;
    s.at(0, 0, 1, 0) = 3.0;
    s.at(0, 0, 1, 1) = 4.0;
    return s;
}

}  // namespace

TEST_CASE("resample_kernel hand examples") {
    // zero offsets, K'==K: exact identity
    dk::Rng rng(2);
    KernelScope<double> k(3, 3, 2, 1);
    for (auto& v : k.w) v = rng.normal();
    const std::vector<double> zero(2 * 9, 0.0);
    CHECK(dk::resample_kernel(k, zero).w == k.w);

    // scope [[1,2],[3,4]], sample at the scope center -> 2.5
    const KernelScope<double> s = scope_2x2_1234();
    const std::vector<double> center(2, 0.0);  // 1 tap already at center
    CHECK(dk::resample_kernel(s, center).w[0] == doctest::Approx(2.5).epsilon(1e-15));

    // sampling exactly at a stored lattice point returns its value
    const std::vector<double> to_node = {-0.5, 0.5};  // node holding 3
    CHECK(dk::resample_kernel(s, to_node).w[0] == 3.0);
}

TEST_CASE("clip_offsets") {
    KernelScope<double> s(3, 4, 1, 1);  // bound (4-1)/2 = 1.5
    // center tap (base 0,0) nudged by 0.2: stays within the 1.5 bound
    std::vector<double> inside(18, 0.0);
    inside[2 * 4] = 0.2;
    inside[2 * 4 + 1] = -0.2;
    CHECK(dk::clip_offsets(inside, s) == inside);

    // push the center tap's x to +10 -> clamped to +1.5
    std::vector<double> wild(18, 0.0);
    wild[2 * 4] = 10.0;  // tap 4 is the center (base coord 0)
    const auto clipped = dk::clip_offsets(wild, s);
    CHECK(clipped[2 * 4] == 1.5);

    // offsets landing exactly on the bound stay put and are not flagged
    std::vector<double> edge(18, 0.0);
    edge[2 * 4] = 1.5;
    const auto masked = dk::clip_offsets_masked(edge, s);
    CHECK(masked.offsets[2 * 4] == 1.5);
    CHECK(masked.clamped[2 * 4] == 0);

    // idempotence
    dk::Rng rng(9);
    std::vector<double> o(18);
    for (auto& v : o) v = rng.uniform(-5.0, 5.0);
    const auto once = dk::clip_offsets(o, s);
    CHECK(dk::clip_offsets(once, s) == once);
}

TEST_CASE("offset gradient hand example") {
    // at the center of [[1,2],[3,4]]: d W'/d dk_x = 0.5*(2-1) + 0.5*(4-3) = 1,
    // d W'/d dk_y = 0.5*(3-1) + 0.5*(4-2) = 2
    const KernelScope<double> s = scope_2x2_1234();
    KernelScope<double> up(1, 1, 1, 1, 1.0);
    const dk::SamplerGrads<double> g =
        dk::resample_backward(s, std::vector<double>(2, 0.0), up);
    CHECK(g.offset_grad[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(g.offset_grad[1] == doctest::Approx(2.0).epsilon(1e-15));

    // constant scope: interpolating a constant has zero offset gradient
    KernelScope<double> c(1, 2, 1, 1, 7.0);
    const dk::SamplerGrads<double> gc =
        dk::resample_backward(c, std::vector<double>{0.3, -0.2}, up);
    CHECK(gc.offset_grad[0] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(gc.offset_grad[1] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("sampler weight gradient routes through B") {
    // zero offsets, K'==K: scope gradient equals the upstream exactly
    dk::Rng rng(4);
    KernelScope<double> k(3, 3, 1, 1);
    for (auto& v : k.w) v = rng.normal();
    KernelScope<double> up(3, 3, 1, 1);
    for (auto& v : up.w) v = rng.normal();
    const dk::SamplerGrads<double> g =
        dk::resample_backward(k, std::vector<double>(18, 0.0), up);
    CHECK(g.scope_grad.w == up.w);
    for (double v : g.offset_grad) (void)v;  // offsets may be nonzero; not asserted

    // zero upstream -> zero everywhere
    KernelScope<double> zup(3, 3, 1, 1);
    const dk::SamplerGrads<double> gz =
        dk::resample_backward(k, std::vector<double>(18, 0.0), zup);
    for (double v : gz.scope_grad.w) CHECK(v == 0.0);
    for (double v : gz.offset_grad) CHECK(v == 0.0);
}

TEST_CASE("partition of unity, locality, clipping over random coordinates") {
    dk::Rng rng(77);
    for (int trial = 0; trial < 10000; ++trial) {
        const int scope = 2 + static_cast<int>(rng.uniform() * 4);  // 2..5
        const double b = (scope - 1) / 2.0;
        const double ax = rng.uniform(-b, b);
        const double ay = rng.uniform(-b, b);
        CHECK(std::abs(weight_sum(ax, ay, scope) - 1.0) <= 1e-12);
        CHECK(nonzero_weights(ax, ay, scope) <= 4);
    }
    // locality: exact zero at distance >= 1
    CHECK(dk::tent(1.0) == 0.0);
    CHECK(dk::tent(-1.25) == 0.0);
}

TEST_CASE("finite-difference agreement away from kinks") {
    dk::Rng rng(123);
    KernelScope<double> scope(3, 4, 1, 1);
    for (auto& v : scope.w) v = rng.normal();
    // kink-safe in-bounds coordinates: away from lattice lines and bounds
    const auto base = scope.base_lattice();
    const double b = scope.bound();
    std::vector<double> offsets(18);
    auto draw_coord = [&]() {
        for (;;) {
            const double a = rng.uniform(-b + 0.1, b - 0.1);
            const double frac = (a + b) - std::floor(a + b);
            if (frac > 0.1 && frac < 0.9) return a;
        }
    };
    for (std::size_t t = 0; t < base.size(); ++t) {
        offsets[2 * t] = draw_coord() - base[t].x;
        offsets[2 * t + 1] = draw_coord() - base[t].y;
    }
    KernelScope<double> up(3, 3, 1, 1);
    for (auto& v : up.w) v = rng.normal();
    const dk::SamplerGrads<double> g = dk::resample_backward(scope, offsets, up);

    auto loss = [&](const std::vector<double>& o) {
        const KernelScope<double> s = dk::resample_kernel(scope, o);
        double acc = 0.0;
        for (std::size_t i = 0; i < s.w.size(); ++i) acc += s.w[i] * up.w[i];
        return acc;
    };
    const double h = 1e-6;
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        std::vector<double> p = offsets;
        p[i] += h;
        const double fp = loss(p);
        p[i] -= 2 * h;
        const double fm = loss(p);
        const double fd = (fp - fm) / (2 * h);
        CHECK(g.offset_grad[i] == doctest::Approx(fd).epsilon(1e-5));
    }
    for (std::size_t i = 0; i < scope.w.size(); ++i) {
        KernelScope<double> s2 = scope;
        s2.w[i] += h;
        const auto k1 = dk::resample_kernel(s2, offsets);
        s2.w[i] -= 2 * h;
        const auto k2 = dk::resample_kernel(s2, offsets);
        double fd = 0.0;
        for (std::size_t j = 0; j < k1.w.size(); ++j)
            fd += (k1.w[j] - k2.w[j]) / (2 * h) * up.w[j];
        CHECK(g.scope_grad.w[i] == doctest::Approx(fd).epsilon(1e-6));
    }
}
