#include <doctest.h>

#include <cmath>

#include "dk/erf.hpp"
#include "dk/random.hpp"

using dk::ErfLayer;
using dk::LinearStack;
using dk::Tensor;

namespace {

ErfLayer<double> random_layer(int k, std::uint64_t seed, int scope = -1) {
    ErfLayer<double> l(k, scope);
    dk::Rng rng(seed);
    for (auto& v : l.scope.w) v = rng.normal();
    return l;
}

Tensor<double> random_input(int h, int w, std::uint64_t seed) {
    Tensor<double> t(1, 1, h, w);
    dk::Rng rng(seed);
    for (auto& v : t.data()) v = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("single-layer ERF is the kernel itself") {
    LinearStack<double> stack = {random_layer(3, 41)};
    const Tensor<double> input = random_input(9, 9, 42);
    const auto map = dk::erf_backprop(stack, input, 4, 4);
    for (int iy = 0; iy < 9; ++iy)
        for (int ix = 0; ix < 9; ++ix) {
            const int ky = iy - 4 + 1, kx = ix - 4 + 1;
            const double expect =
                (ky >= 0 && ky < 3 && kx >= 0 && kx < 3)
                    ? stack[0].scope.at(0, 0, ky, kx)
                    : 0.0;
            CHECK(map.values(0, 0, iy, ix) == doctest::Approx(expect).epsilon(1e-14));
            CHECK(dk::erf_enumerate(stack, iy, ix, 4, 4) ==
                  doctest::Approx(expect).epsilon(1e-14));
        }
}

TEST_CASE("backprop vs enumeration vs DP, n = 2 and 3") {
    for (int n = 2; n <= 3; ++n) {
        LinearStack<double> stack;
        for (int s = 0; s < n; ++s) stack.push_back(random_layer(3, 50 + 7 * s + n));
        const int h = 15, w = 15;
        const Tensor<double> input = random_input(h, w, 99);
        const auto bp = dk::erf_backprop(stack, input, 7, 7);
        const auto en = dk::erf_enumerate_map(stack, 7, 7, h, w);
        const auto dp = dk::erf_field_dp(stack, 7, 7, h, w);
        for (std::size_t i = 0; i < bp.values.size(); ++i) {
            CHECK(std::abs(bp.values.data()[i] - en.values.data()[i]) <= 1e-10);
            CHECK(std::abs(en.values.data()[i] - dp.values.data()[i]) <= 1e-12);
        }
        // theoretical RF bound: support confined to the n*floor(K/2) box
        CHECK(bp.rf_half == n);
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix)
                if (std::abs(iy - 7) > n || std::abs(ix - 7) > n)
                    CHECK(bp.values(0, 0, iy, ix) == 0.0);
    }
}

TEST_CASE("pinned enumeration, Eq-style") {
    LinearStack<double> one = {random_layer(3, 60)};
    // n=1, m=1: value at the pinned tap when j == i, else 0
    CHECK(dk::erf_enumerate_pinned(one, 5, 5, 5, 5, 1, 0, 2) ==
          doctest::Approx(one[0].scope.at(0, 0, 0, 2)).epsilon(1e-14));
    CHECK(dk::erf_enumerate_pinned(one, 5, 6, 5, 5, 1, 0, 2) == 0.0);

    // zero at the pinned tap zeroes the whole sum
    LinearStack<double> two = {random_layer(3, 61), random_layer(3, 62)};
    two[1].scope.at(0, 0, 1, 2) = 0.0;
    CHECK(dk::erf_enumerate_pinned(two, 7, 7, 7, 7, 2, 1, 2) == 0.0);

    // pinned == brute-force restriction of paths through (m, tap)
    double manual = 0.0;
    const int iy = 7, ix = 8, jy = 7, jx = 7, pky = 2, pkx = 0;
    for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
            // layer-2 tap pinned contributes no displacement; layer-1 tap walks
            const int cy = jy + ky - 1, cx = jx + kx - 1;
            if (cy == iy && cx == ix)
                manual += two[1].scope.at(0, 0, pky, pkx) * two[0].scope.at(0, 0, ky, kx);
        }
    CHECK(dk::erf_enumerate_pinned(two, iy, ix, jy, jx, 2, pky, pkx) ==
          doctest::Approx(manual).epsilon(1e-13));
}

TEST_CASE("decomposition identity") {
    LinearStack<double> one = {random_layer(3, 70)};
    const auto d1 = dk::erf_decompose_check(one, 5, 6, 5, 5, 1);
    CHECK(d1.abs_diff == 0.0);

    LinearStack<double> two = {random_layer(3, 71), random_layer(3, 72)};
    for (int m = 1; m <= 2; ++m)
        CHECK(dk::erf_decompose_check(two, 6, 8, 7, 7, m).abs_diff <= 1e-12);

    LinearStack<double> three = {random_layer(3, 73), random_layer(3, 74),
                                 random_layer(3, 75)};
    for (int m = 1; m <= 3; ++m)
        CHECK(dk::erf_decompose_check(three, 6, 8, 7, 7, m).abs_diff <= 1e-12);
}

TEST_CASE("DK ERF: offsets resolved through the sampler") {
    // zero offsets equal plain enumeration
    LinearStack<double> stack = {random_layer(3, 80, 4), random_layer(3, 81, 4)};
    LinearStack<double> with0 = stack;
    for (auto& l : with0) l.kernel_offsets.assign(18, 0.0);
    for (int iy = 5; iy <= 9; ++iy)
        CHECK(dk::erf_dk(with0, iy, 7, 7, 7) ==
              doctest::Approx(dk::erf_enumerate(stack, iy, 7, 7, 7)).epsilon(1e-13));

    // single layer with offsets: ERF equals the resampled kernel at i - j
    LinearStack<double> one = {random_layer(3, 82, 4)};
    dk::Rng rng(83);
    one[0].kernel_offsets.resize(18);
    for (auto& v : one[0].kernel_offsets) v = rng.uniform(-0.4, 0.4);
    const dk::KernelScope<double> wk = one[0].working_kernel();
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
            CHECK(dk::erf_dk(one, 7 + dy, 7 + dx, 7, 7) ==
                  doctest::Approx(wk.at(0, 0, dy + 1, dx + 1)).epsilon(1e-13));
}

TEST_CASE("DC ERF: integer translation and fractional spread") {
    LinearStack<double> stack = {random_layer(3, 90), random_layer(3, 91)};
    // integer data offsets translate the ERF
    LinearStack<double> shifted = stack;
    shifted[0].data_offsets.assign(18, 0.0);
    for (int t = 0; t < 9; ++t) shifted[0].data_offsets[2 * t] = 1.0;  // dx = +1
    for (int iy = 5; iy <= 9; ++iy)
        for (int ix = 5; ix <= 9; ++ix)
            CHECK(dk::erf_dc(shifted, iy, ix, 7, 7) ==
                  doctest::Approx(dk::erf_enumerate(stack, iy, ix - 1, 7, 7))
                      .epsilon(1e-12));

    // fractional data offsets: enumeration matches backprop through the graph
    LinearStack<double> frac = stack;
    frac[1].data_offsets.assign(18, 0.0);
    dk::Rng rng(92);
    for (auto& v : frac[1].data_offsets) v = rng.uniform(-0.7, 0.7);
    const Tensor<double> input = random_input(15, 15, 93);
    const auto bp = dk::erf_backprop(frac, input, 7, 7);
    for (int iy = 4; iy <= 10; ++iy)
        for (int ix = 4; ix <= 10; ++ix)
            CHECK(std::abs(bp.values(0, 0, iy, ix) -
                           dk::erf_dc(frac, iy, ix, 7, 7)) <= 1e-10);
}

TEST_CASE("ReLU ERF: positive case and porousness") {
    // all-positive weights and input: ReLU never gates, ERF equals linear ERF
    LinearStack<double> relu_stack = {random_layer(3, 100), random_layer(3, 101)};
    for (auto& l : relu_stack)
        for (auto& v : l.scope.w) v = std::abs(v) + 0.01;
    LinearStack<double> linear_stack = relu_stack;
    relu_stack[0].use_relu = true;
    relu_stack[1].use_relu = true;
    Tensor<double> pos(1, 1, 11, 11, 1.0);
    const auto r = dk::erf_backprop(relu_stack, pos, 5, 5);
    const auto l = dk::erf_backprop(linear_stack, pos, 5, 5);
    for (std::size_t i = 0; i < r.values.size(); ++i)
        CHECK(std::abs(r.values.data()[i] - l.values.data()[i]) <= 1e-12);

    // crafted mixed-sign instance: gated support is a strict subset
    LinearStack<double> mixed = {random_layer(3, 102), random_layer(3, 103)};
    mixed[0].use_relu = true;
    // input that deactivates some first-layer units but not all
    Tensor<double> craft(1, 1, 11, 11);
    dk::Rng rng(104);
    for (auto& v : craft.data()) v = rng.normal();
    LinearStack<double> mixed_linear = mixed;
    mixed_linear[0].use_relu = false;
    const auto gated = dk::erf_backprop(mixed, craft, 5, 5);
    const auto ungated = dk::erf_backprop(mixed_linear, craft, 5, 5);
    int gated_support = 0, linear_support = 0;
    bool subset = true;
    for (std::size_t i = 0; i < gated.values.size(); ++i) {
        const bool g = gated.values.data()[i] != 0.0;
        const bool u = ungated.values.data()[i] != 0.0;
        gated_support += g;
        linear_support += u;
        if (g && !u) subset = false;
    }
    CHECK(subset);
    CHECK(gated_support < linear_support);
    CHECK(gated_support > 0);
}

TEST_CASE("erf_stats") {
    // symmetric kernel: mass center at j
    ErfLayer<double> sym(3);
    const double vals[9] = {1, 2, 1, 2, 4, 2, 1, 2, 1};
    for (int i = 0; i < 9; ++i) sym.scope.w[i] = vals[i];
    LinearStack<double> stack = {sym};
    const auto map = dk::erf_enumerate_map(stack, 5, 5, 11, 11);
    const auto st = dk::erf_stats(map);
    CHECK(st.center_y == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(st.center_x == doctest::Approx(5.0).epsilon(1e-12));

    // delta kernel: support area 1
    ErfLayer<double> delta(3);
    delta.scope.at(0, 0, 1, 1) = 1.0;
    const auto dmap = dk::erf_enumerate_map(LinearStack<double>{delta}, 5, 5, 11, 11);
    CHECK(dk::erf_stats(dmap).support_area == 1);

    // flatter kernel spreads more
    ErfLayer<double> flat(3);
    for (auto& v : flat.scope.w) v = 1.0;
    const auto fmap = dk::erf_enumerate_map(LinearStack<double>{flat}, 5, 5, 11, 11);
    CHECK(dk::erf_stats(fmap).second_moment > st.second_moment);

    Tensor<double> zero(1, 1, 3, 3);
    dk::ErfMap<double> zmap{zero, 1, 1, 1, 1};
    CHECK_THROWS(dk::erf_stats(zmap));
}

TEST_CASE("tractability guard") {
    LinearStack<double> deep;
    for (int s = 0; s < 12; ++s) deep.push_back(random_layer(5, 110 + s));
    CHECK_THROWS(dk::erf_enumerate(deep, 0, 0, 0, 0));
}
