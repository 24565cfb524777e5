// Acceptance gate: one line per criterion, exit 0 only if all pass.
// argv[1] must point at the CLI binary (used by the replay criterion).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dk/checkpoint.hpp"
#include "dk/dataset.hpp"
#include "dk/deform.hpp"
#include "dk/erf.hpp"
#include "dk/gradcheck.hpp"
#include "dk/model.hpp"
#include "dk/train.hpp"

namespace fs = std::filesystem;
using dk::ConvSpec;
using dk::KernelScope;
using dk::Tensor;

namespace {

int g_failures = 0;

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    }
};

void report(int criterion, bool pass, double seconds, const std::string& detail) {
    std::printf("criterion %d: %s (%.1fs) %s\n", criterion, pass ? "PASS" : "FAIL",
                seconds, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// --- 1: zero-offset degeneracy, bitwise over 50 seeded instances -----------

void criterion1() {
    Timer timer;
    bool pass = true;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 50 && pass; ++seed) {
        dk::Rng rng(seed);
        const int ch = 1 + rng.uniform_int(0, 2);
        const int h = 5 + rng.uniform_int(0, 4);
        const int w = 5 + rng.uniform_int(0, 4);
        const bool depthwise = rng.uniform() < 0.5;
        const int stride = rng.uniform() < 0.5 ? 1 : 2;
        const ConvSpec spec{3, stride, 1, depthwise, ch, ch};
        KernelScope<double> kernel(3, 3, ch, depthwise ? 1 : ch);
        for (auto& v : kernel.w) v = rng.normal();
        Tensor<double> input(1 + rng.uniform_int(0, 1), ch, h, w);
        for (auto& v : input.data()) v = rng.normal();

        const Tensor<double> rigid = dk::conv2d_rigid(input, kernel, spec);
        const int ho = spec.out_dim(h), wo = spec.out_dim(w);
        const Tensor<double> zfield(input.n(), 18, ho, wo);
        const Tensor<double> zoff(input.n(), 18, 1, 1);

        const Tensor<double> g = dk::dk_forward_global_fixed(input, kernel, zoff, spec);
        const auto l = dk::dk_forward_local_fixed(input, kernel, zfield, spec);
        const auto lt = dk::dk_forward_local_tiled(input, kernel, zfield, spec);
        const Tensor<double> d = dk::dc_forward(input, kernel, zfield, spec);
        const auto b = dk::dcdk_forward(input, kernel, zfield, zfield, spec);
        if (!bits_equal(rigid.data(), g.data()) || !bits_equal(rigid.data(), l.out.data()) ||
            !bits_equal(rigid.data(), lt.out.data()) || !bits_equal(rigid.data(), d.data()) ||
            !bits_equal(rigid.data(), b.out.data())) {
            pass = false;
            detail = "mismatch at seed " + std::to_string(seed);
        }
    }
    const double s = timer.seconds();
    if (s >= 10.0) { pass = false; detail += " over budget"; }
    report(1, pass, s, detail.empty() ? "dk/dc/dcdk == rigid bitwise, 50 seeds" : detail);
}

// --- 2: gradient suite, 20 seeds per registered op --------------------------

void criterion2() {
    Timer timer;
    bool pass = true;
    std::string detail;
    double worst = 0.0;
    for (const auto& op : dk::gradcheck_registry()) {
        const double tol = dk::gradcheck_default_tol(op);
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto r = dk::gradcheck_op(op, seed, tol);
            worst = std::max(worst, r.max_rel_err / r.tolerance);
            if (!r.pass) {
                pass = false;
                detail = op + " seed " + std::to_string(seed) + " max_rel_err " +
                         std::to_string(r.max_rel_err);
            }
        }
    }
    const double s = timer.seconds();
    if (s >= 120.0) { pass = false; detail += " over budget"; }
    char buf[96];
    std::snprintf(buf, sizeof buf, "7 ops x 20 seeds, worst err/tol %.3f", worst);
    report(2, pass, s, detail.empty() ? buf : detail);
}

// --- 3: ERF oracle equivalence ----------------------------------------------

dk::ErfLayer<double> random_erf_layer(std::uint64_t seed, int scope = 3) {
    dk::ErfLayer<double> l(3, scope);
    dk::Rng rng(seed);
    for (auto& v : l.scope.w) v = rng.normal();
    return l;
}

// reverse-mode through the real kernel-resampling graph (deform-ops path)
Tensor<double> dk_graph_erf(const dk::LinearStack<double>& stack, int jy, int jx,
                            int h, int w) {
    const ConvSpec spec{3, 1, 1, false, 1, 1};
    std::vector<KernelScope<double>> sampled;
    for (const auto& l : stack) sampled.push_back(l.working_kernel());
    Tensor<double> g(1, 1, h, w);
    g(0, 0, jy, jx) = 1.0;
    Tensor<double> dummy(1, 1, h, w);  // linear graph: grad is input-independent
    for (int s = static_cast<int>(stack.size()) - 1; s >= 0; --s) {
        auto [gin, gw] = dk::conv2d_backward(dummy, sampled[s], spec, g);
        g = std::move(gin);
    }
    return g;
}

// reverse-mode through the real data-resampling graph (dc_backward path)
Tensor<double> dc_graph_erf(const dk::LinearStack<double>& stack, int jy, int jx,
                            int h, int w) {
    const ConvSpec spec{3, 1, 1, false, 1, 1};
    // forward to collect each layer's input (dc_backward needs it, though the
    // input-gradient itself is linear)
    Tensor<double> x(1, 1, h, w);
    std::vector<Tensor<double>> inputs;
    std::vector<Tensor<double>> fields;
    for (const auto& l : stack) {
        inputs.push_back(x);
        Tensor<double> f(1, 18, h, w);
        if (!l.data_offsets.empty())
            for (int c = 0; c < 18; ++c)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) f(0, c, y, xx) = l.data_offsets[c];
        fields.push_back(f);
        x = dk::dc_forward(x, l.working_kernel(), fields.back(), spec);
    }
    Tensor<double> g(1, 1, h, w);
    g(0, 0, jy, jx) = 1.0;
    for (int s = static_cast<int>(stack.size()) - 1; s >= 0; --s) {
        auto gr = dk::dc_backward(inputs[s], stack[s].working_kernel(), fields[s],
                                  spec, g);
        g = std::move(gr.input);
    }
    return g;
}

void criterion3() {
    Timer timer;
    bool pass = true;
    std::string detail;
    const int h = 15, w = 15, jy = 7, jx = 7;
    double worst_bp = 0.0, worst_dec = 0.0, worst_dk = 0.0, worst_dc = 0.0;

    for (int n = 1; n <= 3 && pass; ++n) {
        dk::LinearStack<double> stack;
        for (int s = 0; s < n; ++s) stack.push_back(random_erf_layer(300 + 10 * n + s));
        Tensor<double> input(1, 1, h, w);
        dk::Rng rng(n);
        for (auto& v : input.data()) v = rng.normal();

        // Eq. 3: backprop vs enumeration, pointwise over the whole plane
        const auto bp = dk::erf_backprop(stack, input, jy, jx);
        const auto en = dk::erf_enumerate_map(stack, jy, jx, h, w);
        for (std::size_t i = 0; i < bp.values.size(); ++i)
            worst_bp = std::max(worst_bp,
                                std::abs(bp.values.data()[i] - en.values.data()[i]));

        // Eq. 5: decomposition residual for every m, at several coordinates
        for (int m = 1; m <= n; ++m)
            for (int iy = jy - n; iy <= jy + n; ++iy)
                for (int ix = jx - n; ix <= jx + n; ++ix)
                    worst_dec = std::max(
                        worst_dec,
                        dk::erf_decompose_check(stack, iy, ix, jy, jx, m).abs_diff);

        // Eq. 8: kernel offsets, enumeration vs the deform-ops graph
        dk::LinearStack<double> dks;
        for (int s = 0; s < n; ++s) {
            dk::ErfLayer<double> l = random_erf_layer(340 + 10 * n + s, 4);
            l.kernel_offsets.resize(18);
            dk::Rng orng(350 + 10 * n + s);
            for (auto& v : l.kernel_offsets) v = orng.uniform(-0.5, 0.5);
            dks.push_back(std::move(l));
        }
        const Tensor<double> dk_grad = dk_graph_erf(dks, jy, jx, h, w);
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix)
                worst_dk = std::max(worst_dk,
                                    std::abs(dk_grad(0, 0, iy, ix) -
                                             dk::erf_dk(dks, iy, ix, jy, jx)));

        // Eq. 10: fractional data offsets, enumeration vs dc_backward graph
        dk::LinearStack<double> dcs;
        for (int s = 0; s < n; ++s) {
            dk::ErfLayer<double> l = random_erf_layer(370 + 10 * n + s);
            l.data_offsets.resize(18);
            dk::Rng orng(380 + 10 * n + s);
            for (auto& v : l.data_offsets) v = orng.uniform(-0.7, 0.7);
            dcs.push_back(std::move(l));
        }
        const Tensor<double> dc_grad = dc_graph_erf(dcs, jy, jx, h, w);
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix)
                worst_dc = std::max(worst_dc,
                                    std::abs(dc_grad(0, 0, iy, ix) -
                                             dk::erf_dc(dcs, iy, ix, jy, jx)));
    }
    if (worst_bp > 1e-10 || worst_dk > 1e-10 || worst_dc > 1e-10 || worst_dec > 1e-12)
        pass = false;
    const double s = timer.seconds();
    if (s >= 300.0) pass = false;
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "eq3 %.1e, eq5 %.1e, eq8 %.1e, eq10 %.1e", worst_bp, worst_dec,
                  worst_dk, worst_dc);
    report(3, pass, s, buf);
}

// --- 4: ReLU ERF properties --------------------------------------------------

void criterion4() {
    Timer timer;
    bool pass = true;
    dk::LinearStack<double> stack = {random_erf_layer(400), random_erf_layer(401)};
    for (auto& l : stack)
        for (auto& v : l.scope.w) v = std::abs(v) + 0.01;
    dk::LinearStack<double> linear = stack;
    stack[0].use_relu = stack[1].use_relu = true;
    Tensor<double> pos(1, 1, 11, 11, 1.0);
    const auto r = dk::erf_backprop(stack, pos, 5, 5);
    const auto l = dk::erf_backprop(linear, pos, 5, 5);
    double worst = 0.0;
    for (std::size_t i = 0; i < r.values.size(); ++i)
        worst = std::max(worst, std::abs(r.values.data()[i] - l.values.data()[i]));
    if (worst > 1e-12) pass = false;

    // porousness on a crafted mixed-sign instance
    dk::LinearStack<double> mixed = {random_erf_layer(402), random_erf_layer(403)};
    mixed[0].use_relu = true;
    dk::LinearStack<double> mixed_linear = mixed;
    mixed_linear[0].use_relu = false;
    Tensor<double> craft(1, 1, 11, 11);
    dk::Rng rng(404);
    for (auto& v : craft.data()) v = rng.normal();
    const auto gated = dk::erf_backprop(mixed, craft, 5, 5);
    const auto open = dk::erf_backprop(mixed_linear, craft, 5, 5);
    int gs = 0, ls = 0;
    bool subset = true;
    for (std::size_t i = 0; i < gated.values.size(); ++i) {
        const bool g = gated.values.data()[i] != 0.0;
        const bool u = open.values.data()[i] != 0.0;
        gs += g;
        ls += u;
        if (g && !u) subset = false;
    }
    if (!(subset && gs > 0 && gs < ls)) pass = false;
    const double s = timer.seconds();
    if (s >= 30.0) pass = false;
    char buf[96];
    std::snprintf(buf, sizeof buf, "relu==linear %.1e; support %d < %d", worst, gs, ls);
    report(4, pass, s, buf);
}

// --- 5: sampler properties over 1e4 random coordinates -----------------------

void criterion5() {
    Timer timer;
    bool pass = true;
    dk::Rng rng(500);
    for (int trial = 0; trial < 10000 && pass; ++trial) {
        const int scope = 2 + rng.uniform_int(0, 3);
        const double b = (scope - 1) / 2.0;
        const double ax = rng.uniform(-b, b);
        const double ay = rng.uniform(-b, b);
        double sum = 0.0;
        int nonzero = 0;
        for (int y = 0; y < scope; ++y)
            for (int x = 0; x < scope; ++x) {
                const double wx = dk::tent(ax - (-b + x));
                const double wy = dk::tent(ay - (-b + y));
                if (std::abs(ax - (-b + x)) >= 1.0 && wx != 0.0) pass = false;
                if (wx * wy != 0.0) ++nonzero;
                sum += wx * wy;
            }
        if (std::abs(sum - 1.0) > 1e-12 || nonzero > 4) pass = false;

        KernelScope<double> ks(3, 4, 1, 1);
        std::vector<double> o(18);
        for (auto& v : o) v = rng.uniform(-6.0, 6.0);
        const auto once = dk::clip_offsets(o, ks);
        if (dk::clip_offsets(once, ks) != once) pass = false;
    }
    const double s = timer.seconds();
    if (s >= 5.0) pass = false;
    report(5, pass, s, "partition of unity, locality, clip idempotence x 1e4");
}

// --- 6 & 7: training fixture and the scale-awareness proxy ------------------

void criteria6and7() {
    Timer timer;
    using T = float;
    const auto train_set = dk::gen_dataset<T>(4000, 28, 1);
    const auto val_set = dk::gen_dataset<T>(1000, 28, 2);
    dk::TrainConfig cfg;  // 20 epochs, batch 32, lr 0.05, warmup 1, cosine
    cfg.seed = 1;

    dk::Model<T> rigid = dk::build_model<T>("rigid", cfg.seed);
    const auto rigid_log = dk::train(rigid, train_set, val_set, cfg);
    const double rigid_seconds = timer.seconds();
    const double rigid_acc = rigid_log.back().accuracy;
    std::printf("  [fixture] rigid val accuracy %.4f\n", rigid_acc);
    std::fflush(stdout);

    dk::Model<T> local = dk::build_model<T>("dk-local", cfg.seed);
    const double untrained_rho = [&] {
        const auto c = dk::offset_scale_correlation(local, val_set, cfg.batch_size);
        return c.defined ? std::abs(c.rho) : 0.0;
    }();
    const auto local_log = dk::train(local, train_set, val_set, cfg);
    const double local_acc = local_log.back().accuracy;
    std::printf("  [fixture] dk-local val accuracy %.4f\n", local_acc);
    std::fflush(stdout);

    // the wall-clock budget covers the baseline fixture
    bool pass6 = rigid_acc > 0.90 && local_acc >= rigid_acc - 0.01 &&
                 rigid_seconds < 900.0;
    const double s6 = timer.seconds();
    char buf[128];
    std::snprintf(buf, sizeof buf, "rigid %.4f, dk-local %.4f", rigid_acc, local_acc);
    report(6, pass6, s6, buf);

    // criterion 7
    Timer t7;
    // positive control: a hand-built generator whose offsets track mean
    // intensity, which is monotone in disk area and hence in scale
    const auto disks = dk::gen_dataset<T>(200, 28, 3, 0);
    dk::Model<T> control;
    control.arch = "control";
    {
        dk::Layer<T> l;
        l.kind = dk::OpKind::DkGlobal;
        l.spec = {3, 1, 1, true, 1, 1};
        l.scope = KernelScope<T>(3, 4, 1, 1, T(1));
        l.gen_global = dk::OffsetGeneratorGlobal<T>(3, 1);
        for (auto& v : l.gen_global.weight.data) v = T(0.1);
        control.layers.push_back(std::move(l));
    }
    const auto control_corr = dk::offset_scale_correlation(control, disks, 32);
    const double control_rho = control_corr.defined ? control_corr.rho : 0.0;

    const auto trained_corr = dk::offset_scale_correlation(local, val_set, cfg.batch_size);
    const double trained_rho = trained_corr.defined ? std::abs(trained_corr.rho) : 0.0;

    const bool pass7 = control_rho >= 0.95 && trained_rho >= untrained_rho + 0.1;
    std::snprintf(buf, sizeof buf, "control rho %.3f, trained |rho| %.3f, untrained %.3f",
                  control_rho, trained_rho, untrained_rho);
    report(7, pass7, t7.seconds(), buf);
}

// --- 8: manifest replay reproduces artifacts byte-identically ----------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool dirs_identical(const fs::path& a, const fs::path& b) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) {
        if (!fs::exists(b / n)) return false;
        if (slurp(a / n) != slurp(b / n)) return false;
    }
    return true;
}

void criterion8(const std::string& cli) {
    Timer timer;
    bool pass = true;
    std::string detail;
    const fs::path tmp = fs::temp_directory_path() / "dk_replay_test";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    const std::string q = "\"" + cli + "\"";
    auto run = [&](const std::string& args) {
        return std::system((q + " " + args + " > /dev/null").c_str());
    };

    // dataset
    const fs::path d = tmp / "data";
    if (run("dataset --n 20 --canvas 28 --seed 3 --out " + d.string()) != 0) pass = false;
    const fs::path d_orig = tmp / "data_orig";
    fs::copy(d, d_orig, fs::copy_options::recursive);
    if (run("replay " + (d / "manifest.json").string()) != 0) pass = false;
    if (pass && !dirs_identical(d_orig, d)) { pass = false; detail = "dataset differs"; }

    // erf on a stack spec
    const fs::path spec = tmp / "stack.json";
    {
        std::ofstream out(spec);
        out << R"({"input":{"h":15,"w":15},"layers":[{"k":3,"seed":4},{"k":3,"seed":5},{"k":3,"seed":6}]})";
    }
    const std::string prefix = (tmp / "erfmap").string();
    if (run("erf --model " + spec.string() + " --input synthetic:1 --at 7,7 --mode both --out " +
            prefix) != 0)
        pass = false;
    const std::string tsr1 = slurp(prefix + ".tsr"), pgm1 = slurp(prefix + ".pgm");
    if (run("replay " + prefix + ".manifest.json") != 0) pass = false;
    if (pass && (slurp(prefix + ".tsr") != tsr1 || slurp(prefix + ".pgm") != pgm1)) {
        pass = false;
        detail = "erf artifacts differ";
    }

    // gradcheck report replay
    const fs::path g = tmp / "gc";
    if (run("gradcheck --op dk_offsets --seed 7 --out " + g.string()) != 0) pass = false;
    const std::string rep1 = slurp(g / "report.txt");
    if (run("replay " + (g / "manifest.json").string()) != 0) pass = false;
    if (pass && slurp(g / "report.txt") != rep1) { pass = false; detail = "gradcheck differs"; }

    fs::remove_all(tmp);
    report(8, pass, timer.seconds(),
           detail.empty() ? "dataset/erf/gradcheck replays byte-identical" : detail);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <path-to-cli>\n");
        return 2;
    }
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5();
    criteria6and7();
    criterion8(argv[1]);
    if (g_failures == 0) {
        std::printf("acceptance: all 8 criteria PASS\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) FAILED\n", g_failures);
    return 1;
}
