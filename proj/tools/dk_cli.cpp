// Batch front end: dataset generation, training, gradient checks, ERF maps,
// and manifest replay. Exit codes: 0 success, 1 check failure, 2 usage/config.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dk/checkpoint.hpp"
#include "dk/dataset.hpp"
#include "dk/erf.hpp"
#include "dk/gradcheck.hpp"
#include "dk/manifest.hpp"
#include "dk/model.hpp"
#include "dk/tensor_io.hpp"
#include "dk/train.hpp"

namespace fs = std::filesystem;
using Cfg = std::map<std::string, std::string>;

namespace {

int g_num_threads = 1;  // DK_NUM_THREADS; compute paths are deterministic at any value

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string cfg_get(const Cfg& cfg, const std::string& key) {
    auto it = cfg.find(key);
    if (it == cfg.end()) throw UsageError("missing config key: " + key);
    return it->second;
}

long cfg_long(const Cfg& cfg, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(cfg_get(cfg, key), &pos);
        if (pos != cfg_get(cfg, key).size()) throw std::invalid_argument(key);
        return v;
    } catch (const UsageError&) {
        throw;
    } catch (...) {
        throw UsageError("config key '" + key + "' is not an integer");
    }
}

double cfg_double(const Cfg& cfg, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(cfg_get(cfg, key), &pos);
        if (pos != cfg_get(cfg, key).size()) throw std::invalid_argument(key);
        return v;
    } catch (const UsageError&) {
        throw;
    } catch (...) {
        throw UsageError("config key '" + key + "' is not a number");
    }
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

int run_dataset(const Cfg& cfg) {
    const long n = cfg_long(cfg, "n");
    const long canvas = cfg_long(cfg, "canvas");
    const auto seed = static_cast<std::uint64_t>(cfg_long(cfg, "seed"));
    const std::string out = cfg_get(cfg, "out");
    if (n < 1) throw UsageError("dataset: n must be >= 1");

    fs::create_directories(out);
    const auto samples = dk::gen_dataset<double>(static_cast<int>(n),
                                                 static_cast<int>(canvas), seed);
    std::string labels = "filename,label,scale,rotation\n";
    dk::RunManifest m{"dataset", cfg, seed, dk::kToolVersion, {}};
    char buf[256];
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::snprintf(buf, sizeof buf, "sample_%05zu.tsr", i);
        const std::string file = buf;
        dk::save_tsr(samples[i].image, (fs::path(out) / file).string());
        std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g\n", file.c_str(),
                      samples[i].label, samples[i].scale, samples[i].rotation);
        labels += buf;
        m.outputs.push_back(file);
    }
    std::ofstream lcsv(fs::path(out) / "labels.csv", std::ios::binary);
    lcsv << labels;
    m.outputs.push_back("labels.csv");
    dk::save_manifest(m, (fs::path(out) / "manifest.json").string());
    std::printf("dataset: wrote %ld samples to %s\n", n, out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename T>
int run_train_typed(const Cfg& cfg) {
    dk::TrainConfig tc;
    tc.epochs = static_cast<int>(cfg_long(cfg, "epochs"));
    tc.batch_size = static_cast<int>(cfg_long(cfg, "batch_size"));
    tc.base_lr = cfg_double(cfg, "base_lr");
    tc.momentum = cfg_double(cfg, "momentum");
    tc.weight_decay = cfg_double(cfg, "weight_decay");
    tc.warmup_epochs = static_cast<int>(cfg_long(cfg, "warmup_epochs"));
    tc.schedule = cfg_get(cfg, "schedule");
    tc.seed = static_cast<std::uint64_t>(cfg_long(cfg, "seed"));
    tc.dk_lr_multiplier = cfg_double(cfg, "dk_lr_multiplier");
    try {
        tc.validate();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    const std::string arch = cfg_get(cfg, "arch");
    const std::string out = cfg_get(cfg, "out");
    const int train_n = static_cast<int>(cfg_long(cfg, "train_samples"));
    const int val_n = static_cast<int>(cfg_long(cfg, "val_samples"));
    const int canvas = static_cast<int>(cfg_long(cfg, "canvas"));

    const auto train_set = dk::gen_dataset<T>(train_n, canvas, tc.seed);
    const auto val_set = dk::gen_dataset<T>(val_n, canvas, tc.seed + 1);

    dk::Model<T> model;
    try {
        model = dk::build_model<T>(arch, tc.seed, 4, tc.dk_lr_multiplier);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    const auto log = dk::train(model, train_set, val_set, tc);

    fs::create_directories(out);
    std::ofstream csv(fs::path(out) / "metrics.csv", std::ios::binary);
    csv << dk::metrics_csv(log);
    dk::save_checkpoint(model, tc, tc.epochs, (fs::path(out) / "checkpoint").string());

    dk::RunManifest m{"train", cfg, tc.seed, dk::kToolVersion,
                      {"metrics.csv", "checkpoint/checkpoint.json"}};
    dk::save_manifest(m, (fs::path(out) / "manifest.json").string());
    if (!log.empty())
        std::printf("train: arch=%s final_val_accuracy=%.4f final_val_loss=%.4f\n",
                    arch.c_str(), log.back().accuracy, log.back().loss);
    bool has_dk = false;
    for (const auto& l : model.layers) has_dk = has_dk || l.has_kernel_offsets();
    if (has_dk) {
        const auto corr = dk::offset_scale_correlation(model, val_set, tc.batch_size);
        if (corr.defined)
            std::printf("train: offset_scale_spearman=%.4f\n", corr.rho);
        else
            std::printf("train: offset_scale_spearman=undefined (constant offsets)\n");
    }
    return 0;
}

int run_train(const Cfg& cfg) {
    const std::string dtype = cfg_get(cfg, "dtype");
    if (dtype == "f32") return run_train_typed<float>(cfg);
    if (dtype == "f64") return run_train_typed<double>(cfg);
    throw UsageError("config key 'dtype' must be f32 or f64");
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int run_gradcheck(const Cfg& cfg) {
    const std::string op = cfg_get(cfg, "op");
    const auto seed = static_cast<std::uint64_t>(cfg_long(cfg, "seed"));
    const double tol = cfg_double(cfg, "tol");
    const auto& reg = dk::gradcheck_registry();
    if (std::find(reg.begin(), reg.end(), op) == reg.end())
        throw UsageError("unknown gradcheck op '" + op + "'");
    const dk::GradCheckReport r = dk::gradcheck_op(op, seed, tol);
    std::string report;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "op=%s\nseed=%llu\nmax_rel_err=%.3e\nmean_rel_err=%.3e\n"
                  "checked=%d\nexcluded=%d\ntolerance=%.3e\npass=%s\n",
                  r.op_id.c_str(), static_cast<unsigned long long>(seed),
                  r.max_rel_err, r.mean_rel_err, r.checked, r.excluded, r.tolerance,
                  r.pass ? "true" : "false");
    report = buf;
    std::fputs(report.c_str(), stdout);
    auto it = cfg.find("out");
    if (it != cfg.end() && !it->second.empty()) {
        fs::create_directories(it->second);
        std::ofstream rep(fs::path(it->second) / "report.txt", std::ios::binary);
        rep << report;
        dk::RunManifest m{"gradcheck", cfg, seed, dk::kToolVersion, {"report.txt"}};
        dk::save_manifest(m, (fs::path(it->second) / "manifest.json").string());
    }
    return r.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// erf
// ---------------------------------------------------------------------------

dk::LinearStack<double> load_stack_spec(const std::string& path, int* h, int* w) {
    std::ifstream in(path);
    if (!in) throw UsageError("erf: cannot open stack spec " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw UsageError(std::string("erf: bad stack spec: ") + e.what());
    }
    if (j.contains("input")) {
        *h = j["input"].value("h", *h);
        *w = j["input"].value("w", *w);
    }
    dk::LinearStack<double> stack;
    for (const auto& jl : j.at("layers")) {
        const int k = jl.value("k", 3);
        const int scope = jl.value("scope", k);
        dk::ErfLayer<double> layer(k, scope);
        if (jl.contains("weights")) {
            const auto wv = jl["weights"].get<std::vector<double>>();
            if (wv.size() != layer.scope.w.size())
                throw UsageError("erf: layer weights length mismatch");
            layer.scope.w = wv;
        } else {
            dk::Rng rng(jl.value("seed", 1));
            for (auto& v : layer.scope.w) v = rng.normal();
        }
        if (jl.contains("kernel_offsets"))
            layer.kernel_offsets = jl["kernel_offsets"].get<std::vector<double>>();
        if (jl.contains("data_offsets"))
            layer.data_offsets = jl["data_offsets"].get<std::vector<double>>();
        layer.use_relu = jl.value("relu", false);
        stack.push_back(std::move(layer));
    }
    if (stack.empty()) throw UsageError("erf: stack spec has no layers");
    return stack;
}

template <typename T>
dk::ErfMap<double> erf_from_checkpoint(const std::string& dir, const dk::Tensor<T>& input,
                                       int jy, int jx) {
    auto ck = dk::load_checkpoint<T>(dir);
    // last conv-like layer sits just before GAP + FC
    const std::size_t upto = ck.model.layers.size() - 2;
    const dk::Tensor<T> act = ck.model.forward_prefix(input, upto);
    if (jy < 0 || jy >= act.h() || jx < 0 || jx >= act.w())
        throw UsageError("erf: coordinate outside the last activation plane");
    dk::Tensor<T> seed(act.n(), act.c(), act.h(), act.w());
    for (int c = 0; c < act.c(); ++c) seed(0, c, jy, jx) = T(1);
    ck.model.zero_grads();
    const dk::Tensor<T> gin = ck.model.backward_prefix(seed, upto);
    dk::ErfMap<double> map{dk::Tensor<double>(1, 1, gin.h(), gin.w()), jy, jx,
                           static_cast<int>(upto), 0};
    for (int y = 0; y < gin.h(); ++y)
        for (int x = 0; x < gin.w(); ++x)
            map.values(0, 0, y, x) = static_cast<double>(gin(0, 0, y, x));
    return map;
}

int run_erf(const Cfg& cfg) {
    const std::string model = cfg_get(cfg, "model");
    const std::string input_arg = cfg_get(cfg, "input");
    const std::string at = cfg_get(cfg, "at");
    const std::string mode = cfg_get(cfg, "mode");
    const std::string out = cfg_get(cfg, "out");
    if (mode != "backprop" && mode != "enumerate" && mode != "both")
        throw UsageError("erf: mode must be backprop|enumerate|both");
    int jy = 0, jx = 0;
    if (std::sscanf(at.c_str(), "%d,%d", &jy, &jx) != 2)
        throw UsageError("erf: --at expects y,x");

    const bool is_ckpt = fs::exists(fs::path(model) / "checkpoint.json");
    int h = 15, w = 15;
    dk::LinearStack<double> stack;
    if (!is_ckpt) stack = load_stack_spec(model, &h, &w);

    dk::Tensor<double> input;
    if (input_arg.rfind("synthetic:", 0) == 0) {
        const int label = std::atoi(input_arg.c_str() + 10);
        if (label < 0 || label > 3) throw UsageError("erf: synthetic id must be 0..3");
        const int canvas = is_ckpt ? 28 : h;
        input = dk::render_shape<double>(canvas, label, 1.5, 30.0, canvas / 2.0,
                                         canvas / 2.0)
                    .image;
    } else {
        input = dk::load_tsr<double>(input_arg);
    }
    h = input.h();
    w = input.w();

    dk::ErfMap<double> map{dk::Tensor<double>(), jy, jx, 0, 0};
    double disagreement = -1.0;
    if (is_ckpt) {
        if (mode != "backprop")
            throw UsageError("erf: enumeration is only available for stack specs");
        std::ifstream in(fs::path(model) / "checkpoint.json");
        nlohmann::json j;
        in >> j;
        if (j.at("dtype") == "f32") {
            dk::Tensor<float> fin(input.n(), input.c(), input.h(), input.w());
            for (std::size_t i = 0; i < input.size(); ++i)
                fin.data()[i] = static_cast<float>(input.data()[i]);
            map = erf_from_checkpoint<float>(model, fin, jy, jx);
        } else {
            map = erf_from_checkpoint<double>(model, input, jy, jx);
        }
    } else {
        if (jy < 0 || jy >= h || jx < 0 || jx >= w)
            throw UsageError("erf: coordinate out of bounds");
        if (mode == "backprop" || mode == "both")
            map = dk::erf_backprop(stack, input, jy, jx);
        if (mode == "enumerate" || mode == "both") {
            for (const auto& l : stack)
                if (l.use_relu)
                    throw UsageError("erf: enumeration requires a linear stack");
            dk::ErfMap<double> en = dk::erf_enumerate_map(stack, jy, jx, h, w);
            if (mode == "both") {
                disagreement = 0.0;
                for (std::size_t i = 0; i < en.values.size(); ++i)
                    disagreement = std::max(
                        disagreement,
                        std::abs(en.values.data()[i] - map.values.data()[i]));
            } else {
                map = std::move(en);
            }
        }
    }

    const fs::path prefix(out);
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    dk::save_tsr(map.values, out + ".tsr");
    dk::save_pgm(map, out + ".pgm");
    dk::RunManifest m{"erf", cfg,
                      0, dk::kToolVersion,
                      {out + ".tsr", out + ".pgm"}};
    dk::save_manifest(m, out + ".manifest.json");
    if (disagreement >= 0.0)
        std::printf("erf: max_disagreement=%.3e\n", disagreement);
    const auto stats = dk::erf_stats(map);
    std::printf("erf: support_area=%d density=%.4f second_moment=%.4f\n",
                stats.support_area, stats.density, stats.second_moment);
    return 0;
}

// ---------------------------------------------------------------------------
// replay
// ---------------------------------------------------------------------------

int dispatch(const std::string& command, const Cfg& cfg) {
    if (command == "dataset") return run_dataset(cfg);
    if (command == "train") return run_train(cfg);
    if (command == "gradcheck") return run_gradcheck(cfg);
    if (command == "erf") return run_erf(cfg);
    throw UsageError("unknown command in manifest: " + command);
}

int run_replay(const std::string& manifest_path) {
    dk::RunManifest m;
    try {
        m = dk::load_manifest(manifest_path);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    return dispatch(m.command, m.config);
}

// line-oriented key=value config; unknown keys rejected by name
void apply_config_file(const std::string& path, Cfg& cfg,
                       const std::vector<std::string>& allowed) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r' ||
                                 line.back() == '\t'))
            line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config line " + std::to_string(lineno) +
                             " is not key=value");
        std::string key = line.substr(start, eq - start);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string val = line.substr(eq + 1);
        const auto vstart = val.find_first_not_of(" \t");
        val = vstart == std::string::npos ? "" : val.substr(vstart);
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw UsageError("unknown config key: " + key);
        cfg[key] = val;
    }
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* env = std::getenv("DK_NUM_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) {
            std::fprintf(stderr, "DK_NUM_THREADS must be a positive integer\n");
            return 2;
        }
        g_num_threads = static_cast<int>(v);
    }

    CLI::App app{"Deformable-kernel engine batch tool"};
    app.require_subcommand(1);

    auto* ds = app.add_subcommand("dataset", "Generate a synthetic shapes dataset");
    long ds_n = 400, ds_canvas = 28, ds_seed = 1;
    std::string ds_out = "dataset_out";
    ds->add_option("--n", ds_n, "Sample count");
    ds->add_option("--canvas", ds_canvas, "Canvas size (>= 24)");
    ds->add_option("--seed", ds_seed, "RNG seed");
    ds->add_option("--out", ds_out, "Output directory");

    auto* tr = app.add_subcommand("train", "Train a miniature classifier");
    std::string tr_arch = "rigid", tr_config, tr_out = "train_out";
    tr->add_option("--arch", tr_arch, "rigid|dk-global|dk-local|dc|dcdk");
    tr->add_option("--config", tr_config, "key=value config file");
    tr->add_option("--out", tr_out, "Output directory");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
    std::string gc_op, gc_out;
    long gc_seed = 1;
    double gc_tol = -1.0;
    gc->add_option("--op", gc_op, "Operation id")->required();
    gc->add_option("--seed", gc_seed, "RNG seed");
    gc->add_option("--tol", gc_tol, "Tolerance (default per op)");
    gc->add_option("--out", gc_out, "Optional report/manifest directory");

    auto* er = app.add_subcommand("erf", "Compute an effective receptive field map");
    std::string er_model, er_input = "synthetic:0", er_at = "7,7",
                er_mode = "backprop", er_out = "erf_out";
    er->add_option("--model", er_model, "Checkpoint dir or stack-spec .json")->required();
    er->add_option("--input", er_input, ".tsr path or synthetic:<class id>");
    er->add_option("--at", er_at, "Output coordinate y,x");
    er->add_option("--mode", er_mode, "backprop|enumerate|both");
    er->add_option("--out", er_out, "Output prefix");

    auto* rp = app.add_subcommand("replay", "Re-run a recorded manifest");
    std::string rp_manifest;
    rp->add_option("manifest", rp_manifest, "manifest.json path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (ds->parsed()) {
            Cfg cfg{{"n", std::to_string(ds_n)},
                    {"canvas", std::to_string(ds_canvas)},
                    {"seed", std::to_string(ds_seed)},
                    {"out", ds_out}};
            return run_dataset(cfg);
        }
        if (tr->parsed()) {
            Cfg cfg{{"arch", tr_arch},         {"out", tr_out},
                    {"epochs", "20"},          {"batch_size", "32"},
                    {"base_lr", "0.05"},       {"momentum", "0.9"},
                    {"weight_decay", "4e-05"}, {"warmup_epochs", "1"},
                    {"schedule", "cosine"},    {"seed", "1"},
                    {"dk_lr_multiplier", "0.01"}, {"train_samples", "4000"},
                    {"val_samples", "1000"},   {"canvas", "28"},
                    {"dtype", "f32"}};
            if (!tr_config.empty()) {
                const std::vector<std::string> allowed = {
                    "epochs",        "batch_size",  "base_lr",
                    "momentum",      "weight_decay", "warmup_epochs",
                    "schedule",      "seed",        "dk_lr_multiplier",
                    "train_samples", "val_samples", "canvas",
                    "dtype"};
                apply_config_file(tr_config, cfg, allowed);
            }
            return run_train(cfg);
        }
        if (gc->parsed()) {
            if (gc_tol < 0.0) gc_tol = dk::gradcheck_default_tol(gc_op);
            Cfg cfg{{"op", gc_op},
                    {"seed", std::to_string(gc_seed)},
                    {"tol", std::to_string(gc_tol)}};
            if (!gc_out.empty()) cfg["out"] = gc_out;
            return run_gradcheck(cfg);
        }
        if (er->parsed()) {
            Cfg cfg{{"model", er_model}, {"input", er_input}, {"at", er_at},
                    {"mode", er_mode},   {"out", er_out}};
            return run_erf(cfg);
        }
        if (rp->parsed()) return run_replay(rp_manifest);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "failure: %s\n", e.what());
        return 1;
    }
    return 2;
}
