#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dk/dataset.hpp"
#include "dk/model.hpp"

namespace dk {

// Desk-scale trainer: SGD with momentum, linear warmup into a cosine decay,
// per-layer learning-rate multipliers for the offset generators.

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double base_lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 4e-5;
    int warmup_epochs = 1;
    std::string schedule = "cosine";
    std::uint64_t seed = 1;
    double dk_lr_multiplier = 1e-2;

    void validate() const {
        if (epochs < 0 || batch_size < 1 || base_lr <= 0.0 || momentum < 0.0 ||
            weight_decay < 0.0 || warmup_epochs < 0 || dk_lr_multiplier <= 0.0)
            throw std::invalid_argument("TrainConfig: invalid field");
        if (epochs > 0 && warmup_epochs >= epochs)
            throw std::invalid_argument("TrainConfig: warmup_epochs must be < epochs");
        if (schedule != "cosine")
            throw std::invalid_argument("TrainConfig: unknown schedule '" + schedule + "'");
    }
};

/// Learning rate at a fractional epoch position t in [0, epochs).
inline double lr_at(const TrainConfig& cfg, double t) {
    if (cfg.warmup_epochs > 0 && t < cfg.warmup_epochs)
        return cfg.base_lr * t / cfg.warmup_epochs;
    const double span = cfg.epochs - cfg.warmup_epochs;
    const double u = span > 0.0 ? (t - cfg.warmup_epochs) / span : 0.0;
    return 0.5 * cfg.base_lr * (1.0 + std::cos(M_PI * u));
}

/// One momentum update over every registered parameter. Weight decay skips
/// biases; generator parameters scale by their layer's lr multiplier.
template <typename T>
void sgd_step(Model<T>& model, const TrainConfig& cfg, double lr) {
    for (auto& p : model.params()) {
        std::vector<T>& w = *p.value;
        std::vector<T>& g = *p.grad;
        std::vector<T>& v = *p.momentum;
        const double wd = p.decay ? cfg.weight_decay : 0.0;
        const double step = lr * p.lr_mult;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double grad = static_cast<double>(g[i]) +
                                wd * static_cast<double>(w[i]);
            v[i] = static_cast<T>(cfg.momentum * static_cast<double>(v[i]) + grad);
            w[i] = static_cast<T>(static_cast<double>(w[i]) -
                                  step * static_cast<double>(v[i]));
        }
    }
}

struct MetricRow {
    int epoch;
    std::string split;
    double accuracy;
    double loss;
    double mean_offset_mag;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string s = "epoch,split,accuracy,loss,mean_offset_mag\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.8f\n", r.epoch,
                      r.split.c_str(), r.accuracy, r.loss, r.mean_offset_mag);
        s += buf;
    }
    return s;
}

template <typename T>
struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
    double mean_offset_mag = 0.0;
    std::vector<double> per_sample_offset_mag;
};

template <typename T>
EvalResult<T> evaluate(Model<T>& model, const std::vector<ShapeSample<T>>& set,
                       int batch_size) {
    EvalResult<T> r;
    int correct = 0;
    double loss_sum = 0.0, mag_sum = 0.0;
    for (std::size_t start = 0; start < set.size(); start += batch_size) {
        const std::size_t end = std::min(set.size(), start + batch_size);
        std::vector<int> idx(end - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        std::vector<int> labels(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = set[idx[i]].label;
        const Tensor<T> logits = model.forward(batch_images(set, idx));
        const LossResult<T> l = softmax_cross_entropy(logits, labels);
        correct += l.correct;
        loss_sum += l.loss * static_cast<double>(idx.size());
        const std::vector<double> mags = model.last_dk_offset_magnitudes();
        for (double m : mags) {
            r.per_sample_offset_mag.push_back(m);
            mag_sum += m;
        }
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
    r.loss = loss_sum / static_cast<double>(set.size());
    if (!r.per_sample_offset_mag.empty())
        r.mean_offset_mag = mag_sum / static_cast<double>(r.per_sample_offset_mag.size());
    return r;
}

/// Full training run; deterministic given cfg.seed. Row 0 holds the
/// untrained validation metrics; row e holds the epoch-e validation metrics
/// with the epoch's mean training loss.
template <typename T>
std::vector<MetricRow> train(Model<T>& model, const std::vector<ShapeSample<T>>& train_set,
                             const std::vector<ShapeSample<T>>& val_set,
                             const TrainConfig& cfg) {
    cfg.validate();
    std::vector<MetricRow> log;
    if (cfg.epochs == 0) return log;

    Rng shuffle_rng(cfg.seed);
    const int n = static_cast<int>(train_set.size());
    const int batches = (n + cfg.batch_size - 1) / cfg.batch_size;

    EvalResult<T> ev = evaluate(model, val_set, cfg.batch_size);
    log.push_back({0, "val", ev.accuracy, ev.loss, ev.mean_offset_mag});

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the project RNG for cross-platform determinism
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
        double epoch_loss = 0.0;
        for (int b = 0; b < batches; ++b) {
            const int lo = b * cfg.batch_size;
            const int hi = std::min(n, lo + cfg.batch_size);
            std::vector<int> idx(order.begin() + lo, order.begin() + hi);
            std::vector<int> labels(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i)
                labels[i] = train_set[idx[i]].label;
            model.zero_grads();
            const Tensor<T> logits = model.forward(batch_images(train_set, idx));
            const LossResult<T> l = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(l.loss))
                throw std::runtime_error("train: loss diverged (non-finite) at epoch " +
                                         std::to_string(epoch));
            epoch_loss += l.loss * static_cast<double>(idx.size());
            model.backward(l.grad_logits);
            const double t = epoch + static_cast<double>(b) / batches;
            sgd_step(model, cfg, lr_at(cfg, t));
        }
        ev = evaluate(model, val_set, cfg.batch_size);
        log.push_back({epoch + 1, "val", ev.accuracy,
                       epoch_loss / static_cast<double>(n), ev.mean_offset_mag});
    }
    return log;
}

// ---------------------------------------------------------------------------
// Scale-awareness proxy: Spearman rank correlation between the per-sample
// mean |offset| of the last kernel-offset layer and the object scale.
// ---------------------------------------------------------------------------

struct CorrelationResult {
    double rho = 0.0;
    bool defined = false;
};

namespace train_detail {

inline std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * (i + j) + 1.0;  // average rank, 1-based
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace train_detail

inline CorrelationResult spearman(const std::vector<double>& a,
                                  const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 3)
        throw std::invalid_argument("spearman: need >= 3 paired samples");
    const auto constant = [](const std::vector<double>& v) {
        for (double x : v)
            if (x != v[0]) return false;
        return true;
    };
    if (constant(a) || constant(b)) return {0.0, false};
    const auto ra = train_detail::average_ranks(a);
    const auto rb = train_detail::average_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) { ma += ra[i]; mb += rb[i]; }
    ma /= n; mb /= n;
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return {num / std::sqrt(da * db), true};
}

template <typename T>
CorrelationResult offset_scale_correlation(Model<T>& model,
                                           const std::vector<ShapeSample<T>>& set,
                                           int batch_size = 32) {
    bool has_dk = false;
    for (const auto& l : model.layers) has_dk = has_dk || l.has_kernel_offsets();
    if (!has_dk)
        throw std::invalid_argument("offset_scale_correlation: model has no kernel-offset layer");
    const EvalResult<T> ev = evaluate(model, set, batch_size);
    if (ev.per_sample_offset_mag.size() != set.size())
        throw std::runtime_error("offset_scale_correlation: offset cache missing");
    std::vector<double> scales(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) scales[i] = set[i].scale;
    return spearman(ev.per_sample_offset_mag, scales);
}

}  // namespace dk
