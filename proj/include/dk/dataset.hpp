#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dk/random.hpp"
#include "dk/tensor.hpp"

namespace dk {

// Synthetic deformed-shapes dataset: four classes rendered at a continuous
// scale in [0.5, 2.0] and a uniform rotation, anti-aliased by supersampling.

enum class ShapeClass : int { Disk = 0, Square = 1, Triangle = 2, Cross = 3 };

inline const char* shape_name(int label) {
    static const char* names[4] = {"disk", "square", "triangle", "cross"};
    return names[label];
}

template <typename T>
struct ShapeSample {
    Tensor<T> image;  // (1,1,canvas,canvas), values in [0,1]
    int label = 0;
    double scale = 1.0;
    double rotation = 0.0;  // degrees
};

namespace shapes_detail {

inline bool inside_shape(int label, double qx, double qy, double r) {
    switch (label) {
        case 0:  // disk
            return qx * qx + qy * qy <= r * r;
        case 1:  // square
            return std::max(std::abs(qx), std::abs(qy)) <= 0.78 * r;
        case 2: {  // equilateral triangle, circumradius 1.1 r
            const double cr = 1.1 * r;
            for (int k = 0; k < 3; ++k) {
                const double a = (90.0 + 120.0 * k + 180.0) * M_PI / 180.0;
                if (qx * std::cos(a) + qy * std::sin(a) > cr * 0.5) return false;
            }
            return true;
        }
        case 3:  // cross
            return (std::abs(qx) <= 0.35 * r && std::abs(qy) <= r) ||
                   (std::abs(qy) <= 0.35 * r && std::abs(qx) <= r);
        default:
            return false;
    }
}

}  // namespace shapes_detail

template <typename T>
ShapeSample<T> render_shape(int canvas, int label, double scale, double rotation_deg,
                            double cy, double cx) {
    ShapeSample<T> s{Tensor<T>(1, 1, canvas, canvas), label, scale, rotation_deg};
    const double r = 0.2 * canvas * scale;
    const double th = -rotation_deg * M_PI / 180.0;
    const double c = std::cos(th), sn = std::sin(th);
    const int ss = 3;  // supersampling grid per pixel
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x) {
            int hits = 0;
            for (int a = 0; a < ss; ++a)
                for (int b = 0; b < ss; ++b) {
                    const double py = y + (a + 0.5) / ss - cy;
                    const double px = x + (b + 0.5) / ss - cx;
                    const double qx = c * px - sn * py;
                    const double qy = sn * px + c * py;
                    if (shapes_detail::inside_shape(label, qx, qy, r))
                        ++hits;
                }
            s.image(0, 0, y, x) = static_cast<T>(hits) / static_cast<T>(ss * ss);
        }
    return s;
}

// Deterministic given the seed; classes balanced round-robin. Pass a
// class label in [0,3] as `only_class` to generate a single-class set.
template <typename T>
std::vector<ShapeSample<T>> gen_dataset(int n_samples, int canvas, std::uint64_t seed,
                                        int only_class = -1) {
    if (canvas < 24)
        throw std::invalid_argument("gen_dataset: canvas too small (minimum 24)");
    Rng rng(seed);
    std::vector<ShapeSample<T>> out;
    out.reserve(n_samples);
    const double center = canvas / 2.0;
    const double jitter = 0.02 * canvas;
    for (int i = 0; i < n_samples; ++i) {
        const int label = only_class >= 0 ? only_class : i % 4;
        const double scale = rng.uniform(0.5, 2.0);
        const double rot = rng.uniform(0.0, 360.0);
        const double cy = center + rng.uniform(-jitter, jitter);
        const double cx = center + rng.uniform(-jitter, jitter);
        out.push_back(render_shape<T>(canvas, label, scale, rot, cy, cx));
    }
    return out;
}

/// Stack samples into one (N,1,H,W) batch tensor.
template <typename T>
Tensor<T> batch_images(const std::vector<ShapeSample<T>>& samples,
                       const std::vector<int>& indices) {
    if (indices.empty()) throw std::invalid_argument("batch_images: empty batch");
    const auto& first = samples[indices[0]].image;
    Tensor<T> batch(static_cast<int>(indices.size()), 1, first.h(), first.w());
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& img = samples[indices[b]].image;
        for (int y = 0; y < img.h(); ++y)
            for (int x = 0; x < img.w(); ++x)
                batch(static_cast<int>(b), 0, y, x) = img(0, 0, y, x);
    }
    return batch;
}

}  // namespace dk
