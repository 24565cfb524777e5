#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dk {

/// Continuous 2D coordinate (kernel-space or data-space).
struct Coord2 {
    double x = 0.0;
    double y = 0.0;
};

// Dense rank-4 tensor, row-major (N, C, H, W). T is float or double;
// double is the project default, float exists for the fast training mode.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    Tensor(int n, int c, int h, int w, T fill = T(0))
        : n_(n), c_(c), h_(h), w_(w) {
        if (n < 0 || c < 0 || h < 0 || w < 0)
            throw std::invalid_argument("Tensor: negative dimension");
        const std::size_t total = static_cast<std::size_t>(n) * c * h * w;
        if (n > 0 && c > 0 && h > 0 && w > 0 &&
            total / static_cast<std::size_t>(n) / c / h != static_cast<std::size_t>(w))
            throw std::invalid_argument("Tensor: size overflow");
        data_.assign(total, fill);
    }

    int n() const { return n_; }
    int c() const { return c_; }
    int h() const { return h_; }
    int w() const { return w_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(int n, int c, int h, int w) {
        return data_[idx(n, c, h, w)];
    }
    T operator()(int n, int c, int h, int w) const {
        return data_[idx(n, c, h, w)];
    }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const Tensor& o) const {
        return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    /// Copy of one batch item as a (1,C,H,W) tensor.
    Tensor slice(int n) const {
        Tensor out(1, c_, h_, w_);
        const std::size_t plane = static_cast<std::size_t>(c_) * h_ * w_;
        std::copy(data_.begin() + n * plane, data_.begin() + (n + 1) * plane,
                  out.data_.begin());
        return out;
    }

private:
    std::size_t idx(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w;
    }

    int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> tensor_new(int n, int c, int h, int w, T fill) {
    return Tensor<T>(n, c, h, w, fill);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& t) {
    Tensor<T> out = t;
    for (T& v : out.data()) v = v > T(0) ? v : T(0);
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& t) {
    if (t.h() < 1 || t.w() < 1)
        throw std::invalid_argument("global_avg_pool: empty spatial plane");
    Tensor<T> out(t.n(), t.c(), 1, 1);
    const T inv = T(1) / static_cast<T>(t.h() * t.w());
    for (int n = 0; n < t.n(); ++n)
        for (int c = 0; c < t.c(); ++c) {
            T acc = T(0);
            for (int y = 0; y < t.h(); ++y)
                for (int x = 0; x < t.w(); ++x) acc += t(n, c, y, x);
            out(n, c, 0, 0) = acc * inv;
        }
    return out;
}

// Small dense matrix for affine maps (FC layers, offset generators).
template <typename T>
struct Matrix {
    int rows = 0, cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int r, int c, T fill = T(0)) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    T operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }
};

/// y = W x + b applied per batch item of a (N,C,1,1) tensor.
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& t, const Matrix<T>& weights,
                          const std::vector<T>& bias) {
    if (t.h() != 1 || t.w() != 1)
        throw std::invalid_argument("fully_connected: expects (N,C,1,1) input");
    if (weights.cols != t.c() || static_cast<int>(bias.size()) != weights.rows)
        throw std::invalid_argument("fully_connected: shape mismatch");
    Tensor<T> out(t.n(), weights.rows, 1, 1);
    for (int n = 0; n < t.n(); ++n)
        for (int m = 0; m < weights.rows; ++m) {
            T acc = bias[m];
            for (int c = 0; c < t.c(); ++c) acc += weights(m, c) * t(n, c, 0, 0);
            out(n, m, 0, 0) = acc;
        }
    return out;
}

}  // namespace dk
