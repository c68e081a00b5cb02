#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace zipcache {

// Dense row-major float matrix, used as (tokens x channels) or (queries x head_dim).
struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(size_t r, size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

    float *row(size_t r) { return data.data() + r * cols; }
    const float *row(size_t r) const { return data.data() + r * cols; }

    std::span<const float> row_span(size_t r) const { return {row(r), cols}; }

    float &at(size_t r, size_t c) { return data[r * cols + c]; }
    float at(size_t r, size_t c) const { return data[r * cols + c]; }

    bool same_shape(const Matrix &other) const { return rows == other.rows && cols == other.cols; }
};

// Shape of a 4-D attention-state tensor: batch, heads, sequence length, head dim.
struct Dims4 {
    uint32_t b = 0;
    uint32_t h = 0;
    uint32_t l = 0;
    uint32_t d = 0;

    size_t elems() const {
        return size_t(b) * size_t(h) * size_t(l) * size_t(d);
    }
    bool operator==(const Dims4 &) const = default;
};

// Row-major (b, h, l, d) float tensor holding Q, K or V states.
struct Tensor4 {
    Dims4 dims;
    std::vector<float> data;

    Tensor4() = default;
    explicit Tensor4(Dims4 dm, float fill = 0.0f) : dims(dm), data(dm.elems(), fill) {}

    size_t index(size_t b, size_t h, size_t l, size_t d) const {
        return ((b * dims.h + h) * dims.l + l) * dims.d + d;
    }
    float at(size_t b, size_t h, size_t l, size_t d) const { return data[index(b, h, l, d)]; }
    float &at(size_t b, size_t h, size_t l, size_t d) { return data[index(b, h, l, d)]; }

    // Copy of the (l x d) slice for one (batch, head).
    Matrix head_matrix(size_t b, size_t h) const {
        Matrix m(dims.l, dims.d);
        for (size_t t = 0; t < dims.l; ++t) {
            const float *src = data.data() + index(b, h, t, 0);
            std::copy(src, src + dims.d, m.row(t));
        }
        return m;
    }

    // Copy of the (l x h*d) slice for one batch row, channels flattened across heads.
    Matrix batch_matrix(size_t b) const {
        Matrix m(dims.l, size_t(dims.h) * dims.d);
        for (size_t h = 0; h < dims.h; ++h) {
            for (size_t t = 0; t < dims.l; ++t) {
                const float *src = data.data() + index(b, h, t, 0);
                std::copy(src, src + dims.d, m.row(t) + h * dims.d);
            }
        }
        return m;
    }
};

} // namespace zipcache
