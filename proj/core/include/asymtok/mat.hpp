#pragma once

#include <cstddef>
#include <vector>

#include "asymtok/common.hpp"

namespace asymtok {

// Minimal row-major dense matrix. No expression templates, no views; the
// model is small enough that plain loops stay within the runtime budget.
template <typename T>
struct MatT {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<T> data;

    MatT() = default;
    MatT(size_t r, size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

    T& operator()(size_t i, size_t j) { return data[i * cols + j]; }
    const T& operator()(size_t i, size_t j) const { return data[i * cols + j]; }

    T* row(size_t i) { return data.data() + i * cols; }
    const T* row(size_t i) const { return data.data() + i * cols; }

    bool same_shape(const MatT& o) const { return rows == o.rows && cols == o.cols; }
};

using Mat = MatT<float>;
using MatD = MatT<double>;

// out = a * b, (r x k) * (k x c). Loop order i-k-j keeps b accesses contiguous.
template <typename T>
MatT<T> matmul(const MatT<T>& a, const MatT<T>& b) {
    if (a.cols != b.rows) throw InputError("matmul: inner dimensions differ");
    MatT<T> out(a.rows, b.cols);
    for (size_t i = 0; i < a.rows; ++i) {
        const T* arow = a.row(i);
        T* orow = out.row(i);
        for (size_t k = 0; k < a.cols; ++k) {
            const T aik = arow[k];
            const T* brow = b.row(k);
            for (size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

// out = a * b^T, (r x k) * (c x k)^T.
template <typename T>
MatT<T> matmul_bt(const MatT<T>& a, const MatT<T>& b) {
    if (a.cols != b.cols) throw InputError("matmul_bt: inner dimensions differ");
    MatT<T> out(a.rows, b.rows);
    for (size_t i = 0; i < a.rows; ++i) {
        const T* arow = a.row(i);
        for (size_t j = 0; j < b.rows; ++j) {
            const T* brow = b.row(j);
            T acc = T(0);
            for (size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            out(i, j) = acc;
        }
    }
    return out;
}

// out = a^T * b, (k x r)^T * (k x c).
template <typename T>
MatT<T> matmul_at(const MatT<T>& a, const MatT<T>& b) {
    if (a.rows != b.rows) throw InputError("matmul_at: inner dimensions differ");
    MatT<T> out(a.cols, b.cols);
    for (size_t k = 0; k < a.rows; ++k) {
        const T* arow = a.row(k);
        const T* brow = b.row(k);
        for (size_t i = 0; i < a.cols; ++i) {
            const T aki = arow[i];
            T* orow = out.row(i);
            for (size_t j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

template <typename T, typename U>
MatT<U> mat_cast(const MatT<T>& a) {
    MatT<U> out(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = static_cast<U>(a.data[i]);
    return out;
}

}  // namespace asymtok
