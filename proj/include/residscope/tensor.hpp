#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "residscope/errors.hpp"

namespace residscope {

// Dense row-major float matrix. All engine activations and weights live in
// one of these; fp32 throughout (16-bit weight files are up-converted at load).
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    std::span<float> row_span(int r) { return {row(r), static_cast<size_t>(cols)}; }
    std::span<const float> row_span(int r) const { return {row(r), static_cast<size_t>(cols)}; }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    bool empty() const { return data.empty(); }
    size_t size() const { return data.size(); }
};

// y += W.row_block(out) . x, with W stored [out_dim x in_dim].
// Separate rows/dot helpers keep call sites in the model readable.
inline float dot(const float* a, const float* b, int n) {
    float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// out[o] = sum_i W[o][i] * x[i] for o in [out_begin, out_end).
inline void matvec(const Mat& w, const float* x, float* out, int out_begin, int out_end) {
    if (out_end > w.rows) throw Error("matvec: row range exceeds matrix");
    for (int o = out_begin; o < out_end; ++o) {
        out[o - out_begin] = dot(w.row(o), x, w.cols);
    }
}

}  // namespace residscope
