#pragma once

#include <cstddef>
#include <vector>

namespace duap {

// Dense row-major matrix of doubles. All encoder math runs in double; files
// store float32, so values that round-trip through disk are exact floats.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> d;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, 0.0) {}

    double& operator()(int r, int c) { return d[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return d[static_cast<std::size_t>(r) * cols + c]; }

    const double* row(int r) const { return d.data() + static_cast<std::size_t>(r) * cols; }
    double* row(int r) { return d.data() + static_cast<std::size_t>(r) * cols; }

    std::size_t size() const { return d.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    bool operator==(const Mat&) const = default;
};

// C x H x W pixel tensor (also used for perturbation deltas and gradients)
struct ImageTensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> d;

    ImageTensor() = default;
    ImageTensor(int c, int h, int w)
        : channels(c), height(h), width(w), d(static_cast<std::size_t>(c) * h * w, 0.0) {}

    double& at(int c, int y, int x) {
        return d[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return d[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    std::size_t size() const { return d.size(); }

    bool same_shape(const ImageTensor& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    bool operator==(const ImageTensor&) const = default;
};

// out = a * b
Mat matmul(const Mat& a, const Mat& b);
// out = a * b^T
Mat matmul_nt(const Mat& a, const Mat& b);
// out = a^T * b
Mat matmul_tn(const Mat& a, const Mat& b);
// out = a * b + bias broadcast over rows
Mat linear(const Mat& a, const Mat& w, const std::vector<double>& bias);

void add_inplace(Mat& a, const Mat& b);

double dot(const double* a, const double* b, int n);

// cosine similarity with a norm floor of 1e-12; identical inputs give
// exactly 1.0 (the anchor the attack objective relies on at delta = 0)
double cosine_similarity(const double* a, const double* b, int n);

// adds coeff * d cos(a, b) / d a into g; no-op below the norm floor
void add_cosine_grad_a(const double* a, const double* b, int n, double coeff, double* g);

}  // namespace duap
