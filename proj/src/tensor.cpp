#include "tensor.hpp"

#include <cmath>
#include <cstring>

#include "common.hpp"

namespace duap {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::Config: return "E_CONFIG";
        case ErrorCode::Data: return "E_DATA";
        case ErrorCode::Shape: return "E_SHAPE";
        case ErrorCode::Range: return "E_RANGE";
        case ErrorCode::Format: return "E_FORMAT";
        case ErrorCode::Labels: return "E_LABELS";
        case ErrorCode::Grid: return "E_GRID";
        case ErrorCode::Layer: return "E_LAYER";
        case ErrorCode::Contract: return "E_CONTRACT";
        case ErrorCode::Internal: return "E_INTERNAL";
    }
    return "E_INTERNAL";
}

Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            double v = arow[k];
            if (v == 0.0) continue;
            const double* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) orow[j] += v * brow[j];
        }
    }
    return out;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    Mat out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        for (int j = 0; j < b.rows; ++j) {
            out(i, j) = dot(arow, b.row(j), a.cols);
        }
    }
    return out;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
    Mat out(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* arow = a.row(k);
        const double* brow = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            double v = arow[i];
            if (v == 0.0) continue;
            double* orow = out.row(i);
            for (int j = 0; j < b.cols; ++j) orow[j] += v * brow[j];
        }
    }
    return out;
}

Mat linear(const Mat& a, const Mat& w, const std::vector<double>& bias) {
    Mat out(a.rows, w.cols);
    for (int i = 0; i < a.rows; ++i) {
        double* orow = out.row(i);
        std::memcpy(orow, bias.data(), sizeof(double) * w.cols);
        const double* arow = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            double v = arow[k];
            const double* wrow = w.row(k);
            for (int j = 0; j < w.cols; ++j) orow[j] += v * wrow[j];
        }
    }
    return out;
}

void add_inplace(Mat& a, const Mat& b) {
    for (std::size_t i = 0; i < a.d.size(); ++i) a.d[i] += b.d[i];
}

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void add_cosine_grad_a(const double* a, const double* b, int n, double coeff, double* g) {
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (int i = 0; i < n; ++i) {
        sab += a[i] * b[i];
        saa += a[i] * a[i];
        sbb += b[i] * b[i];
    }
    double denom = std::sqrt(saa * sbb);
    if (denom < 1e-12 || saa == 0.0) return;
    double c = sab / denom;
    for (int i = 0; i < n; ++i) {
        g[i] += coeff * (b[i] / denom - c * a[i] / saa);
    }
}

double cosine_similarity(const double* a, const double* b, int n) {
    bool identical = true;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (int i = 0; i < n; ++i) {
        identical = identical && a[i] == b[i];
        sab += a[i] * b[i];
        saa += a[i] * a[i];
        sbb += b[i] * b[i];
    }
    if (identical && saa > 0.0) return 1.0;
    double denom = std::sqrt(saa * sbb);
    if (denom < 1e-12) denom = 1e-12;
    double c = sab / denom;
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

}  // namespace duap
