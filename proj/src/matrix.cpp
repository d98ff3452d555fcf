#include "qnoise/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace qnoise {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) {
        throw std::invalid_argument("Matrix: non-finite fill value");
    }
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                             " does not match " + shape_string());
    }
    if (!all_finite()) {
        throw std::invalid_argument("Matrix: non-finite entry");
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t n = rows.size();
    const std::size_t p = n == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(n * p);
    for (const auto& r : rows) {
        if (r.size() != p) {
            throw DimensionError("Matrix::from_rows: ragged rows");
        }
        data.insert(data.end(), r.begin(), r.end());
    }
    return Matrix(n, p, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0f;
    }
    return m;
}

float Matrix::min_value() const {
    if (data_.empty()) {
        throw std::invalid_argument("Matrix::min_value on empty matrix");
    }
    return *std::min_element(data_.begin(), data_.end());
}

float Matrix::max_value() const {
    if (data_.empty()) {
        throw std::invalid_argument("Matrix::max_value on empty matrix");
    }
    return *std::max_element(data_.begin(), data_.end());
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        return false;
    }
    return a.size() == 0 ||
           std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                             b.shape_string());
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + a.shape_string() + " x " + b.shape_string());
    }
    const std::size_t n = a.rows(), k = a.cols(), p = b.cols();
    Matrix out(n, p);
    // i-k-j loop: each output entry still accumulates over k in increasing order.
    for (std::size_t i = 0; i < n; ++i) {
        float* o = out.row(i).data();
        const float* ar = a.row(i).data();
        for (std::size_t kk = 0; kk < k; ++kk) {
            const float av = ar[kk];
            const float* br = b.row(kk).data();
            for (std::size_t j = 0; j < p; ++j) {
                o[j] += av * br[j];
            }
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: " + a.shape_string() + "^T x " + b.shape_string());
    }
    const std::size_t k = a.rows(), n = a.cols(), p = b.cols();
    Matrix out(n, p);
    for (std::size_t kk = 0; kk < k; ++kk) {
        const float* ar = a.row(kk).data();
        const float* br = b.row(kk).data();
        for (std::size_t i = 0; i < n; ++i) {
            const float av = ar[i];
            float* o = out.row(i).data();
            for (std::size_t j = 0; j < p; ++j) {
                o[j] += av * br[j];
            }
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "^T");
    }
    const std::size_t n = a.rows(), k = a.cols(), p = b.rows();
    Matrix out(n, p);
    for (std::size_t i = 0; i < n; ++i) {
        const float* ar = a.row(i).data();
        for (std::size_t j = 0; j < p; ++j) {
            const float* br = b.row(j).data();
            float acc = 0.0f;
            for (std::size_t kk = 0; kk < k; ++kk) {
                acc += ar[kk] * br[kk];
            }
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

double frobenius_sq(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frobenius_sq");
    double acc = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    return acc;
}

void add_inplace(Matrix& dst, const Matrix& src) {
    require_same_shape(dst, src, "add_inplace");
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

} // namespace qnoise
