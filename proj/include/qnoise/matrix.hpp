#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qnoise {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of 32-bit floats. Entries are checked to be finite
/// when the matrix is built from external data.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    float min_value() const;
    float max_value() const;
    bool all_finite() const;

    std::string shape_string() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// True when both matrices have the same shape and identical bit patterns.
bool bitwise_equal(const Matrix& a, const Matrix& b);

/// a × b, summing sequentially over the inner dimension.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ × b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a × bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// Σ (a − b)², accumulated in double.
double frobenius_sq(const Matrix& a, const Matrix& b);

void add_inplace(Matrix& dst, const Matrix& src);
void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

} // namespace qnoise
