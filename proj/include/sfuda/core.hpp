#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfuda {

/// Raised on any contract violation (bad shapes, invalid arguments, malformed files).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    /// Rows picked by index, in the given order.
    Matrix select_rows(std::span<const std::size_t> idx) const;

    bool all_finite() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// A·B
Matrix matmul(const Matrix& a, const Matrix& b);
/// Aᵀ·B
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// A·Bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

/// Seeded 64-bit Mersenne Twister. Identical seed gives an identical stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::mt19937_64& engine() { return engine_; }

    double normal(double mean = 0.0, double stddev = 1.0);
    double uniform(double lo = 0.0, double hi = 1.0);
    std::size_t uniform_index(std::size_t n);
    /// Beta(a, b) via two gamma draws.
    double beta(double a, double b);
    std::vector<std::size_t> permutation(std::size_t n);

    /// Independent child stream; deterministic in (seed, salt).
    Rng fork(std::uint64_t salt) const;

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

std::vector<double> softmax(std::span<const double> logits);
/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// Shannon entropy in nats, with 0·ln 0 = 0.
double entropy(std::span<const double> p);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

Matrix l2_normalize_rows(const Matrix& m);

enum class Metric { cosine, euclidean };

/// Exact k nearest neighbours of every row, self excluded. Lists are ordered by
/// decreasing similarity; ties go to the lower index.
std::vector<std::vector<std::size_t>> knn_indices(const Matrix& m, std::size_t k, Metric metric);

/// Top-k indices by score, skipping `exclude`; ties to lower index.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k,
                               std::size_t exclude = static_cast<std::size_t>(-1));

/// Minimizes ‖Xβ − y‖² with Householder QR. Throws on rank deficiency.
std::vector<double> least_squares(const Matrix& x, std::span<const double> y);

std::size_t argmax(std::span<const double> v);

/// FNV-1a over raw bytes; used for content hashes in manifests.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 1469598103934665603ULL);
std::uint64_t content_hash(const Matrix& m);
std::string hex64(std::uint64_t v);

}  // namespace sfuda
