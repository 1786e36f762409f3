#include "sfuda/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace sfuda {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw Error("matrix data length " + std::to_string(data_.size()) + " does not match " +
                    std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols()) throw Error("ragged rows in Matrix::from_rows");
        std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
}

Matrix Matrix::select_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= rows_) throw Error("row index " + std::to_string(idx[i]) + " out of range");
        auto src = row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw Error("matmul shape mismatch");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* crow = c.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.row(k).data();
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw Error("matmul_tn shape mismatch");
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* arow = a.row(k).data();
        const double* brow = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = c.row(i).data();
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw Error("matmul_nt shape mismatch");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
    return c;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double Rng::normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
}

double Rng::uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

std::size_t Rng::uniform_index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

double Rng::beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(engine_);
    const double y = std::gamma_distribution<double>(b, 1.0)(engine_);
    if (x + y == 0.0) return 0.5;
    return x / (x + y);
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    // Fisher-Yates written out so the order does not depend on the stdlib's shuffle.
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(i)]);
    return p;
}

Rng Rng::fork(std::uint64_t salt) const {
    // splitmix64 finalizer
    std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
}

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw Error("softmax of empty vector");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = softmax(logits.row(r));
        std::copy(row.begin(), row.end(), p.row(r).begin());
    }
    return p;
}

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v < 0.0) throw Error("entropy of vector with negative entry");
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("cosine_similarity size mismatch");
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw Error("cosine_similarity of zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Matrix l2_normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double n = norm2(m.row(r));
        if (n == 0.0) throw Error("cannot normalize zero row " + std::to_string(r));
        for (double& v : out.row(r)) v /= n;
    }
    return out;
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k, std::size_t exclude) {
    std::vector<std::size_t> idx;
    idx.reserve(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j)
        if (j != exclude) idx.push_back(j);
    if (k > idx.size()) throw Error("top_k: k exceeds candidate count");
    auto better = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    return idx;
}

std::vector<std::vector<std::size_t>> knn_indices(const Matrix& m, std::size_t k, Metric metric) {
    const std::size_t n = m.rows();
    if (k >= n) throw Error("knn_indices: k=" + std::to_string(k) + " must be below row count " + std::to_string(n));
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = norm2(m.row(i));
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (metric == Metric::cosine) {
                const double denom = norms[i] * norms[j];
                score[j] = denom == 0.0 ? 0.0 : dot(m.row(i), m.row(j)) / denom;
            } else {
                double d2 = 0.0;
                for (std::size_t c = 0; c < m.cols(); ++c) {
                    const double diff = m(i, c) - m(j, c);
                    d2 += diff * diff;
                }
                score[j] = -d2;
            }
        }
        out[i] = top_k(score, k, i);
    }
    return out;
}

std::vector<double> least_squares(const Matrix& x, std::span<const double> y) {
    const std::size_t n = x.rows(), p = x.cols();
    if (y.size() != n) throw Error("least_squares: y length does not match design rows");
    if (n < p) throw Error("least_squares: fewer rows than columns");

    // Householder QR on a column-scaled copy.
    Matrix a = x;
    std::vector<double> b(y.begin(), y.end());
    std::vector<double> scale(p, 1.0);
    for (std::size_t j = 0; j < p; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += a(i, j) * a(i, j);
        s = std::sqrt(s);
        if (s == 0.0) throw Error("least_squares: design column " + std::to_string(j) + " is zero");
        scale[j] = s;
        for (std::size_t i = 0; i < n; ++i) a(i, j) /= s;
    }
    std::vector<double> diag(p);
    for (std::size_t j = 0; j < p; ++j) {
        double norm = 0.0;
        for (std::size_t i = j; i < n; ++i) norm += a(i, j) * a(i, j);
        norm = std::sqrt(norm);
        const double alpha = a(j, j) > 0 ? -norm : norm;
        diag[j] = alpha;
        if (norm == 0.0) continue;
        // v = a[j:, j] - alpha e1, stored in place
        a(j, j) -= alpha;
        double vnorm2 = 0.0;
        for (std::size_t i = j; i < n; ++i) vnorm2 += a(i, j) * a(i, j);
        if (vnorm2 == 0.0) continue;
        for (std::size_t c = j + 1; c < p; ++c) {
            double s = 0.0;
            for (std::size_t i = j; i < n; ++i) s += a(i, j) * a(i, c);
            const double f = 2.0 * s / vnorm2;
            for (std::size_t i = j; i < n; ++i) a(i, c) -= f * a(i, j);
        }
        double s = 0.0;
        for (std::size_t i = j; i < n; ++i) s += a(i, j) * b[i];
        const double f = 2.0 * s / vnorm2;
        for (std::size_t i = j; i < n; ++i) b[i] -= f * a(i, j);
    }
    double rmax = 0.0;
    for (double d : diag) rmax = std::max(rmax, std::abs(d));
    for (std::size_t j = 0; j < p; ++j) {
        if (std::abs(diag[j]) <= 1e-10 * std::max(rmax, 1.0)) {
            throw Error("least_squares: design matrix is rank deficient (column " + std::to_string(j) + ")");
        }
    }
    std::vector<double> beta(p);
    for (std::size_t jj = p; jj-- > 0;) {
        double s = b[jj];
        for (std::size_t c = jj + 1; c < p; ++c) s -= a(jj, c) * beta[c];
        beta[jj] = s / diag[jj];
    }
    for (std::size_t j = 0; j < p; ++j) beta[j] /= scale[j];
    return beta;
}

std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw Error("argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t content_hash(const Matrix& m) {
    std::uint64_t dims[2] = {m.rows(), m.cols()};
    std::uint64_t h = fnv1a(dims, sizeof dims);
    return fnv1a(m.data().data(), m.data().size() * sizeof(double), h);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace sfuda
