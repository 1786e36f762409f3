#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sfuda/core.hpp"

using namespace sfuda;

TEST(Matrix, ShapeAndData) {
    Matrix m(2, 3, 1.5);
    EXPECT_EQ(m.rows(), 2u);
    EXPECT_EQ(m.cols(), 3u);
    EXPECT_EQ(m.data().size(), 6u);
    EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), Error);
    EXPECT_THROW(Matrix::from_rows({{1, 2}, {3}}), Error);
}

TEST(Matrix, Products) {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{5, 6}, {7, 8}});
    EXPECT_EQ(matmul(a, b), Matrix::from_rows({{19, 22}, {43, 50}}));
    EXPECT_EQ(matmul_tn(a, b), Matrix::from_rows({{26, 30}, {38, 44}}));
    EXPECT_EQ(matmul_nt(a, b), Matrix::from_rows({{17, 23}, {39, 53}}));
    EXPECT_THROW(matmul(a, Matrix(3, 1)), Error);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const double x = a.normal();
        EXPECT_EQ(x, b.normal());
        differs |= x != c.normal();
    }
    EXPECT_TRUE(differs);
    Rng f1 = Rng(5).fork(1), f2 = Rng(5).fork(1), f3 = Rng(5).fork(2);
    EXPECT_EQ(f1.uniform(), f2.uniform());
    EXPECT_NE(Rng(5).fork(1).uniform(), f3.uniform());
}

TEST(Rng, PermutationAndBeta) {
    Rng rng(3);
    auto p = rng.permutation(50);
    std::sort(p.begin(), p.end());
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(p[i], i);
    double mean = 0;
    for (int i = 0; i < 4000; ++i) {
        const double v = rng.beta(2.0, 2.0);
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        mean += v / 4000;
    }
    EXPECT_NEAR(mean, 0.5, 0.02);
}

TEST(Softmax, Examples) {
    auto p = softmax(std::vector<double>{0, 0});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    p = softmax(std::vector<double>{std::log(2.0), 0});
    EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
    p = softmax(std::vector<double>{1000, 1000});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
    EXPECT_THROW(softmax(std::vector<double>{}), Error);
}

TEST(Softmax, ShiftInvariantProperty) {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> z(1 + rng.uniform_index(8));
        for (double& v : z) v = rng.normal(0, 5);
        const double c = rng.normal(0, 100);
        std::vector<double> zc = z;
        for (double& v : zc) v += c;
        const auto a = softmax(z), b = softmax(zc), o = oracle::softmax(z);
        double s = 0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            EXPECT_NEAR(a[i], b[i], 1e-12);
            EXPECT_NEAR(a[i], o[i], 1e-14);
            EXPECT_GT(a[i], 0.0);
            s += a[i];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Entropy, Examples) {
    EXPECT_EQ(entropy(std::vector<double>{0, 1, 0}), 0.0);
    EXPECT_NEAR(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-15);
    EXPECT_NEAR(entropy(std::vector<double>{0.9, 0.1}), -0.9 * std::log(0.9) - 0.1 * std::log(0.1), 1e-15);
    EXPECT_NEAR(entropy(std::vector<double>{0.9, 0.1}), 0.3251, 5e-5);
    EXPECT_THROW(entropy(std::vector<double>{1.1, -0.1}), Error);
}

TEST(Entropy, UniformIsMaximal) {
    Rng rng(2);
    for (std::size_t C : {2u, 3u, 7u}) {
        const double top = std::log(static_cast<double>(C));
        for (int t = 0; t < 1000; ++t) {
            std::vector<double> p(C);
            double s = 0;
            for (double& v : p) s += v = -std::log(rng.uniform(1e-12, 1.0));
            for (double& v : p) v /= s;
            const double h = entropy(p);
            EXPECT_LE(h, top + 1e-12);
            EXPECT_GE(h, 0.0);
        }
    }
}

TEST(Cosine, Examples) {
    EXPECT_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
    EXPECT_NEAR(cosine_similarity(std::vector<double>{3, 4}, std::vector<double>{3, 4}), 1.0, 1e-15);
    EXPECT_NEAR(cosine_similarity(std::vector<double>{1, 1}, std::vector<double>{1, 0}), 1 / std::sqrt(2.0), 1e-15);
    EXPECT_THROW(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}), Error);
}

TEST(Normalize, Rows) {
    const Matrix n = l2_normalize_rows(Matrix::from_rows({{3, 4}, {0, 1}}));
    EXPECT_NEAR(n(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(n(0, 1), 0.8, 1e-15);
    EXPECT_EQ(n(1, 1), 1.0);
    try {
        l2_normalize_rows(Matrix::from_rows({{1, 0}, {0, 0}}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find('1'), std::string::npos);
    }
}

TEST(Knn, Examples) {
    const Matrix line = Matrix::from_rows({{0, 0}, {1, 0}, {2, 0}});
    const auto nn = knn_indices(line, 1, Metric::euclidean);
    EXPECT_EQ(nn[0][0], 1u);
    EXPECT_EQ(nn[2][0], 1u);
    const Matrix dup = Matrix::from_rows({{1, 2}, {1, 2}, {-5, 1}});
    const auto d = knn_indices(dup, 1, Metric::cosine);
    EXPECT_EQ(d[0][0], 1u);
    EXPECT_EQ(d[1][0], 0u);
    EXPECT_THROW(knn_indices(line, 3, Metric::euclidean), Error);
}

TEST(Knn, MatchesBruteForce) {
    Rng rng(9);
    for (int t = 0; t < 5; ++t) {
        const Matrix m = oracle::random_matrix(50, 8, rng);
        for (std::size_t k : {1u, 3u, 5u})
            for (bool cos : {true, false}) {
                const auto got = knn_indices(m, k, cos ? Metric::cosine : Metric::euclidean);
                const auto want = oracle::brute_knn(m, k, cos);
                EXPECT_EQ(got, want);
            }
    }
}

TEST(TopK, TiesAndExclude) {
    const std::vector<double> s{1, 3, 3, 2};
    EXPECT_EQ(top_k(s, 2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(top_k(s, 2, 1), (std::vector<std::size_t>{2, 3}));
}

TEST(LeastSquares, Examples) {
    const Matrix x = Matrix::from_rows({{0, 1}, {1, 1}, {2, 1}});
    const std::vector<double> y{1, 3, 5};
    const auto b = least_squares(x, y);
    EXPECT_NEAR(b[0], 2.0, 1e-12);
    EXPECT_NEAR(b[1], 1.0, 1e-12);
    const auto id = least_squares(Matrix::from_rows({{1}}), std::vector<double>{7});
    EXPECT_NEAR(id[0], 7.0, 1e-15);
    EXPECT_THROW(least_squares(Matrix::from_rows({{1, 1}, {2, 2}, {3, 3}}), y), Error);
    EXPECT_THROW(least_squares(Matrix::from_rows({{1, 0, 0}, {0, 1, 0}}), std::vector<double>{1, 2}), Error);
}

TEST(LeastSquares, RecoversPlantedAndResidualOrthogonal) {
    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 30, p = 4;
        Matrix x = oracle::random_matrix(n, p, rng, 10.0);
        std::vector<double> beta(p), y(n);
        for (double& b : beta) b = rng.normal(0, 3);
        for (std::size_t i = 0; i < n; ++i) y[i] = dot(x.row(i), beta);
        const auto got = least_squares(x, y);
        for (std::size_t j = 0; j < p; ++j) EXPECT_NEAR(got[j], beta[j], 1e-8);
        for (double& v : y) v += rng.normal();
        const auto fit = least_squares(x, y);
        for (std::size_t j = 0; j < p; ++j) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += x(i, j) * (y[i] - dot(x.row(i), fit));
            EXPECT_NEAR(s, 0.0, 1e-8);
        }
    }
}

TEST(Hash, ContentHashSensitive) {
    Matrix a(2, 2, 1.0), b(2, 2, 1.0);
    EXPECT_EQ(content_hash(a), content_hash(b));
    b(1, 1) = 1.0000001;
    EXPECT_NE(content_hash(a), content_hash(b));
    EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}
