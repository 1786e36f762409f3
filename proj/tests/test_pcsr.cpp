#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sfuda/data.hpp"
#include "sfuda/harness.hpp"
#include "sfuda/pcsr.hpp"

using namespace sfuda;

namespace {

DomainPair shifted_pair(std::uint64_t seed, int C = 4, std::size_t d = 16, std::size_t n = 60) {
    ShiftSpec s = ShiftSpec::identity(d);
    Rng sr(seed + 100);
    for (auto& v : s.per_feature_scale) v = 2.0 * std::exp(sr.normal(0, 0.2));
    for (auto& v : s.mean_shift) v = sr.normal(0, 1.0);
    s.rotation_angle = 0.3;
    Rng rng(seed);
    return gen_gaussian_pair(C, d, n, 4.0, s, rng);
}

HeadModel trained_head(const DomainDataset& src, NormKind nk, std::uint64_t seed) {
    Rng rng(seed);
    HeadModel m = HeadModel::init(src.dims(), static_cast<std::size_t>(src.num_classes), nk, Activation::relu, rng, 32);
    TrainConfig cfg;
    cfg.epochs = 10;
    return train_supervised(m, src, Scope::full, cfg);
}

// Bottleneck maps a plane point (x, y) to (x, y, lift); cosine geometry on the lifted points.
HeadModel plane_head(double lift) {
    Rng rng(0);
    HeadModel m = HeadModel::init(2, 2, NormKind::batchnorm, Activation::relu, rng, 3);
    m.bottleneck_weight = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}});
    m.bottleneck_bias = {0, 0, lift};
    m.norm.gamma = {1, 1, 1};
    m.norm.beta = {0, 0, 0};
    m.norm.running_mean = {0, 0, 0};
    m.norm.running_var = {1, 1, 1};
    m.norm.eps = 0.0;
    return m;
}

}  // namespace

TEST(Polycentric, SingleCenterIsShotLabeling) {
    const auto pair = shifted_pair(1);
    const HeadModel m = trained_head(pair.source, NormKind::layernorm, 1);
    const auto shot = shot_pseudo_labels(m, pair.target.features);
    Rng rng(2);
    const auto poly = polycentric_pseudo_labels(m, pair.target.features, 1, rng);
    EXPECT_EQ(poly.labels, shot.labels);
    EXPECT_EQ(poly.centers, shot.prototypes.centers);
    EXPECT_EQ(poly.owner, (std::vector<int>{0, 1, 2, 3}));
}

TEST(Polycentric, SecondCenterRecoversFarSubcluster) {
    // Class 0: tight group A at (1, 4) and a strip B from (5, 4) to (9, 4).
    // Class 1: two heavy groups at (10, 8) and (10, 0.5), whose single mean sits at the end of B.
    std::vector<std::vector<double>> rows;
    std::vector<int> truth;
    auto grid = [&](double x, double y, int c) {
        for (int i = -1; i <= 1; ++i)
            for (int j = -1; j <= 1; ++j) {
                rows.push_back({x + 0.2 * i, y + 0.2 * j});
                truth.push_back(c);
            }
    };
    grid(1, 4, 0);
    for (int i = 0; i < 9; ++i) {
        rows.push_back({5 + 0.5 * i, 4});
        truth.push_back(0);
    }
    for (int k = 0; k < 5; ++k) {
        grid(10, 8, 1);
        grid(10, 0.5, 1);
    }
    const Matrix x = Matrix::from_rows(rows);
    HeadModel m = plane_head(10.0);
    // Classifier: class 1 iff x > 9.5, sharp enough to be one-hot on every sample.
    m.classifier_weight = Matrix::from_rows({{0, 50}, {0, 0}, {0, -50 * 9.5 / 10.0}});
    m.classifier_bias = {0, 0};

    // Brute force: one center per class is the plain class mean of the classifier's split.
    Matrix lifted(x.rows(), 3), onehot(x.rows(), 2);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        lifted(i, 0) = x(i, 0);
        lifted(i, 1) = x(i, 1);
        lifted(i, 2) = 10.0;
        onehot(i, x(i, 0) > 9.5 ? 1 : 0) = 1.0;
    }
    const Matrix means = oracle::brute_weighted_prototypes(onehot, lifted);
    std::vector<int> single(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        single[i] = oracle::cosine(lifted.row(i), means.row(1)) > oracle::cosine(lifted.row(i), means.row(0)) ? 1 : 0;
    std::size_t far_wrong = 0;
    for (std::size_t i = 9; i < 18; ++i) far_wrong += single[i] != 0;
    ASSERT_EQ(far_wrong, 5u);

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng r1(seed), r2(seed);
        EXPECT_EQ(polycentric_pseudo_labels(m, x, 1, r1, 0).labels, single);
        const auto two = polycentric_pseudo_labels(m, x, 2, r2, 0);
        EXPECT_EQ(two.labels, truth);
        EXPECT_EQ(two.centers.rows(), 4u);
    }
}

TEST(Polycentric, IdenticalSamples) {
    const Matrix x(12, 4, 1.5);
    Rng rng(3);
    const HeadModel m = HeadModel::init(4, 3, NormKind::layernorm, Activation::gelu, rng, 8);
    const auto r = polycentric_pseudo_labels(m, x, 2, rng);
    for (std::size_t c = 1; c < r.centers.rows(); ++c)
        for (std::size_t j = 0; j < r.centers.cols(); ++j) EXPECT_NEAR(r.centers(c, j), r.centers(0, j), 1e-12);
    for (int l : r.labels) EXPECT_EQ(l, r.labels.front());
}

TEST(Polycentric, CenterCountAndErrors) {
    const auto pair = shifted_pair(4);
    const HeadModel m = trained_head(pair.source, NormKind::batchnorm, 2);
    for (std::size_t M : {1u, 2u, 3u, 7u}) {
        Rng rng(M);
        const auto r = polycentric_pseudo_labels(m, pair.target.features, M, rng);
        EXPECT_LE(r.centers.rows(), 4 * M);
        EXPECT_EQ(r.owner.size(), r.centers.rows());
        for (std::size_t c = 0; c < r.centers.rows(); ++c) EXPECT_NEAR(norm2(r.centers.row(c)), 1.0, 1e-9);
    }
    Rng rng(0);
    EXPECT_THROW(polycentric_pseudo_labels(m, pair.target.features, 0, rng), Error);
}

TEST(Mixup, ForcedLambda) {
    Rng rng(5);
    const Matrix x = oracle::random_matrix(6, 3, rng);
    const Matrix y = oracle::softmax_rows(oracle::random_matrix(6, 4, rng));
    const auto one = mixup_batch(x, y, 0.3, rng, 1.0);
    EXPECT_EQ(one.x, x);
    EXPECT_EQ(one.y, y);
    const auto half = mixup_batch(x, y, 0.3, rng, 0.5);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(half.x(i, j), 0.5 * x(i, j) + 0.5 * x(half.partner[i], j));
    auto sorted = half.partner;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
}

TEST(Mixup, SoftLabelsStayOnSimplex) {
    Rng rng(6);
    for (int t = 0; t < 200; ++t) {
        const std::size_t b = 2 + rng.uniform_index(10), C = 2 + rng.uniform_index(6);
        Matrix y(b, C);
        for (std::size_t i = 0; i < b; ++i) y(i, rng.uniform_index(C)) = 1.0;
        const auto r = mixup_batch(oracle::random_matrix(b, 2, rng), y, rng.uniform(0.05, 3.0), rng);
        EXPECT_GE(r.lambda, 0.0);
        EXPECT_LE(r.lambda, 1.0);
        for (std::size_t i = 0; i < b; ++i) {
            double s = 0;
            for (double v : r.y.row(i)) {
                EXPECT_GE(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Mixup, Errors) {
    Rng rng(7);
    EXPECT_THROW(mixup_batch(Matrix(1, 2), Matrix(1, 2), 0.3, rng), Error);
    EXPECT_THROW(mixup_batch(Matrix(3, 2), Matrix(2, 2), 0.3, rng), Error);
    EXPECT_THROW(mixup_batch(Matrix(3, 2), Matrix(3, 2), 0.0, rng), Error);
    EXPECT_THROW(mixup_batch(Matrix(3, 2), Matrix(3, 2), 0.3, rng, 1.5), Error);
}

TEST(PcsrAdapt, ReducesToShotBitwise) {
    const auto pair = shifted_pair(8);
    for (NormKind nk : {NormKind::batchnorm, NormKind::layernorm}) {
        const HeadModel m = trained_head(pair.source, nk, 3);
        ShotConfig s;
        s.train.epochs = 3;
        s.train.seed = 42;
        PcsrConfig p;
        p.train = s.train;
        p.centers_per_class = 1;
        p.mixup_weight = 0.0;
        const HeadModel a = shot_adapt(m, pair.target.features, s);
        const HeadModel b = pcsr_adapt(m, pair.target.features, p);
        EXPECT_TRUE(a.bottleneck_equals(b));
        EXPECT_TRUE(a.classifier_equals(b));
    }
}

TEST(PcsrAdapt, ZeroRateOnlyMovesRunningStats) {
    const auto pair = shifted_pair(9);
    const HeadModel m = trained_head(pair.source, NormKind::batchnorm, 4);
    PcsrConfig cfg;
    cfg.train.epochs = 2;
    cfg.train.learning_rate = 0.0;
    const HeadModel a = pcsr_adapt(m, pair.target.features, cfg);
    EXPECT_EQ(a.bottleneck_weight, m.bottleneck_weight);
    EXPECT_EQ(a.norm.gamma, m.norm.gamma);
    EXPECT_EQ(a.norm.beta, m.norm.beta);
    EXPECT_NE(a.norm.running_mean, m.norm.running_mean);
    EXPECT_TRUE(a.classifier_equals(m));
}

TEST(PcsrAdapt, ClassifierFrozenAndValidated) {
    const auto pair = shifted_pair(10);
    const HeadModel m = trained_head(pair.source, NormKind::layernorm, 5);
    PcsrConfig cfg;
    cfg.train.epochs = 2;
    const HeadModel a = pcsr_adapt(m, pair.target.features, cfg);
    EXPECT_TRUE(a.classifier_equals(m));
    EXPECT_FALSE(a.bottleneck_equals(m));
    cfg.mixup_weight = -1.0;
    EXPECT_THROW(pcsr_adapt(m, pair.target.features, cfg), Error);
}

TEST(PcsrAdapt, TracksShotOnModerateShift) {
    const auto pair = shifted_pair(11, 5, 32, 100);
    TaskSpec spec;
    spec.source = std::make_shared<const DomainDataset>(pair.source);
    spec.target = std::make_shared<const DomainDataset>(pair.target);
    spec.norm = NormKind::layernorm;
    spec.task = Task::sfuda;
    spec.method = Method::shot;
    const double shot = task_accuracy(spec);
    spec.method = Method::pcsr;
    EXPECT_GE(task_accuracy(spec), shot - 1.0);
}
