#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sfuda/data.hpp"
#include "sfuda/harness.hpp"
#include "sfuda/shot.hpp"

using namespace sfuda;

namespace {

HeadModel trained_head(const DomainDataset& src, NormKind nk, std::uint64_t seed, std::size_t h = 32) {
    Rng rng(seed);
    HeadModel m = HeadModel::init(src.dims(), static_cast<std::size_t>(src.num_classes), nk, Activation::relu, rng, h);
    TrainConfig cfg;
    cfg.epochs = 10;
    return train_supervised(m, src, Scope::full, cfg);
}

DomainPair shifted_pair(std::uint64_t seed, int C = 4, std::size_t d = 16, std::size_t n = 60, double mean_shift = 1.0) {
    ShiftSpec s = ShiftSpec::identity(d);
    Rng sr(seed + 100);
    for (auto& v : s.per_feature_scale) v = 2.0 * std::exp(sr.normal(0, 0.2));
    for (auto& v : s.mean_shift) v = sr.normal(0, mean_shift);
    s.rotation_angle = 0.3;
    Rng rng(seed);
    return gen_gaussian_pair(C, d, n, 4.0, s, rng);
}

}  // namespace

TEST(WeightedPrototypes, HandArithmetic) {
    const Matrix p = Matrix::from_rows({{0.8, 0.2}, {0.5, 0.5}, {0.1, 0.9}});
    const Matrix f = Matrix::from_rows({{2, 0}, {1, 1}, {0, 4}});
    const auto k = weighted_prototypes(p, f, Matrix(2, 2));
    // k0 ∝ (0.8·(2,0) + 0.5·(1,1) + 0.1·(0,4)) / 1.4 = (2.1, 0.9) / 1.4
    const double n0 = std::hypot(2.1, 0.9);
    EXPECT_NEAR(k.centers(0, 0), 2.1 / n0, 1e-15);
    EXPECT_NEAR(k.centers(0, 1), 0.9 / n0, 1e-15);
    // k1 ∝ (0.4 + 0.5, 0.5 + 3.6) / 1.6
    const double n1 = std::hypot(0.9, 4.1);
    EXPECT_NEAR(k.centers(1, 0), 0.9 / n1, 1e-15);
    EXPECT_NEAR(k.centers(1, 1), 4.1 / n1, 1e-15);
}

TEST(WeightedPrototypes, OneHotIsClassMeanAndUniformIsGlobalMean) {
    Rng rng(1);
    const Matrix f = oracle::random_matrix(12, 5, rng);
    Matrix onehot(12, 3), uniform(12, 3, 1.0 / 3.0);
    for (std::size_t i = 0; i < 12; ++i) onehot(i, i % 3) = 1.0;
    const auto k = weighted_prototypes(onehot, f, Matrix(3, 5));
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> mean(5, 0.0);
        for (std::size_t i = c; i < 12; i += 3)
            for (std::size_t j = 0; j < 5; ++j) mean[j] += f(i, j);
        const double n = norm2(mean);
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(k.centers(c, j), mean[j] / n, 1e-12);
    }
    const auto u = weighted_prototypes(uniform, f, Matrix(3, 5));
    for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_NEAR(u.centers(1, j), u.centers(0, j), 1e-12);
        EXPECT_NEAR(u.centers(2, j), u.centers(0, j), 1e-12);
    }
}

TEST(WeightedPrototypes, ZeroMassFallbacks) {
    const Matrix f = Matrix::from_rows({{1, 0}, {0, 1}});
    const Matrix p = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}});
    const Matrix fallback = Matrix::from_rows({{0, 0}, {0, 0}, {3, 4}});
    const auto k = weighted_prototypes(p, f, fallback);
    EXPECT_NEAR(k.centers(2, 0), 0.6, 1e-15);
    EXPECT_NEAR(k.centers(2, 1), 0.8, 1e-15);
}

TEST(WeightedPrototypes, MatchBruteForceProperty) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 3 + rng.uniform_index(30), C = 2 + rng.uniform_index(5), h = 2 + rng.uniform_index(8);
        const Matrix probs = oracle::softmax_rows(oracle::random_matrix(n, C, rng, 2.0));
        const Matrix f = oracle::random_matrix(n, h, rng);
        const auto got = weighted_prototypes(probs, f, Matrix(C, h));
        const Matrix want = oracle::brute_weighted_prototypes(probs, f);
        for (std::size_t i = 0; i < want.data().size(); ++i) EXPECT_NEAR(got.centers.data()[i], want.data()[i], 1e-12);
    }
}

TEST(ShotLabels, InitialMatchesBruteForceOnModel) {
    const auto pair = shifted_pair(3);
    const HeadModel m = trained_head(pair.source, NormKind::layernorm, 1);
    const auto r = shot_pseudo_labels(m, pair.target.features);
    const auto fr = forward_eval(m, pair.target.features);
    const Matrix want = oracle::brute_weighted_prototypes(oracle::softmax_rows(fr.logits), fr.features);
    for (std::size_t i = 0; i < want.data().size(); ++i) EXPECT_NEAR(r.initial.centers.data()[i], want.data()[i], 1e-12);
}

TEST(ShotLabels, ZeroRoundsIsNearestRawPrototype) {
    const auto pair = shifted_pair(4);
    const HeadModel m = trained_head(pair.source, NormKind::batchnorm, 2);
    const auto r = shot_pseudo_labels(m, pair.target.features, 0);
    EXPECT_EQ(r.labels, nearest_prototype(bottleneck_features(m, pair.target.features), r.initial));
    EXPECT_EQ(r.prototypes.centers, r.initial.centers);
}

TEST(ShotLabels, InvariantToFeatureRescaling) {
    const auto pair = shifted_pair(5);
    const HeadModel m = trained_head(pair.source, NormKind::layernorm, 3);
    HeadModel s = m;
    const double a = 7.0;
    for (double& g : s.norm.gamma) g *= a;
    for (double& b : s.norm.beta) b *= a;
    for (double& w : s.classifier_weight.data()) w /= a;
    const auto r0 = shot_pseudo_labels(m, pair.target.features);
    const auto r1 = shot_pseudo_labels(s, pair.target.features);
    EXPECT_EQ(r0.labels, r1.labels);
}

TEST(ImLoss, Examples) {
    const std::size_t C = 4;
    const auto u = im_loss(Matrix(3, C, 0.5));
    EXPECT_NEAR(entropy_term(Matrix(3, C, 0.5)).value, std::log(4.0), 1e-14);
    EXPECT_NEAR(diversity_term(Matrix(3, C, 0.5)).value, -std::log(4.0), 1e-14);
    EXPECT_NEAR(u.value, 0.0, 1e-14);
    Matrix onehot(8, C, -800.0);
    for (std::size_t i = 0; i < 8; ++i) onehot(i, i % C) = 800.0;
    EXPECT_NEAR(im_loss(onehot).value, -std::log(4.0), 1e-12);
}

TEST(ImLoss, GradientMatchesFiniteDifferences) {
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
        Matrix z = oracle::random_matrix(4, 3, rng, 2.0);
        const auto l = im_loss(z);
        std::vector<double> num;
        for (double& v : z.data()) {
            const double keep = v;
            v = keep + 1e-5;
            const double up = im_loss(z).value;
            v = keep - 1e-5;
            const double down = im_loss(z).value;
            v = keep;
            num.push_back((up - down) / 2e-5);
        }
        EXPECT_LT(oracle::max_relative_error(l.grad.data(), num), 1e-4);
    }
}

TEST(ImLoss, LowerBoundProperty) {
    Rng rng(7);
    for (int t = 0; t < 500; ++t) {
        const std::size_t C = 2 + rng.uniform_index(6), b = 1 + rng.uniform_index(10);
        const Matrix z = oracle::random_matrix(b, C, rng, rng.uniform(0.1, 20.0));
        EXPECT_GE(im_loss(z).value, -std::log(static_cast<double>(C)) - 1e-9);
    }
}

TEST(ShotAdapt, ClassifierFrozen) {
    const auto pair = shifted_pair(8);
    const HeadModel m = trained_head(pair.source, NormKind::batchnorm, 4);
    ShotConfig cfg;
    cfg.train.epochs = 3;
    const HeadModel a = shot_adapt(m, pair.target.features, cfg);
    EXPECT_TRUE(a.classifier_equals(m));
    EXPECT_FALSE(a.bottleneck_equals(m));
}

TEST(ShotAdapt, ZeroRateAndWeightOnlyMovesRunningStats) {
    const auto pair = shifted_pair(9);
    const HeadModel m = trained_head(pair.source, NormKind::batchnorm, 5);
    ShotConfig cfg;
    cfg.train.epochs = 2;
    cfg.train.learning_rate = 0.0;
    cfg.ce_weight = 0.0;
    const HeadModel a = shot_adapt(m, pair.target.features, cfg);
    EXPECT_EQ(a.bottleneck_weight, m.bottleneck_weight);
    EXPECT_EQ(a.bottleneck_bias, m.bottleneck_bias);
    EXPECT_EQ(a.norm.gamma, m.norm.gamma);
    EXPECT_EQ(a.norm.beta, m.norm.beta);
    EXPECT_NE(a.norm.running_mean, m.norm.running_mean);
    EXPECT_TRUE(a.classifier_equals(m));
}

TEST(ShotAdapt, BatchnormNeedsTwoRows) {
    const auto pair = shifted_pair(10);
    const HeadModel m = trained_head(pair.source, NormKind::batchnorm, 6);
    ShotConfig cfg;
    cfg.train.batch_size = 1;
    EXPECT_THROW(shot_adapt(m, pair.target.features, cfg), Error);
}

TEST(ShotAdapt, FtShotBeatsFtOdgOnModerateShift) {
    const auto pair = shifted_pair(11, 5, 32, 100, 2.0);
    TaskSpec spec;
    spec.source = std::make_shared<const DomainDataset>(pair.source);
    spec.target = std::make_shared<const DomainDataset>(pair.target);
    spec.norm = NormKind::layernorm;
    spec.task = Task::ft_odg;
    const double odg = task_accuracy(spec);
    spec.task = Task::ft_sfuda;
    spec.method = Method::shot;
    EXPECT_GE(task_accuracy(spec), odg + 3.0);
}
