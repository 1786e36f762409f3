#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "sfuda/data.hpp"
#include "sfuda/head.hpp"

using namespace sfuda;

namespace {

HeadModel small_model(NormKind norm, Activation act, std::uint64_t seed, std::size_t d = 5, std::size_t C = 3,
                      std::size_t h = 6) {
    Rng rng(seed);
    HeadModel m = HeadModel::init(d, C, norm, act, rng, h);
    for (double& g : m.norm.gamma) g = rng.uniform(0.5, 1.5);
    for (double& b : m.norm.beta) b = rng.normal(0, 0.3);
    for (double& b : m.bottleneck_bias) b = rng.normal(0, 0.3);
    for (double& b : m.classifier_bias) b = rng.normal(0, 0.3);
    return m;
}

DomainDataset blobs(int C, std::size_t d, std::size_t n_per, double sep, std::uint64_t seed) {
    Rng rng(seed);
    return gen_gaussian_pair(C, d, n_per, sep, ShiftSpec::identity(d), rng).source;
}

double ce_value(HeadModel& m, const Matrix& x, const std::vector<int>& y) {
    return cross_entropy(forward(m, x, Mode::train).logits, y, 0.1).value;
}

}  // namespace

TEST(Head, InitShapesAndStats) {
    Rng rng(0);
    HeadModel m = HeadModel::init(10, 4, NormKind::batchnorm, Activation::relu, rng);
    EXPECT_EQ(m.hidden_dim(), 256u);
    EXPECT_EQ(m.num_classes(), 4u);
    EXPECT_EQ(m.norm.running_var, std::vector<double>(256, 1.0));
    HeadModel l = HeadModel::init(10, 4, NormKind::layernorm, Activation::gelu, rng, 8);
    EXPECT_TRUE(l.norm.running_mean.empty());
    EXPECT_TRUE(l.norm.running_var.empty());
}

TEST(Head, BatchnormIdentityOnStandardizedBatch) {
    HeadModel m = small_model(NormKind::batchnorm, Activation::relu, 1);
    std::fill(m.norm.gamma.begin(), m.norm.gamma.end(), 1.0);
    std::fill(m.norm.beta.begin(), m.norm.beta.end(), 0.0);
    Rng rng(2);
    const Matrix x = oracle::random_matrix(8, 5, rng);
    const auto r = forward(m, x, Mode::train);
    Matrix z = r.cache.pre_norm;
    for (std::size_t j = 0; j < z.cols(); ++j) {
        double mu = 0, var = 0;
        for (std::size_t i = 0; i < z.rows(); ++i) mu += z(i, j) / z.rows();
        for (std::size_t i = 0; i < z.rows(); ++i) var += (z(i, j) - mu) * (z(i, j) - mu) / z.rows();
        for (std::size_t i = 0; i < z.rows(); ++i) z(i, j) = (z(i, j) - mu) / std::sqrt(var + m.norm.eps);
    }
    EXPECT_EQ(z.rows(), r.cache.normalized.rows());
    for (std::size_t i = 0; i < z.data().size(); ++i) EXPECT_NEAR(r.cache.normalized.data()[i], z.data()[i], 1e-9);
    for (std::size_t i = 0; i < z.data().size(); ++i) EXPECT_NEAR(r.cache.post_affine.data()[i], z.data()[i], 1e-9);
}

TEST(Head, LayernormConstantRowIsZero) {
    HeadModel m = small_model(NormKind::layernorm, Activation::relu, 1);
    for (double& w : m.bottleneck_weight.data()) w = 0.0;
    std::fill(m.bottleneck_bias.begin(), m.bottleneck_bias.end(), 2.5);
    const auto r = forward(m, Matrix(3, 5, 1.0), Mode::train);
    for (double v : r.cache.normalized.data()) EXPECT_EQ(v, 0.0);
}

TEST(Head, BatchnormNeedsTwoRows) {
    HeadModel m = small_model(NormKind::batchnorm, Activation::relu, 1);
    EXPECT_THROW(forward(m, Matrix(1, 5, 1.0), Mode::train), Error);
    EXPECT_NO_THROW(forward(m, Matrix(1, 5, 1.0), Mode::eval));
    EXPECT_THROW(forward(m, Matrix(2, 4, 1.0), Mode::eval), Error);
}

TEST(Head, EvalIndependentOfBatchComposition) {
    for (NormKind nk : {NormKind::batchnorm, NormKind::layernorm}) {
        HeadModel m = small_model(nk, Activation::gelu, 3);
        m.norm.running_mean.assign(nk == NormKind::batchnorm ? 6 : 0, 0.2);
        m.norm.running_var.assign(nk == NormKind::batchnorm ? 6 : 0, 1.7);
        Rng rng(4);
        const Matrix x = oracle::random_matrix(9, 5, rng);
        const Matrix all = forward_eval(m, x).logits;
        auto perm = rng.permutation(9);
        const Matrix shuffled = forward_eval(m, x.select_rows(perm)).logits;
        for (std::size_t i = 0; i < 9; ++i) {
            const std::vector<std::size_t> one{i};
            const Matrix single = forward_eval(m, x.select_rows(one)).logits;
            for (std::size_t c = 0; c < 3; ++c) {
                EXPECT_EQ(single(0, c), all(i, c));
                EXPECT_EQ(shuffled(i, c), all(perm[i], c));
            }
        }
    }
}

TEST(Head, BatchnormAffineInvarianceProperty) {
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
        HeadModel m = small_model(NormKind::batchnorm, Activation::relu, 10 + t);
        m.norm.eps = 0.0;
        const Matrix x = oracle::random_matrix(7, 5, rng);
        const Matrix base = forward(m, x, Mode::train).cache.normalized;
        // a⊙z + b through W and the bias
        HeadModel s = m;
        for (std::size_t j = 0; j < 6; ++j) {
            const double a = rng.uniform(0.1, 5.0), b = rng.normal(0, 3);
            for (std::size_t i = 0; i < 5; ++i) s.bottleneck_weight(i, j) *= a;
            s.bottleneck_bias[j] = a * s.bottleneck_bias[j] + b;
        }
        const Matrix moved = forward(s, x, Mode::train).cache.normalized;
        for (std::size_t i = 0; i < base.data().size(); ++i) EXPECT_NEAR(moved.data()[i], base.data()[i], 1e-9);
    }
}

TEST(Head, GradientMatchesFiniteDifferences) {
    Rng rng(6);
    double worst = 0;
    for (int t = 0; t < 20; ++t) {
        const NormKind nk = t % 2 ? NormKind::layernorm : NormKind::batchnorm;
        HeadModel m = small_model(nk, Activation::gelu, 100 + t);
        const Matrix x = oracle::random_matrix(4, 5, rng);
        const std::vector<int> y{0, 2, 1, 2};
        const auto r = forward(m, x, Mode::train);
        const auto analytic = backward(m, r.cache, cross_entropy(r.logits, y, 0.1).grad).flatten();
        const auto numeric = oracle::numeric_gradient(m, [&](HeadModel& mm) { return ce_value(mm, x, y); });
        worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Head, BackwardZeroAndLinearity) {
    HeadModel m = small_model(NormKind::batchnorm, Activation::relu, 7);
    Rng rng(8);
    const Matrix x = oracle::random_matrix(4, 5, rng);
    const auto r = forward(m, x, Mode::train);
    for (double v : backward(m, r.cache, Matrix(4, 3)).flatten()) EXPECT_EQ(v, 0.0);

    const std::vector<int> y{0, 1, 2, 1};
    Matrix g = cross_entropy(r.logits, y).grad;
    for (double& v : g.data()) v *= 4;  // summed loss
    const auto once = backward(m, r.cache, g).flatten();
    Matrix x2(8, 5);
    for (std::size_t i = 0; i < 8; ++i) std::copy(x.row(i % 4).begin(), x.row(i % 4).end(), x2.row(i).begin());
    const auto r2 = forward(m, x2, Mode::train);
    std::vector<int> y2 = y;
    y2.insert(y2.end(), y.begin(), y.end());
    Matrix g2 = cross_entropy(r2.logits, y2).grad;
    for (double& v : g2.data()) v *= 8;
    const auto twice = backward(m, r2.cache, g2).flatten();
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice[i], 2 * once[i], 1e-12 * (1 + std::abs(once[i])));
}

TEST(Head, StaleCacheRejected) {
    HeadModel m = small_model(NormKind::layernorm, Activation::relu, 9);
    Rng rng(1);
    const auto r = forward(m, oracle::random_matrix(4, 5, rng), Mode::train);
    m.generation++;
    EXPECT_THROW(backward(m, r.cache, Matrix(4, 3)), Error);
    const auto e = forward(m, oracle::random_matrix(4, 5, rng), Mode::eval);
    EXPECT_THROW(backward(m, e.cache, Matrix(4, 3)), Error);
}

TEST(Head, LabelSmoothingTarget) {
    const auto t = smoothed_target(1, 4, 0.1);
    EXPECT_NEAR(t[1], 0.9 + 0.1 / 4, 1e-15);
    EXPECT_NEAR(t[0], 0.1 / 4, 1e-15);
    EXPECT_NEAR(t[0] + t[1] + t[2] + t[3], 1.0, 1e-15);
}

TEST(Train, SeparableFullScopeFits) {
    const DomainDataset d = blobs(2, 4, 100, 6.0, 1);
    Rng rng(2);
    HeadModel m = HeadModel::init(4, 2, NormKind::batchnorm, Activation::relu, rng, 16);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 32;
    m = train_supervised(m, d, Scope::full, cfg);
    EXPECT_GE(accuracy_percent(predict(m, d.features), *d.labels), 99.0);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
    const DomainDataset d = blobs(3, 4, 30, 3.0, 2);
    Rng rng(3);
    const HeadModel m0 = HeadModel::init(4, 3, NormKind::batchnorm, Activation::relu, rng, 8);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.learning_rate = 0.0;
    const HeadModel m1 = train_supervised(m0, d, Scope::full, cfg);
    EXPECT_EQ(m1.bottleneck_weight, m0.bottleneck_weight);
    EXPECT_EQ(m1.classifier_weight, m0.classifier_weight);
    EXPECT_EQ(m1.norm.gamma, m0.norm.gamma);
    EXPECT_NE(m1.norm.running_mean, m0.norm.running_mean);
}

TEST(Train, ClassifierOnlyNeverTouchesBottleneck) {
    const DomainDataset d = blobs(3, 4, 30, 3.0, 3);
    for (NormKind nk : {NormKind::batchnorm, NormKind::layernorm}) {
        Rng rng(4);
        const HeadModel m0 = HeadModel::init(4, 3, nk, Activation::relu, rng, 8);
        TrainConfig cfg;
        cfg.epochs = 5;
        const HeadModel m1 = train_supervised(m0, d, Scope::classifier_only, cfg);
        EXPECT_TRUE(m1.bottleneck_equals(m0));
        EXPECT_FALSE(m1.classifier_equals(m0));
    }
}

TEST(Train, Errors) {
    DomainDataset d = blobs(2, 4, 10, 3.0, 4);
    Rng rng(5);
    const HeadModel m = HeadModel::init(4, 2, NormKind::batchnorm, Activation::relu, rng, 8);
    TrainConfig cfg;
    cfg.batch_size = 1;
    EXPECT_THROW(train_supervised(m, d, Scope::full, cfg), Error);
    d.labels.reset();
    EXPECT_THROW(train_supervised(m, d, Scope::full, TrainConfig{}), Error);
    EXPECT_THROW(two_phase_finetune(m, blobs(2, 4, 10, 3.0, 4), TrainConfig{}), Error);
}

TEST(TwoPhase, HugeClipEqualsSequentialTraining) {
    const DomainDataset d = blobs(3, 4, 40, 3.0, 5);
    Rng rng(6);
    const HeadModel m0 = HeadModel::init(4, 3, NormKind::layernorm, Activation::relu, rng, 8);
    TrainConfig cfg;
    cfg.epochs = 4;
    const HeadModel seq = train_supervised(train_supervised(m0, d, Scope::classifier_only, cfg), d, Scope::full, cfg);
    cfg.grad_clip = 1e300;
    const HeadModel two = two_phase_finetune(m0, d, cfg);
    EXPECT_TRUE(two.bottleneck_equals(seq));
    EXPECT_TRUE(two.classifier_equals(seq));
}

TEST(TwoPhase, ClippedUpdatesRespectNorm) {
    const DomainDataset d = blobs(3, 4, 40, 3.0, 6);
    Rng rng(7);
    const HeadModel m0 = HeadModel::init(4, 3, NormKind::batchnorm, Activation::relu, rng, 8);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.grad_clip = 1.0;
    std::size_t phase1 = 0;
    cfg.on_update = [&](const GradientRecord&) { ++phase1; };
    train_supervised(m0, d, Scope::classifier_only, cfg);
    double worst = 0;
    std::size_t seen = 0;
    cfg.on_update = [&](const GradientRecord& g) {
        if (seen++ >= phase1) worst = std::max(worst, g.global_norm());
    };
    two_phase_finetune(m0, d, cfg);
    EXPECT_GT(seen, phase1);
    EXPECT_LE(worst, 1.0 + 1e-9);
}

TEST(TwoPhase, StabilizesScaledFeatures) {
    Rng g(7);
    DomainDataset d = gen_gaussian_pair(3, 6, 60, 3.0, ShiftSpec::identity(6), g).source;
    for (double& v : d.features.data()) v *= 1e3;
    Rng rng(8);
    const HeadModel m0 = HeadModel::init(6, 3, NormKind::batchnorm, Activation::relu, rng, 16);
    TrainConfig cfg;
    cfg.epochs = 10;
    const HeadModel phase1 = train_supervised(m0, d, Scope::classifier_only, cfg);
    const double p1 = accuracy_percent(predict(phase1, d.features), *d.labels);
    const HeadModel plain = train_supervised(m0, d, Scope::full, cfg);
    const bool plain_finite = plain.bottleneck_weight.all_finite() && plain.classifier_weight.all_finite();
    const double plain_acc = plain_finite ? accuracy_percent(predict(plain, d.features), *d.labels) : 0.0;
    EXPECT_TRUE(!plain_finite || plain_acc < p1) << "plain " << plain_acc << " phase1 " << p1;
    cfg.grad_clip = 1.0;
    const HeadModel two = two_phase_finetune(m0, d, cfg);
    EXPECT_TRUE(two.bottleneck_weight.all_finite() && two.classifier_weight.all_finite());
    EXPECT_GT(accuracy_percent(predict(two, d.features), *d.labels), plain_acc);
}

TEST(Adabn, MatchesConvergedRunningStats) {
    const DomainDataset d = blobs(3, 5, 40, 3.0, 8);
    Rng rng(9);
    HeadModel m = HeadModel::init(5, 3, NormKind::batchnorm, Activation::relu, rng, 8);
    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = d.size();
    cfg.learning_rate = 0.0;
    m = train_supervised(m, d, Scope::full, cfg);
    const HeadModel a = adabn(m, d.features);
    for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(a.norm.running_mean[j], m.norm.running_mean[j], 1e-2);
        EXPECT_NEAR(a.norm.running_var[j], m.norm.running_var[j], 1e-2 * (1 + m.norm.running_var[j]));
    }
    EXPECT_EQ(a.bottleneck_weight, m.bottleneck_weight);
    EXPECT_EQ(a.classifier_weight, m.classifier_weight);
    EXPECT_EQ(a.norm.gamma, m.norm.gamma);
}

TEST(Adabn, AffineShiftIdentity) {
    Rng rng(10);
    HeadModel m = small_model(NormKind::batchnorm, Activation::relu, 11);
    m.norm.eps = 0.0;
    const Matrix x = oracle::random_matrix(30, 5, rng);
    const HeadModel a = adabn(m, x);
    // per-unit affine map of the pre-norm activations
    HeadModel s = a;
    for (std::size_t j = 0; j < 6; ++j) {
        const double mul = rng.uniform(0.2, 4.0), add = rng.normal(0, 5);
        for (std::size_t i = 0; i < 5; ++i) s.bottleneck_weight(i, j) *= mul;
        s.bottleneck_bias[j] = mul * s.bottleneck_bias[j] + add;
    }
    const HeadModel b = adabn(s, x);
    const auto fa = forward_eval(a, x).cache.normalized, fb = forward_eval(b, x).cache.normalized;
    for (std::size_t i = 0; i < fa.data().size(); ++i) EXPECT_NEAR(fa.data()[i], fb.data()[i], 1e-9);
}

TEST(Adabn, Errors) {
    const HeadModel l = small_model(NormKind::layernorm, Activation::relu, 1);
    EXPECT_THROW(adabn(l, Matrix(3, 5, 1.0)), Error);
    const HeadModel b = small_model(NormKind::batchnorm, Activation::relu, 1);
    EXPECT_THROW(adabn(b, Matrix(0, 5)), Error);
}

TEST(Checkpoint, RoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "sfuda_test_model.bin";
    HeadModel m = small_model(NormKind::batchnorm, Activation::gelu, 12);
    m.norm.running_mean.assign(6, 0.25);
    save_model(m, path);
    const HeadModel r = load_model(path);
    EXPECT_TRUE(r.bottleneck_equals(m));
    EXPECT_TRUE(r.classifier_equals(m));
    EXPECT_EQ(r.activation, Activation::gelu);
    std::filesystem::resize_file(path, 20);
    EXPECT_THROW(load_model(path), Error);
}

TEST(Schedule, InverseDecay) {
    EXPECT_DOUBLE_EQ(scheduled_lr(0.1, LrSchedule::inverse_decay, 0, 10), 0.1);
    EXPECT_NEAR(scheduled_lr(0.1, LrSchedule::inverse_decay, 10, 10), 0.1 * std::pow(11.0, -0.75), 1e-15);
    EXPECT_DOUBLE_EQ(scheduled_lr(0.1, LrSchedule::constant, 7, 10), 0.1);
}
