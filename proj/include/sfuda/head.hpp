#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sfuda/core.hpp"
#include "sfuda/data.hpp"

namespace sfuda {

enum class NormKind { batchnorm, layernorm };
enum class Activation { relu, gelu };
enum class Mode { train, eval };

std::string to_string(NormKind k);
std::string to_string(Activation a);
NormKind parse_norm_kind(const std::string& s);
Activation parse_activation(const std::string& s);

struct NormLayer {
    NormKind kind = NormKind::batchnorm;
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;  // batchnorm only
    std::vector<double> running_var;   // batchnorm only, > 0
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Bottleneck (linear -> norm -> activation) followed by a linear classifier.
struct HeadModel {
    static constexpr std::size_t kDefaultHidden = 256;
    static constexpr std::size_t kTensorCount = 6;

    Matrix bottleneck_weight;  // d x h
    std::vector<double> bottleneck_bias;
    NormLayer norm;
    Activation activation = Activation::relu;
    Matrix classifier_weight;  // h x C
    std::vector<double> classifier_bias;

    /// Bumped whenever parameters are updated; caches from older generations are rejected.
    std::uint64_t generation = 0;

    std::size_t input_dim() const { return bottleneck_weight.rows(); }
    std::size_t hidden_dim() const { return bottleneck_weight.cols(); }
    std::size_t num_classes() const { return classifier_weight.cols(); }

    /// He-normal weights, zero biases, gamma 1, beta 0.
    static HeadModel init(std::size_t input_dim, std::size_t num_classes, NormKind norm, Activation act, Rng& rng,
                          std::size_t hidden_dim = kDefaultHidden);

    /// Trainable tensors in declaration order: bottleneck W, b, gamma, beta, classifier W, b.
    std::array<std::span<double>, kTensorCount> parameters();
    std::array<std::span<const double>, kTensorCount> parameters() const;

    bool classifier_equals(const HeadModel& other) const;
    bool bottleneck_equals(const HeadModel& other) const;  // weights, bias and full norm state
};

extern const std::array<const char*, HeadModel::kTensorCount> kTensorNames;

struct ForwardCache {
    std::uint64_t generation = 0;
    Mode mode = Mode::eval;
    Matrix input;
    Matrix pre_norm;     // z = XW + b
    Matrix normalized;   // (z - mu) / sigma, before affine
    std::vector<double> inv_std;  // per unit (batchnorm) or per row (layernorm)
    Matrix post_affine;
    Matrix activated;
};

struct ForwardResult {
    Matrix logits;
    Matrix features;  // post-activation bottleneck output
    ForwardCache cache;
};

/// Gradient of a scalar loss for each parameter tensor, same order as HeadModel::parameters().
struct GradientRecord {
    std::array<std::vector<double>, HeadModel::kTensorCount> tensors;

    static GradientRecord zeros_like(const HeadModel& model);
    double global_norm() const;
    void scale(double s);
    void add(const GradientRecord& other, double s = 1.0);
    std::vector<double> flatten() const;
};

/// Train mode with batchnorm uses batch statistics and updates the running ones.
ForwardResult forward(HeadModel& model, const Matrix& x, Mode mode);
/// Eval-mode forward on an immutable model.
ForwardResult forward_eval(const HeadModel& model, const Matrix& x);
Matrix bottleneck_features(const HeadModel& model, const Matrix& x);
Matrix pre_norm_activations(const HeadModel& model, const Matrix& x);
std::vector<int> predict(const HeadModel& model, const Matrix& x);
double accuracy_percent(std::span<const int> predicted, std::span<const int> truth);

/// Exact gradients given dLoss/dLogits, including the batch-statistic path of batchnorm.
GradientRecord backward(const HeadModel& model, const ForwardCache& cache, const Matrix& dloss_dlogits);

struct LossResult {
    double value = 0.0;
    Matrix grad;  // w.r.t. the loss input (logits or scores)
};

/// Mean cross-entropy against label-smoothed one-hot targets; gradient w.r.t. logits.
LossResult cross_entropy(const Matrix& logits, std::span<const int> labels, double label_smoothing = 0.0);
/// Mean cross-entropy against soft target rows.
LossResult soft_cross_entropy(const Matrix& logits, const Matrix& targets);
/// Smoothed target distribution for one label.
std::vector<double> smoothed_target(int label, std::size_t num_classes, double label_smoothing);

enum class Scope { classifier_only, full, feature_extractor };
enum class LrSchedule { constant, inverse_decay };

/// lr·(1 + 10·t)^(−0.75) with t = iter / max_iter, or lr for the constant schedule.
double scheduled_lr(double base, LrSchedule schedule, std::size_t iter, std::size_t max_iter);

/// SGD with momentum and L2 weight decay; per-tensor learning-rate multipliers.
class Sgd {
public:
    Sgd(const HeadModel& model, double momentum, double weight_decay);

    /// Tensors whose multiplier is 0 are left bitwise untouched.
    void step(HeadModel& model, const GradientRecord& grad, double lr,
              const std::array<double, HeadModel::kTensorCount>& lr_mult);

private:
    double momentum_;
    double weight_decay_;
    std::array<std::vector<double>, HeadModel::kTensorCount> velocity_;
};

std::array<double, HeadModel::kTensorCount> scope_multipliers(Scope scope, double bottleneck_scale = 1.0);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 1e-2;
    double bottleneck_lr_scale = 0.1;  // full scope: bottleneck and norm get lr·scale
    double momentum = 0.9;
    double weight_decay = 1e-3;
    double label_smoothing = 0.1;
    LrSchedule lr_schedule = LrSchedule::inverse_decay;
    std::optional<double> grad_clip;
    std::uint64_t seed = 0;
    /// Called with every gradient actually applied (after clipping).
    std::function<void(const GradientRecord&)> on_update;
};

/// Mini-batch SGD on label-smoothed cross-entropy.
HeadModel train_supervised(HeadModel model, const DomainDataset& data, Scope scope, const TrainConfig& cfg);

/// Classifier-only phase, then full-scope training with global-norm gradient clipping.
HeadModel two_phase_finetune(HeadModel model, const DomainDataset& data, const TrainConfig& cfg);

/// Replace batchnorm running statistics with full-target statistics of the pre-norm activations.
HeadModel adabn(HeadModel model, const Matrix& target_features);

/// Shuffled index batches; a trailing batch smaller than `min_tail` is dropped.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng,
                                                   std::size_t min_tail);

/// Checkpoint: "SFHM", u32 d, h, C, norm kind, activation; then float64 tensors in declaration order.
void save_model(const HeadModel& model, const std::filesystem::path& path);
HeadModel load_model(const std::filesystem::path& path);

}  // namespace sfuda
