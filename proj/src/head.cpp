#include "sfuda/head.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace sfuda {

const std::array<const char*, HeadModel::kTensorCount> kTensorNames{
    "bottleneck_weight", "bottleneck_bias", "norm_gamma", "norm_beta", "classifier_weight", "classifier_bias"};

std::string to_string(NormKind k) { return k == NormKind::batchnorm ? "batchnorm" : "layernorm"; }
std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

NormKind parse_norm_kind(const std::string& s) {
    if (s == "batchnorm" || s == "bn" || s == "BN") return NormKind::batchnorm;
    if (s == "layernorm" || s == "ln" || s == "LN") return NormKind::layernorm;
    throw Error("unknown norm kind '" + s + "'");
}

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "gelu") return Activation::gelu;
    throw Error("unknown activation '" + s + "'");
}

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double activate(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? x : 0.0;
    return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

double activate_grad(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Matrix linear(const Matrix& x, const Matrix& w, std::span<const double> b) {
    Matrix z = matmul(x, w);
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
    return z;
}

// Normalization, affine, activation and classifier; fills everything in `cache` after pre_norm.
ForwardResult run_forward(const HeadModel& model, NormLayer* stats_sink, const Matrix& x, Mode mode) {
    if (x.cols() != model.input_dim())
        throw Error("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                    std::to_string(model.input_dim()));
    const std::size_t b = x.rows(), h = model.hidden_dim();
    const NormLayer& norm = model.norm;
    if (mode == Mode::train && norm.kind == NormKind::batchnorm && b < 2)
        throw Error("forward: train-mode batchnorm needs a batch of at least 2 rows");

    ForwardResult out;
    ForwardCache& c = out.cache;
    c.generation = model.generation;
    c.mode = mode;
    c.input = x;
    c.pre_norm = linear(x, model.bottleneck_weight, model.bottleneck_bias);
    c.normalized = Matrix(b, h);

    if (norm.kind == NormKind::batchnorm) {
        c.inv_std.assign(h, 0.0);
        if (mode == Mode::train) {
            std::vector<double> mean(h, 0.0), var(h, 0.0);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < h; ++j) mean[j] += c.pre_norm(i, j);
            for (double& m : mean) m /= static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < h; ++j) {
                    const double dz = c.pre_norm(i, j) - mean[j];
                    var[j] += dz * dz;
                }
            for (double& v : var) v /= static_cast<double>(b);
            for (std::size_t j = 0; j < h; ++j) c.inv_std[j] = 1.0 / std::sqrt(var[j] + norm.eps);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < h; ++j) c.normalized(i, j) = (c.pre_norm(i, j) - mean[j]) * c.inv_std[j];
            if (stats_sink) {
                const double m = stats_sink->momentum;
                const double unbias = static_cast<double>(b) / static_cast<double>(b - 1);
                for (std::size_t j = 0; j < h; ++j) {
                    stats_sink->running_mean[j] = (1.0 - m) * stats_sink->running_mean[j] + m * mean[j];
                    stats_sink->running_var[j] = (1.0 - m) * stats_sink->running_var[j] + m * var[j] * unbias;
                }
            }
        } else {
            for (std::size_t j = 0; j < h; ++j) c.inv_std[j] = 1.0 / std::sqrt(norm.running_var[j] + norm.eps);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < h; ++j)
                    c.normalized(i, j) = (c.pre_norm(i, j) - norm.running_mean[j]) * c.inv_std[j];
        }
    } else {
        c.inv_std.assign(b, 0.0);
        for (std::size_t i = 0; i < b; ++i) {
            auto z = c.pre_norm.row(i);
            double mean = 0.0;
            for (double v : z) mean += v;
            mean /= static_cast<double>(h);
            double var = 0.0;
            for (double v : z) var += (v - mean) * (v - mean);
            var /= static_cast<double>(h);
            c.inv_std[i] = 1.0 / std::sqrt(var + norm.eps);
            for (std::size_t j = 0; j < h; ++j) c.normalized(i, j) = (z[j] - mean) * c.inv_std[i];
        }
    }

    c.post_affine = Matrix(b, h);
    c.activated = Matrix(b, h);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < h; ++j) {
            const double y = norm.gamma[j] * c.normalized(i, j) + norm.beta[j];
            c.post_affine(i, j) = y;
            c.activated(i, j) = activate(model.activation, y);
        }
    out.logits = linear(c.activated, model.classifier_weight, model.classifier_bias);
    out.features = c.activated;
    return out;
}

}  // namespace

HeadModel HeadModel::init(std::size_t input_dim, std::size_t num_classes, NormKind norm, Activation act, Rng& rng,
                          std::size_t hidden_dim) {
    if (input_dim == 0 || num_classes == 0 || hidden_dim == 0) throw Error("HeadModel::init: zero dimension");
    HeadModel m;
    m.bottleneck_weight = Matrix(input_dim, hidden_dim);
    const double s1 = std::sqrt(2.0 / static_cast<double>(input_dim));
    for (double& v : m.bottleneck_weight.data()) v = rng.normal(0.0, s1);
    m.bottleneck_bias.assign(hidden_dim, 0.0);
    m.norm.kind = norm;
    m.norm.gamma.assign(hidden_dim, 1.0);
    m.norm.beta.assign(hidden_dim, 0.0);
    if (norm == NormKind::batchnorm) {
        m.norm.running_mean.assign(hidden_dim, 0.0);
        m.norm.running_var.assign(hidden_dim, 1.0);
        m.norm.eps = 1e-5;
    } else {
        m.norm.eps = 1e-6;
    }
    m.activation = act;
    m.classifier_weight = Matrix(hidden_dim, num_classes);
    const double s2 = std::sqrt(2.0 / static_cast<double>(hidden_dim));
    for (double& v : m.classifier_weight.data()) v = rng.normal(0.0, s2);
    m.classifier_bias.assign(num_classes, 0.0);
    return m;
}

std::array<std::span<double>, HeadModel::kTensorCount> HeadModel::parameters() {
    return {std::span<double>(bottleneck_weight.data()), std::span<double>(bottleneck_bias),
            std::span<double>(norm.gamma),               std::span<double>(norm.beta),
            std::span<double>(classifier_weight.data()), std::span<double>(classifier_bias)};
}

std::array<std::span<const double>, HeadModel::kTensorCount> HeadModel::parameters() const {
    return {std::span<const double>(bottleneck_weight.data()), std::span<const double>(bottleneck_bias),
            std::span<const double>(norm.gamma),               std::span<const double>(norm.beta),
            std::span<const double>(classifier_weight.data()), std::span<const double>(classifier_bias)};
}

namespace {
bool bytes_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}
}  // namespace

bool HeadModel::classifier_equals(const HeadModel& other) const {
    return bytes_equal(classifier_weight.data(), other.classifier_weight.data()) &&
           bytes_equal(classifier_bias, other.classifier_bias);
}

bool HeadModel::bottleneck_equals(const HeadModel& other) const {
    return bytes_equal(bottleneck_weight.data(), other.bottleneck_weight.data()) &&
           bytes_equal(bottleneck_bias, other.bottleneck_bias) && bytes_equal(norm.gamma, other.norm.gamma) &&
           bytes_equal(norm.beta, other.norm.beta) && bytes_equal(norm.running_mean, other.norm.running_mean) &&
           bytes_equal(norm.running_var, other.norm.running_var);
}

GradientRecord GradientRecord::zeros_like(const HeadModel& model) {
    GradientRecord g;
    const auto params = model.parameters();
    for (std::size_t t = 0; t < HeadModel::kTensorCount; ++t) g.tensors[t].assign(params[t].size(), 0.0);
    return g;
}

double GradientRecord::global_norm() const {
    double s = 0.0;
    for (const auto& t : tensors)
        for (double v : t) s += v * v;
    return std::sqrt(s);
}

void GradientRecord::scale(double s) {
    for (auto& t : tensors)
        for (double& v : t) v *= s;
}

void GradientRecord::add(const GradientRecord& other, double s) {
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        if (tensors[t].size() != other.tensors[t].size()) throw Error("GradientRecord::add shape mismatch");
        for (std::size_t i = 0; i < tensors[t].size(); ++i) tensors[t][i] += s * other.tensors[t][i];
    }
}

std::vector<double> GradientRecord::flatten() const {
    std::vector<double> out;
    for (const auto& t : tensors) out.insert(out.end(), t.begin(), t.end());
    return out;
}

ForwardResult forward(HeadModel& model, const Matrix& x, Mode mode) {
    return run_forward(model, mode == Mode::train ? &model.norm : nullptr, x, mode);
}

ForwardResult forward_eval(const HeadModel& model, const Matrix& x) { return run_forward(model, nullptr, x, Mode::eval); }

Matrix bottleneck_features(const HeadModel& model, const Matrix& x) { return forward_eval(model, x).features; }

Matrix pre_norm_activations(const HeadModel& model, const Matrix& x) {
    if (x.cols() != model.input_dim()) throw Error("pre_norm_activations: input dimension mismatch");
    return linear(x, model.bottleneck_weight, model.bottleneck_bias);
}

std::vector<int> predict(const HeadModel& model, const Matrix& x) {
    const Matrix logits = forward_eval(model, x).logits;
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = static_cast<int>(argmax(logits.row(i)));
    return out;
}

double accuracy_percent(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size()) throw Error("accuracy: prediction/label length mismatch");
    if (truth.empty()) throw Error("accuracy: empty evaluation set");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
    return 100.0 * static_cast<double>(hit) / static_cast<double>(truth.size());
}

GradientRecord backward(const HeadModel& model, const ForwardCache& cache, const Matrix& dlogits) {
    if (cache.generation != model.generation)
        throw Error("backward: stale cache (model generation " + std::to_string(model.generation) +
                    ", cache generation " + std::to_string(cache.generation) + ")");
    if (cache.mode != Mode::train) throw Error("backward: requires a train-mode forward cache");
    const std::size_t b = cache.input.rows(), h = model.hidden_dim(), C = model.num_classes();
    if (dlogits.rows() != b || dlogits.cols() != C) throw Error("backward: upstream gradient shape mismatch");

    GradientRecord g = GradientRecord::zeros_like(model);
    auto& dW1 = g.tensors[0];
    auto& db1 = g.tensors[1];
    auto& dgamma = g.tensors[2];
    auto& dbeta = g.tensors[3];
    auto& dW2 = g.tensors[4];
    auto& db2 = g.tensors[5];

    const Matrix gw2 = matmul_tn(cache.activated, dlogits);
    std::copy(gw2.data().begin(), gw2.data().end(), dW2.begin());
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < C; ++k) db2[k] += dlogits(i, k);

    const Matrix da = matmul_nt(dlogits, model.classifier_weight);  // b x h
    Matrix dxhat(b, h);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < h; ++j) {
            const double dy = da(i, j) * activate_grad(model.activation, cache.post_affine(i, j));
            dgamma[j] += dy * cache.normalized(i, j);
            dbeta[j] += dy;
            dxhat(i, j) = dy * model.norm.gamma[j];
        }

    Matrix dz(b, h);
    if (model.norm.kind == NormKind::batchnorm) {
        const double nb = static_cast<double>(b);
        for (std::size_t j = 0; j < h; ++j) {
            double sum = 0.0, sum_x = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
                sum += dxhat(i, j);
                sum_x += dxhat(i, j) * cache.normalized(i, j);
            }
            for (std::size_t i = 0; i < b; ++i)
                dz(i, j) = cache.inv_std[j] / nb * (nb * dxhat(i, j) - sum - cache.normalized(i, j) * sum_x);
        }
    } else {
        const double nh = static_cast<double>(h);
        for (std::size_t i = 0; i < b; ++i) {
            double sum = 0.0, sum_x = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
                sum += dxhat(i, j);
                sum_x += dxhat(i, j) * cache.normalized(i, j);
            }
            for (std::size_t j = 0; j < h; ++j)
                dz(i, j) = cache.inv_std[i] / nh * (nh * dxhat(i, j) - sum - cache.normalized(i, j) * sum_x);
        }
    }

    const Matrix gw1 = matmul_tn(cache.input, dz);
    std::copy(gw1.data().begin(), gw1.data().end(), dW1.begin());
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < h; ++j) db1[j] += dz(i, j);
    return g;
}

std::vector<double> smoothed_target(int label, std::size_t num_classes, double label_smoothing) {
    std::vector<double> t(num_classes, label_smoothing / static_cast<double>(num_classes));
    t[static_cast<std::size_t>(label)] += 1.0 - label_smoothing;
    return t;
}

LossResult cross_entropy(const Matrix& logits, std::span<const int> labels, double label_smoothing) {
    const std::size_t b = logits.rows(), C = logits.cols();
    if (labels.size() != b) throw Error("cross_entropy: label count mismatch");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw Error("cross_entropy: label_smoothing must lie in [0, 1)");
    LossResult out{0.0, Matrix(b, C)};
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C) throw Error("cross_entropy: label out of range");
        const auto p = softmax(logits.row(i));
        const auto t = smoothed_target(labels[i], C, label_smoothing);
        const double mx = *std::max_element(logits.row(i).begin(), logits.row(i).end());
        double lse = 0.0;
        for (double z : logits.row(i)) lse += std::exp(z - mx);
        lse = mx + std::log(lse);
        for (std::size_t k = 0; k < C; ++k) {
            out.value -= t[k] * (logits(i, k) - lse);
            out.grad(i, k) = (p[k] - t[k]) / static_cast<double>(b);
        }
    }
    out.value /= static_cast<double>(b);
    return out;
}

LossResult soft_cross_entropy(const Matrix& logits, const Matrix& targets) {
    const std::size_t b = logits.rows(), C = logits.cols();
    if (targets.rows() != b || targets.cols() != C) throw Error("soft_cross_entropy: shape mismatch");
    LossResult out{0.0, Matrix(b, C)};
    for (std::size_t i = 0; i < b; ++i) {
        const auto p = softmax(logits.row(i));
        const double mx = *std::max_element(logits.row(i).begin(), logits.row(i).end());
        double lse = 0.0;
        for (double z : logits.row(i)) lse += std::exp(z - mx);
        lse = mx + std::log(lse);
        double tsum = 0.0;
        for (std::size_t k = 0; k < C; ++k) tsum += targets(i, k);
        for (std::size_t k = 0; k < C; ++k) {
            out.value -= targets(i, k) * (logits(i, k) - lse);
            out.grad(i, k) = (tsum * p[k] - targets(i, k)) / static_cast<double>(b);
        }
    }
    out.value /= static_cast<double>(b);
    return out;
}

double scheduled_lr(double base, LrSchedule schedule, std::size_t iter, std::size_t max_iter) {
    if (schedule == LrSchedule::constant || max_iter == 0) return base;
    const double t = static_cast<double>(iter) / static_cast<double>(max_iter);
    return base * std::pow(1.0 + 10.0 * t, -0.75);
}

Sgd::Sgd(const HeadModel& model, double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {
    const auto params = model.parameters();
    for (std::size_t t = 0; t < HeadModel::kTensorCount; ++t) velocity_[t].assign(params[t].size(), 0.0);
}

void Sgd::step(HeadModel& model, const GradientRecord& grad, double lr,
               const std::array<double, HeadModel::kTensorCount>& lr_mult) {
    auto params = model.parameters();
    bool touched = false;
    for (std::size_t t = 0; t < HeadModel::kTensorCount; ++t) {
        const double rate = lr * lr_mult[t];
        if (rate == 0.0) continue;
        auto& v = velocity_[t];
        const auto& g = grad.tensors[t];
        auto p = params[t];
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = momentum_ * v[i] + g[i] + weight_decay_ * p[i];
            p[i] -= rate * v[i];
        }
        touched = true;
    }
    if (touched) ++model.generation;
}

std::array<double, HeadModel::kTensorCount> scope_multipliers(Scope scope, double bottleneck_scale) {
    switch (scope) {
        case Scope::classifier_only: return {0, 0, 0, 0, 1, 1};
        case Scope::feature_extractor: return {1, 1, 1, 1, 0, 0};
        case Scope::full: break;
    }
    const double s = bottleneck_scale;
    return {s, s, s, s, 1, 1};
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng,
                                                   std::size_t min_tail) {
    if (batch_size == 0) throw Error("batch size must be positive");
    const auto perm = rng.permutation(n);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        if (end - start < min_tail) break;
        batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

namespace {

std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size, std::size_t min_tail) {
    const std::size_t full = n / batch_size, tail = n % batch_size;
    return full + (tail > 0 && tail >= min_tail ? 1 : 0);
}

void clip_gradient(GradientRecord& g, double max_norm) {
    const double norm = g.global_norm();
    if (norm > max_norm) g.scale(max_norm / norm);
}

HeadModel train_classifier_only(HeadModel model, const DomainDataset& data, const TrainConfig& cfg) {
    const auto& labels = data.require_labels("train_supervised");
    const Matrix feats = bottleneck_features(model, data.features);
    Rng rng(cfg.seed);
    Sgd opt(model, cfg.momentum, cfg.weight_decay);
    const auto mult = scope_multipliers(Scope::classifier_only);
    const std::size_t max_iter = cfg.epochs * batches_per_epoch(data.size(), cfg.batch_size, 1);
    std::size_t iter = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (const auto& batch : make_batches(data.size(), cfg.batch_size, rng, 1)) {
            const Matrix a = feats.select_rows(batch);
            std::vector<int> y(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) y[i] = labels[batch[i]];
            Matrix logits = matmul(a, model.classifier_weight);
            for (std::size_t i = 0; i < logits.rows(); ++i)
                for (std::size_t k = 0; k < logits.cols(); ++k) logits(i, k) += model.classifier_bias[k];
            const LossResult ce = cross_entropy(logits, y, cfg.label_smoothing);
            GradientRecord g = GradientRecord::zeros_like(model);
            const Matrix gw = matmul_tn(a, ce.grad);
            g.tensors[4] = gw.data();
            for (std::size_t i = 0; i < ce.grad.rows(); ++i)
                for (std::size_t k = 0; k < ce.grad.cols(); ++k) g.tensors[5][k] += ce.grad(i, k);
            if (cfg.grad_clip) clip_gradient(g, *cfg.grad_clip);
            if (cfg.on_update) cfg.on_update(g);
            opt.step(model, g, scheduled_lr(cfg.learning_rate, cfg.lr_schedule, iter, max_iter), mult);
            ++iter;
        }
    }
    return model;
}

}  // namespace

HeadModel train_supervised(HeadModel model, const DomainDataset& data, Scope scope, const TrainConfig& cfg) {
    const auto& labels = data.require_labels("train_supervised");
    if (data.dims() != model.input_dim()) throw Error("train_supervised: feature dimension does not match model");
    if (cfg.batch_size == 0) throw Error("train_supervised: batch_size must be positive");
    if (scope == Scope::classifier_only) return train_classifier_only(std::move(model), data, cfg);

    const bool bn = model.norm.kind == NormKind::batchnorm;
    if (bn && cfg.batch_size < 2) throw Error("train_supervised: batchnorm training needs batch_size >= 2");
    const std::size_t min_tail = bn ? 2 : 1;
    Rng rng(cfg.seed);
    Sgd opt(model, cfg.momentum, cfg.weight_decay);
    const auto mult = scope_multipliers(scope, cfg.bottleneck_lr_scale);
    const std::size_t max_iter = cfg.epochs * batches_per_epoch(data.size(), cfg.batch_size, min_tail);
    std::size_t iter = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (const auto& batch : make_batches(data.size(), cfg.batch_size, rng, min_tail)) {
            const Matrix x = data.features.select_rows(batch);
            std::vector<int> y(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) y[i] = labels[batch[i]];
            const ForwardResult fr = forward(model, x, Mode::train);
            const LossResult ce = cross_entropy(fr.logits, y, cfg.label_smoothing);
            GradientRecord g = backward(model, fr.cache, ce.grad);
            if (scope == Scope::feature_extractor) {
                g.tensors[4].assign(g.tensors[4].size(), 0.0);
                g.tensors[5].assign(g.tensors[5].size(), 0.0);
            }
            if (cfg.grad_clip) clip_gradient(g, *cfg.grad_clip);
            if (cfg.on_update) cfg.on_update(g);
            opt.step(model, g, scheduled_lr(cfg.learning_rate, cfg.lr_schedule, iter, max_iter), mult);
            ++iter;
        }
    }
    return model;
}

HeadModel two_phase_finetune(HeadModel model, const DomainDataset& data, const TrainConfig& cfg) {
    if (!cfg.grad_clip) throw Error("two_phase_finetune: grad_clip must be set");
    if (!(*cfg.grad_clip > 0.0)) throw Error("two_phase_finetune: grad_clip must be positive");
    TrainConfig head_phase = cfg;
    head_phase.grad_clip.reset();
    model = train_supervised(std::move(model), data, Scope::classifier_only, head_phase);
    return train_supervised(std::move(model), data, Scope::full, cfg);
}

HeadModel adabn(HeadModel model, const Matrix& target_features) {
    if (model.norm.kind != NormKind::batchnorm) throw Error("adabn: model has no batchnorm statistics to adapt");
    if (target_features.rows() == 0) throw Error("adabn: empty target set");
    const Matrix z = pre_norm_activations(model, target_features);
    const std::size_t n = z.rows(), h = z.cols();
    std::vector<double> mean(h, 0.0), var(h, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) mean[j] += z(i, j);
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) var[j] += (z(i, j) - mean[j]) * (z(i, j) - mean[j]);
    for (double& v : var) v /= static_cast<double>(n);
    model.norm.running_mean = std::move(mean);
    model.norm.running_var = std::move(var);
    return model;
}

namespace {

constexpr char kModelMagic[4] = {'S', 'F', 'H', 'M'};

void write_tensor(std::ofstream& out, std::span<const double> t) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void read_tensor(std::ifstream& in, std::span<double> t, const std::string& what) {
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw Error("checkpoint truncated while reading " + what);
}

}  // namespace

void save_model(const HeadModel& model, const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    const std::uint32_t header[5] = {static_cast<std::uint32_t>(model.input_dim()),
                                     static_cast<std::uint32_t>(model.hidden_dim()),
                                     static_cast<std::uint32_t>(model.num_classes()),
                                     model.norm.kind == NormKind::batchnorm ? 0u : 1u,
                                     model.activation == Activation::relu ? 0u : 1u};
    out.write(kModelMagic, 4);
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    write_tensor(out, model.bottleneck_weight.data());
    write_tensor(out, model.bottleneck_bias);
    write_tensor(out, model.norm.gamma);
    write_tensor(out, model.norm.beta);
    if (model.norm.kind == NormKind::batchnorm) {
        write_tensor(out, model.norm.running_mean);
        write_tensor(out, model.norm.running_var);
    }
    const double scalars[2] = {model.norm.momentum, model.norm.eps};
    write_tensor(out, scalars);
    write_tensor(out, model.classifier_weight.data());
    write_tensor(out, model.classifier_bias);
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

HeadModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    char magic[4];
    std::uint32_t header[5];
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(header), sizeof header);
    if (!in || std::memcmp(magic, kModelMagic, 4) != 0) throw Error(path.string() + ": not a head checkpoint");
    if (header[3] > 1 || header[4] > 1) throw Error(path.string() + ": unknown norm or activation tag");
    const std::size_t d = header[0], h = header[1], C = header[2];
    HeadModel m;
    m.bottleneck_weight = Matrix(d, h);
    m.bottleneck_bias.assign(h, 0.0);
    m.norm.kind = header[3] == 0 ? NormKind::batchnorm : NormKind::layernorm;
    m.activation = header[4] == 0 ? Activation::relu : Activation::gelu;
    m.norm.gamma.assign(h, 0.0);
    m.norm.beta.assign(h, 0.0);
    m.classifier_weight = Matrix(h, C);
    m.classifier_bias.assign(C, 0.0);
    read_tensor(in, m.bottleneck_weight.data(), "bottleneck_weight");
    read_tensor(in, m.bottleneck_bias, "bottleneck_bias");
    read_tensor(in, m.norm.gamma, "norm_gamma");
    read_tensor(in, m.norm.beta, "norm_beta");
    if (m.norm.kind == NormKind::batchnorm) {
        m.norm.running_mean.assign(h, 0.0);
        m.norm.running_var.assign(h, 0.0);
        read_tensor(in, m.norm.running_mean, "running_mean");
        read_tensor(in, m.norm.running_var, "running_var");
    }
    double scalars[2];
    read_tensor(in, scalars, "norm scalars");
    m.norm.momentum = scalars[0];
    m.norm.eps = scalars[1];
    read_tensor(in, m.classifier_weight.data(), "classifier_weight");
    read_tensor(in, m.classifier_bias, "classifier_bias");
    if (in.peek() != std::char_traits<char>::eof()) throw Error(path.string() + ": trailing bytes after checkpoint");
    return m;
}

}  // namespace sfuda
