#include "sfuda/shot.hpp"

#include <cmath>

namespace sfuda {

Prototypes weighted_prototypes(const Matrix& probs, const Matrix& features, const Matrix& fallback) {
    const std::size_t n = features.rows(), h = features.cols(), C = probs.cols();
    if (probs.rows() != n) throw Error("weighted_prototypes: probability and feature row counts differ");
    if (fallback.rows() != C || fallback.cols() != h) throw Error("weighted_prototypes: fallback shape mismatch");
    if (!probs.all_finite() || !features.all_finite()) throw Error("weighted_prototypes: non-finite input");

    Matrix centers = matmul_tn(probs, features);  // C x h, Σ_i p_ic f_i
    std::vector<double> mass(C, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < C; ++c) mass[c] += probs(i, c);

    for (std::size_t c = 0; c < C; ++c) {
        auto row = centers.row(c);
        if (mass[c] > 0.0) {
            for (double& v : row) v /= mass[c];
            if (norm2(row) > 0.0) continue;
        }
        std::fill(row.begin(), row.end(), 0.0);
        std::size_t members = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (argmax(probs.row(i)) != c) continue;
            const auto f = features.row(i);
            for (std::size_t j = 0; j < h; ++j) row[j] += f[j];
            ++members;
        }
        if (members == 0 || norm2(row) == 0.0) {
            const auto fb = fallback.row(c);
            std::copy(fb.begin(), fb.end(), row.begin());
        }
    }
    Prototypes p;
    try {
        p.centers = l2_normalize_rows(centers);
    } catch (const Error&) {
        throw Error("weighted_prototypes: a prototype is the zero vector");
    }
    return p;
}

ShotLabels shot_pseudo_labels(const HeadModel& model, const Matrix& target_features, std::size_t kmeans_rounds,
                              const KMeansOptions& kmeans) {
    if (target_features.rows() == 0) throw Error("shot_pseudo_labels: empty target");
    const ForwardResult fr = forward_eval(model, target_features);
    const Matrix probs = softmax_rows(fr.logits);
    // classifier columns, one row per class
    Matrix fallback(model.num_classes(), model.hidden_dim());
    for (std::size_t j = 0; j < model.hidden_dim(); ++j)
        for (std::size_t c = 0; c < model.num_classes(); ++c) fallback(c, j) = model.classifier_weight(j, c);

    ShotLabels out;
    out.initial = weighted_prototypes(probs, fr.features, fallback);
    out.prototypes = out.initial;
    if (kmeans_rounds == 0) {
        out.labels = nearest_prototype(fr.features, out.prototypes);
        return out;
    }
    for (std::size_t r = 0; r < kmeans_rounds; ++r) {
        KMeansResult km = spherical_kmeans(fr.features, out.prototypes, kmeans);
        out.prototypes = std::move(km.prototypes);
        out.labels = std::move(km.assignments);
    }
    return out;
}

LossResult entropy_term(const Matrix& logits) {
    if (logits.rows() == 0) throw Error("entropy_term: empty batch");
    if (!logits.all_finite()) throw Error("entropy_term: non-finite logits");
    const std::size_t b = logits.rows(), C = logits.cols();
    const double inv_b = 1.0 / static_cast<double>(b);
    LossResult out{0.0, Matrix(b, C)};
    for (std::size_t i = 0; i < b; ++i) {
        const auto p = softmax(logits.row(i));
        const double H = entropy(p);
        out.value += H;
        for (std::size_t k = 0; k < C; ++k) {
            const double lp = p[k] > 0.0 ? std::log(p[k]) : 0.0;
            out.grad(i, k) = -p[k] * (lp + H) * inv_b;
        }
    }
    out.value *= inv_b;
    return out;
}

LossResult diversity_term_probs(const Matrix& probs) {
    if (probs.rows() == 0) throw Error("diversity_term: empty batch");
    const std::size_t b = probs.rows(), C = probs.cols();
    const double inv_b = 1.0 / static_cast<double>(b);
    std::vector<double> mean(C, 0.0);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < C; ++k) mean[k] += probs(i, k);
    LossResult out{0.0, Matrix(b, C)};
    std::vector<double> g(C, 0.0);
    for (std::size_t k = 0; k < C; ++k) {
        mean[k] *= inv_b;
        if (mean[k] > 0.0) {
            out.value += mean[k] * std::log(mean[k]);
            g[k] = (std::log(mean[k]) + 1.0) * inv_b;
        }
    }
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < C; ++k) out.grad(i, k) = g[k];
    return out;
}

LossResult diversity_term(const Matrix& logits) {
    if (logits.rows() == 0) throw Error("diversity_term: empty batch");
    if (!logits.all_finite()) throw Error("diversity_term: non-finite logits");
    const Matrix probs = softmax_rows(logits);
    LossResult out = diversity_term_probs(probs);
    out.grad = softmax_backward(probs, out.grad);
    return out;
}

LossResult im_loss(const Matrix& logits) { return entropy_term(logits) + diversity_term(logits); }

LossResult operator+(LossResult a, const LossResult& b) {
    if (a.grad.rows() != b.grad.rows() || a.grad.cols() != b.grad.cols()) throw Error("loss sum: gradient shapes differ");
    a.value += b.value;
    for (std::size_t i = 0; i < a.grad.data().size(); ++i) a.grad.data()[i] += b.grad.data()[i];
    return a;
}

LossResult scaled(LossResult a, double s) {
    a.value *= s;
    for (double& v : a.grad.data()) v *= s;
    return a;
}

Objective shot_objective(const std::vector<int>* pseudo_labels, double ce_weight) {
    return [pseudo_labels, ce_weight](const Matrix& logits, const Matrix&, std::span<const std::size_t> rows) {
        LossResult loss = im_loss(logits);
        if (ce_weight == 0.0) return loss;
        std::vector<int> y(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) y[i] = (*pseudo_labels)[rows[i]];
        return loss + scaled(cross_entropy(logits, y), ce_weight);
    };
}

HeadModel shot_adapt(HeadModel model, const Matrix& target_features, const ShotConfig& cfg) {
    if (cfg.ce_weight < 0.0) throw Error("shot_adapt: ce_weight must be non-negative");
    std::vector<int> labels;
    const EpochBegin on_epoch = [&](const HeadModel& m, std::size_t) {
        labels = shot_pseudo_labels(m, target_features, cfg.kmeans_rounds, cfg.kmeans).labels;
    };
    const BatchPasses passes = [&](const AdaptStep&) {
        return std::vector<Pass>{plain_pass(shot_objective(&labels, cfg.ce_weight))};
    };
    return run_adaptation(std::move(model), target_features, cfg.train, Scope::feature_extractor, on_epoch, passes);
}

}  // namespace sfuda
