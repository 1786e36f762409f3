#pragma once

#include <vector>

#include "sfuda/adapt.hpp"
#include "sfuda/head.hpp"
#include "sfuda/sca.hpp"

namespace sfuda {

struct ShotConfig {
    AdaptOptions train;              // epochs 15, batch 64
    double ce_weight = 0.3;          // γ
    std::size_t kmeans_rounds = 1;   // full spherical k-means runs after the weighted init
    KMeansOptions kmeans;
};

/// Probability-weighted class means of `features` (rows of `probs` are the weights), normalized.
/// A class with zero soft mass takes the mean of the rows whose argmax is that class, and when
/// there are none, the matching row of `fallback`.
Prototypes weighted_prototypes(const Matrix& probs, const Matrix& features, const Matrix& fallback);

struct ShotLabels {
    std::vector<int> labels;
    Prototypes prototypes;  // after refinement
    Prototypes initial;     // weighted init
};

ShotLabels shot_pseudo_labels(const HeadModel& model, const Matrix& target_features, std::size_t kmeans_rounds = 1,
                              const KMeansOptions& kmeans = {});

/// Mean per-row entropy of softmax(logits); gradient w.r.t. logits.
LossResult entropy_term(const Matrix& logits);
/// Σ_k p̄_k ln p̄_k of the batch-mean prediction; gradient w.r.t. logits.
LossResult diversity_term(const Matrix& logits);
/// The same diversity term as a function of probability rows.
LossResult diversity_term_probs(const Matrix& probs);
/// entropy_term + diversity_term.
LossResult im_loss(const Matrix& logits);

LossResult operator+(LossResult a, const LossResult& b);
LossResult scaled(LossResult a, double s);

/// L_IM + γ·CE(pseudo-labels of the shard rows).
Objective shot_objective(const std::vector<int>* pseudo_labels, double ce_weight);

/// Per epoch: pseudo-labels from the current model, then SGD on the bottleneck with the classifier frozen.
HeadModel shot_adapt(HeadModel model, const Matrix& target_features, const ShotConfig& cfg);

}  // namespace sfuda
