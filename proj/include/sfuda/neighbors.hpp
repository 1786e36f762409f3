#pragma once

#include <vector>

#include "sfuda/adapt.hpp"
#include "sfuda/head.hpp"

namespace sfuda {

/// Unit-norm bottleneck features and softmax scores for every target sample.
struct MemoryBank {
    Matrix features;  // n x h
    Matrix scores;    // n x C

    std::size_t size() const { return features.rows(); }

    /// Eval-mode outputs of `model` on the whole target.
    static MemoryBank build(const HeadModel& model, const Matrix& target_features);
    /// Overwrite the given rows with (normalized) features and softmax of logits.
    void refresh(std::span<const std::size_t> rows, const Matrix& features, const Matrix& logits);
    /// K most cosine-similar bank rows to bank row `i`, excluding i itself.
    std::vector<std::size_t> neighbors(std::size_t i, std::size_t k) const;
};

/// flag(i, j) is true when i is among the K nearest neighbors of its own j-th neighbor.
std::vector<std::vector<bool>> reciprocal_flags(const MemoryBank& bank, std::size_t K);

struct NrcConfig {
    AdaptOptions train;
    std::size_t K = 3;
    std::size_t KK = 3;
    double r = 0.1;
};

struct AadConfig {
    AdaptOptions train;
    std::size_t K = 3;
    double beta = 0.75;
};

/// Neighborhood affinity (reciprocal weight 1, others r), expanded neighbors with weight r, self term,
/// plus the diversity term on the batch scores. Gradient w.r.t. the score rows.
LossResult nrc_loss(const Matrix& batch_scores, std::span<const std::size_t> batch_indices, const MemoryBank& bank,
                    const NrcConfig& cfg);

/// Attraction to the K nearest bank neighbors, dispersal from the other samples of the batch.
LossResult aad_loss(const Matrix& batch_scores, std::span<const std::size_t> batch_indices, const MemoryBank& bank,
                    double lambda_t, const AadConfig& cfg);

/// (1 + 10·iter/max_iter)^(−beta)
double decay_lambda(std::size_t iter, std::size_t max_iter, double beta);

HeadModel nrc_adapt(HeadModel model, const Matrix& target_features, const NrcConfig& cfg);
HeadModel aad_adapt(HeadModel model, const Matrix& target_features, const AadConfig& cfg);

}  // namespace sfuda
