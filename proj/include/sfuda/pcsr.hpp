#pragma once

#include <optional>
#include <vector>

#include "sfuda/shot.hpp"

namespace sfuda {

struct PcsrConfig {
    AdaptOptions train;
    std::size_t centers_per_class = 2;  // M
    double mixup_alpha = 0.3;
    double mixup_weight = 1.0;
    double ce_weight = 0.3;
    std::size_t kmeans_rounds = 1;
    KMeansOptions kmeans;
    std::optional<double> forced_lambda;  // test hook: skip the Beta draw
};

struct PolycentricLabels {
    std::vector<int> labels;
    Matrix centers;          // unit rows, at most C·M
    std::vector<int> owner;  // class of each center
};

/// SHOT labels, then M spherical k-means centers per class (seeded random-member init); every sample
/// takes the class of its nearest center. A class with one center (or no members) uses its SHOT prototype.
PolycentricLabels polycentric_pseudo_labels(const HeadModel& model, const Matrix& target_features, std::size_t M,
                                            Rng& rng, std::size_t kmeans_rounds = 1, const KMeansOptions& kmeans = {});

struct MixupBatch {
    Matrix x;
    Matrix y;
    double lambda = 1.0;
    std::vector<std::size_t> partner;
};

/// One λ ~ Beta(alpha, alpha) per batch; row i mixes with row partner[i] of a seeded permutation.
MixupBatch mixup_batch(const Matrix& x, const Matrix& y, double alpha, Rng& rng,
                       std::optional<double> forced_lambda = std::nullopt);

HeadModel pcsr_adapt(HeadModel model, const Matrix& target_features, const PcsrConfig& cfg);

}  // namespace sfuda
