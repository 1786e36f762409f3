#pragma once

#include <vector>

#include "sfuda/core.hpp"
#include "sfuda/data.hpp"
#include "sfuda/head.hpp"

namespace sfuda {

/// One unit-norm center per class (rows).
struct Prototypes {
    Matrix centers;

    std::size_t count() const { return centers.rows(); }
    std::size_t dims() const { return centers.cols(); }
};

/// Row c is the normalized mean of the normalized features of class c.
Prototypes class_prototypes(const Matrix& features, std::span<const int> labels, int num_classes);

/// Max-cosine center per row; ties go to the lower index.
std::vector<int> nearest_prototype(const Matrix& features, const Prototypes& prototypes);

struct KMeansOptions {
    std::size_t max_iters = 100;
    double tol = 1e-6;
};

struct KMeansResult {
    Prototypes prototypes;
    std::vector<int> assignments;
    std::vector<double> objective_trace;  // Σ_i max_c cos(f_i, k_c) after every assignment step
    std::size_t iterations = 0;           // recentering steps performed
};

/// Spherical k-means from `init`. Empty clusters keep their previous center.
KMeansResult spherical_kmeans(const Matrix& features, const Prototypes& init, const KMeansOptions& options = {});

struct ScaResult {
    std::vector<int> labels;
    Prototypes prototypes;
};

/// Raw-feature SCA: source prototypes adapted to the target by spherical k-means.
ScaResult sca_adapt(const DomainDataset& source, const Matrix& target_features, const KMeansOptions& options = {});
/// Bottleneck-feature SCA: both domains mapped through the head in eval mode first.
ScaResult sca_adapt(const HeadModel& model, const DomainDataset& source, const Matrix& target_features,
                    const KMeansOptions& options = {});

}  // namespace sfuda
