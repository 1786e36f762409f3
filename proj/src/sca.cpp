#include "sfuda/sca.hpp"

#include <cmath>

namespace sfuda {

namespace {

std::vector<int> assign(const Matrix& unit_features, const Matrix& centers, double& objective) {
    std::vector<int> out(unit_features.rows());
    objective = 0.0;
    for (std::size_t i = 0; i < unit_features.rows(); ++i) {
        const auto f = unit_features.row(i);
        std::size_t best = 0;
        double best_sim = dot(f, centers.row(0));
        for (std::size_t c = 1; c < centers.rows(); ++c) {
            const double s = dot(f, centers.row(c));
            if (s > best_sim) {
                best_sim = s;
                best = c;
            }
        }
        out[i] = static_cast<int>(best);
        objective += best_sim;
    }
    return out;
}

// Normalized member means; a center with no members (or a zero mean) is left as is.
void recenter(const Matrix& unit_features, std::span<const int> assignments, Matrix& centers) {
    Matrix sums(centers.rows(), centers.cols());
    std::vector<std::size_t> counts(centers.rows(), 0);
    for (std::size_t i = 0; i < unit_features.rows(); ++i) {
        const auto c = static_cast<std::size_t>(assignments[i]);
        auto s = sums.row(c);
        const auto f = unit_features.row(i);
        for (std::size_t j = 0; j < s.size(); ++j) s[j] += f[j];
        ++counts[c];
    }
    for (std::size_t c = 0; c < centers.rows(); ++c) {
        if (counts[c] == 0) continue;
        const double n = norm2(sums.row(c));
        if (n == 0.0) continue;
        auto dst = centers.row(c);
        const auto src = sums.row(c);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = src[j] / n;
    }
}

}  // namespace

Prototypes class_prototypes(const Matrix& features, std::span<const int> labels, int num_classes) {
    if (labels.size() != features.rows()) throw Error("class_prototypes: label count does not match rows");
    if (num_classes < 1) throw Error("class_prototypes: need at least one class");
    const Matrix unit = l2_normalize_rows(features);
    Matrix sums(static_cast<std::size_t>(num_classes), features.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < unit.rows(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= num_classes) throw Error("class_prototypes: label " + std::to_string(y) + " out of range");
        auto s = sums.row(static_cast<std::size_t>(y));
        const auto f = unit.row(i);
        for (std::size_t j = 0; j < s.size(); ++j) s[j] += f[j];
        ++counts[static_cast<std::size_t>(y)];
    }
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0) throw Error("class_prototypes: class " + std::to_string(c) + " has no samples");
    Prototypes p;
    try {
        p.centers = l2_normalize_rows(sums);
    } catch (const Error&) {
        throw Error("class_prototypes: a class mean is the zero vector");
    }
    return p;
}

std::vector<int> nearest_prototype(const Matrix& features, const Prototypes& prototypes) {
    if (features.cols() != prototypes.dims())
        throw Error("nearest_prototype: feature dimension " + std::to_string(features.cols()) +
                    " does not match prototype dimension " + std::to_string(prototypes.dims()));
    if (prototypes.count() == 0) throw Error("nearest_prototype: no prototypes");
    double unused = 0.0;
    return assign(l2_normalize_rows(features), prototypes.centers, unused);
}

KMeansResult spherical_kmeans(const Matrix& features, const Prototypes& init, const KMeansOptions& options) {
    if (features.rows() == 0) throw Error("spherical_kmeans: no samples");
    if (features.cols() != init.dims()) throw Error("spherical_kmeans: feature and center dimensions differ");
    if (init.count() == 0) throw Error("spherical_kmeans: no initial centers");
    bool any_nonzero = false;
    for (double v : features.data()) any_nonzero = any_nonzero || v != 0.0;
    if (!any_nonzero) throw Error("spherical_kmeans: all features are zero");

    const Matrix unit = l2_normalize_rows(features);
    KMeansResult r;
    r.prototypes.centers = l2_normalize_rows(init.centers);
    double objective = 0.0;
    r.assignments = assign(unit, r.prototypes.centers, objective);
    r.objective_trace.push_back(objective);
    while (r.iterations < options.max_iters) {
        recenter(unit, r.assignments, r.prototypes.centers);
        ++r.iterations;
        double next_objective = 0.0;
        auto next = assign(unit, r.prototypes.centers, next_objective);
        r.objective_trace.push_back(next_objective);
        const bool changed = next != r.assignments;
        r.assignments = std::move(next);
        if (!changed || next_objective - objective < options.tol) break;
        objective = next_objective;
    }
    return r;
}

ScaResult sca_adapt(const DomainDataset& source, const Matrix& target_features, const KMeansOptions& options) {
    const auto& labels = source.require_labels("sca_adapt");
    if (source.dims() != target_features.cols())
        throw Error("sca_adapt: source dimension " + std::to_string(source.dims()) + " does not match target dimension " +
                    std::to_string(target_features.cols()));
    const Prototypes init = class_prototypes(source.features, labels, source.num_classes);
    KMeansResult km = spherical_kmeans(target_features, init, options);
    return {std::move(km.assignments), std::move(km.prototypes)};
}

ScaResult sca_adapt(const HeadModel& model, const DomainDataset& source, const Matrix& target_features,
                    const KMeansOptions& options) {
    if (target_features.cols() != model.input_dim()) throw Error("sca_adapt: target dimension does not match model input");
    DomainDataset mapped = source;
    mapped.features = bottleneck_features(model, source.features);
    return sca_adapt(mapped, bottleneck_features(model, target_features), options);
}

}  // namespace sfuda
