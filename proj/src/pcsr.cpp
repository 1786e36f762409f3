#include "sfuda/pcsr.hpp"

namespace sfuda {

PolycentricLabels polycentric_pseudo_labels(const HeadModel& model, const Matrix& target_features, std::size_t M,
                                            Rng& rng, std::size_t kmeans_rounds, const KMeansOptions& kmeans) {
    if (M == 0) throw Error("polycentric_pseudo_labels: need at least one center per class");
    const ShotLabels shot = shot_pseudo_labels(model, target_features, kmeans_rounds, kmeans);
    const Matrix features = bottleneck_features(model, target_features);
    const std::size_t C = model.num_classes(), h = features.cols();

    std::vector<std::vector<std::size_t>> members(C);
    for (std::size_t i = 0; i < shot.labels.size(); ++i) members[static_cast<std::size_t>(shot.labels[i])].push_back(i);

    std::vector<std::vector<double>> rows;
    PolycentricLabels out;
    for (std::size_t c = 0; c < C; ++c) {
        const std::size_t m = std::min(M, members[c].size());
        if (m <= 1) {
            const auto p = shot.prototypes.centers.row(c);
            rows.emplace_back(p.begin(), p.end());
            out.owner.push_back(static_cast<int>(c));
            continue;
        }
        const Matrix own = features.select_rows(members[c]);
        const auto perm = rng.permutation(own.rows());
        Prototypes init;
        init.centers = Matrix(m, h);
        for (std::size_t k = 0; k < m; ++k) {
            const auto src = own.row(perm[k]);
            std::copy(src.begin(), src.end(), init.centers.row(k).begin());
        }
        const KMeansResult km = spherical_kmeans(own, init, kmeans);
        for (std::size_t k = 0; k < m; ++k) {
            const auto p = km.prototypes.centers.row(k);
            rows.emplace_back(p.begin(), p.end());
            out.owner.push_back(static_cast<int>(c));
        }
    }
    out.centers = Matrix::from_rows(rows);
    Prototypes all{out.centers};
    const auto nearest = nearest_prototype(features, all);
    out.labels.resize(nearest.size());
    for (std::size_t i = 0; i < nearest.size(); ++i) out.labels[i] = out.owner[static_cast<std::size_t>(nearest[i])];
    return out;
}

MixupBatch mixup_batch(const Matrix& x, const Matrix& y, double alpha, Rng& rng, std::optional<double> forced_lambda) {
    if (x.rows() < 2) throw Error("mixup_batch: need at least 2 rows");
    if (y.rows() != x.rows()) throw Error("mixup_batch: feature and label row counts differ");
    if (!(alpha > 0.0)) throw Error("mixup_batch: alpha must be positive");
    MixupBatch out;
    out.lambda = forced_lambda ? *forced_lambda : rng.beta(alpha, alpha);
    if (!(out.lambda >= 0.0 && out.lambda <= 1.0)) throw Error("mixup_batch: lambda outside [0, 1]");
    out.partner = rng.permutation(x.rows());
    const double l = out.lambda;
    auto mix = [&](const Matrix& m) {
        Matrix r(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.rows(); ++i) {
            const auto a = m.row(i);
            const auto b = m.row(out.partner[i]);
            auto dst = r.row(i);
            for (std::size_t j = 0; j < m.cols(); ++j) dst[j] = l * a[j] + (1.0 - l) * b[j];
        }
        return r;
    };
    out.x = mix(x);
    out.y = mix(y);
    return out;
}

HeadModel pcsr_adapt(HeadModel model, const Matrix& target_features, const PcsrConfig& cfg) {
    if (cfg.mixup_weight < 0.0) throw Error("pcsr_adapt: mixup_weight must be non-negative");
    if (cfg.ce_weight < 0.0) throw Error("pcsr_adapt: ce_weight must be non-negative");
    const Rng root(cfg.train.seed);
    Rng cluster_rng = root.fork(1);
    Rng mixup_rng = root.fork(2);
    const std::size_t C = model.num_classes();
    std::vector<int> labels;

    const EpochBegin on_epoch = [&](const HeadModel& m, std::size_t) {
        labels = polycentric_pseudo_labels(m, target_features, cfg.centers_per_class, cluster_rng, cfg.kmeans_rounds,
                                           cfg.kmeans)
                     .labels;
    };
    const Pass mixup_pass = [&](const Matrix& input, std::span<const std::size_t> rows) {
        Matrix y(rows.size(), C);
        for (std::size_t i = 0; i < rows.size(); ++i) y(i, static_cast<std::size_t>(labels[rows[i]])) = 1.0;
        MixupBatch mb = mixup_batch(input, y, cfg.mixup_alpha, mixup_rng, cfg.forced_lambda);
        const double w = cfg.mixup_weight;
        Objective obj = [soft = std::move(mb.y), w](const Matrix& logits, const Matrix&, std::span<const std::size_t>) {
            return scaled(soft_cross_entropy(logits, soft), w);
        };
        return PassData{std::move(mb.x), std::move(obj)};
    };
    const BatchPasses passes = [&](const AdaptStep&) {
        std::vector<Pass> p{plain_pass(shot_objective(&labels, cfg.ce_weight))};
        if (cfg.mixup_weight > 0.0) p.push_back(mixup_pass);
        return p;
    };
    return run_adaptation(std::move(model), target_features, cfg.train, Scope::feature_extractor, on_epoch, passes);
}

}  // namespace sfuda
