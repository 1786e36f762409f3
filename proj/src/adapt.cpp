#include "sfuda/adapt.hpp"

namespace sfuda {

DistConfig AdaptOptions::dist() const {
    if (workers == 0) throw Error("adaptation: workers must be positive");
    if (batch_size % workers != 0)
        throw Error("adaptation: batch size " + std::to_string(batch_size) + " is not divisible by " +
                    std::to_string(workers) + " workers");
    DistConfig d;
    d.workers = workers;
    d.local_batch = batch_size / workers;
    d.sync_batchnorm = sync_batchnorm;
    return d;
}

HeadModel run_adaptation(HeadModel model, const Matrix& target, const AdaptOptions& opts, Scope scope,
                         const EpochBegin& on_epoch, const BatchPasses& passes) {
    if (target.cols() != model.input_dim()) throw Error("adaptation: target dimension does not match model input");
    if (opts.batch_size == 0) throw Error("adaptation: batch size must be positive");
    const DistConfig dist = opts.dist();
    if (model.norm.kind == NormKind::batchnorm && !dist.sync_batchnorm && dist.local_batch < 2)
        throw Error("adaptation: batchnorm needs a per-worker batch of at least 2, got " + std::to_string(dist.local_batch));
    const std::size_t per_epoch = target.rows() / opts.batch_size;
    if (per_epoch == 0)
        throw Error("adaptation: target has " + std::to_string(target.rows()) + " rows, fewer than one batch of " +
                    std::to_string(opts.batch_size));

    Rng shuffle(opts.seed);
    Sgd opt(model, opts.momentum, opts.weight_decay);
    const auto mult = scope_multipliers(scope);
    AdaptStep step;
    step.max_iter = opts.epochs * per_epoch;
    for (step.epoch = 0; step.epoch < opts.epochs; ++step.epoch) {
        if (on_epoch) on_epoch(model, step.epoch);
        for (const auto& batch : make_batches(target.rows(), opts.batch_size, shuffle, opts.batch_size)) {
            const Matrix x = target.select_rows(batch);
            const std::vector<Pass> p = passes(step);
            const StepGradient sg = sharded_gradient(model, x, batch, p, dist);
            opt.step(model, sg.gradient, scheduled_lr(opts.learning_rate, opts.lr_schedule, step.iter, step.max_iter), mult);
            ++step.iter;
        }
    }
    return model;
}

Matrix softmax_backward(const Matrix& probs, const Matrix& g) {
    if (probs.rows() != g.rows() || probs.cols() != g.cols()) throw Error("softmax_backward: shape mismatch");
    Matrix dz(probs.rows(), probs.cols());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        const double inner = dot(probs.row(i), g.row(i));
        for (std::size_t k = 0; k < probs.cols(); ++k) dz(i, k) = probs(i, k) * (g(i, k) - inner);
    }
    return dz;
}

}  // namespace sfuda
