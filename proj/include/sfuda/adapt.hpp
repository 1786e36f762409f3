#pragma once

#include <functional>
#include <vector>

#include "sfuda/distsim.hpp"
#include "sfuda/head.hpp"

namespace sfuda {

/// Optimization settings shared by the gradient-based adaptation methods.
struct AdaptOptions {
    std::size_t epochs = 15;
    std::size_t batch_size = 64;  // global batch
    double learning_rate = 1e-2;
    double momentum = 0.9;
    double weight_decay = 1e-3;
    LrSchedule lr_schedule = LrSchedule::inverse_decay;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    bool sync_batchnorm = false;

    DistConfig dist() const;
};

struct AdaptStep {
    std::size_t epoch = 0;
    std::size_t iter = 0;
    std::size_t max_iter = 0;
};

using EpochBegin = std::function<void(const HeadModel&, std::size_t epoch)>;
using BatchPasses = std::function<std::vector<Pass>(const AdaptStep&)>;

/// Epoch loop over seeded shuffles of the target (incomplete trailing batches dropped); each
/// step's gradient goes through sharded_gradient with `opts.workers` shards.
HeadModel run_adaptation(HeadModel model, const Matrix& target, const AdaptOptions& opts, Scope scope,
                         const EpochBegin& on_epoch, const BatchPasses& passes);

/// Chain dL/dp through a row-wise softmax: dL/dz_ij = p_ij (g_ij − Σ_k p_ik g_ik).
Matrix softmax_backward(const Matrix& probs, const Matrix& dloss_dprobs);

}  // namespace sfuda
