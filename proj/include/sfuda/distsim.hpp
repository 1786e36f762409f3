#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sfuda/core.hpp"
#include "sfuda/head.hpp"

namespace sfuda {

/// W logical workers, each holding a contiguous shard of `local_batch` rows.
struct DistConfig {
    std::size_t workers = 1;
    std::size_t local_batch = 64;
    /// Synchronize batchnorm statistics across shards (default: shard-local).
    bool sync_batchnorm = false;

    std::size_t global_batch() const { return workers * local_batch; }
    std::string label() const;  // "16x4"

    /// Parses "WxB".
    static DistConfig parse(const std::string& cell);
    /// {1x64, 2x32, 4x16, 8x8, 16x4}
    static std::vector<DistConfig> default_grid();
};

/// Loss on one shard's outputs. `rows` are the dataset indices of the shard rows;
/// the returned gradient is w.r.t. the shard logits.
using Objective = std::function<LossResult(const Matrix& logits, const Matrix& features, std::span<const std::size_t> rows)>;

/// What one forward/backward pass sees on one shard.
struct PassData {
    Matrix input;
    Objective objective;
};

/// Builds a shard's pass input and objective from its rows of the global batch.
using Pass = std::function<PassData(const Matrix& shard_input, std::span<const std::size_t> rows)>;

Pass plain_pass(Objective objective);

struct StepGradient {
    double loss = 0.0;
    GradientRecord gradient;
};

/// Whole-batch gradient (the batch-level reference).
StepGradient centralized_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                                  std::span<const Pass> passes);
StepGradient centralized_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                                  const Objective& objective);

/// Unweighted average of per-shard gradients over W contiguous shards. Every shard evaluates the
/// full objective locally; batchnorm statistics are shard-local unless `sync_batchnorm` is set.
StepGradient sharded_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                              std::span<const Pass> passes, const DistConfig& cfg);
StepGradient sharded_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                              const Objective& objective, const DistConfig& cfg);

}  // namespace sfuda
