#include "sfuda/distsim.hpp"

#include <charconv>

namespace sfuda {

std::string DistConfig::label() const { return std::to_string(workers) + "x" + std::to_string(local_batch); }

DistConfig DistConfig::parse(const std::string& cell) {
    const auto x = cell.find('x');
    if (x == std::string::npos) throw Error("distributed cell '" + cell + "' must look like WxB");
    DistConfig d;
    auto parse_count = [&](std::string_view s, std::size_t& out) {
        const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || out == 0)
            throw Error("distributed cell '" + cell + "' has an invalid count");
    };
    const std::string_view sv(cell);
    parse_count(sv.substr(0, x), d.workers);
    parse_count(sv.substr(x + 1), d.local_batch);
    return d;
}

std::vector<DistConfig> DistConfig::default_grid() {
    return {{1, 64}, {2, 32}, {4, 16}, {8, 8}, {16, 4}};
}

Pass plain_pass(Objective objective) {
    return [objective = std::move(objective)](const Matrix& input, std::span<const std::size_t>) {
        return PassData{input, objective};
    };
}

namespace {

Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t count) {
    Matrix out(count, m.cols());
    std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
              m.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * m.cols()), out.data().begin());
    return out;
}

// Forward + objective + backward on one shard, accumulated over the passes.
StepGradient shard_step(HeadModel& model, const Matrix& input, std::span<const std::size_t> rows,
                        std::span<const Pass> passes) {
    StepGradient out;
    bool first = true;
    for (const Pass& pass : passes) {
        PassData pd = pass(input, rows);
        const ForwardResult fr = forward(model, pd.input, Mode::train);
        const LossResult loss = pd.objective(fr.logits, fr.features, rows);
        GradientRecord g = backward(model, fr.cache, loss.grad);
        out.loss += loss.value;
        if (first) {
            out.gradient = std::move(g);
            first = false;
        } else {
            out.gradient.add(g);
        }
    }
    return out;
}

// Every shard's forward shares global batchnorm statistics: one forward over the concatenated
// shard inputs, per-shard objectives, one backward.
StepGradient synced_step(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                         std::span<const Pass> passes, const DistConfig& cfg) {
    StepGradient out;
    bool first = true;
    const std::size_t b = cfg.local_batch;
    const double inv_w = 1.0 / static_cast<double>(cfg.workers);
    for (const Pass& pass : passes) {
        std::vector<PassData> shards;
        Matrix joined(batch.rows(), 0);
        for (std::size_t s = 0; s < cfg.workers; ++s) {
            shards.push_back(pass(slice_rows(batch, s * b, b), rows.subspan(s * b, b)));
            if (s == 0) joined = Matrix(batch.rows(), shards.back().input.cols());
            const auto& in = shards.back().input.data();
            std::copy(in.begin(), in.end(), joined.data().begin() + static_cast<std::ptrdiff_t>(s * b * joined.cols()));
        }
        const ForwardResult fr = forward(model, joined, Mode::train);
        Matrix dlogits(fr.logits.rows(), fr.logits.cols());
        double loss = 0.0;
        for (std::size_t s = 0; s < cfg.workers; ++s) {
            const LossResult lr = shards[s].objective(slice_rows(fr.logits, s * b, b), slice_rows(fr.features, s * b, b),
                                                      rows.subspan(s * b, b));
            loss += lr.value * inv_w;
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t k = 0; k < dlogits.cols(); ++k) dlogits(s * b + i, k) = lr.grad(i, k) * inv_w;
        }
        GradientRecord g = backward(model, fr.cache, dlogits);
        out.loss += loss;
        if (first) {
            out.gradient = std::move(g);
            first = false;
        } else {
            out.gradient.add(g);
        }
    }
    return out;
}

}  // namespace

StepGradient centralized_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                                  std::span<const Pass> passes) {
    if (batch.rows() == 0) throw Error("centralized_gradient: empty batch");
    if (rows.size() != batch.rows()) throw Error("centralized_gradient: row index count does not match batch");
    if (passes.empty()) throw Error("centralized_gradient: no passes");
    return shard_step(model, batch, rows, passes);
}

StepGradient centralized_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                                  const Objective& objective) {
    const Pass pass = plain_pass(objective);
    return centralized_gradient(model, batch, rows, std::span<const Pass>(&pass, 1));
}

StepGradient sharded_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                              std::span<const Pass> passes, const DistConfig& cfg) {
    if (cfg.workers == 0) throw Error("sharded_gradient: need at least one worker");
    if (rows.size() != batch.rows()) throw Error("sharded_gradient: row index count does not match batch");
    if (passes.empty()) throw Error("sharded_gradient: no passes");
    if (batch.rows() == 0 || batch.rows() % cfg.workers != 0)
        throw Error("sharded_gradient: batch of " + std::to_string(batch.rows()) + " rows cannot be split evenly across " +
                    std::to_string(cfg.workers) + " workers");
    DistConfig eff = cfg;
    eff.local_batch = batch.rows() / cfg.workers;
    if (cfg.sync_batchnorm) return synced_step(model, batch, rows, passes, eff);

    const std::size_t b = eff.local_batch;
    StepGradient out;
    for (std::size_t s = 0; s < cfg.workers; ++s) {
        StepGradient part = shard_step(model, slice_rows(batch, s * b, b), rows.subspan(s * b, b), passes);
        if (s == 0) {
            out = std::move(part);
        } else {
            out.loss += part.loss;
            out.gradient.add(part.gradient);
        }
    }
    if (cfg.workers > 1) {
        const double inv_w = 1.0 / static_cast<double>(cfg.workers);
        out.gradient.scale(inv_w);
        out.loss *= inv_w;
    }
    return out;
}

StepGradient sharded_gradient(HeadModel& model, const Matrix& batch, std::span<const std::size_t> rows,
                              const Objective& objective, const DistConfig& cfg) {
    const Pass pass = plain_pass(objective);
    return sharded_gradient(model, batch, rows, std::span<const Pass>(&pass, 1), cfg);
}

}  // namespace sfuda
