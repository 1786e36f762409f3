#include "sfuda/neighbors.hpp"

#include <algorithm>
#include <cmath>

#include "sfuda/shot.hpp"

namespace sfuda {

namespace {

void copy_unit(std::span<const double> src, std::span<double> dst) {
    const double n = std::max(norm2(src), 1e-12);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / n;
}

void check_indices(std::span<const std::size_t> idx, const MemoryBank& bank, const char* who) {
    for (std::size_t i : idx)
        if (i >= bank.size())
            throw Error(std::string(who) + ": index " + std::to_string(i) + " outside the memory bank of " +
                        std::to_string(bank.size()) + " rows");
}

// K-NN lists for a set of bank rows, one matmul against the whole bank.
std::vector<std::vector<std::size_t>> neighbor_lists(const MemoryBank& bank, std::span<const std::size_t> rows,
                                                     std::size_t k) {
    if (k >= bank.size())
        throw Error("neighbors: K=" + std::to_string(k) + " must be below the bank size " + std::to_string(bank.size()));
    const Matrix sims = matmul_nt(bank.features.select_rows(rows), bank.features);
    std::vector<std::vector<std::size_t>> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = top_k(sims.row(i), k, rows[i]);
    return out;
}

}  // namespace

MemoryBank MemoryBank::build(const HeadModel& model, const Matrix& target_features) {
    const ForwardResult fr = forward_eval(model, target_features);
    MemoryBank bank;
    bank.features = Matrix(fr.features.rows(), fr.features.cols());
    for (std::size_t i = 0; i < fr.features.rows(); ++i) copy_unit(fr.features.row(i), bank.features.row(i));
    bank.scores = softmax_rows(fr.logits);
    return bank;
}

void MemoryBank::refresh(std::span<const std::size_t> rows, const Matrix& feats, const Matrix& logits) {
    if (feats.rows() != rows.size() || logits.rows() != rows.size()) throw Error("MemoryBank::refresh: row count mismatch");
    if (feats.cols() != features.cols() || logits.cols() != scores.cols()) throw Error("MemoryBank::refresh: width mismatch");
    check_indices(rows, *this, "MemoryBank::refresh");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        copy_unit(feats.row(i), features.row(rows[i]));
        const auto p = softmax(logits.row(i));
        std::copy(p.begin(), p.end(), scores.row(rows[i]).begin());
    }
}

std::vector<std::size_t> MemoryBank::neighbors(std::size_t i, std::size_t k) const {
    const std::size_t row[] = {i};
    check_indices(row, *this, "MemoryBank::neighbors");
    return neighbor_lists(*this, row, k).front();
}

std::vector<std::vector<bool>> reciprocal_flags(const MemoryBank& bank, std::size_t K) {
    const std::size_t n = bank.size();
    if (K == 0) throw Error("reciprocal_flags: K must be positive");
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    const auto nn = neighbor_lists(bank, all, K);
    std::vector<std::vector<bool>> flags(n, std::vector<bool>(K, false));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < K; ++j) {
            const auto& back = nn[nn[i][j]];
            flags[i][j] = std::find(back.begin(), back.end(), i) != back.end();
        }
    return flags;
}

LossResult nrc_loss(const Matrix& p, std::span<const std::size_t> idx, const MemoryBank& bank, const NrcConfig& cfg) {
    const std::size_t b = p.rows(), C = p.cols();
    if (b == 0) throw Error("nrc_loss: empty batch");
    if (idx.size() != b) throw Error("nrc_loss: index count does not match batch");
    if (C != bank.scores.cols()) throw Error("nrc_loss: class count does not match the bank");
    if (cfg.K == 0 || cfg.KK == 0) throw Error("nrc_loss: K and KK must be positive");
    check_indices(idx, bank, "nrc_loss");

    const auto near = neighbor_lists(bank, idx, cfg.K);
    std::vector<std::size_t> flat;
    for (const auto& list : near) flat.insert(flat.end(), list.begin(), list.end());
    const auto second = neighbor_lists(bank, flat, std::max(cfg.K, cfg.KK));

    // target vector t_i: dL/dp_i = −t_i / b for the affinity part
    Matrix t(b, C);
    for (std::size_t i = 0; i < b; ++i) {
        auto ti = t.row(i);
        for (std::size_t a = 0; a < cfg.K; ++a) {
            const std::size_t j = near[i][a];
            const auto& jl = second[i * cfg.K + a];
            const bool mutual = std::find(jl.begin(), jl.begin() + static_cast<std::ptrdiff_t>(cfg.K), idx[i]) !=
                                jl.begin() + static_cast<std::ptrdiff_t>(cfg.K);
            const double w = mutual ? 1.0 : cfg.r;
            const auto sj = bank.scores.row(j);
            for (std::size_t k = 0; k < C; ++k) ti[k] += w * sj[k];
            for (std::size_t e = 0; e < cfg.KK; ++e) {
                const std::size_t m = jl[e];
                if (m == idx[i]) continue;
                const auto sm = bank.scores.row(m);
                for (std::size_t k = 0; k < C; ++k) ti[k] += cfg.r * sm[k];
            }
        }
        const auto self = bank.scores.row(idx[i]);
        for (std::size_t k = 0; k < C; ++k) ti[k] += self[k];
    }

    LossResult out = diversity_term_probs(p);
    const double inv_b = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
        out.value -= dot(p.row(i), t.row(i)) * inv_b;
        for (std::size_t k = 0; k < C; ++k) out.grad(i, k) -= t(i, k) * inv_b;
    }
    return out;
}

LossResult aad_loss(const Matrix& p, std::span<const std::size_t> idx, const MemoryBank& bank, double lambda_t,
                    const AadConfig& cfg) {
    const std::size_t b = p.rows(), C = p.cols();
    if (b == 0) throw Error("aad_loss: empty batch");
    if (idx.size() != b) throw Error("aad_loss: index count does not match batch");
    if (C != bank.scores.cols()) throw Error("aad_loss: class count does not match the bank");
    if (cfg.K == 0) throw Error("aad_loss: K must be positive");
    check_indices(idx, bank, "aad_loss");

    const auto near = neighbor_lists(bank, idx, cfg.K);
    const double inv_b = 1.0 / static_cast<double>(b);
    LossResult out{0.0, Matrix(b, C)};
    for (std::size_t i = 0; i < b; ++i) {
        auto g = out.grad.row(i);
        for (std::size_t j : near[i]) {
            const auto sj = bank.scores.row(j);
            out.value -= dot(p.row(i), sj) * inv_b;
            for (std::size_t k = 0; k < C; ++k) g[k] -= sj[k] * inv_b;
        }
        if (lambda_t == 0.0) continue;
        for (std::size_t m = 0; m < b; ++m) {
            if (m == i || idx[m] == idx[i]) continue;
            if (std::find(near[i].begin(), near[i].end(), idx[m]) != near[i].end()) continue;
            const auto sm = bank.scores.row(idx[m]);
            out.value += lambda_t * dot(p.row(i), sm) * inv_b;
            for (std::size_t k = 0; k < C; ++k) g[k] += lambda_t * sm[k] * inv_b;
        }
    }
    return out;
}

double decay_lambda(std::size_t iter, std::size_t max_iter, double beta) {
    if (beta < 0.0) throw Error("decay_lambda: beta must be non-negative");
    if (iter > max_iter) throw Error("decay_lambda: iter exceeds max_iter");
    if (max_iter == 0) return 1.0;
    return std::pow(1.0 + 10.0 * static_cast<double>(iter) / static_cast<double>(max_iter), -beta);
}

namespace {

// Refreshes the bank rows of the shard, then evaluates `loss` on the shard scores.
template <class ScoreLoss>
Objective bank_objective(MemoryBank* bank, ScoreLoss loss) {
    return [bank, loss](const Matrix& logits, const Matrix& features, std::span<const std::size_t> rows) {
        bank->refresh(rows, features, logits);
        const Matrix probs = softmax_rows(logits);
        LossResult out = loss(probs, rows, *bank);
        out.grad = softmax_backward(probs, out.grad);
        return out;
    };
}

}  // namespace

HeadModel nrc_adapt(HeadModel model, const Matrix& target_features, const NrcConfig& cfg) {
    MemoryBank bank = MemoryBank::build(model, target_features);
    if (std::max(cfg.K, cfg.KK) >= bank.size()) throw Error("nrc_adapt: K and KK must be below the target size");
    const BatchPasses passes = [&](const AdaptStep&) {
        return std::vector<Pass>{plain_pass(bank_objective(
            &bank, [&cfg](const Matrix& p, std::span<const std::size_t> rows, const MemoryBank& b) {
                return nrc_loss(p, rows, b, cfg);
            }))};
    };
    return run_adaptation(std::move(model), target_features, cfg.train, Scope::full, nullptr, passes);
}

HeadModel aad_adapt(HeadModel model, const Matrix& target_features, const AadConfig& cfg) {
    MemoryBank bank = MemoryBank::build(model, target_features);
    if (cfg.K >= bank.size()) throw Error("aad_adapt: K must be below the target size");
    const BatchPasses passes = [&](const AdaptStep& step) {
        const double lambda_t = decay_lambda(step.iter, step.max_iter, cfg.beta);
        return std::vector<Pass>{plain_pass(bank_objective(
            &bank, [&cfg, lambda_t](const Matrix& p, std::span<const std::size_t> rows, const MemoryBank& b) {
                return aad_loss(p, rows, b, lambda_t, cfg);
            }))};
    };
    return run_adaptation(std::move(model), target_features, cfg.train, Scope::full, nullptr, passes);
}

}  // namespace sfuda
