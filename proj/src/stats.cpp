#include "sfuda/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sfuda {

double adjusted_r2(double r2, std::size_t n, std::size_t p) {
    if (n <= p + 1)
        throw Error("adjusted_r2: need n > p + 1 (n=" + std::to_string(n) + ", p=" + std::to_string(p) + ")");
    return 1.0 - (1.0 - r2) * static_cast<double>(n - 1) / static_cast<double>(n - p - 1);
}

namespace {

RegressionFit finish(const Matrix& design, std::span<const double> y, const std::vector<double>& beta, std::size_t p) {
    RegressionFit f;
    f.n = y.size();
    f.p = p;
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double ss_res = 0.0, ss_tot = 0.0;
    f.residuals.resize(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = y[i] - dot(design.row(i), beta);
        f.residuals[i] = r;
        ss_res += r * r;
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    if (ss_tot == 0.0) throw Error("regression: accuracy is constant, R² undefined");
    f.r2 = 1.0 - ss_res / ss_tot;
    f.adj_r2 = adjusted_r2(f.r2, f.n, p);
    return f;
}

void check_inputs(std::size_t n_top1, std::size_t n_acc, std::size_t need) {
    if (n_top1 != n_acc) throw Error("regression: top1 and accuracy lengths differ");
    if (n_acc < need) throw Error("regression: need at least " + std::to_string(need) + " rows, got " + std::to_string(n_acc));
}

}  // namespace

RegressionFit fit_linear(std::span<const double> top1, std::span<const double> acc) {
    check_inputs(top1.size(), acc.size(), 3);
    if (std::all_of(top1.begin(), top1.end(), [&](double v) { return v == top1.front(); }))
        throw Error("fit_linear: top1 column is constant");
    Matrix x(acc.size(), 2);
    for (std::size_t i = 0; i < acc.size(); ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = top1[i];
    }
    const auto beta = least_squares(x, acc);
    RegressionFit f = finish(x, acc, beta, 1);
    f.q = beta[0];
    f.m = beta[1];
    return f;
}

RegressionFit fit_multilinear(std::span<const double> top1, std::span<const int> pretrain, std::span<const double> acc) {
    check_inputs(top1.size(), acc.size(), 5);
    if (pretrain.size() != acc.size()) throw Error("fit_multilinear: pretrain and accuracy lengths differ");
    std::size_t ones = 0;
    for (int v : pretrain) {
        if (v != 0 && v != 1) throw Error("fit_multilinear: pretrain flags must be 0 or 1");
        ones += static_cast<std::size_t>(v);
    }
    if (ones < 2 || acc.size() - ones < 2)
        throw Error("fit_multilinear: both pretrain groups need at least 2 rows (have " + std::to_string(acc.size() - ones) +
                    " and " + std::to_string(ones) + ")");
    Matrix x(acc.size(), 4);
    for (std::size_t i = 0; i < acc.size(); ++i) {
        const double g = pretrain[i];
        x(i, 0) = 1.0;
        x(i, 1) = top1[i];
        x(i, 2) = g;
        x(i, 3) = g * top1[i];
    }
    const auto beta = least_squares(x, acc);
    RegressionFit f = finish(x, acc, beta, 3);
    f.q = beta[0];
    f.m = beta[1];
    f.delta_q = beta[2];
    f.delta_m = beta[3];
    return f;
}

namespace {

struct Columns {
    std::vector<double> top1, acc;
    std::vector<int> pretrain;
};

Columns select(const ResultsTable& table, const std::string& task) {
    Columns c;
    for (const auto& r : table.rows) {
        if (!task.empty() && r.task != task) continue;
        c.top1.push_back(r.top1);
        c.acc.push_back(r.accuracy);
        c.pretrain.push_back(r.pretrain);
    }
    if (c.acc.empty()) throw Error("regression: no rows" + (task.empty() ? std::string() : " for task " + task));
    return c;
}

}  // namespace

RegressionFit fit_linear(const ResultsTable& table, const std::string& task) {
    const Columns c = select(table, task);
    return fit_linear(c.top1, c.acc);
}

RegressionFit fit_multilinear(const ResultsTable& table, const std::string& task) {
    const Columns c = select(table, task);
    return fit_multilinear(c.top1, c.pretrain, c.acc);
}

ResultsTable synthetic_results_table(const SyntheticResultsSpec& spec, Rng& rng) {
    if (spec.rows_per_task < 4) throw Error("synthetic_results_table: need at least 4 rows per task");
    if (!(spec.top1_hi > spec.top1_lo)) throw Error("synthetic_results_table: empty top1 range");
    if (spec.noise < 0.0) throw Error("synthetic_results_table: noise must be non-negative");
    ResultsTable t;
    for (const auto& task : spec.tasks)
        for (std::size_t i = 0; i < spec.rows_per_task; ++i) {
            ResultsRow r;
            r.backbone = "backbone_" + std::to_string(i);
            r.task = task;
            r.pretrain = static_cast<int>(i % 2);
            r.top1 = rng.uniform(spec.top1_lo, spec.top1_hi);
            r.accuracy = (spec.m + spec.delta_m * r.pretrain) * r.top1 + spec.q + spec.delta_q * r.pretrain;
            if (spec.noise > 0.0) r.accuracy += rng.normal(0.0, spec.noise);
            t.rows.push_back(std::move(r));
        }
    return t;
}

}  // namespace sfuda
