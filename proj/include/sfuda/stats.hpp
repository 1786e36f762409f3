#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sfuda/data.hpp"

namespace sfuda {

/// accuracy = (m + Δm·pretrain)·top1 + q + Δq·pretrain + ε; the linear model has Δm = Δq = 0.
struct RegressionFit {
    double m = 0.0;
    double q = 0.0;
    double delta_m = 0.0;
    double delta_q = 0.0;
    double r2 = 0.0;
    double adj_r2 = 0.0;
    std::size_t n = 0;
    std::size_t p = 0;  // predictors, intercept excluded
    std::vector<double> residuals;
};

/// 1 − (1 − r2)(n − 1)/(n − p − 1)
double adjusted_r2(double r2, std::size_t n, std::size_t p);

RegressionFit fit_linear(std::span<const double> top1, std::span<const double> accuracy);
RegressionFit fit_multilinear(std::span<const double> top1, std::span<const int> pretrain,
                              std::span<const double> accuracy);

/// Rows of `table` whose task matches `task` (all rows when empty).
RegressionFit fit_linear(const ResultsTable& table, const std::string& task = "");
RegressionFit fit_multilinear(const ResultsTable& table, const std::string& task = "");

/// Backbone-style rows for `tasks`: top1 uniform in [lo, hi], half the rows with pretrain = 1, accuracy from the
/// multi-linear model plus N(0, noise²).
struct SyntheticResultsSpec {
    std::size_t rows_per_task = 60;
    double m = 0.9;
    double q = 5.0;
    double delta_m = 0.0;
    double delta_q = 8.0;
    double noise = 1.0;
    double top1_lo = 70.0;
    double top1_hi = 86.0;
    std::vector<std::string> tasks{"LP-IDG"};
};

ResultsTable synthetic_results_table(const SyntheticResultsSpec& spec, Rng& rng);

}  // namespace sfuda
