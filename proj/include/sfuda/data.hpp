#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfuda/core.hpp"

namespace sfuda {

/// Feature matrix for one visual domain, optionally labeled.
struct DomainDataset {
    std::string name;
    Matrix features;
    std::optional<std::vector<int>> labels;
    int num_classes = 0;

    std::size_t size() const { return features.rows(); }
    std::size_t dims() const { return features.cols(); }
    bool labeled() const { return labels.has_value(); }

    /// Throws unless every class in [0, C) is present, n ≥ C and features are finite.
    void validate() const;

    const std::vector<int>& require_labels(const char* what) const;
};

/// Distortion mapping the source distribution onto the target one:
/// x' = scale ⊙ R(x) + offset + mean_shift, with R a rotation in one coordinate plane.
struct ShiftSpec {
    std::vector<double> mean_shift;
    double rotation_angle = 0.0;
    std::pair<std::size_t, std::size_t> rotation_plane{0, 1};
    std::vector<double> per_feature_scale;
    std::vector<double> per_feature_offset;
    double label_noise = 0.0;  // fraction of target ground-truth labels flipped

    static ShiftSpec identity(std::size_t d);
    void validate(std::size_t d) const;
    void apply(std::span<double> x) const;
    void invert(std::span<double> x) const;
};

Matrix apply_shift(const ShiftSpec& shift, const Matrix& x);
Matrix invert_shift(const ShiftSpec& shift, const Matrix& x);

struct DomainPair {
    DomainDataset source;
    DomainDataset target;
};

/// C isotropic Gaussians around random unit-sphere means scaled by class_sep; the target
/// is a fresh draw pushed through `shift`. `feature_mean` is added to every coordinate of both
/// domains before the shift (backbone features are typically far from zero-mean).
DomainPair gen_gaussian_pair(int num_classes, std::size_t dims, std::size_t n_per_class, double class_sep,
                             const ShiftSpec& shift, Rng& rng, double feature_mean = 0.0);

/// Embedding file: "SFUD", u32 n, u32 d, u32 flags (LE), then n·d LE float32.
void save_embeddings(const Matrix& features, const std::filesystem::path& path);
void save_labels(const std::vector<int>& labels, const std::filesystem::path& path);

/// num_classes = 0 infers C = max label + 1.
DomainDataset load_embeddings(const std::filesystem::path& features_path,
                              const std::optional<std::filesystem::path>& labels_path = std::nullopt,
                              int num_classes = 0);

struct ResultsRow {
    std::string backbone;
    double top1 = 0.0;
    int pretrain = 0;  // 0 = ImageNet, 1 = ImageNet21k
    std::string task;
    double accuracy = 0.0;
};

struct ResultsTable {
    std::vector<ResultsRow> rows;
};

/// Comma-delimited with header `backbone,top1,pretrain,task,accuracy` (column order free).
ResultsTable load_results_table(const std::filesystem::path& path);
ResultsTable parse_results_table(const std::string& text);
void save_results_table(const ResultsTable& table, const std::filesystem::path& path);

}  // namespace sfuda
