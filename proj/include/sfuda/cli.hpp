#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "sfuda/harness.hpp"

namespace sfuda {

inline constexpr const char* kToolkitName = "sfuda";
inline constexpr const char* kToolkitVersion = "0.1.0";

/// Synthetic pair description; the shift is drawn from its own seed.
struct GeneratorSpec {
    std::string name;
    int classes = 5;
    std::size_t dims = 32;
    std::size_t n_per_class = 100;
    double class_sep = 4.0;
    double feature_mean = 0.0;
    std::uint64_t seed = 0;
    double scale = 1.0;         // per-feature scale = scale · exp(N(0, scale_jitter²))
    double scale_jitter = 0.0;
    double offset_std = 0.0;    // per-feature offsets ~ N(0, offset_std²)
    double mean_shift_std = 0.0;
    double rotation_angle = 0.0;
    std::pair<std::size_t, std::size_t> rotation_plane{0, 1};
    double label_noise = 0.0;

    ShiftSpec shift() const;
    DomainPair generate() const;
};

struct FileSpec {
    std::string name;
    std::filesystem::path source_features;
    std::filesystem::path source_labels;
    std::filesystem::path target_features;
    std::optional<std::filesystem::path> target_labels;
    int classes = 0;
};

using DataSpec = std::variant<GeneratorSpec, FileSpec>;

struct DistGridSpec {
    std::vector<DistConfig> cells = DistConfig::default_grid();
    std::vector<Method> methods{Method::shot, Method::nrc, Method::aad, Method::pcsr};
    Task task = Task::sfuda;
    NormKind norm = NormKind::layernorm;
};

struct SweepSpec {
    Method method = Method::aad;
    std::optional<ParamAxis> rows;  // default_grid_axes(method) when absent
    std::optional<ParamAxis> cols;
};

/// Declarative experiment description read from a JSON file; unknown keys are rejected.
struct RunConfig {
    std::vector<DataSpec> data;
    std::vector<Task> tasks{Task::lp_odg};
    std::vector<Method> methods;
    std::vector<NormKind> norms{NormKind::batchnorm};
    bool adabn = false;
    std::vector<std::uint64_t> seeds{0};
    HarnessConfig harness;
    std::size_t jobs = 1;
    std::string out;
    char sep = ',';
    DistGridSpec distgrid;
    SweepSpec sweep;

    void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
/// Reads a config file or a manifest written by a previous run.
RunConfig load_run_config(const std::filesystem::path& path);
/// Hash of everything that can change results (out, jobs and format are excluded).
std::string config_hash(const RunConfig& cfg);

/// "3", "0..4" (inclusive) or "1,5,9".
std::vector<std::uint64_t> parse_seeds(const std::string& text);

/// Loaded datasets of every data entry, in order.
std::vector<DomainPair> load_pairs(const RunConfig& cfg);
/// data x norms x tasks (x methods for SF-UDA tasks), seed left at 0.
std::vector<TaskSpec> expand_specs(const RunConfig& cfg, const std::vector<DomainPair>& pairs);

/// Parses a records file written by `records_table` (comment lines skipped).
std::vector<ExperimentRecord> parse_records(const std::string& text, char sep = ',');

/// Entry point behind the `sfuda` executable. Errors print one line on stderr and return non-zero.
int cli_main(int argc, char** argv);

}  // namespace sfuda
