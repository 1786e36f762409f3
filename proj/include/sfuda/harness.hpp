#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfuda/data.hpp"
#include "sfuda/distsim.hpp"
#include "sfuda/head.hpp"
#include "sfuda/neighbors.hpp"
#include "sfuda/pcsr.hpp"
#include "sfuda/sca.hpp"
#include "sfuda/shot.hpp"

namespace sfuda {

enum class Task { lp_idg, ft_idg, lp_odg, ft_odg, sfuda, ft_sfuda };
enum class Method { sca, shot, nrc, aad, pcsr };

std::string to_string(Task t);   // "LP-IDG" ...
std::string to_string(Method m); // "SHOT" ...
Task parse_task(const std::string& s);
Method parse_method(const std::string& s);

/// Everything besides the task identity that shapes a run.
struct HarnessConfig {
    std::size_t hidden_dim = HeadModel::kDefaultHidden;
    Activation activation = Activation::relu;
    TrainConfig lp;  // classifier-only first transfer
    TrainConfig ft;  // full first transfer
    /// When set, FT uses the two-phase recipe with this clipping norm.
    std::optional<double> two_phase_clip;
    KMeansOptions sca;
    ShotConfig shot;
    NrcConfig nrc;
    AadConfig aad;
    PcsrConfig pcsr;
    /// Applied to every gradient-based adaptation (global batch stays each method's batch_size).
    std::size_t workers = 1;
    bool sync_batchnorm = false;
};

nlohmann::json to_json(const HarnessConfig& cfg);
/// Fills `cfg` from a JSON object; unknown keys are rejected.
void update_from_json(HarnessConfig& cfg, const nlohmann::json& j);

struct TaskSpec {
    Task task = Task::lp_odg;
    std::optional<Method> method;
    std::shared_ptr<const DomainDataset> source;
    std::shared_ptr<const DomainDataset> target;
    NormKind norm = NormKind::batchnorm;
    std::uint64_t seed = 0;
    /// Recompute batchnorm statistics on the target before evaluation (ODG tasks).
    bool adabn = false;
    HarnessConfig config;

    void validate() const;
    /// "FT-SFUDA/SHOT/layernorm", seed not included.
    std::string label() const;
};

struct ExperimentRecord {
    Task task = Task::lp_odg;
    std::optional<Method> method;
    NormKind norm = NormKind::batchnorm;
    std::uint64_t seed = 0;
    bool adabn = false;
    std::string source_name;
    std::string target_name;
    std::string label;
    double accuracy = 0.0;
    double baseline_lp_odg = 0.0;  // NaN when no labeled source is available
    double delta = 0.0;
    bool failed = false;
    std::string error;  // non-empty when the run threw
    double wall_time = 0.0;
    nlohmann::json manifest;
    std::string manifest_hash;
};

/// Accuracy of one task; no baseline, no timing.
double task_accuracy(const TaskSpec& spec);

ExperimentRecord run_task(const TaskSpec& spec);

/// The stratified 80/20 split used by IDG tasks: (train rows, test rows).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(std::span<const int> labels,
                                                                               double train_fraction, Rng& rng);

struct Aggregate {
    std::string label;
    std::string target;  // dataset name, empty when not tied to one
    std::size_t n = 0;  // successful records
    std::size_t errors = 0;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation, 0 when n = 1
    std::size_t failed = 0;
};

/// "88.8 ± 0.5", with " (n=1)" when only one value exists.
std::string format_mean_std(double mean, double std, std::size_t n, int precision = 1);

struct SuiteResult {
    std::vector<ExperimentRecord> records;  // spec-major, seed-minor
    std::vector<Aggregate> aggregates;      // one per spec
};

/// Every spec at every seed; failures are recorded, never thrown. `jobs` bounds concurrency.
SuiteResult run_suite(const std::vector<TaskSpec>& specs, const std::vector<std::uint64_t>& seeds,
                      std::size_t jobs = 1);

Aggregate aggregate(const std::string& label, std::span<const ExperimentRecord> records);

enum class GroupBy { norm_kind, method, task };
GroupBy parse_group_by(const std::string& s);

struct GroupStats {
    std::string group;
    std::size_t n = 0;
    double delta_mean = 0.0;
    double delta_std = 0.0;
    double failure_rate = 0.0;  // percent
};

struct FailureReport {
    std::vector<GroupStats> groups;
    std::vector<std::string> notes;
};

FailureReport failure_report(std::span<const ExperimentRecord> records, GroupBy by);

/// Sets a named hyperparameter of `method` inside `cfg`.
void set_hyperparameter(HarnessConfig& cfg, Method method, const std::string& name, double value);

struct ParamAxis {
    std::string name;
    std::vector<double> values;
};

struct HyperGrid {
    ParamAxis rows;
    ParamAxis cols;
    Matrix mean;  // rows x cols
};

/// One run_suite per parameter combination; cells are means over all specs and seeds.
HyperGrid hyperparameter_grid(Method method, const ParamAxis& rows, const ParamAxis& cols,
                              const std::vector<TaskSpec>& specs, const std::vector<std::uint64_t>& seeds,
                              std::size_t jobs = 1);
/// AAD: beta {0, 0.75, 1, 2, 5} x K {3, 5}; NRC: K {2..5} x KK {2..5}.
std::pair<ParamAxis, ParamAxis> default_grid_axes(Method method);

struct DistTable {
    std::vector<DistConfig> cells;
    std::vector<Method> methods;
    std::vector<std::vector<Aggregate>> entries;  // [cell][method]
};

/// Adapts every method at every cell and seed, replacing the batch geometry of `base`.
DistTable run_distributed_grid(const std::vector<Method>& methods, const TaskSpec& base,
                               const std::vector<DistConfig>& grid, const std::vector<std::uint64_t>& seeds,
                               std::size_t jobs = 1);

/// One record per line: task,method,norm,adabn,seed,source,target,accuracy,baseline_lp_odg,delta,failed,error,manifest_hash
std::string records_table(std::span<const ExperimentRecord> records, char sep = ',');
std::string aggregates_table(std::span<const Aggregate> aggs, char sep = ',');
std::string failure_table(const FailureReport& report, char sep = ',');
std::string grid_table(const HyperGrid& grid, char sep = ',');
std::string dist_table(const DistTable& table, char sep = ',');

}  // namespace sfuda
