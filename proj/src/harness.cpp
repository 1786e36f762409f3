#include "sfuda/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <thread>

namespace sfuda {

using nlohmann::json;

namespace {

constexpr std::array<const char*, 6> kTaskNames{"LP-IDG", "FT-IDG", "LP-ODG", "FT-ODG", "SFUDA", "FT-SFUDA"};
constexpr std::array<const char*, 5> kMethodNames{"SCA", "SHOT", "NRC", "AAD", "PCSR"};

std::string upper(std::string s) {
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

std::string fixed(double v, int precision) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    return buf;
}

}  // namespace

std::string to_string(Task t) { return kTaskNames[static_cast<std::size_t>(t)]; }
std::string to_string(Method m) { return kMethodNames[static_cast<std::size_t>(m)]; }

Task parse_task(const std::string& s) {
    std::string u = upper(s);
    std::replace(u.begin(), u.end(), '_', '-');
    if (u == "SF-UDA") u = "SFUDA";
    if (u == "FT-SF-UDA") u = "FT-SFUDA";
    for (std::size_t i = 0; i < kTaskNames.size(); ++i)
        if (u == kTaskNames[i]) return static_cast<Task>(i);
    throw Error("unknown task '" + s + "'");
}

Method parse_method(const std::string& s) {
    const std::string u = upper(s);
    for (std::size_t i = 0; i < kMethodNames.size(); ++i)
        if (u == kMethodNames[i]) return static_cast<Method>(i);
    throw Error("unknown method '" + s + "'");
}

// ---- configuration <-> json

namespace {

json train_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"bottleneck_lr_scale", c.bottleneck_lr_scale},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"label_smoothing", c.label_smoothing},
            {"lr_schedule", c.lr_schedule == LrSchedule::constant ? "constant" : "inverse_decay"}};
}

json adapt_json(const AdaptOptions& a) {
    return {{"epochs", a.epochs},
            {"batch_size", a.batch_size},
            {"learning_rate", a.learning_rate},
            {"momentum", a.momentum},
            {"weight_decay", a.weight_decay},
            {"lr_schedule", a.lr_schedule == LrSchedule::constant ? "constant" : "inverse_decay"}};
}

using Setter = std::function<void(const json&)>;

void read_object(const json& j, const std::string& where, const std::map<std::string, Setter>& fields) {
    if (!j.is_object()) throw Error("config: '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        const auto it = fields.find(key);
        if (it == fields.end()) throw Error("config: unknown key '" + where + (where.empty() ? "" : ".") + key + "'");
        try {
            it->second(value);
        } catch (const json::exception&) {
            throw Error("config: key '" + where + (where.empty() ? "" : ".") + key + "' has the wrong type");
        }
    }
}

std::size_t as_count(const json& v) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw Error("config: expected a non-negative integer, got " + v.dump());
    return v.get<std::size_t>();
}

double as_real(const json& v) {
    if (!v.is_number()) throw Error("config: expected a number, got " + v.dump());
    return v.get<double>();
}

LrSchedule as_schedule(const json& v) {
    const std::string s = v.get<std::string>();
    if (s == "constant") return LrSchedule::constant;
    if (s == "inverse_decay" || s == "inverse-decay") return LrSchedule::inverse_decay;
    throw Error("config: unknown lr_schedule '" + s + "'");
}

std::map<std::string, Setter> train_fields(TrainConfig& c) {
    return {{"epochs", [&](const json& v) { c.epochs = as_count(v); }},
            {"batch_size", [&](const json& v) { c.batch_size = as_count(v); }},
            {"learning_rate", [&](const json& v) { c.learning_rate = as_real(v); }},
            {"bottleneck_lr_scale", [&](const json& v) { c.bottleneck_lr_scale = as_real(v); }},
            {"momentum", [&](const json& v) { c.momentum = as_real(v); }},
            {"weight_decay", [&](const json& v) { c.weight_decay = as_real(v); }},
            {"label_smoothing", [&](const json& v) { c.label_smoothing = as_real(v); }},
            {"lr_schedule", [&](const json& v) { c.lr_schedule = as_schedule(v); }}};
}

std::map<std::string, Setter> adapt_fields(AdaptOptions& a) {
    return {{"epochs", [&](const json& v) { a.epochs = as_count(v); }},
            {"batch_size", [&](const json& v) { a.batch_size = as_count(v); }},
            {"learning_rate", [&](const json& v) { a.learning_rate = as_real(v); }},
            {"momentum", [&](const json& v) { a.momentum = as_real(v); }},
            {"weight_decay", [&](const json& v) { a.weight_decay = as_real(v); }},
            {"lr_schedule", [&](const json& v) { a.lr_schedule = as_schedule(v); }}};
}

}  // namespace

json to_json(const HarnessConfig& cfg) {
    json shot = adapt_json(cfg.shot.train);
    shot["ce_weight"] = cfg.shot.ce_weight;
    shot["kmeans_rounds"] = cfg.shot.kmeans_rounds;
    json nrc = adapt_json(cfg.nrc.train);
    nrc["K"] = cfg.nrc.K;
    nrc["KK"] = cfg.nrc.KK;
    nrc["r"] = cfg.nrc.r;
    json aad = adapt_json(cfg.aad.train);
    aad["K"] = cfg.aad.K;
    aad["beta"] = cfg.aad.beta;
    json pcsr = adapt_json(cfg.pcsr.train);
    pcsr["M"] = cfg.pcsr.centers_per_class;
    pcsr["mixup_alpha"] = cfg.pcsr.mixup_alpha;
    pcsr["mixup_weight"] = cfg.pcsr.mixup_weight;
    pcsr["ce_weight"] = cfg.pcsr.ce_weight;
    pcsr["kmeans_rounds"] = cfg.pcsr.kmeans_rounds;
    return {{"hidden_dim", cfg.hidden_dim},
            {"activation", to_string(cfg.activation)},
            {"lp", train_json(cfg.lp)},
            {"ft", train_json(cfg.ft)},
            {"two_phase_clip", cfg.two_phase_clip ? json(*cfg.two_phase_clip) : json(nullptr)},
            {"sca", {{"max_iters", cfg.sca.max_iters}, {"tol", cfg.sca.tol}}},
            {"shot", shot},
            {"nrc", nrc},
            {"aad", aad},
            {"pcsr", pcsr},
            {"workers", cfg.workers},
            {"sync_batchnorm", cfg.sync_batchnorm}};
}

void update_from_json(HarnessConfig& cfg, const json& j) {
    read_object(j, "", {
        {"hidden_dim", [&](const json& v) { cfg.hidden_dim = as_count(v); }},
        {"activation", [&](const json& v) { cfg.activation = parse_activation(v.get<std::string>()); }},
        {"lp", [&](const json& v) { read_object(v, "lp", train_fields(cfg.lp)); }},
        {"ft", [&](const json& v) { read_object(v, "ft", train_fields(cfg.ft)); }},
        {"two_phase_clip",
         [&](const json& v) {
             if (v.is_null()) cfg.two_phase_clip.reset();
             else cfg.two_phase_clip = as_real(v);
         }},
        {"sca",
         [&](const json& v) {
             read_object(v, "sca", {{"max_iters", [&](const json& x) { cfg.sca.max_iters = as_count(x); }},
                                    {"tol", [&](const json& x) { cfg.sca.tol = as_real(x); }}});
         }},
        {"shot",
         [&](const json& v) {
             auto f = adapt_fields(cfg.shot.train);
             f["ce_weight"] = [&](const json& x) { cfg.shot.ce_weight = as_real(x); };
             f["kmeans_rounds"] = [&](const json& x) { cfg.shot.kmeans_rounds = as_count(x); };
             read_object(v, "shot", f);
         }},
        {"nrc",
         [&](const json& v) {
             auto f = adapt_fields(cfg.nrc.train);
             f["K"] = [&](const json& x) { cfg.nrc.K = as_count(x); };
             f["KK"] = [&](const json& x) { cfg.nrc.KK = as_count(x); };
             f["r"] = [&](const json& x) { cfg.nrc.r = as_real(x); };
             read_object(v, "nrc", f);
         }},
        {"aad",
         [&](const json& v) {
             auto f = adapt_fields(cfg.aad.train);
             f["K"] = [&](const json& x) { cfg.aad.K = as_count(x); };
             f["beta"] = [&](const json& x) { cfg.aad.beta = as_real(x); };
             read_object(v, "aad", f);
         }},
        {"pcsr",
         [&](const json& v) {
             auto f = adapt_fields(cfg.pcsr.train);
             f["M"] = [&](const json& x) { cfg.pcsr.centers_per_class = as_count(x); };
             f["mixup_alpha"] = [&](const json& x) { cfg.pcsr.mixup_alpha = as_real(x); };
             f["mixup_weight"] = [&](const json& x) { cfg.pcsr.mixup_weight = as_real(x); };
             f["ce_weight"] = [&](const json& x) { cfg.pcsr.ce_weight = as_real(x); };
             f["kmeans_rounds"] = [&](const json& x) { cfg.pcsr.kmeans_rounds = as_count(x); };
             read_object(v, "pcsr", f);
         }},
        {"workers", [&](const json& v) { cfg.workers = as_count(v); }},
        {"sync_batchnorm", [&](const json& v) { cfg.sync_batchnorm = v.get<bool>(); }},
    });
}

// ---- single runs

void TaskSpec::validate() const {
    if (!target) throw Error("task spec: target dataset missing");
    target->validate();
    const bool idg = task == Task::lp_idg || task == Task::ft_idg;
    const bool sf = task == Task::sfuda || task == Task::ft_sfuda;
    if (!idg) {
        if (!source) throw Error("task spec: " + to_string(task) + " needs a source dataset");
        source->validate();
        source->require_labels(to_string(task).c_str());
        if (source->dims() != target->dims())
            throw Error("task spec: source has " + std::to_string(source->dims()) + " dims, target " +
                        std::to_string(target->dims()));
        if (source->num_classes != target->num_classes) throw Error("task spec: source and target class counts differ");
    }
    target->require_labels("evaluation");
    if (sf && !method) throw Error("task spec: " + to_string(task) + " requires a method");
    if (!sf && method) throw Error("task spec: " + to_string(task) + " takes no adaptation method");
    if (adabn && norm != NormKind::batchnorm) throw Error("task spec: adabn needs a batchnorm head");
    if (adabn && idg) throw Error("task spec: adabn applies to out-of-domain tasks only");
    if (config.workers == 0) throw Error("task spec: workers must be positive");
}

std::string TaskSpec::label() const {
    std::string s = to_string(task);
    if (method) s += "/" + to_string(*method);
    s += "/" + to_string(norm);
    if (adabn) s += "+adabn";
    return s;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(std::span<const int> labels,
                                                                               double train_fraction, Rng& rng) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("stratified_split: fraction must lie in (0, 1)");
    int C = 0;
    for (int y : labels) {
        if (y < 0) throw Error("stratified_split: negative label");
        C = std::max(C, y + 1);
    }
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(C));
    for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);
    std::vector<std::size_t> train, test;
    for (const auto& m : members) {
        if (m.empty()) continue;
        const auto perm = rng.permutation(m.size());
        auto k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(m.size())));
        if (m.size() >= 2) k = std::clamp<std::size_t>(k, 1, m.size() - 1);
        else k = 1;
        for (std::size_t i = 0; i < m.size(); ++i) (i < k ? train : test).push_back(m[perm[i]]);
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

namespace {

DomainDataset subset(const DomainDataset& d, std::span<const std::size_t> rows) {
    DomainDataset out;
    out.name = d.name;
    out.num_classes = d.num_classes;
    out.features = d.features.select_rows(rows);
    if (d.labels) {
        std::vector<int> y(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) y[i] = (*d.labels)[rows[i]];
        out.labels = std::move(y);
    }
    return out;
}

// Seed streams of one run.
enum Stream : std::uint64_t { init_stream = 1, split_stream = 2, lp_stream = 3, ft_stream = 4, adapt_stream = 5 };

HeadModel first_transfer(const TaskSpec& spec, const DomainDataset& data, bool full) {
    const Rng root(spec.seed);
    Rng init = root.fork(init_stream);
    const HarnessConfig& cfg = spec.config;
    HeadModel model = HeadModel::init(data.dims(), static_cast<std::size_t>(data.num_classes), spec.norm, cfg.activation,
                                      init, cfg.hidden_dim);
    if (!full) {
        TrainConfig c = cfg.lp;
        c.seed = root.fork(lp_stream).seed();
        return train_supervised(std::move(model), data, Scope::classifier_only, c);
    }
    TrainConfig c = cfg.ft;
    c.seed = root.fork(ft_stream).seed();
    if (cfg.two_phase_clip) {
        c.grad_clip = *cfg.two_phase_clip;
        return two_phase_finetune(std::move(model), data, c);
    }
    return train_supervised(std::move(model), data, Scope::full, c);
}

void apply_geometry(AdaptOptions& a, const TaskSpec& spec) {
    a.seed = Rng(spec.seed).fork(adapt_stream).seed();
    a.workers = spec.config.workers;
    a.sync_batchnorm = spec.config.sync_batchnorm;
}

std::vector<int> adapt_and_predict(const TaskSpec& spec, HeadModel model, const Matrix& x) {
    const HarnessConfig& cfg = spec.config;
    switch (*spec.method) {
        case Method::sca:
            if (spec.task == Task::sfuda) return sca_adapt(*spec.source, x, cfg.sca).labels;
            return sca_adapt(model, *spec.source, x, cfg.sca).labels;
        case Method::shot: {
            ShotConfig c = cfg.shot;
            apply_geometry(c.train, spec);
            return predict(shot_adapt(std::move(model), x, c), x);
        }
        case Method::nrc: {
            NrcConfig c = cfg.nrc;
            apply_geometry(c.train, spec);
            return predict(nrc_adapt(std::move(model), x, c), x);
        }
        case Method::aad: {
            AadConfig c = cfg.aad;
            apply_geometry(c.train, spec);
            return predict(aad_adapt(std::move(model), x, c), x);
        }
        case Method::pcsr: {
            PcsrConfig c = cfg.pcsr;
            apply_geometry(c.train, spec);
            return predict(pcsr_adapt(std::move(model), x, c), x);
        }
    }
    throw Error("unreachable method");
}

struct Evaluation {
    double accuracy = 0.0;
    std::uint64_t adapted_hash = 0;
    std::uint64_t evaluated_hash = 0;
};

Evaluation evaluate(const TaskSpec& spec) {
    spec.validate();
    const DomainDataset& target = *spec.target;
    Evaluation ev;
    switch (spec.task) {
        case Task::lp_idg:
        case Task::ft_idg: {
            Rng split = Rng(spec.seed).fork(split_stream);
            const auto [train_rows, test_rows] = stratified_split(*target.labels, 0.8, split);
            if (test_rows.empty()) throw Error("IDG split left no test samples");
            const DomainDataset train = subset(target, train_rows);
            const DomainDataset test = subset(target, test_rows);
            const HeadModel m = first_transfer(spec, train, spec.task == Task::ft_idg);
            ev.accuracy = accuracy_percent(predict(m, test.features), *test.labels);
            return ev;
        }
        case Task::lp_odg:
        case Task::ft_odg: {
            HeadModel m = first_transfer(spec, *spec.source, spec.task == Task::ft_odg);
            if (spec.adabn) m = adabn(std::move(m), target.features);
            ev.accuracy = accuracy_percent(predict(m, target.features), *target.labels);
            return ev;
        }
        case Task::sfuda:
        case Task::ft_sfuda: {
            const Matrix& x = target.features;
            ev.adapted_hash = content_hash(x);
            HeadModel m;
            if (!(spec.task == Task::sfuda && *spec.method == Method::sca)) {
                m = first_transfer(spec, *spec.source, spec.task == Task::ft_sfuda);
                if (spec.adabn) m = adabn(std::move(m), x);
            }
            const std::vector<int> pred = adapt_and_predict(spec, std::move(m), x);
            ev.evaluated_hash = content_hash(x);
            if (ev.evaluated_hash != ev.adapted_hash) throw Error("transductive evaluation: target features changed");
            ev.accuracy = accuracy_percent(pred, *target.labels);
            return ev;
        }
    }
    throw Error("unreachable task");
}

json dataset_json(const std::shared_ptr<const DomainDataset>& d) {
    if (!d) return nullptr;
    return {{"name", d->name},
            {"rows", d->size()},
            {"dims", d->dims()},
            {"classes", d->num_classes},
            {"features_hash", hex64(content_hash(d->features))}};
}

}  // namespace

double task_accuracy(const TaskSpec& spec) { return evaluate(spec).accuracy; }

ExperimentRecord run_task(const TaskSpec& spec) {
    const auto start = std::chrono::steady_clock::now();
    ExperimentRecord r;
    r.task = spec.task;
    r.method = spec.method;
    r.norm = spec.norm;
    r.seed = spec.seed;
    r.adabn = spec.adabn;
    r.source_name = spec.source ? spec.source->name : "";
    r.target_name = spec.target ? spec.target->name : "";
    r.label = spec.label();

    const Evaluation ev = evaluate(spec);
    r.accuracy = ev.accuracy;
    if (spec.task == Task::lp_odg && !spec.adabn) {
        r.baseline_lp_odg = r.accuracy;
    } else if (spec.source && spec.source->labeled() && spec.source->dims() == spec.target->dims()) {
        TaskSpec base = spec;
        base.task = Task::lp_odg;
        base.method.reset();
        base.adabn = false;
        r.baseline_lp_odg = task_accuracy(base);
    } else {
        r.baseline_lp_odg = std::numeric_limits<double>::quiet_NaN();
    }
    r.delta = r.accuracy - r.baseline_lp_odg;
    r.failed = r.accuracy < r.baseline_lp_odg;

    r.manifest = {{"task", to_string(spec.task)},
                  {"method", spec.method ? json(to_string(*spec.method)) : json(nullptr)},
                  {"norm", to_string(spec.norm)},
                  {"seed", spec.seed},
                  {"adabn", spec.adabn},
                  {"source", dataset_json(spec.source)},
                  {"target", dataset_json(spec.target)},
                  {"config", to_json(spec.config)}};
    if (spec.task == Task::lp_idg || spec.task == Task::ft_idg) r.manifest["split"] = "stratified 80/20";
    if (ev.adapted_hash != 0) {
        r.manifest["adapted_features_hash"] = hex64(ev.adapted_hash);
        r.manifest["evaluated_features_hash"] = hex64(ev.evaluated_hash);
    }
    const std::string dumped = r.manifest.dump();
    r.manifest_hash = hex64(fnv1a(dumped.data(), dumped.size()));
    r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

// ---- suites

std::string format_mean_std(double mean, double std, std::size_t n, int precision) {
    std::string s = fixed(mean, precision) + " ± " + fixed(std, precision);
    if (n == 1) s += " (n=1)";
    return s;
}

Aggregate aggregate(const std::string& label, std::span<const ExperimentRecord> records) {
    Aggregate a;
    a.label = label;
    std::vector<double> acc;
    for (const auto& r : records) {
        if (r.failed) ++a.failed;
        if (!r.error.empty()) {
            ++a.errors;
            continue;
        }
        acc.push_back(r.accuracy);
    }
    a.n = acc.size();
    if (acc.empty()) {
        a.mean = a.std = std::numeric_limits<double>::quiet_NaN();
        return a;
    }
    a.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
    if (acc.size() > 1) {
        double ss = 0.0;
        for (double v : acc) ss += (v - a.mean) * (v - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(acc.size() - 1));
    }
    return a;
}

namespace {

ExperimentRecord error_record(const TaskSpec& spec, const std::string& what) {
    ExperimentRecord r;
    r.task = spec.task;
    r.method = spec.method;
    r.norm = spec.norm;
    r.seed = spec.seed;
    r.adabn = spec.adabn;
    r.source_name = spec.source ? spec.source->name : "";
    r.target_name = spec.target ? spec.target->name : "";
    r.label = spec.label();
    r.accuracy = r.baseline_lp_odg = r.delta = std::numeric_limits<double>::quiet_NaN();
    r.failed = true;
    r.error = what.empty() ? "unknown error" : what;
    return r;
}

std::vector<ExperimentRecord> run_all(const std::vector<TaskSpec>& runs, std::size_t jobs) {
    std::vector<ExperimentRecord> out(runs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < runs.size(); i = next++) {
            try {
                out[i] = run_task(runs[i]);
            } catch (const std::exception& e) {
                out[i] = error_record(runs[i], e.what());
            }
        }
    };
    const std::size_t n = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(runs.size(), 1));
    if (n == 1) {
        worker();
        return out;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return out;
}

}  // namespace

SuiteResult run_suite(const std::vector<TaskSpec>& specs, const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
    if (seeds.empty()) throw Error("run_suite: need at least one seed");
    std::vector<TaskSpec> runs;
    for (const auto& s : specs)
        for (std::uint64_t seed : seeds) {
            runs.push_back(s);
            runs.back().seed = seed;
        }
    SuiteResult res;
    res.records = run_all(runs, jobs);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        res.aggregates.push_back(aggregate(specs[i].label(), std::span(res.records).subspan(i * seeds.size(), seeds.size())));
        if (specs[i].target) res.aggregates.back().target = specs[i].target->name;
    }
    return res;
}

GroupBy parse_group_by(const std::string& s) {
    if (s == "norm" || s == "norm_kind") return GroupBy::norm_kind;
    if (s == "method") return GroupBy::method;
    if (s == "task") return GroupBy::task;
    throw Error("unknown grouping '" + s + "' (expected norm_kind, method or task)");
}

FailureReport failure_report(std::span<const ExperimentRecord> records, GroupBy by) {
    std::vector<std::string> keys;
    std::function<std::string(const ExperimentRecord&)> key;
    switch (by) {
        case GroupBy::norm_kind:
            keys = {"batchnorm", "layernorm"};
            key = [](const ExperimentRecord& r) { return to_string(r.norm); };
            break;
        case GroupBy::method:
            for (const char* m : kMethodNames) keys.emplace_back(m);
            keys.emplace_back("none");
            key = [](const ExperimentRecord& r) { return r.method ? to_string(*r.method) : std::string("none"); };
            break;
        case GroupBy::task:
            for (const char* t : kTaskNames) keys.emplace_back(t);
            key = [](const ExperimentRecord& r) { return to_string(r.task); };
            break;
    }
    FailureReport rep;
    for (const auto& k : keys) {
        GroupStats g;
        g.group = k;
        std::vector<double> deltas;
        std::size_t failed = 0;
        for (const auto& r : records) {
            if (key(r) != k) continue;
            ++g.n;
            if (r.failed) ++failed;
            if (std::isfinite(r.delta)) deltas.push_back(r.delta);
        }
        if (g.n == 0) {
            rep.notes.push_back("no records for group " + k);
            continue;
        }
        g.failure_rate = 100.0 * static_cast<double>(failed) / static_cast<double>(g.n);
        if (deltas.empty()) {
            g.delta_mean = g.delta_std = std::numeric_limits<double>::quiet_NaN();
        } else {
            g.delta_mean = std::accumulate(deltas.begin(), deltas.end(), 0.0) / static_cast<double>(deltas.size());
            if (deltas.size() > 1) {
                double ss = 0.0;
                for (double d : deltas) ss += (d - g.delta_mean) * (d - g.delta_mean);
                g.delta_std = std::sqrt(ss / static_cast<double>(deltas.size() - 1));
            }
        }
        rep.groups.push_back(g);
    }
    return rep;
}

// ---- grids

namespace {

std::size_t as_param_count(const std::string& name, double v) {
    if (!(v >= 0.0) || std::floor(v) != v) throw Error("hyperparameter " + name + " must be a non-negative integer");
    return static_cast<std::size_t>(v);
}

}  // namespace

void set_hyperparameter(HarnessConfig& cfg, Method method, const std::string& name, double v) {
    auto common = [&](AdaptOptions& a) {
        if (name == "epochs") a.epochs = as_param_count(name, v);
        else if (name == "learning_rate") a.learning_rate = v;
        else if (name == "batch_size") a.batch_size = as_param_count(name, v);
        else return false;
        return true;
    };
    bool ok = false;
    switch (method) {
        case Method::sca:
            throw Error("SCA has no hyperparameters to sweep");
        case Method::shot:
            if (name == "ce_weight") cfg.shot.ce_weight = v, ok = true;
            else if (name == "kmeans_rounds") cfg.shot.kmeans_rounds = as_param_count(name, v), ok = true;
            else ok = common(cfg.shot.train);
            break;
        case Method::nrc:
            if (name == "K") cfg.nrc.K = as_param_count(name, v), ok = true;
            else if (name == "KK") cfg.nrc.KK = as_param_count(name, v), ok = true;
            else if (name == "r") cfg.nrc.r = v, ok = true;
            else ok = common(cfg.nrc.train);
            break;
        case Method::aad:
            if (name == "K") cfg.aad.K = as_param_count(name, v), ok = true;
            else if (name == "beta") cfg.aad.beta = v, ok = true;
            else ok = common(cfg.aad.train);
            break;
        case Method::pcsr:
            if (name == "M") cfg.pcsr.centers_per_class = as_param_count(name, v), ok = true;
            else if (name == "mixup_alpha") cfg.pcsr.mixup_alpha = v, ok = true;
            else if (name == "mixup_weight") cfg.pcsr.mixup_weight = v, ok = true;
            else if (name == "ce_weight") cfg.pcsr.ce_weight = v, ok = true;
            else ok = common(cfg.pcsr.train);
            break;
    }
    if (!ok) throw Error("unknown hyperparameter '" + name + "' for " + to_string(method));
}

std::pair<ParamAxis, ParamAxis> default_grid_axes(Method method) {
    switch (method) {
        case Method::aad: return {{"beta", {0.0, 0.75, 1.0, 2.0, 5.0}}, {"K", {3, 5}}};
        case Method::nrc: return {{"K", {2, 3, 4, 5}}, {"KK", {2, 3, 4, 5}}};
        default: throw Error("no default grid for " + to_string(method));
    }
}

HyperGrid hyperparameter_grid(Method method, const ParamAxis& rows, const ParamAxis& cols,
                              const std::vector<TaskSpec>& specs, const std::vector<std::uint64_t>& seeds,
                              std::size_t jobs) {
    if (rows.values.empty() || cols.values.empty()) throw Error("hyperparameter_grid: empty axis");
    if (specs.empty()) throw Error("hyperparameter_grid: no task specs");
    HarnessConfig probe;
    set_hyperparameter(probe, method, rows.name, rows.values.front());
    set_hyperparameter(probe, method, cols.name, cols.values.front());

    std::vector<TaskSpec> all;
    for (double rv : rows.values)
        for (double cv : cols.values)
            for (const auto& s : specs) {
                TaskSpec t = s;
                if (t.task != Task::sfuda && t.task != Task::ft_sfuda)
                    throw Error("hyperparameter_grid: specs must be SFUDA or FT-SFUDA tasks");
                t.method = method;
                set_hyperparameter(t.config, method, rows.name, rv);
                set_hyperparameter(t.config, method, cols.name, cv);
                all.push_back(std::move(t));
            }
    const SuiteResult res = run_suite(all, seeds, jobs);
    HyperGrid g{rows, cols, Matrix(rows.values.size(), cols.values.size())};
    const std::size_t per_cell = specs.size() * seeds.size();
    for (std::size_t r = 0; r < rows.values.size(); ++r)
        for (std::size_t c = 0; c < cols.values.size(); ++c) {
            const std::size_t cell = r * cols.values.size() + c;
            g.mean(r, c) = aggregate("", std::span(res.records).subspan(cell * per_cell, per_cell)).mean;
        }
    return g;
}

DistTable run_distributed_grid(const std::vector<Method>& methods, const TaskSpec& base,
                               const std::vector<DistConfig>& grid, const std::vector<std::uint64_t>& seeds,
                               std::size_t jobs) {
    if (methods.empty() || grid.empty()) throw Error("run_distributed_grid: empty method list or grid");
    for (Method m : methods)
        if (m == Method::sca)
            throw Error("run_distributed_grid: SCA runs no gradient steps, so its result does not depend on how "
                        "the batch is distributed");
    if (base.task != Task::sfuda && base.task != Task::ft_sfuda)
        throw Error("run_distributed_grid: base spec must be an SFUDA or FT-SFUDA task");

    std::vector<TaskSpec> specs;
    for (const DistConfig& cell : grid)
        for (Method m : methods) {
            TaskSpec t = base;
            t.method = m;
            t.config.workers = cell.workers;
            t.config.sync_batchnorm = cell.sync_batchnorm;
            for (AdaptOptions* a : {&t.config.shot.train, &t.config.nrc.train, &t.config.aad.train, &t.config.pcsr.train})
                a->batch_size = cell.global_batch();
            specs.push_back(std::move(t));
        }
    const SuiteResult res = run_suite(specs, seeds, jobs);
    DistTable table{grid, methods, {}};
    for (std::size_t c = 0; c < grid.size(); ++c) {
        table.entries.emplace_back();
        for (std::size_t m = 0; m < methods.size(); ++m) {
            Aggregate a = res.aggregates[c * methods.size() + m];
            a.label = grid[c].label() + "/" + to_string(methods[m]);
            table.entries.back().push_back(a);
        }
    }
    return table;
}

// ---- tables

std::string records_table(std::span<const ExperimentRecord> records, char sep) {
    std::string out = "task,method,norm,adabn,seed,source,target,accuracy,baseline_lp_odg,delta,failed,error,manifest_hash\n";
    if (sep != ',') std::replace(out.begin(), out.end(), ',', sep);
    for (const auto& r : records) {
        std::string err = r.error;
        std::replace(err.begin(), err.end(), sep, ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        const std::vector<std::string> cells{to_string(r.task),
                                             r.method ? to_string(*r.method) : "",
                                             to_string(r.norm),
                                             r.adabn ? "1" : "0",
                                             std::to_string(r.seed),
                                             r.source_name,
                                             r.target_name,
                                             fixed(r.accuracy, 4),
                                             fixed(r.baseline_lp_odg, 4),
                                             fixed(r.delta, 4),
                                             r.failed ? "1" : "0",
                                             err,
                                             r.manifest_hash};
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += sep;
            out += cells[i];
        }
        out += '\n';
    }
    return out;
}

std::string aggregates_table(std::span<const Aggregate> aggs, char sep) {
    std::string out = std::string("spec") + sep + "target" + sep + "n" + sep + "errors" + sep + "failed" + sep + "mean" + sep +
                      "std" + sep + "summary\n";
    for (const auto& a : aggs)
        out += a.label + sep + a.target + sep + std::to_string(a.n) + sep + std::to_string(a.errors) + sep + std::to_string(a.failed) + sep +
               fixed(a.mean, 4) + sep + fixed(a.std, 4) + sep + format_mean_std(a.mean, a.std, a.n) + '\n';
    return out;
}

std::string failure_table(const FailureReport& report, char sep) {
    std::string out = std::string("group") + sep + "n" + sep + "delta" + sep + "failure_rate\n";
    for (const auto& g : report.groups)
        out += g.group + sep + std::to_string(g.n) + sep + format_mean_std(g.delta_mean, g.delta_std, g.n, 2) + sep +
               fixed(g.failure_rate, 2) + '\n';
    for (const auto& n : report.notes) out += "# " + n + '\n';
    return out;
}

std::string grid_table(const HyperGrid& grid, char sep) {
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", v);
        return std::string(buf);
    };
    std::string out = grid.rows.name + "\\" + grid.cols.name;
    for (double c : grid.cols.values) out += sep + num(c);
    out += '\n';
    for (std::size_t r = 0; r < grid.rows.values.size(); ++r) {
        out += num(grid.rows.values[r]);
        for (std::size_t c = 0; c < grid.cols.values.size(); ++c) out += sep + fixed(grid.mean(r, c), 2);
        out += '\n';
    }
    return out;
}

std::string dist_table(const DistTable& table, char sep) {
    std::string out = "cell";
    for (Method m : table.methods) out += sep + to_string(m);
    out += '\n';
    for (std::size_t c = 0; c < table.cells.size(); ++c) {
        out += table.cells[c].label();
        for (const auto& a : table.entries[c]) out += sep + format_mean_std(a.mean, a.std, a.n, 2);
        out += '\n';
    }
    return out;
}

}  // namespace sfuda
