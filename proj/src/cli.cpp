#include "sfuda/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "sfuda/stats.hpp"

namespace sfuda {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- generator

ShiftSpec GeneratorSpec::shift() const {
    ShiftSpec s = ShiftSpec::identity(dims);
    Rng rng = Rng(seed).fork(17);
    for (double& v : s.per_feature_scale) v = scale * std::exp(scale_jitter * rng.normal());
    for (double& v : s.per_feature_offset) v = offset_std * rng.normal();
    for (double& v : s.mean_shift) v = mean_shift_std * rng.normal();
    s.rotation_angle = rotation_angle;
    s.rotation_plane = rotation_plane;
    s.label_noise = label_noise;
    return s;
}

DomainPair GeneratorSpec::generate() const {
    if (!(scale > 0.0)) throw Error("generator: scale must be positive");
    Rng rng(seed);
    DomainPair p = gen_gaussian_pair(classes, dims, n_per_class, class_sep, shift(), rng, feature_mean);
    const std::string base = name.empty() ? "gauss-" + std::to_string(seed) : name;
    p.source.name = base + "/source";
    p.target.name = base + "/target";
    return p;
}

// ---- config json

namespace {

using Setter = std::function<void(const json&)>;

void read_object(const json& j, const std::string& where, const std::map<std::string, Setter>& fields) {
    if (!j.is_object()) throw Error("config: '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        const auto it = fields.find(key);
        if (it == fields.end()) throw Error("config: unknown key '" + path + "'");
        try {
            it->second(value);
        } catch (const json::exception&) {
            throw Error("config: key '" + path + "' has the wrong type");
        }
    }
}

std::size_t count_of(const json& v) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw Error("config: expected a non-negative integer, got " + v.dump());
    return v.get<std::size_t>();
}

double real_of(const json& v) {
    if (!v.is_number()) throw Error("config: expected a number, got " + v.dump());
    return v.get<double>();
}

json generator_json(const GeneratorSpec& g) {
    return {{"generator",
             {{"name", g.name},
              {"classes", g.classes},
              {"dims", g.dims},
              {"n_per_class", g.n_per_class},
              {"class_sep", g.class_sep},
              {"feature_mean", g.feature_mean},
              {"seed", g.seed},
              {"scale", g.scale},
              {"scale_jitter", g.scale_jitter},
              {"offset_std", g.offset_std},
              {"mean_shift_std", g.mean_shift_std},
              {"rotation_angle", g.rotation_angle},
              {"rotation_plane", {g.rotation_plane.first, g.rotation_plane.second}},
              {"label_noise", g.label_noise}}}};
}

GeneratorSpec generator_from(const json& j) {
    GeneratorSpec g;
    read_object(j, "generator", {
        {"name", [&](const json& v) { g.name = v.get<std::string>(); }},
        {"classes", [&](const json& v) { g.classes = static_cast<int>(count_of(v)); }},
        {"dims", [&](const json& v) { g.dims = count_of(v); }},
        {"n_per_class", [&](const json& v) { g.n_per_class = count_of(v); }},
        {"class_sep", [&](const json& v) { g.class_sep = real_of(v); }},
        {"feature_mean", [&](const json& v) { g.feature_mean = real_of(v); }},
        {"seed", [&](const json& v) { g.seed = count_of(v); }},
        {"scale", [&](const json& v) { g.scale = real_of(v); }},
        {"scale_jitter", [&](const json& v) { g.scale_jitter = real_of(v); }},
        {"offset_std", [&](const json& v) { g.offset_std = real_of(v); }},
        {"mean_shift_std", [&](const json& v) { g.mean_shift_std = real_of(v); }},
        {"rotation_angle", [&](const json& v) { g.rotation_angle = real_of(v); }},
        {"rotation_plane",
         [&](const json& v) {
             if (!v.is_array() || v.size() != 2) throw Error("config: generator.rotation_plane must be [a, b]");
             g.rotation_plane = {count_of(v[0]), count_of(v[1])};
         }},
        {"label_noise", [&](const json& v) { g.label_noise = real_of(v); }},
    });
    return g;
}

json files_json(const FileSpec& f) {
    json j = {{"name", f.name},
              {"source_features", f.source_features.string()},
              {"source_labels", f.source_labels.string()},
              {"target_features", f.target_features.string()},
              {"classes", f.classes}};
    if (f.target_labels) j["target_labels"] = f.target_labels->string();
    return {{"files", j}};
}

FileSpec files_from(const json& j) {
    FileSpec f;
    read_object(j, "files", {
        {"name", [&](const json& v) { f.name = v.get<std::string>(); }},
        {"source_features", [&](const json& v) { f.source_features = v.get<std::string>(); }},
        {"source_labels", [&](const json& v) { f.source_labels = v.get<std::string>(); }},
        {"target_features", [&](const json& v) { f.target_features = v.get<std::string>(); }},
        {"target_labels", [&](const json& v) { f.target_labels = v.get<std::string>(); }},
        {"classes", [&](const json& v) { f.classes = static_cast<int>(count_of(v)); }},
    });
    if (f.source_features.empty() || f.source_labels.empty() || f.target_features.empty())
        throw Error("config: files entries need source_features, source_labels and target_features");
    return f;
}

ParamAxis axis_from(const json& j, const std::string& where) {
    ParamAxis a;
    read_object(j, where, {
        {"name", [&](const json& v) { a.name = v.get<std::string>(); }},
        {"values",
         [&](const json& v) {
             for (const auto& x : v) a.values.push_back(real_of(x));
         }},
    });
    if (a.name.empty() || a.values.empty()) throw Error("config: " + where + " needs a name and values");
    return a;
}

json axis_json(const std::optional<ParamAxis>& a) {
    if (!a) return nullptr;
    return {{"name", a->name}, {"values", a->values}};
}

}  // namespace

void RunConfig::validate() const {
    if (data.empty()) throw Error("config: no data entries");
    if (tasks.empty()) throw Error("config: no tasks");
    if (norms.empty()) throw Error("config: no norm kinds");
    if (seeds.empty()) throw Error("config: no seeds");
    if (jobs == 0) throw Error("config: jobs must be positive");
    if (sep != ',' && sep != '\t') throw Error("config: format must be csv or tsv");
    const bool needs_method = std::any_of(tasks.begin(), tasks.end(),
                                          [](Task t) { return t == Task::sfuda || t == Task::ft_sfuda; });
    if (needs_method && methods.empty()) throw Error("config: SFUDA tasks listed but no methods");
    std::set<std::string> names;
    for (const auto& d : data) {
        const std::string n = std::visit([](const auto& s) { return s.name; }, d);
        if (!n.empty() && !names.insert(n).second) throw Error("config: duplicate data name '" + n + "'");
    }
}

json to_json(const RunConfig& cfg) {
    json data = json::array();
    for (const auto& d : cfg.data)
        data.push_back(std::holds_alternative<GeneratorSpec>(d) ? generator_json(std::get<GeneratorSpec>(d))
                                                                : files_json(std::get<FileSpec>(d)));
    json tasks = json::array(), methods = json::array(), norms = json::array(), cells = json::array(),
         grid_methods = json::array();
    for (Task t : cfg.tasks) tasks.push_back(to_string(t));
    for (Method m : cfg.methods) methods.push_back(to_string(m));
    for (NormKind n : cfg.norms) norms.push_back(to_string(n));
    for (const auto& c : cfg.distgrid.cells) cells.push_back(c.label());
    for (Method m : cfg.distgrid.methods) grid_methods.push_back(to_string(m));
    return {{"data", data},
            {"tasks", tasks},
            {"methods", methods},
            {"norms", norms},
            {"adabn", cfg.adabn},
            {"seeds", cfg.seeds},
            {"harness", to_json(cfg.harness)},
            {"jobs", cfg.jobs},
            {"out", cfg.out},
            {"format", cfg.sep == '\t' ? "tsv" : "csv"},
            {"distgrid",
             {{"cells", cells},
              {"methods", grid_methods},
              {"task", to_string(cfg.distgrid.task)},
              {"norm", to_string(cfg.distgrid.norm)}}},
            {"sweep",
             {{"method", to_string(cfg.sweep.method)},
              {"rows", axis_json(cfg.sweep.rows)},
              {"cols", axis_json(cfg.sweep.cols)}}}};
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    auto number = [&](const std::string& s) -> std::uint64_t {
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (s.empty() || used != s.size() || s.front() == '-') throw Error("invalid seed list '" + text + "'");
        return v;
    };
    std::vector<std::uint64_t> out;
    const auto dots = text.find("..");
    if (dots != std::string::npos) {
        const std::uint64_t a = number(text.substr(0, dots)), b = number(text.substr(dots + 2));
        if (b < a) throw Error("invalid seed range '" + text + "'");
        if (b - a > 100000) throw Error("seed range '" + text + "' is too large");
        for (std::uint64_t s = a; s <= b; ++s) out.push_back(s);
        return out;
    }
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(number(part));
    if (out.empty()) throw Error("invalid seed list '" + text + "'");
    return out;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig cfg;
    read_object(j, "", {
        {"data",
         [&](const json& v) {
             cfg.data.clear();
             const json list = v.is_array() ? v : json::array({v});
             for (const auto& d : list) {
                 if (!d.is_object() || d.size() != 1) throw Error("config: each data entry needs exactly one of generator/files");
                 if (d.contains("generator")) cfg.data.emplace_back(generator_from(d["generator"]));
                 else if (d.contains("files")) cfg.data.emplace_back(files_from(d["files"]));
                 else throw Error("config: unknown data entry '" + d.begin().key() + "'");
             }
         }},
        {"tasks",
         [&](const json& v) {
             cfg.tasks.clear();
             for (const auto& t : v) cfg.tasks.push_back(parse_task(t.get<std::string>()));
         }},
        {"methods",
         [&](const json& v) {
             cfg.methods.clear();
             for (const auto& m : v) cfg.methods.push_back(parse_method(m.get<std::string>()));
         }},
        {"norms",
         [&](const json& v) {
             cfg.norms.clear();
             for (const auto& n : v) cfg.norms.push_back(parse_norm_kind(n.get<std::string>()));
         }},
        {"adabn", [&](const json& v) { cfg.adabn = v.get<bool>(); }},
        {"seeds",
         [&](const json& v) {
             if (v.is_string()) {
                 cfg.seeds = parse_seeds(v.get<std::string>());
             } else {
                 cfg.seeds.clear();
                 for (const auto& s : v) cfg.seeds.push_back(count_of(s));
             }
         }},
        {"harness", [&](const json& v) { update_from_json(cfg.harness, v); }},
        {"jobs", [&](const json& v) { cfg.jobs = count_of(v); }},
        {"out", [&](const json& v) { cfg.out = v.get<std::string>(); }},
        {"format",
         [&](const json& v) {
             const std::string f = v.get<std::string>();
             if (f == "csv") cfg.sep = ',';
             else if (f == "tsv") cfg.sep = '\t';
             else throw Error("config: format must be csv or tsv");
         }},
        {"distgrid",
         [&](const json& v) {
             read_object(v, "distgrid", {
                 {"cells",
                  [&](const json& x) {
                      cfg.distgrid.cells.clear();
                      for (const auto& c : x) cfg.distgrid.cells.push_back(DistConfig::parse(c.get<std::string>()));
                  }},
                 {"methods",
                  [&](const json& x) {
                      cfg.distgrid.methods.clear();
                      for (const auto& m : x) cfg.distgrid.methods.push_back(parse_method(m.get<std::string>()));
                  }},
                 {"task", [&](const json& x) { cfg.distgrid.task = parse_task(x.get<std::string>()); }},
                 {"norm", [&](const json& x) { cfg.distgrid.norm = parse_norm_kind(x.get<std::string>()); }},
             });
         }},
        {"sweep",
         [&](const json& v) {
             read_object(v, "sweep", {
                 {"method", [&](const json& x) { cfg.sweep.method = parse_method(x.get<std::string>()); }},
                 {"rows",
                  [&](const json& x) {
                      if (x.is_null()) cfg.sweep.rows.reset();
                      else cfg.sweep.rows = axis_from(x, "sweep.rows");
                  }},
                 {"cols",
                  [&](const json& x) {
                      if (x.is_null()) cfg.sweep.cols.reset();
                      else cfg.sweep.cols = axis_from(x, "sweep.cols");
                  }},
             });
         }},
    });
    return cfg;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error("config " + path.string() + " is not valid JSON: " + e.what());
    }
    if (j.is_object() && j.contains("toolkit")) {
        // a manifest from an earlier run
        for (const auto& [key, value] : j.items())
            if (key != "toolkit" && key != "version" && key != "command" && key != "config_hash" && key != "config")
                throw Error("manifest: unknown key '" + key + "'");
        if (!j.contains("config")) throw Error("manifest: missing config");
        RunConfig cfg = run_config_from_json(j["config"]);
        if (j.contains("config_hash") && j["config_hash"].get<std::string>() != config_hash(cfg))
            throw Error("manifest: config_hash does not match its config");
        return cfg;
    }
    return run_config_from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
    json j = to_json(cfg);
    for (const char* k : {"out", "jobs", "format"}) j.erase(k);
    const std::string s = j.dump();
    return hex64(fnv1a(s.data(), s.size()));
}

std::vector<DomainPair> load_pairs(const RunConfig& cfg) {
    std::vector<DomainPair> out;
    for (const auto& d : cfg.data) {
        if (std::holds_alternative<GeneratorSpec>(d)) {
            out.push_back(std::get<GeneratorSpec>(d).generate());
            continue;
        }
        const FileSpec& f = std::get<FileSpec>(d);
        DomainPair p;
        p.source = load_embeddings(f.source_features, f.source_labels, f.classes);
        p.target = load_embeddings(f.target_features, f.target_labels, f.classes ? f.classes : p.source.num_classes);
        const std::string base = f.name.empty() ? f.target_features.stem().string() : f.name;
        p.source.name = base + "/source";
        p.target.name = base + "/target";
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<TaskSpec> expand_specs(const RunConfig& cfg, const std::vector<DomainPair>& pairs) {
    std::vector<TaskSpec> specs;
    for (const auto& p : pairs) {
        auto src = std::make_shared<const DomainDataset>(p.source);
        auto tgt = std::make_shared<const DomainDataset>(p.target);
        for (NormKind n : cfg.norms)
            for (Task t : cfg.tasks) {
                TaskSpec s;
                s.task = t;
                s.source = src;
                s.target = tgt;
                s.norm = n;
                s.adabn = cfg.adabn && n == NormKind::batchnorm && t != Task::lp_idg && t != Task::ft_idg;
                s.config = cfg.harness;
                if (t == Task::sfuda || t == Task::ft_sfuda) {
                    for (Method m : cfg.methods) {
                        s.method = m;
                        specs.push_back(s);
                    }
                } else {
                    specs.push_back(s);
                }
            }
    }
    return specs;
}

std::vector<ExperimentRecord> parse_records(const std::string& text, char sep) {
    std::vector<ExperimentRecord> out;
    std::stringstream ss(text);
    std::string line;
    std::vector<std::string> header;
    std::size_t line_no = 0;
    auto split = [&](const std::string& l) {
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ls(l);
        while (std::getline(ls, cell, sep)) cells.push_back(cell);
        if (!l.empty() && l.back() == sep) cells.emplace_back();
        return cells;
    };
    while (std::getline(ss, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        if (header.empty()) {
            header = split(line);
            continue;
        }
        const auto cells = split(line);
        if (cells.size() != header.size())
            throw Error("records line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                        " cells, found " + std::to_string(cells.size()));
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < cells.size(); ++i) row[header[i]] = cells[i];
        auto need = [&](const char* k) -> const std::string& {
            const auto it = row.find(k);
            if (it == row.end()) throw Error(std::string("records: missing column ") + k);
            return it->second;
        };
        auto num = [&](const char* k) {
            const std::string& v = need(k);
            if (v == "nan") return std::numeric_limits<double>::quiet_NaN();
            try {
                std::size_t used = 0;
                const double d = std::stod(v, &used);
                if (used == v.size()) return d;
            } catch (const std::exception&) {
            }
            throw Error("records line " + std::to_string(line_no) + ": column " + k + " is not numeric");
        };
        ExperimentRecord r;
        r.task = parse_task(need("task"));
        if (!need("method").empty()) r.method = parse_method(need("method"));
        r.norm = parse_norm_kind(need("norm"));
        r.adabn = need("adabn") == "1";
        r.seed = static_cast<std::uint64_t>(num("seed"));
        r.source_name = need("source");
        r.target_name = need("target");
        r.accuracy = num("accuracy");
        r.baseline_lp_odg = num("baseline_lp_odg");
        r.delta = num("delta");
        r.failed = need("failed") == "1";
        r.error = need("error");
        r.manifest_hash = need("manifest_hash");
        r.label = to_string(r.task) + (r.method ? "/" + to_string(*r.method) : "") + "/" + to_string(r.norm) +
                  (r.adabn ? "+adabn" : "");
        out.push_back(std::move(r));
    }
    if (header.empty()) throw Error("records: no header line");
    return out;
}

// ---- commands

namespace {

std::string upper_ascii(std::string s) {
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}


struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string seeds;
    std::optional<std::size_t> jobs;
    std::string out;
    std::string format;
};

// Output files are assembled in memory and written only once the command has succeeded.
class Outputs {
public:
    explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}
    void add(const std::string& name, std::string content) { files_.emplace_back(name, std::move(content)); }
    const fs::path& dir() const { return dir_; }

    void commit() {
        const bool existed = fs::exists(dir_);
        std::vector<fs::path> written;
        try {
            fs::create_directories(dir_);
            for (const auto& [name, content] : files_) {
                const fs::path p = dir_ / name;
                std::ofstream out(p, std::ios::binary);
                if (!out) throw Error("cannot write " + p.string());
                written.push_back(p);
                out << content;
                if (!out) throw Error("failed writing " + p.string());
            }
        } catch (...) {
            std::error_code ec;
            for (const auto& p : written) fs::remove(p, ec);
            if (!existed) fs::remove(dir_, ec);
            throw;
        }
    }

private:
    fs::path dir_;
    std::vector<std::pair<std::string, std::string>> files_;
};

std::string header_line(const std::string& hash) {
    return std::string("# ") + kToolkitName + " " + kToolkitVersion + " config=" + hash + "\n";
}

RunConfig resolve(const CommonFlags& f, const std::string& command) {
    RunConfig cfg;
    if (!f.config.empty()) cfg = load_run_config(f.config);
    if (f.seed) cfg.seeds = {*f.seed};
    if (!f.seeds.empty()) cfg.seeds = parse_seeds(f.seeds);
    if (f.jobs) cfg.jobs = *f.jobs;
    if (!f.format.empty()) {
        if (f.format == "csv") cfg.sep = ',';
        else if (f.format == "tsv") cfg.sep = '\t';
        else throw Error("--format must be csv or tsv");
    }
    if (!f.out.empty()) {
        cfg.out = f.out;
    } else if (cfg.out.empty()) {
        const char* root = std::getenv("SFUDA_OUT_DIR");
        cfg.out = (fs::path(root && *root ? root : "sfuda_out") / command).string();
    }
    cfg.validate();
    return cfg;
}

std::string manifest_text(const RunConfig& cfg, const std::string& command) {
    json m = {{"toolkit", kToolkitName},
              {"version", kToolkitVersion},
              {"command", command},
              {"config_hash", config_hash(cfg)},
              {"config", to_json(cfg)}};
    return m.dump(2) + "\n";
}

std::string ext(const RunConfig& cfg) { return cfg.sep == '\t' ? ".tsv" : ".csv"; }

std::string timings(std::span<const ExperimentRecord> records, char sep) {
    std::string out = std::string("label") + sep + "seed" + sep + "wall_time_s\n";
    for (const auto& r : records) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3f", r.wall_time);
        out += r.label + sep + std::to_string(r.seed) + sep + buf + '\n';
    }
    return out;
}

void cmd_run_or_suite(const CommonFlags& f, const std::string& command) {
    RunConfig cfg = resolve(f, command);
    if (command == "run" && cfg.seeds.size() != 1)
        throw Error("run takes exactly one seed (use suite for several)");
    const std::string hash = config_hash(cfg);
    const auto pairs = load_pairs(cfg);
    const auto specs = expand_specs(cfg, pairs);
    const SuiteResult res = run_suite(specs, cfg.seeds, cfg.jobs);

    Outputs out(cfg.out);
    out.add("records" + ext(cfg), header_line(hash) + records_table(res.records, cfg.sep));
    if (command == "suite") out.add("aggregates" + ext(cfg), header_line(hash) + aggregates_table(res.aggregates, cfg.sep));
    out.add("manifest.json", manifest_text(cfg, command));
    out.add("timings" + ext(cfg), timings(res.records, cfg.sep));
    out.commit();

    std::size_t errors = 0;
    for (const auto& r : res.records) errors += r.error.empty() ? 0 : 1;
    if (command == "suite") std::cout << aggregates_table(res.aggregates, cfg.sep);
    else std::cout << records_table(res.records, cfg.sep);
    std::cerr << res.records.size() << " records (" << errors << " errors) -> " << out.dir().string() << "\n";
}

void cmd_distgrid(const CommonFlags& f) {
    RunConfig cfg = resolve(f, "distgrid");
    const std::string hash = config_hash(cfg);
    const auto pairs = load_pairs(cfg);
    std::string text = header_line(hash);
    for (const auto& p : pairs) {
        TaskSpec base;
        base.task = cfg.distgrid.task;
        base.source = std::make_shared<const DomainDataset>(p.source);
        base.target = std::make_shared<const DomainDataset>(p.target);
        base.norm = cfg.distgrid.norm;
        base.config = cfg.harness;
        const DistTable t = run_distributed_grid(cfg.distgrid.methods, base, cfg.distgrid.cells, cfg.seeds, cfg.jobs);
        text += "# " + p.target.name + "\n" + dist_table(t, cfg.sep);
    }
    Outputs out(cfg.out);
    out.add("distgrid" + ext(cfg), text);
    out.add("manifest.json", manifest_text(cfg, "distgrid"));
    out.commit();
    std::cout << text;
}

void cmd_sweep(const CommonFlags& f) {
    RunConfig cfg = resolve(f, "sweep");
    const std::string hash = config_hash(cfg);
    ParamAxis rows, cols;
    if (cfg.sweep.rows && cfg.sweep.cols) {
        rows = *cfg.sweep.rows;
        cols = *cfg.sweep.cols;
    } else if (!cfg.sweep.rows && !cfg.sweep.cols) {
        std::tie(rows, cols) = default_grid_axes(cfg.sweep.method);
    } else {
        throw Error("sweep: give both rows and cols, or neither");
    }
    const auto pairs = load_pairs(cfg);
    RunConfig only_sf = cfg;
    only_sf.tasks.erase(std::remove_if(only_sf.tasks.begin(), only_sf.tasks.end(),
                                       [](Task t) { return t != Task::sfuda && t != Task::ft_sfuda; }),
                        only_sf.tasks.end());
    if (only_sf.tasks.empty()) throw Error("sweep: config lists no SFUDA or FT-SFUDA task");
    only_sf.methods = {cfg.sweep.method};
    const auto specs = expand_specs(only_sf, pairs);
    const HyperGrid g = hyperparameter_grid(cfg.sweep.method, rows, cols, specs, cfg.seeds, cfg.jobs);
    const std::string text = header_line(hash) + "# " + to_string(cfg.sweep.method) + " mean accuracy\n" + grid_table(g, cfg.sep);
    Outputs out(cfg.out);
    out.add("sweep_" + upper_ascii(to_string(cfg.sweep.method)) + ext(cfg), text);
    out.add("manifest.json", manifest_text(cfg, "sweep"));
    out.commit();
    std::cout << text;
}

std::string fit_line(const std::string& task, const char* model, const RegressionFit& fit, char sep) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.6f%c%.6f%c%.6f%c%.6f%c%.6f%c%.6f%c%zu%c%zu", fit.m, sep, fit.q, sep, fit.delta_m, sep,
                  fit.delta_q, sep, fit.r2, sep, fit.adj_r2, sep, fit.n, sep, fit.p);
    return (task.empty() ? "all" : task) + sep + model + sep + buf + "\n";
}

void cmd_stats(const std::string& path, const std::string& task, const CommonFlags& f) {
    char sep = ',';
    if (f.format == "tsv") sep = '\t';
    else if (!f.format.empty() && f.format != "csv") throw Error("--format must be csv or tsv");
    const ResultsTable table = load_results_table(path);
    std::vector<std::string> tasks;
    if (!task.empty()) {
        tasks.push_back(task);
    } else {
        for (const auto& r : table.rows)
            if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
    }
    std::string text = std::string("task") + sep + "model" + sep + "m" + sep + "q" + sep + "delta_m" + sep + "delta_q" + sep +
                       "r2" + sep + "adj_r2" + sep + "n" + sep + "p\n";
    for (const auto& t : tasks) {
        text += fit_line(t, "Lin", fit_linear(table, t), sep);
        text += fit_line(t, "M-Lin", fit_multilinear(table, t), sep);
    }
    text += "# rows weighted equally\n";
    if (!f.out.empty()) {
        Outputs out(f.out);
        const std::string content = std::string("# ") + kToolkitName + " " + kToolkitVersion + " input=" + path + "\n" + text;
        out.add(sep == '\t' ? "stats.tsv" : "stats.csv", content);
        out.commit();
    }
    std::cout << text;
}

void cmd_report(const std::string& dir, const CommonFlags& f) {
    char sep = ',';
    if (f.format == "tsv") sep = '\t';
    else if (!f.format.empty() && f.format != "csv") throw Error("--format must be csv or tsv");
    fs::path records_path = fs::path(dir) / (sep == '\t' ? "records.tsv" : "records.csv");
    if (!fs::exists(records_path)) throw Error("report: no records file in " + dir);
    std::ifstream in(records_path);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string first;
    std::getline(buf, first);
    buf.clear();
    buf.seekg(0);
    const auto records = parse_records(buf.str(), sep);

    std::string text = first.rfind("# ", 0) == 0 ? first + "\n" : "";
    for (auto [by, name] : {std::pair{GroupBy::norm_kind, "norm_kind"}, std::pair{GroupBy::method, "method"},
                            std::pair{GroupBy::task, "task"}}) {
        text += "# delta accuracy and failure rate by " + std::string(name) + "\n";
        text += failure_table(failure_report(records, by), sep);
    }
    std::string points = std::string("label") + sep + "seed" + sep + "baseline_lp_odg" + sep + "accuracy" + sep + "delta\n";
    for (const auto& r : records) {
        if (!r.error.empty()) continue;
        char row[128];
        std::snprintf(row, sizeof row, "%c%llu%c%.4f%c%.4f%c%.4f\n", sep, static_cast<unsigned long long>(r.seed), sep,
                      r.baseline_lp_odg, sep, r.accuracy, sep, r.delta);
        points += r.label + row;
    }
    Outputs out(f.out.empty() ? fs::path(dir) / "report" : fs::path(f.out));
    out.add(sep == '\t' ? "failure_report.tsv" : "failure_report.csv", text);
    out.add(sep == '\t' ? "points_delta.tsv" : "points_delta.csv", points);
    out.commit();
    std::cout << text;
}

void cmd_gen_data(const CommonFlags& f, GeneratorSpec g, bool results_table, const SyntheticResultsSpec& rs) {
    RunConfig cfg;
    if (!f.config.empty()) {
        cfg = load_run_config(f.config);
        if (cfg.data.size() != 1 || !std::holds_alternative<GeneratorSpec>(cfg.data.front()))
            throw Error("gen-data: config must hold exactly one generator entry");
        g = std::get<GeneratorSpec>(cfg.data.front());
    }
    if (f.seed) g.seed = *f.seed;
    std::string out_dir = f.out;
    if (out_dir.empty()) out_dir = cfg.out;
    if (out_dir.empty()) {
        const char* root = std::getenv("SFUDA_OUT_DIR");
        out_dir = (fs::path(root && *root ? root : "sfuda_out") / "gen-data").string();
    }
    const fs::path dir(out_dir);
    const bool existed = fs::exists(dir);
    std::vector<fs::path> written;
    try {
        fs::create_directories(dir);
        if (results_table) {
            Rng rng(g.seed);
            const fs::path p = dir / "synthetic_results.csv";
            save_results_table(synthetic_results_table(rs, rng), p);
            written.push_back(p);
        } else {
            const DomainPair p = g.generate();
            const std::vector<std::pair<std::string, const DomainDataset*>> parts{{"source", &p.source}, {"target", &p.target}};
            for (const auto& [stem, ds] : parts) {
                save_embeddings(ds->features, dir / (stem + ".emb"));
                written.push_back(dir / (stem + ".emb"));
                save_labels(*ds->labels, dir / (stem + ".labels"));
                written.push_back(dir / (stem + ".labels"));
            }
            RunConfig data_cfg;
            FileSpec fsp;
            fsp.name = g.name.empty() ? "gauss-" + std::to_string(g.seed) : g.name;
            fsp.source_features = fs::absolute(dir / "source.emb");
            fsp.source_labels = fs::absolute(dir / "source.labels");
            fsp.target_features = fs::absolute(dir / "target.emb");
            fsp.target_labels = fs::absolute(dir / "target.labels");
            fsp.classes = g.classes;
            json j = {{"generator", generator_json(g)["generator"]}, {"files", files_json(fsp)["files"]}};
            std::ofstream m(dir / "data.json");
            m << j.dump(2) << "\n";
            written.push_back(dir / "data.json");
        }
    } catch (...) {
        std::error_code ec;
        for (const auto& p : written) fs::remove(p, ec);
        if (!existed) fs::remove(dir, ec);
        throw;
    }
    std::cerr << "wrote " << written.size() << " files to " << dir.string() << "\n";
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"Feature-space source-free domain adaptation toolkit"};
    app.set_version_flag("--version", std::string(kToolkitName) + " " + kToolkitVersion);
    app.require_subcommand(1);

    CommonFlags flags;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "JSON config (or a manifest.json from an earlier run)");
        sub->add_option("--seed", flags.seed, "single seed, overrides the config");
        sub->add_option("--seeds", flags.seeds, "seed range A..B or list a,b,c, overrides the config");
        sub->add_option("--jobs", flags.jobs, "concurrent experiments");
        sub->add_option("--out", flags.out, "output directory (default $SFUDA_OUT_DIR/<command>)");
        sub->add_option("--format", flags.format, "csv or tsv");
    };

    GeneratorSpec gen;
    bool results_table = false;
    SyntheticResultsSpec rs;
    auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic source/target pair as embedding files");
    add_common(gen_cmd);
    gen_cmd->add_option("--classes", gen.classes);
    gen_cmd->add_option("--dims", gen.dims);
    gen_cmd->add_option("--n-per-class", gen.n_per_class);
    gen_cmd->add_option("--class-sep", gen.class_sep);
    gen_cmd->add_option("--feature-mean", gen.feature_mean);
    gen_cmd->add_option("--scale", gen.scale);
    gen_cmd->add_option("--scale-jitter", gen.scale_jitter);
    gen_cmd->add_option("--offset-std", gen.offset_std);
    gen_cmd->add_option("--mean-shift-std", gen.mean_shift_std);
    gen_cmd->add_option("--rotation", gen.rotation_angle);
    gen_cmd->add_option("--label-noise", gen.label_noise);
    gen_cmd->add_option("--name", gen.name);
    gen_cmd->add_flag("--results-table", results_table, "write a synthetic backbone results table instead");
    gen_cmd->add_option("--delta-q", rs.delta_q);
    gen_cmd->add_option("--delta-m", rs.delta_m);
    gen_cmd->add_option("--noise", rs.noise);
    gen_cmd->add_option("--rows", rs.rows_per_task);
    gen_cmd->add_option("--tasks", rs.tasks, "task names for the results table");

    auto* run_cmd = app.add_subcommand("run", "run every configured task once");
    add_common(run_cmd);
    auto* suite_cmd = app.add_subcommand("suite", "run every configured task at every seed and aggregate");
    add_common(suite_cmd);
    auto* dist_cmd = app.add_subcommand("distgrid", "accuracy over simulated worker x local-batch cells");
    add_common(dist_cmd);
    auto* sweep_cmd = app.add_subcommand("sweep", "hyperparameter grid for one method");
    add_common(sweep_cmd);

    std::string stats_path, stats_task;
    auto* stats_cmd = app.add_subcommand("stats", "linear and multi-linear fits of a results table");
    stats_cmd->add_option("table", stats_path, "results table (backbone,top1,pretrain,task,accuracy)")->required();
    stats_cmd->add_option("--task", stats_task, "fit only this task");
    stats_cmd->add_option("--out", flags.out);
    stats_cmd->add_option("--format", flags.format);

    std::string report_dir;
    auto* report_cmd = app.add_subcommand("report", "delta-accuracy and failure-rate tables from a results directory");
    report_cmd->add_option("dir", report_dir, "directory holding records.csv")->required();
    report_cmd->add_option("--out", flags.out);
    report_cmd->add_option("--format", flags.format);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*gen_cmd) cmd_gen_data(flags, gen, results_table, rs);
        else if (*run_cmd) cmd_run_or_suite(flags, "run");
        else if (*suite_cmd) cmd_run_or_suite(flags, "suite");
        else if (*dist_cmd) cmd_distgrid(flags);
        else if (*sweep_cmd) cmd_sweep(flags);
        else if (*stats_cmd) cmd_stats(stats_path, stats_task, flags);
        else if (*report_cmd) cmd_report(report_dir, flags);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "sfuda: error: " << msg << "\n";
        return 1;
    }
    return 0;
}

}  // namespace sfuda
