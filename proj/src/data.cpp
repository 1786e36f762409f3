#include "sfuda/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace sfuda {

namespace {

static_assert(std::endian::native == std::endian::little, "embedding I/O assumes a little-endian host");

constexpr std::array<char, 4> kEmbeddingMagic{'S', 'F', 'U', 'D'};
constexpr std::size_t kEmbeddingHeader = 16;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, delim)) out.push_back(trim(cell));
    if (!line.empty() && line.back() == delim) out.emplace_back();
    return out;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && std::isfinite(out);
}

}  // namespace

void DomainDataset::validate() const {
    if (num_classes < 1) throw Error("dataset '" + name + "': num_classes must be positive");
    if (features.rows() < static_cast<std::size_t>(num_classes))
        throw Error("dataset '" + name + "': fewer samples than classes");
    if (!features.all_finite()) throw Error("dataset '" + name + "': non-finite feature");
    if (!labels) return;
    if (labels->size() != features.rows()) throw Error("dataset '" + name + "': label count does not match rows");
    std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
    for (int y : *labels) {
        if (y < 0 || y >= num_classes) throw Error("dataset '" + name + "': label " + std::to_string(y) + " out of range");
        seen[static_cast<std::size_t>(y)] = true;
    }
    for (int c = 0; c < num_classes; ++c)
        if (!seen[static_cast<std::size_t>(c)]) throw Error("dataset '" + name + "': class " + std::to_string(c) + " has no samples");
}

const std::vector<int>& DomainDataset::require_labels(const char* what) const {
    if (!labels) throw Error(std::string(what) + " requires labeled data but '" + name + "' is unlabeled");
    return *labels;
}

ShiftSpec ShiftSpec::identity(std::size_t d) {
    ShiftSpec s;
    s.mean_shift.assign(d, 0.0);
    s.per_feature_scale.assign(d, 1.0);
    s.per_feature_offset.assign(d, 0.0);
    return s;
}

void ShiftSpec::validate(std::size_t d) const {
    if (mean_shift.size() != d || per_feature_scale.size() != d || per_feature_offset.size() != d)
        throw Error("shift spec vectors must have length " + std::to_string(d));
    for (double s : per_feature_scale)
        if (!(s > 0.0) || !std::isfinite(s)) throw Error("shift spec: per-feature scales must be strictly positive");
    if (!(label_noise >= 0.0 && label_noise < 1.0)) throw Error("shift spec: label_noise must lie in [0, 1)");
    if (!std::isfinite(rotation_angle)) throw Error("shift spec: rotation angle must be finite");
    if (rotation_angle != 0.0) {
        const auto [a, b] = rotation_plane;
        if (a == b || a >= d || b >= d) throw Error("shift spec: invalid rotation plane");
    }
}

void ShiftSpec::apply(std::span<double> x) const {
    if (rotation_angle != 0.0) {
        const auto [a, b] = rotation_plane;
        const double c = std::cos(rotation_angle), s = std::sin(rotation_angle);
        const double xa = x[a], xb = x[b];
        x[a] = c * xa - s * xb;
        x[b] = s * xa + c * xb;
    }
    for (std::size_t j = 0; j < x.size(); ++j)
        x[j] = per_feature_scale[j] * x[j] + per_feature_offset[j] + mean_shift[j];
}

void ShiftSpec::invert(std::span<double> x) const {
    for (std::size_t j = 0; j < x.size(); ++j)
        x[j] = (x[j] - per_feature_offset[j] - mean_shift[j]) / per_feature_scale[j];
    if (rotation_angle != 0.0) {
        const auto [a, b] = rotation_plane;
        const double c = std::cos(rotation_angle), s = std::sin(rotation_angle);
        const double xa = x[a], xb = x[b];
        x[a] = c * xa + s * xb;
        x[b] = -s * xa + c * xb;
    }
}

Matrix apply_shift(const ShiftSpec& shift, const Matrix& x) {
    shift.validate(x.cols());
    Matrix out = x;
    for (std::size_t r = 0; r < out.rows(); ++r) shift.apply(out.row(r));
    return out;
}

Matrix invert_shift(const ShiftSpec& shift, const Matrix& x) {
    shift.validate(x.cols());
    Matrix out = x;
    for (std::size_t r = 0; r < out.rows(); ++r) shift.invert(out.row(r));
    return out;
}

DomainPair gen_gaussian_pair(int num_classes, std::size_t dims, std::size_t n_per_class, double class_sep,
                             const ShiftSpec& shift, Rng& rng, double feature_mean) {
    if (!std::isfinite(feature_mean)) throw Error("gen_gaussian_pair: feature_mean must be finite");
    if (num_classes < 2) throw Error("gen_gaussian_pair: need at least 2 classes");
    if (dims < 2) throw Error("gen_gaussian_pair: need at least 2 dimensions");
    if (!(class_sep > 0.0)) throw Error("gen_gaussian_pair: class_sep must be positive");
    if (n_per_class < 1) throw Error("gen_gaussian_pair: n_per_class must be positive");
    shift.validate(dims);

    const auto C = static_cast<std::size_t>(num_classes);
    Matrix means(C, dims);
    for (std::size_t c = 0; c < C; ++c) {
        double n = 0.0;
        while (n < 1e-8) {
            for (double& v : means.row(c)) v = rng.normal();
            n = norm2(means.row(c));
        }
        for (double& v : means.row(c)) v = v / n * class_sep;
    }

    auto draw = [&](const std::string& name) {
        DomainDataset ds;
        ds.name = name;
        ds.num_classes = num_classes;
        ds.features = Matrix(C * n_per_class, dims);
        std::vector<int> labels(C * n_per_class);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t k = 0; k < n_per_class; ++k) {
                const std::size_t r = c * n_per_class + k;
                labels[r] = static_cast<int>(c);
                for (std::size_t j = 0; j < dims; ++j) ds.features(r, j) = feature_mean + means(c, j) + rng.normal();
            }
        }
        ds.labels = std::move(labels);
        return ds;
    };

    DomainPair pair{draw("source"), draw("target")};
    for (std::size_t r = 0; r < pair.target.size(); ++r) shift.apply(pair.target.features.row(r));
    if (shift.label_noise > 0.0) {
        auto& y = *pair.target.labels;
        for (auto& v : y) {
            if (rng.uniform() < shift.label_noise) {
                const int other = static_cast<int>(rng.uniform_index(C - 1));
                v = other >= v ? other + 1 : other;
            }
        }
    }
    return pair;
}

void save_embeddings(const Matrix& features, const std::filesystem::path& path) {
    if (features.rows() > 0xFFFFFFFFu || features.cols() > 0xFFFFFFFFu) throw Error("embedding matrix too large");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    const std::uint32_t header[3] = {static_cast<std::uint32_t>(features.rows()),
                                     static_cast<std::uint32_t>(features.cols()), 0u};
    out.write(kEmbeddingMagic.data(), 4);
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    std::vector<float> payload(features.data().begin(), features.data().end());
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw Error("failed writing " + path.string());
}

void save_labels(const std::vector<int>& labels, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    for (int y : labels) out << y << '\n';
}

DomainDataset load_embeddings(const std::filesystem::path& features_path,
                              const std::optional<std::filesystem::path>& labels_path, int num_classes) {
    std::ifstream in(features_path, std::ios::binary);
    if (!in) throw Error("cannot open embedding file " + features_path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < kEmbeddingHeader)
        throw Error(features_path.string() + ": header truncated (" + std::to_string(bytes.size()) + " bytes)");
    if (!std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin()))
        throw Error(features_path.string() + ": bad magic, expected SFUD");
    std::uint32_t header[3];
    std::memcpy(header, bytes.data() + 4, sizeof header);
    const std::size_t n = header[0], d = header[1];
    if (header[2] != 0) throw Error(features_path.string() + ": unsupported flags " + std::to_string(header[2]));
    const std::size_t expected = n * d * sizeof(float);
    const std::size_t found = bytes.size() - kEmbeddingHeader;
    if (found != expected) {
        throw Error(features_path.string() + ": payload size mismatch, expected " + std::to_string(expected) +
                    " bytes for " + std::to_string(n) + "x" + std::to_string(d) + ", found " + std::to_string(found));
    }
    std::vector<float> payload(n * d);
    std::memcpy(payload.data(), bytes.data() + kEmbeddingHeader, expected);

    DomainDataset ds;
    ds.name = features_path.stem().string();
    ds.features = Matrix(n, d, std::vector<double>(payload.begin(), payload.end()));
    if (!ds.features.all_finite()) throw Error(features_path.string() + ": non-finite feature value");

    if (labels_path) {
        std::ifstream lin(*labels_path);
        if (!lin) throw Error("cannot open label file " + labels_path->string());
        std::vector<int> labels;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(lin, line)) {
            ++lineno;
            line = trim(line);
            if (line.empty()) continue;
            char* end = nullptr;
            const long v = std::strtol(line.c_str(), &end, 10);
            if (end != line.c_str() + line.size())
                throw Error(labels_path->string() + ":" + std::to_string(lineno) + ": not an integer label");
            if (v < 0 || (num_classes > 0 && v >= num_classes))
                throw Error(labels_path->string() + ":" + std::to_string(lineno) + ": label " + std::to_string(v) +
                            " out of range [0, " + std::to_string(num_classes) + ")");
            labels.push_back(static_cast<int>(v));
        }
        if (labels.size() != n)
            throw Error(labels_path->string() + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
        if (num_classes <= 0) num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
        ds.labels = std::move(labels);
    }
    ds.num_classes = num_classes;
    return ds;
}

ResultsTable parse_results_table(const std::string& text) {
    static const std::array<std::string, 5> kColumns{"backbone", "top1", "pretrain", "task", "accuracy"};
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> col;
    bool have_header = false;
    ResultsTable table;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        auto cells = split(t, ',');
        if (!have_header) {
            for (std::size_t i = 0; i < cells.size(); ++i) col[cells[i]] = i;
            for (const auto& name : kColumns)
                if (!col.count(name)) throw Error("results table line " + std::to_string(lineno) + ": missing column '" + name + "'");
            have_header = true;
            continue;
        }
        auto where = [&](const std::string& msg) {
            return Error("results table line " + std::to_string(lineno) + ": " + msg);
        };
        if (cells.size() < col.size()) throw where("expected " + std::to_string(col.size()) + " fields, found " + std::to_string(cells.size()));
        ResultsRow row;
        row.backbone = cells[col["backbone"]];
        row.task = cells[col["task"]];
        if (!parse_double(cells[col["top1"]], row.top1)) throw where("top1 '" + cells[col["top1"]] + "' is not numeric");
        if (!parse_double(cells[col["accuracy"]], row.accuracy)) throw where("accuracy '" + cells[col["accuracy"]] + "' is not numeric");
        const std::string& pt = cells[col["pretrain"]];
        if (pt == "0") row.pretrain = 0;
        else if (pt == "1") row.pretrain = 1;
        else throw where("pretrain '" + pt + "' must be 0 (ImageNet) or 1 (ImageNet21k)");
        if (row.top1 < 0 || row.top1 > 100) throw where("top1 outside [0, 100]");
        if (row.accuracy < 0 || row.accuracy > 100) throw where("accuracy outside [0, 100]");
        table.rows.push_back(std::move(row));
    }
    if (!have_header) throw Error("results table: missing header");
    return table;
}

ResultsTable load_results_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open results table " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_results_table(ss.str());
}

void save_results_table(const ResultsTable& table, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << "backbone,top1,pretrain,task,accuracy\n";
    out.precision(17);
    for (const auto& r : table.rows)
        out << r.backbone << ',' << r.top1 << ',' << r.pretrain << ',' << r.task << ',' << r.accuracy << '\n';
}

}  // namespace sfuda
