#pragma once

// File formats: dataset CSV, component-set JSON, the binary matrix cache and
// the JSON/CSV result documents written by the command-line tool.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"
#include "mixcert/certification.hpp"
#include "mixcert/convex_bound.hpp"
#include "mixcert/error.hpp"
#include "mixcert/hash.hpp"
#include "mixcert/likelihood.hpp"
#include "mixcert/model_space.hpp"
#include "mixcert/solvers.hpp"

namespace mixcert {

using Json = nlohmann::json;

/// Shortest decimal form that reads back to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

inline double parse_double(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw InvalidArgument("cannot parse number '" + std::string(s) + "'");
    }
    return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::ifstream open_input(const std::filesystem::path& path, bool binary = false) {
    std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
    if (!in) throw InvalidArgument("cannot open " + path.string());
    return in;
}

inline std::ofstream open_output(const std::filesystem::path& path, bool binary = false) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    return out;
}

// ---------------------------------------------------------------------------
// Dataset CSV: header x1,...,xd[,label]

inline void write_dataset_csv(std::ostream& out, const Dataset& data) {
    const std::size_t d = data.dimension();
    for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << 'x' << (j + 1);
    if (!data.labels.empty()) out << ",label";
    out << '\n';
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << format_double(data.points(i, j));
        if (!data.labels.empty()) out << ',' << data.labels[i];
        out << '\n';
    }
}

inline Dataset read_dataset_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw InvalidArgument("dataset CSV is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    std::size_t d = header.size();
    const bool labeled = header.back() == "label";
    if (labeled) --d;
    if (d < 1) throw InvalidArgument("dataset CSV has no coordinate columns");
    for (std::size_t j = 0; j < d; ++j) {
        if (header[j] != "x" + std::to_string(j + 1)) throw InvalidArgument("unexpected dataset CSV header: " + line);
    }
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw InvalidArgument("dataset CSV line " + std::to_string(line_no) + " has the wrong number of fields");
        }
        for (std::size_t j = 0; j < d; ++j) values.push_back(parse_double(fields[j]));
        if (labeled) {
            int label = 0;
            const auto f = fields[d];
            const auto res = std::from_chars(f.data(), f.data() + f.size(), label);
            if (res.ec != std::errc{} || res.ptr != f.data() + f.size()) {
                throw InvalidArgument("bad label on dataset CSV line " + std::to_string(line_no));
            }
            labels.push_back(label);
        }
    }
    const std::size_t n = values.size() / d;
    RowMatrix pts(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    std::memcpy(pts.data(), values.data(), values.size() * sizeof(double));
    return Dataset(std::move(pts), std::move(labels));
}

inline void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
    auto out = open_output(path);
    write_dataset_csv(out, data);
}

inline Dataset read_dataset_csv(const std::filesystem::path& path) {
    auto in = open_input(path);
    return read_dataset_csv(in);
}

// ---------------------------------------------------------------------------
// Component sets

inline Json component_to_json(const GaussianComponent& c) {
    const std::size_t d = c.dimension();
    Json mean = Json::array();
    Json cov = Json::array();
    for (std::size_t i = 0; i < d; ++i) {
        mean.push_back(c.mean()[Eigen::Index(i)]);
        Json row = Json::array();
        for (std::size_t j = 0; j < d; ++j) row.push_back(c.covariance()(Eigen::Index(i), Eigen::Index(j)));
        cov.push_back(std::move(row));
    }
    return {{"mean", std::move(mean)}, {"cov", std::move(cov)}};
}

inline GaussianComponent component_from_json(const Json& j) {
    const auto& mean = j.at("mean");
    const auto& cov = j.at("cov");
    const auto d = static_cast<Eigen::Index>(mean.size());
    if (d < 1 || static_cast<Eigen::Index>(cov.size()) != d) throw InvalidModel("component mean and cov sizes differ");
    Vector mu(d);
    Matrix sigma(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        mu[i] = mean.at(std::size_t(i)).get<double>();
        const auto& row = cov.at(std::size_t(i));
        if (static_cast<Eigen::Index>(row.size()) != d) throw InvalidModel("covariance must be square");
        for (Eigen::Index k = 0; k < d; ++k) sigma(i, k) = row.at(std::size_t(k)).get<double>();
    }
    return GaussianComponent(std::move(mu), std::move(sigma));
}

inline Json set_to_json(const ComponentSet& set) {
    Json comps = Json::array();
    for (const auto& c : set.components()) comps.push_back(component_to_json(c));
    return {{"dimension", set.dimension()}, {"components", std::move(comps)}, {"provenance", set.provenance()}};
}

inline ComponentSet set_from_json(const Json& j) {
    try {
        std::vector<GaussianComponent> comps;
        for (const auto& c : j.at("components")) comps.push_back(component_from_json(c));
        if (j.contains("dimension") && !comps.empty() && j.at("dimension").get<std::size_t>() != comps.front().dimension()) {
            throw InvalidModel("declared dimension does not match the components");
        }
        Json prov = j.contains("provenance") ? j.at("provenance") : Json{{"type", "explicit"}};
        return ComponentSet(std::move(comps), std::move(prov));
    } catch (const Json::exception& e) {
        throw InvalidModel(std::string("malformed component set: ") + e.what());
    }
}

inline Json read_json(const std::filesystem::path& path) {
    auto in = open_input(path);
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
    auto out = open_output(path);
    out << j.dump(2) << '\n';
}

inline MixtureModel mixture_from_json(const Json& j) {
    std::vector<GaussianComponent> comps;
    for (const auto& c : j.at("components")) comps.push_back(component_from_json(c));
    return MixtureModel(j.at("weights").get<std::vector<double>>(), std::move(comps));
}

inline Json mixture_to_json(const MixtureModel& mix) {
    Json comps = Json::array();
    for (const auto& c : mix.components) comps.push_back(component_to_json(c));
    return {{"weights", mix.weights}, {"components", std::move(comps)}};
}

// ---------------------------------------------------------------------------
// Binary matrix cache: "MXLL", u32 version, u64 N, u64 M, N*M f64, all little-endian

inline constexpr std::uint32_t kMatrixCacheVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw InvalidArgument("truncated matrix cache");
    return v;
}

}  // namespace detail

inline void write_matrix(std::ostream& out, const LogLikelihoodMatrix& mat) {
    out.write("MXLL", 4);
    detail::put_le<std::uint32_t>(out, kMatrixCacheVersion);
    detail::put_le<std::uint64_t>(out, mat.rows());
    detail::put_le<std::uint64_t>(out, mat.cols());
    out.write(reinterpret_cast<const char*>(mat.entries().data()), std::streamsize(mat.entries().size_bytes()));
}

/// The hashes of the originating dataset and set are not stored and must be supplied.
inline LogLikelihoodMatrix read_matrix(std::istream& in, std::uint64_t data_hash = 0, std::uint64_t models_hash = 0) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MXLL", 4) != 0) throw InvalidArgument("not a matrix cache file");
    if (detail::get_le<std::uint32_t>(in) != kMatrixCacheVersion) throw InvalidArgument("unsupported matrix cache version");
    const auto n = detail::get_le<std::uint64_t>(in);
    const auto m = detail::get_le<std::uint64_t>(in);
    if (n == 0 || m == 0 || n > std::numeric_limits<std::size_t>::max() / 8 / m) {
        throw InvalidArgument("bad matrix cache dimensions");
    }
    std::vector<double> entries(n * m);
    in.read(reinterpret_cast<char*>(entries.data()), std::streamsize(entries.size() * sizeof(double)));
    if (!in) throw InvalidArgument("truncated matrix cache");
    return LogLikelihoodMatrix(n, m, std::move(entries), data_hash, models_hash);
}

inline void write_matrix(const std::filesystem::path& path, const LogLikelihoodMatrix& mat) {
    auto out = open_output(path, true);
    write_matrix(out, mat);
}

inline LogLikelihoodMatrix read_matrix(const std::filesystem::path& path, std::uint64_t data_hash = 0,
                                       std::uint64_t models_hash = 0) {
    auto in = open_input(path, true);
    return read_matrix(in, data_hash, models_hash);
}

// ---------------------------------------------------------------------------
// Result documents

inline const char* stop_reason_name(StopReason r) {
    switch (r) {
        case StopReason::gap: return "gap";
        case StopReason::relative_change: return "relative_change";
        case StopReason::max_iterations: return "max_iterations";
    }
    return "unknown";
}

inline StopReason stop_reason_from_name(const std::string& s) {
    if (s == "gap") return StopReason::gap;
    if (s == "relative_change") return StopReason::relative_change;
    if (s == "max_iterations") return StopReason::max_iterations;
    throw InvalidArgument("unknown stop reason " + s);
}

inline Json bound_to_json(const BoundResult& b) {
    Json support = Json::array();
    for (std::size_t m = 0; m < b.pi_dense.size(); ++m) {
        if (b.pi_dense[m] > 0.0) support.push_back(Json::array({m, b.pi_dense[m]}));
    }
    Json trace = Json::array();
    for (const auto& t : b.trace) trace.push_back(Json::array({t.ll, t.gap ? Json(*t.gap) : Json(nullptr)}));
    return {{"ub_ll", b.ub_ll},
            {"certified_ub", b.certified_ub},
            {"gap", b.final_gap},
            {"iterations", b.iterations_used},
            {"converged", b.converged},
            {"stop", stop_reason_name(b.stop)},
            {"n_models", b.pi_dense.size()},
            {"pi_support", std::move(support)},
            {"trace", std::move(trace)},
            {"monotone_violations", b.monotone_violations},
            {"overrelaxed_steps", b.overrelaxed_steps},
            {"readmissions", b.readmissions},
            {"matrix_hash", hash_hex(b.matrix_hash)},
            {"dataset_hash", hash_hex(b.dataset_hash)},
            {"set_hash", hash_hex(b.set_hash)}};
}

inline std::uint64_t parse_hash(const Json& j) { return std::stoull(j.get<std::string>(), nullptr, 16); }

inline BoundResult bound_from_json(const Json& j) {
    BoundResult b;
    b.ub_ll = j.at("ub_ll").get<double>();
    b.certified_ub = j.at("certified_ub").get<double>();
    b.final_gap = j.at("gap").get<double>();
    b.iterations_used = j.at("iterations").get<std::size_t>();
    b.converged = j.at("converged").get<bool>();
    b.stop = stop_reason_from_name(j.at("stop").get<std::string>());
    std::vector<double> w(j.at("n_models").get<std::size_t>(), 0.0);
    for (const auto& e : j.at("pi_support")) w.at(e.at(0).get<std::size_t>()) = e.at(1).get<double>();
    b.pi_dense = WeightVector(std::move(w));
    for (const auto& t : j.at("trace")) {
        b.trace.push_back({t.at(0).get<double>(), t.at(1).is_null() ? std::nullopt : std::optional(t.at(1).get<double>())});
    }
    b.monotone_violations = j.at("monotone_violations").get<std::size_t>();
    b.overrelaxed_steps = j.at("overrelaxed_steps").get<std::size_t>();
    b.readmissions = j.at("readmissions").get<std::size_t>();
    b.matrix_hash = parse_hash(j.at("matrix_hash"));
    b.dataset_hash = parse_hash(j.at("dataset_hash"));
    b.set_hash = parse_hash(j.at("set_hash"));
    return b;
}

inline Json solution_to_json(const DiscreteSolution& s) {
    const auto support = s.support();
    std::vector<double> weights;
    for (auto m : support) weights.push_back(s.weights[m]);
    return {{"support", support},
            {"weights", weights},
            {"ll", s.ll},
            {"provenance", s.provenance},
            {"n_models", s.weights.size()},
            {"matrix_hash", hash_hex(s.matrix_hash)}};
}

inline DiscreteSolution solution_from_json(const Json& j) {
    auto support = j.at("support").get<std::vector<std::size_t>>();
    const auto weights = j.at("weights").get<std::vector<double>>();
    return {WeightVector::sparse(j.at("n_models").get<std::size_t>(), std::move(support), weights),
            j.at("ll").get<double>(), j.at("provenance").get<std::string>(), parse_hash(j.at("matrix_hash"))};
}

inline void write_restart_trace_csv(std::ostream& out, const std::vector<RestartRecord>& trace) {
    out << "restart,continuous_ll,projected_ll,refit_ll\n";
    for (const auto& r : trace) {
        out << r.restart << ',' << format_double(r.continuous_ll) << ',' << format_double(r.projected_ll) << ','
            << (r.refit_ll ? format_double(*r.refit_ll) : std::string("nan")) << '\n';
    }
}

inline Json certificate_to_json(const Certificate& c) {
    return {{"ub", c.ub},
            {"ub_ll", c.ub_ll},
            {"ub_gap", c.ub_gap},
            {"lb", c.lb},
            {"ll_rand", c.ll_rand},
            {"optimality_ratio", c.optimality_ratio},
            {"optimality_ratio_raw", c.ratio_raw},
            {"k", c.k},
            {"n_points", c.n_points},
            {"n_models", c.n_models},
            {"lb_support", c.lb_support},
            {"lb_weights", c.lb_weights},
            {"lb_provenance", c.lb_provenance},
            {"seeds", c.seeds},
            {"timestamp", c.timestamp},
            {"dataset_hash", hash_hex(c.dataset_hash)},
            {"set_hash", hash_hex(c.set_hash)},
            {"matrix_hash", hash_hex(c.matrix_hash)},
            {"config_hash", hash_hex(c.config_hash)}};
}

inline Certificate certificate_from_json(const Json& j) {
    Certificate c;
    c.ub = j.at("ub").get<double>();
    c.ub_ll = j.at("ub_ll").get<double>();
    c.ub_gap = j.at("ub_gap").get<double>();
    c.lb = j.at("lb").get<double>();
    c.ll_rand = j.at("ll_rand").get<double>();
    c.optimality_ratio = j.at("optimality_ratio").get<double>();
    c.ratio_raw = j.at("optimality_ratio_raw").get<double>();
    c.k = j.at("k").get<std::size_t>();
    c.n_points = j.at("n_points").get<std::size_t>();
    c.n_models = j.at("n_models").get<std::size_t>();
    c.lb_support = j.at("lb_support").get<std::vector<std::size_t>>();
    c.lb_weights = j.at("lb_weights").get<std::vector<double>>();
    c.lb_provenance = j.at("lb_provenance").get<std::string>();
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.timestamp = j.at("timestamp").get<std::string>();
    c.dataset_hash = parse_hash(j.at("dataset_hash"));
    c.set_hash = parse_hash(j.at("set_hash"));
    c.matrix_hash = parse_hash(j.at("matrix_hash"));
    c.config_hash = parse_hash(j.at("config_hash"));
    return c;
}

inline void write_tightness_csv(std::ostream& out, const std::vector<TightnessRow>& rows) {
    out << "n,seed,ub,lb,ll_true,opt_ratio\n";
    for (const auto& r : rows) {
        out << r.n << ',' << r.seed << ',' << format_double(r.ub) << ',' << format_double(r.lb) << ','
            << format_double(r.ll_true) << ',' << format_double(r.opt_ratio) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Output directory manifest

inline std::uint64_t file_hash(const std::filesystem::path& path) {
    auto in = open_input(path, true);
    Fnv1a h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.bytes(buf, static_cast<std::size_t>(in.gcount()));
    }
    return h.value();
}

/// Lists every regular file under `dir` (except the manifest itself) with its size and hash.
inline Json write_manifest(const std::filesystem::path& dir, const Json& extra = Json::object()) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    Json list = Json::array();
    for (const auto& f : files) {
        list.push_back({{"path", std::filesystem::relative(f, dir).generic_string()},
                        {"bytes", std::filesystem::file_size(f)},
                        {"fnv1a64", hash_hex(file_hash(f))}});
    }
    Json manifest = extra;
    manifest["files"] = std::move(list);
    write_json(dir / "manifest.json", manifest);
    return manifest;
}

}  // namespace mixcert
