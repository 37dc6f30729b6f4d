#pragma once

// Declarative run configuration. Every section is validated before any
// computation starts and unknown keys are rejected.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mixcert/convex_bound.hpp"
#include "mixcert/error.hpp"
#include "mixcert/experiments.hpp"
#include "mixcert/hash.hpp"
#include "mixcert/image.hpp"
#include "mixcert/io.hpp"
#include "mixcert/model_space.hpp"
#include "mixcert/solvers.hpp"

namespace mixcert {

enum class DataKind { csv, mixture, rectangles, image };
enum class ModelKind { json, grid, patches };
enum class ExperimentKind { tightness, separation, restarts };

struct DataConfig {
    DataKind kind = DataKind::csv;
    std::filesystem::path path;
    std::optional<MixtureModel> mixture;
    std::vector<Rectangle> rectangles;
    std::size_t n = 0;
    std::uint64_t seed = 0;

    std::optional<DataGenerator> generator() const {
        if (mixture) return DataGenerator(*mixture);
        if (kind == DataKind::rectangles) return DataGenerator(rectangles);
        return std::nullopt;
    }
};

struct ModelConfig {
    ModelKind kind = ModelKind::json;
    std::filesystem::path path;
    GridSpec grid;
    PatchSpec patches;
};

struct ExperimentConfig {
    ExperimentKind which = ExperimentKind::tightness;
    std::vector<std::size_t> n_grid;
    std::vector<std::uint64_t> seeds;
    std::vector<std::size_t> ks{2, 3, 4};
    std::size_t instances = 10;
    std::size_t n_points = 300;
    std::vector<double> bin_edges{0.0, 0.5, 1.0, 1.5, 2.0, std::numeric_limits<double>::infinity()};
};

struct RunConfig {
    DataConfig data;
    ModelConfig models;
    std::size_t k = 3;
    std::uint64_t seed = 0;
    std::size_t restarts = 10;
    ConvexEmConfig convex_em{};
    EmConfig em{};
    MultistartOptions multistart{};
    std::size_t memory_budget = kDefaultMemoryBudget;
    bool chunked = false;
    std::size_t column_block = 4096;
    bool write_matrix = false;
    bool brute_force = false;
    std::size_t brute_force_budget = kDefaultEnumerationBudget;
    std::size_t baseline_samples = 1000;
    std::optional<ExperimentConfig> experiment;
    std::size_t pixel_cap = kDefaultPixelCap;
    Json document;
    std::uint64_t config_hash = 0;
};

namespace detail {

inline void check_keys(const Json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!obj.is_object()) throw InvalidArgument(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw InvalidArgument("unknown key '" + key + "' in " + where);
    }
}

template <class T>
T get_or(const Json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    return obj.at(key).get<T>();
}

inline Vector vector_from_json(const Json& j) {
    const auto v = j.get<std::vector<double>>();
    Vector out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[Eigen::Index(i)] = v[i];
    return out;
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

inline DataConfig parse_data(const Json& j, const std::filesystem::path& base) {
    check_keys(j, {"csv", "mixture", "rectangles", "image", "n", "seed"}, "data");
    DataConfig d;
    int sources = 0;
    if (j.contains("csv")) {
        ++sources;
        d.kind = DataKind::csv;
        d.path = resolve(base, j.at("csv").get<std::string>());
    }
    if (j.contains("image")) {
        ++sources;
        d.kind = DataKind::image;
        d.path = resolve(base, j.at("image").get<std::string>());
    }
    if (j.contains("mixture")) {
        ++sources;
        d.kind = DataKind::mixture;
        check_keys(j.at("mixture"), {"weights", "components"}, "data.mixture");
        d.mixture = mixture_from_json(j.at("mixture"));
    }
    if (j.contains("rectangles")) {
        ++sources;
        d.kind = DataKind::rectangles;
        for (const auto& r : j.at("rectangles")) {
            check_keys(r, {"lo", "hi", "weight"}, "data.rectangles[]");
            d.rectangles.push_back({vector_from_json(r.at("lo")), vector_from_json(r.at("hi")), r.at("weight").get<double>()});
        }
    }
    if (sources != 1) throw InvalidArgument("data must name exactly one of csv, mixture, rectangles, image");
    d.n = get_or<std::size_t>(j, "n", 0);
    d.seed = get_or<std::uint64_t>(j, "seed", 0);
    const bool synthetic = d.kind == DataKind::mixture || d.kind == DataKind::rectangles;
    if (!synthetic && (j.contains("n") || j.contains("seed"))) {
        throw InvalidArgument("data.n and data.seed apply to synthetic generators only");
    }
    return d;
}

inline GridSpec parse_grid(const Json& j) {
    check_keys(j, {"means", "lattice", "eigenvalues", "angles", "angle_count", "pairing"}, "models.grid");
    GridSpec g;
    if (j.contains("means") == j.contains("lattice")) throw InvalidArgument("models.grid needs exactly one of means, lattice");
    if (j.contains("means")) {
        for (const auto& m : j.at("means")) g.mean_sites.push_back(vector_from_json(m));
    } else {
        const auto& l = j.at("lattice");
        check_keys(l, {"lo", "hi", "nx", "ny"}, "models.grid.lattice");
        g.mean_sites = lattice_sites(vector_from_json(l.at("lo")), vector_from_json(l.at("hi")),
                                     l.at("nx").get<std::size_t>(), l.at("ny").get<std::size_t>());
    }
    g.eigenvalues = j.at("eigenvalues").get<std::vector<double>>();
    if (j.contains("angles") == j.contains("angle_count")) {
        throw InvalidArgument("models.grid needs exactly one of angles, angle_count");
    }
    if (j.contains("angles")) {
        g.angles = j.at("angles").get<std::vector<double>>();
    } else {
        const auto a = j.at("angle_count").get<std::size_t>();
        for (std::size_t i = 0; i < a; ++i) g.angles.push_back(std::numbers::pi * double(i) / double(a));
    }
    const auto pairing = get_or<std::string>(j, "pairing", "descending");
    if (pairing == "descending") {
        g.pairing = EigenPairing::descending;
    } else if (pairing == "all_ordered") {
        g.pairing = EigenPairing::all_ordered;
    } else {
        throw InvalidArgument("models.grid.pairing must be descending or all_ordered");
    }
    return g;
}

inline PatchSpec parse_patches(const Json& j) {
    check_keys(j, {"sizes", "stride", "trim_fraction"}, "models.patches");
    PatchSpec p;
    for (const auto& s : j.at("sizes")) {
        const auto hw = s.get<std::vector<std::size_t>>();
        if (hw.size() != 2) throw InvalidArgument("patch sizes are [height, width] pairs");
        p.sizes.emplace_back(hw[0], hw[1]);
    }
    p.stride = get_or<std::size_t>(j, "stride", 1);
    p.trim_fraction = get_or<double>(j, "trim_fraction", 0.0);
    return p;
}

inline ModelConfig parse_models(const Json& j, const std::filesystem::path& base) {
    check_keys(j, {"json", "grid", "patches"}, "models");
    if (j.size() != 1) throw InvalidArgument("models must name exactly one of json, grid, patches");
    ModelConfig m;
    if (j.contains("json")) {
        m.kind = ModelKind::json;
        m.path = resolve(base, j.at("json").get<std::string>());
    } else if (j.contains("grid")) {
        m.kind = ModelKind::grid;
        m.grid = parse_grid(j.at("grid"));
    } else {
        m.kind = ModelKind::patches;
        m.patches = parse_patches(j.at("patches"));
    }
    return m;
}

inline void parse_convex_em(const Json& j, ConvexEmConfig& c) {
    check_keys(j,
               {"max_iterations", "gap_tolerance", "relative_ll_tolerance", "eta", "prune_threshold",
                "gap_check_interval", "init_seed"},
               "convex_em");
    c.max_iterations = get_or(j, "max_iterations", c.max_iterations);
    c.gap_tolerance = get_or(j, "gap_tolerance", c.gap_tolerance);
    c.relative_ll_tolerance = get_or(j, "relative_ll_tolerance", c.relative_ll_tolerance);
    c.eta = get_or(j, "eta", c.eta);
    c.prune_threshold = get_or(j, "prune_threshold", c.prune_threshold);
    c.gap_check_interval = get_or(j, "gap_check_interval", c.gap_check_interval);
    if (j.contains("init_seed")) c.init = RandomInit{j.at("init_seed").get<std::uint64_t>()};
}

inline void parse_em(const Json& j, EmConfig& e) {
    check_keys(j, {"max_iterations", "relative_ll_tolerance", "covariance_ridge"}, "em");
    e.max_iterations = get_or(j, "max_iterations", e.max_iterations);
    e.relative_ll_tolerance = get_or(j, "relative_ll_tolerance", e.relative_ll_tolerance);
    e.covariance_ridge = get_or(j, "covariance_ridge", e.covariance_ridge);
}

inline ExperimentConfig parse_experiment(const Json& j) {
    check_keys(j, {"which", "n_grid", "seeds", "ks", "instances", "n_points", "bin_edges"}, "experiment");
    ExperimentConfig e;
    const auto which = j.at("which").get<std::string>();
    if (which == "tightness") {
        e.which = ExperimentKind::tightness;
    } else if (which == "separation") {
        e.which = ExperimentKind::separation;
    } else if (which == "restarts") {
        e.which = ExperimentKind::restarts;
    } else {
        throw InvalidArgument("experiment.which must be tightness, separation or restarts");
    }
    e.n_grid = get_or(j, "n_grid", e.n_grid);
    e.seeds = get_or(j, "seeds", e.seeds);
    e.ks = get_or(j, "ks", e.ks);
    e.instances = get_or(j, "instances", e.instances);
    e.n_points = get_or(j, "n_points", e.n_points);
    if (j.contains("bin_edges")) {
        e.bin_edges.clear();
        for (const auto& v : j.at("bin_edges")) {
            e.bin_edges.push_back(v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>());
        }
    }
    if (e.which == ExperimentKind::tightness && (e.n_grid.empty() || e.seeds.empty())) {
        throw InvalidArgument("tightness experiment needs n_grid and seeds");
    }
    return e;
}

}  // namespace detail

/// Parses and validates a configuration document. Relative paths resolve against `base_dir`.
inline RunConfig parse_run_config(const Json& doc, const std::filesystem::path& base_dir = ".") {
    RunConfig c;
    try {
        detail::check_keys(doc,
                           {"data", "models", "k", "seed", "restarts", "convex_em", "em", "refit", "projection_metric",
                            "memory_budget", "chunked", "column_block", "write_matrix", "brute_force",
                            "brute_force_budget", "baseline_samples", "experiment", "pixel_cap"},
                           "config");
        if (doc.contains("data")) c.data = detail::parse_data(doc.at("data"), base_dir);
        if (doc.contains("models")) c.models = detail::parse_models(doc.at("models"), base_dir);
        c.k = detail::get_or(doc, "k", c.k);
        c.seed = detail::get_or(doc, "seed", c.seed);
        c.restarts = detail::get_or(doc, "restarts", c.restarts);
        if (doc.contains("convex_em")) detail::parse_convex_em(doc.at("convex_em"), c.convex_em);
        if (doc.contains("em")) detail::parse_em(doc.at("em"), c.em);
        c.multistart.refit = detail::get_or(doc, "refit", true);
        const auto metric = detail::get_or<std::string>(doc, "projection_metric", "symmetrized_kl");
        if (metric == "symmetrized_kl") {
            c.multistart.metric = ProjectionMetric::symmetrized_kl;
        } else if (metric == "euclidean_parameters") {
            c.multistart.metric = ProjectionMetric::euclidean_parameters;
        } else {
            throw InvalidArgument("projection_metric must be symmetrized_kl or euclidean_parameters");
        }
        c.multistart.refit_config = c.convex_em;
        c.memory_budget = detail::get_or(doc, "memory_budget", c.memory_budget);
        c.chunked = detail::get_or(doc, "chunked", c.chunked);
        c.column_block = detail::get_or(doc, "column_block", c.column_block);
        c.write_matrix = detail::get_or(doc, "write_matrix", c.write_matrix);
        c.brute_force = detail::get_or(doc, "brute_force", c.brute_force);
        c.brute_force_budget = detail::get_or(doc, "brute_force_budget", c.brute_force_budget);
        c.baseline_samples = detail::get_or(doc, "baseline_samples", c.baseline_samples);
        if (doc.contains("experiment")) c.experiment = detail::parse_experiment(doc.at("experiment"));
        c.pixel_cap = detail::get_or(doc, "pixel_cap", c.pixel_cap);
    } catch (const Json::exception& e) {
        throw InvalidArgument(std::string("malformed config: ") + e.what());
    }
    if (c.k < 1) throw InvalidArgument("k must be at least 1");
    if (c.restarts < 1) throw InvalidArgument("restarts must be at least 1");
    if (c.baseline_samples < 1) throw InvalidArgument("baseline_samples must be at least 1");
    if (c.column_block < 1) throw InvalidArgument("column_block must be at least 1");
    if (c.pixel_cap < 1) throw InvalidArgument("pixel_cap must be at least 1");
    if (c.em.covariance_ridge < 0.0 && doc.contains("em") && doc.at("em").contains("covariance_ridge")) {
        throw InvalidArgument("covariance_ridge must be nonnegative");
    }
    const bool synthetic = c.data.kind == DataKind::mixture || c.data.kind == DataKind::rectangles;
    if (synthetic && c.data.n < 1 && !c.experiment) {
        throw InvalidArgument("synthetic data needs n >= 1");
    }
    c.em.k = c.k;
    c.document = doc;
    c.config_hash = Fnv1a().text(doc.dump()).value();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_json(path), path.parent_path().empty() ? "." : path.parent_path());
}

/// Materializes the dataset named by the config. Image sources yield pixel features.
inline Dataset load_dataset(const RunConfig& c) {
    switch (c.data.kind) {
        case DataKind::csv: return read_dataset_csv(c.data.path);
        case DataKind::image: return pixel_features(read_ppm(c.data.path.string()));
        case DataKind::mixture:
        case DataKind::rectangles: return sample_generator(*c.data.generator(), c.data.n, c.data.seed);
    }
    throw InvalidArgument("unknown data source");
}

/// Builds the candidate set. Patch sets need the image the config names.
inline ComponentSet load_models(const RunConfig& c) {
    switch (c.models.kind) {
        case ModelKind::json: return set_from_json(read_json(c.models.path));
        case ModelKind::grid: return build_grid_set(c.models.grid);
        case ModelKind::patches: {
            if (c.data.kind != DataKind::image) throw InvalidArgument("patch models need an image data source");
            return fit_patch_models(read_ppm(c.data.path.string()), c.models.patches).set;
        }
    }
    throw InvalidArgument("unknown model source");
}

}  // namespace mixcert
