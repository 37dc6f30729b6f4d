// mixcert: certified bounds for mixtures whose components come from a discrete set.
//
//   mixcert {bound|solve|certify|experiment|segment} --config <path> [--threads n] [--out dir]
//
// Exit status: 0 success, 2 the convex bound did not converge, 1 error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mixcert/mixcert.hpp"

namespace fs = std::filesystem;
using namespace mixcert;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNotConverged = 2;

struct Context {
    RunConfig cfg;
    fs::path out;
    Json summary = Json::object();
};

void log(const std::string& msg) { std::cerr << "[mixcert] " << msg << '\n'; }

BoundResult run_bound(const Context& ctx, const Dataset& data, const ComponentSet& set,
                      const LogLikelihoodMatrix* mat) {
    if (ctx.cfg.chunked || !mat) {
        return convex_em_chunked(data, set, ctx.cfg.convex_em, {ctx.cfg.column_block, ctx.cfg.memory_budget});
    }
    return convex_em(*mat, ctx.cfg.convex_em);
}

void report_bound(Context& ctx, const BoundResult& b) {
    write_json(ctx.out / "bound.json", bound_to_json(b));
    log("bound: ub_ll=" + format_double(b.ub_ll) + " gap=" + format_double(b.final_gap) +
        " iterations=" + std::to_string(b.iterations_used) + (b.converged ? "" : " (not converged)"));
    ctx.summary["converged"] = b.converged;
}

int cmd_bound(Context& ctx) {
    const auto data = load_dataset(ctx.cfg);
    const auto set = load_models(ctx.cfg);
    std::optional<LogLikelihoodMatrix> mat;
    if (!ctx.cfg.chunked) {
        mat = build_matrix(data, set, {ctx.cfg.memory_budget});
        if (ctx.cfg.write_matrix) write_matrix(ctx.out / "matrix.mxll", *mat);
    }
    const auto b = run_bound(ctx, data, set, mat ? &*mat : nullptr);
    report_bound(ctx, b);
    return b.converged ? kExitOk : kExitNotConverged;
}

struct Solved {
    DiscreteSolution best;
    MultistartResult multistart;
};

Solved solve(Context& ctx, const Dataset& data, const ComponentSet& set, const LogLikelihoodMatrix& mat) {
    auto ms = projected_em_multistart(data, set, mat, ctx.cfg.em, ctx.cfg.restarts, ctx.cfg.seed, ctx.cfg.multistart);
    {
        auto f = open_output(ctx.out / "restarts.csv");
        write_restart_trace_csv(f, ms.trace);
    }
    DiscreteSolution best = ms.best;
    log("projected EM: best ll=" + format_double(best.ll) + " (restart " + std::to_string(ms.best_restart) + ")");
    if (ctx.cfg.brute_force) {
        auto exact = brute_force_mle(mat, ctx.cfg.k, ctx.cfg.brute_force_budget, ctx.cfg.convex_em);
        write_json(ctx.out / "brute_force.json", solution_to_json(exact));
        log("brute force: ll=" + format_double(exact.ll));
        if (exact.ll > best.ll) best = std::move(exact);
    }
    write_json(ctx.out / "solution.json", solution_to_json(best));
    return {std::move(best), std::move(ms)};
}

int cmd_solve(Context& ctx) {
    const auto data = load_dataset(ctx.cfg);
    const auto set = load_models(ctx.cfg);
    const auto mat = build_matrix(data, set, {ctx.cfg.memory_budget});
    solve(ctx, data, set, mat);
    return kExitOk;
}

Certificate certify_run(Context& ctx, const Dataset& data, const ComponentSet& set, const LogLikelihoodMatrix& mat,
                        const BoundResult& bound, const DiscreteSolution& best) {
    const auto baseline = random_baseline(mat, ctx.cfg.k, ctx.cfg.baseline_samples, ctx.cfg.seed);
    CertifyOptions opts;
    opts.seeds = {ctx.cfg.seed};
    opts.config_hash = ctx.cfg.config_hash;
    auto cert = certify(mat, set, data, ctx.cfg.k, bound, best, baseline.mean, opts);
    auto j = certificate_to_json(cert);
    j["ll_rand_std_error"] = baseline.std_error;
    write_json(ctx.out / "certificate.json", j);
    log("certificate: lb=" + format_double(cert.lb) + " ub=" + format_double(cert.ub) +
        " ll_rand=" + format_double(cert.ll_rand) + " ratio=" + format_double(cert.optimality_ratio));
    return cert;
}

int cmd_certify(Context& ctx) {
    const auto data = load_dataset(ctx.cfg);
    const auto set = load_models(ctx.cfg);
    const auto mat = build_matrix(data, set, {ctx.cfg.memory_budget});
    const auto bound = run_bound(ctx, data, set, &mat);
    report_bound(ctx, bound);
    const auto solved = solve(ctx, data, set, mat);
    certify_run(ctx, data, set, mat, bound, solved.best);
    return kExitOk;
}

/// Set indices of the generator's components, when every one is a member.
std::optional<WeightVector> true_weights(const MixtureModel& mix, const ComponentSet& set) {
    std::vector<std::pair<std::size_t, double>> found;
    for (std::size_t k = 0; k < mix.size(); ++k) {
        std::optional<std::size_t> idx;
        for (std::size_t m = 0; m < set.size() && !idx; ++m) {
            if (set[m] == mix.components[k]) idx = m;
        }
        if (!idx) return std::nullopt;
        found.emplace_back(*idx, mix.weights[k]);
    }
    std::sort(found.begin(), found.end());
    std::vector<std::size_t> support;
    std::vector<double> w;
    for (const auto& [m, x] : found) {
        if (!support.empty() && support.back() == m) {
            w.back() += x;
        } else {
            support.push_back(m);
            w.push_back(x);
        }
    }
    return WeightVector::sparse(set.size(), std::move(support), w);
}

int cmd_experiment(Context& ctx) {
    if (!ctx.cfg.experiment) throw InvalidArgument("config has no experiment section");
    const auto& e = *ctx.cfg.experiment;
    const auto set = load_models(ctx.cfg);
    switch (e.which) {
        case ExperimentKind::tightness: {
            const auto gen = ctx.cfg.data.generator();
            if (!gen) throw InvalidArgument("tightness experiment needs a mixture or rectangles generator");
            TightnessOptions opts;
            opts.bound = ctx.cfg.convex_em;
            opts.em = ctx.cfg.em;
            opts.restarts = ctx.cfg.restarts;
            opts.multistart = ctx.cfg.multistart;
            opts.baseline_samples = ctx.cfg.baseline_samples;
            opts.memory_budget = ctx.cfg.memory_budget;
            if (ctx.cfg.data.mixture) opts.true_pi = true_weights(*ctx.cfg.data.mixture, set);
            const auto rows = tightness_curve(*gen, set, ctx.cfg.k, e.n_grid, e.seeds, opts);
            auto f = open_output(ctx.out / "tightness.csv");
            write_tightness_csv(f, rows);
            auto g = open_output(ctx.out / "tightness_detail.csv");
            g << "n,seed,ub,lb,ll_true,ll_rand,opt_ratio,opt_ratio_true,converged,error\n";
            for (const auto& r : rows) {
                g << r.n << ',' << r.seed << ',' << format_double(r.ub) << ',' << format_double(r.lb) << ','
                  << format_double(r.ll_true) << ',' << format_double(r.ll_rand) << ',' << format_double(r.opt_ratio)
                  << ',' << format_double(r.opt_ratio_true) << ',' << (r.converged ? 1 : 0) << ','
                  << (r.error ? "\"" + *r.error + "\"" : std::string()) << '\n';
            }
            break;
        }
        case ExperimentKind::separation: {
            SeparationOptions opts;
            opts.ks = e.ks;
            opts.instances_per_k = e.instances;
            opts.n_points = e.n_points;
            opts.restarts = ctx.cfg.restarts;
            opts.bin_edges = e.bin_edges;
            opts.bound = ctx.cfg.convex_em;
            opts.em = ctx.cfg.em;
            opts.multistart = ctx.cfg.multistart;
            opts.baseline_samples = ctx.cfg.baseline_samples;
            opts.seed = ctx.cfg.seed;
            const auto sweep = separation_sweep(set, opts);
            auto f = open_output(ctx.out / "separation.csv");
            f << "instance,k,c_separation,ub,lb,ll_rand,opt_ratio\n";
            for (const auto& r : sweep.records) {
                f << r.instance << ',' << r.k << ',' << format_double(r.c_separation) << ',' << format_double(r.ub)
                  << ',' << format_double(r.lb) << ',' << format_double(r.ll_rand) << ',' << format_double(r.ratio)
                  << '\n';
            }
            auto b = open_output(ctx.out / "separation_bins.csv");
            b << "lo,hi,count,mean_ratio,median_ratio\n";
            for (const auto& bin : sweep.bins) {
                b << format_double(bin.lo) << ',' << format_double(bin.hi) << ',' << bin.count << ','
                  << format_double(bin.mean_ratio) << ',' << format_double(bin.median_ratio) << '\n';
            }
            break;
        }
        case ExperimentKind::restarts: {
            RestartStudyOptions opts;
            opts.instances = e.instances;
            opts.ks = e.ks;
            opts.n_points = e.n_points;
            opts.restarts = ctx.cfg.restarts;
            opts.bound = ctx.cfg.convex_em;
            opts.em = ctx.cfg.em;
            opts.multistart = ctx.cfg.multistart;
            opts.baseline_samples = ctx.cfg.baseline_samples;
            opts.seed = ctx.cfg.seed;
            const auto study = restart_study(set, opts);
            auto f = open_output(ctx.out / "restart_study.csv");
            f << "instance,k,ratio_first,ratio_best,improvement\n";
            for (const auto& r : study.records) {
                f << r.instance << ',' << r.k << ',' << format_double(r.ratio_first) << ','
                  << format_double(r.ratio_best) << ',' << format_double(r.improvement) << '\n';
            }
            ctx.summary["spearman"] = study.spearman;
            log("restart study: spearman=" + format_double(study.spearman));
            break;
        }
    }
    return kExitOk;
}

int cmd_segment(Context& ctx) {
    if (ctx.cfg.data.kind != DataKind::image) throw InvalidArgument("segment needs an image data source");
    if (ctx.cfg.models.kind != ModelKind::patches) throw InvalidArgument("segment needs a patches model source");
    const auto img = read_ppm(ctx.cfg.data.path.string());
    SegmentationOptions opts;
    opts.k = ctx.cfg.k;
    opts.patches = ctx.cfg.models.patches;
    opts.pixel_cap = ctx.cfg.pixel_cap;
    opts.restarts = ctx.cfg.restarts;
    opts.seed = ctx.cfg.seed;
    opts.bound = ctx.cfg.convex_em;
    opts.em = ctx.cfg.em;
    opts.multistart = ctx.cfg.multistart;
    opts.baseline_samples = ctx.cfg.baseline_samples;
    opts.memory_budget = ctx.cfg.memory_budget;
    const auto res = segment_image(img, opts);
    write_ppm((ctx.out / "mask.ppm").string(), res.mask);
    report_bound(ctx, res.bound);
    {
        auto f = open_output(ctx.out / "restarts.csv");
        write_restart_trace_csv(f, res.multistart.trace);
    }
    write_json(ctx.out / "solution.json", solution_to_json(res.multistart.best));
    auto cert = certificate_to_json(res.certificate);
    cert["config_hash"] = hash_hex(ctx.cfg.config_hash);
    cert["patch_models"] = res.set.size();
    cert["patches_skipped"] = res.patches_skipped;
    write_json(ctx.out / "certificate.json", cert);
    log("segment: " + std::to_string(res.set.size()) + " patch models, ratio=" +
        format_double(res.certificate.optimality_ratio));
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Certified upper bounds and lower bounds for mixtures over a discrete model set"};
    std::string command;
    std::string config_path;
    std::string out_dir = "mixcert_out";
    int threads = 0;
    app.add_option("command", command, "bound | solve | certify | experiment | segment")
        ->required()
        ->check(CLI::IsMember({"bound", "solve", "certify", "experiment", "segment"}));
    app.add_option("--config", config_path, "JSON run configuration")->required();
    app.add_option("--threads", threads, "maximum worker threads")->check(CLI::NonNegativeNumber);
    app.add_option("--out", out_dir, "output directory");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitError;
    }

    try {
        if (threads > 0) set_thread_count(threads);
        Context ctx{load_run_config(config_path), out_dir};
        fs::create_directories(ctx.out);
        const auto start = std::chrono::steady_clock::now();
        int code = kExitOk;
        if (command == "bound") {
            code = cmd_bound(ctx);
        } else if (command == "solve") {
            code = cmd_solve(ctx);
        } else if (command == "certify") {
            code = cmd_certify(ctx);
        } else if (command == "experiment") {
            code = cmd_experiment(ctx);
        } else {
            code = cmd_segment(ctx);
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        Json extra = {{"command", command},
                      {"config", ctx.cfg.document},
                      {"config_hash", hash_hex(ctx.cfg.config_hash)},
                      {"timestamp", utc_timestamp()},
                      {"seconds", seconds},
                      {"summary", ctx.summary}};
        write_manifest(ctx.out, extra);
        return code;
    } catch (const std::exception& e) {
        std::cerr << "mixcert: error: " << e.what() << '\n';
        return kExitError;
    }
}
