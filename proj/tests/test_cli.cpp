#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mixcert/mixcert.hpp"

namespace fs = std::filesystem;
using namespace mixcert;

namespace {

const fs::path kData = MIXCERT_DATA_DIR;

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("mixcert_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run(const std::string& args) {
    const std::string cmd = std::string(MIXCERT_CLI_PATH) + " " + args + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int run(const std::string& command, const fs::path& config, const fs::path& out, const std::string& extra = "") {
    return run(command + " --config " + config.string() + " --out " + out.string() + " " + extra);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Json load(const fs::path& p) { return Json::parse(slurp(p)); }

Json strip_volatile(Json j) {
    j.erase("timestamp");
    j.erase("seconds");
    return j;
}

fs::path with_overrides(const fs::path& base, const Json& patch, const fs::path& dir) {
    auto doc = load(base);
    doc.merge_patch(patch);
    for (const char* key : {"csv", "image"}) {
        if (doc.contains("data") && doc["data"].contains(key)) {
            doc["data"][key] = (kData / doc["data"][key].get<std::string>()).string();
        }
    }
    if (doc.contains("models") && doc["models"].contains("json")) {
        doc["models"]["json"] = (kData / doc["models"]["json"].get<std::string>()).string();
    }
    const auto p = dir / "config.json";
    write_json(p, doc);
    return p;
}

}  // namespace

TEST(Cli, BoundWritesConvergedResult) {
    const auto out = scratch("bound");
    ASSERT_EQ(run("bound", kData / "bound.json", out), 0);
    const auto b = load(out / "bound.json");
    EXPECT_TRUE(b["converged"].get<bool>());
    EXPECT_LE(b["certified_ub"].get<double>() - b["ub_ll"].get<double>(), 1e-8);
    const auto m = load(out / "manifest.json");
    EXPECT_EQ(m["command"], "bound");
    bool listed = false;
    for (const auto& f : m["files"]) {
        if (f["path"] == "bound.json") {
            listed = true;
            EXPECT_EQ(f["fnv1a64"], hash_hex(Fnv1a().text(slurp(out / "bound.json")).value()));
        }
    }
    EXPECT_TRUE(listed);
}

TEST(Cli, RepeatedRunsAreByteIdenticalApartFromTimestamps) {
    for (const char* cmd : {"bound", "solve", "certify"}) {
        const auto a = scratch(std::string("det_a_") + cmd);
        const auto b = scratch(std::string("det_b_") + cmd);
        ASSERT_EQ(run(cmd, kData / (std::string(cmd) + ".json"), a), 0);
        ASSERT_EQ(run(cmd, kData / (std::string(cmd) + ".json"), b, "--threads 1"), 0);
        for (const auto& entry : fs::directory_iterator(a)) {
            const auto name = entry.path().filename();
            if (name == "manifest.json" || name == "certificate.json") {
                EXPECT_EQ(strip_volatile(load(a / name)), strip_volatile(load(b / name))) << cmd << " " << name;
            } else {
                EXPECT_EQ(slurp(a / name), slurp(b / name)) << cmd << " " << name;
            }
        }
    }
}

TEST(Cli, ChunkedBoundMatchesInMemory) {
    const auto dir = scratch("chunked");
    const auto dense = dir / "dense";
    const auto chunked = dir / "chunked";
    ASSERT_EQ(run("bound", kData / "medium.json", dense), 0);
    const auto cfg = with_overrides(kData / "medium.json", {{"chunked", true}, {"column_block", 37}}, dir);
    ASSERT_EQ(run("bound", cfg, chunked), 0);
    EXPECT_NEAR(load(dense / "bound.json")["ub_ll"].get<double>(), load(chunked / "bound.json")["ub_ll"].get<double>(),
                1e-10);
}

TEST(Cli, NotConvergedExitsWithTwo) {
    const auto dir = scratch("noconv");
    const auto cfg = with_overrides(kData / "bound.json", {{"convex_em", {{"max_iterations", 1}}}}, dir);
    EXPECT_EQ(run("bound", cfg, dir / "out"), 2);
    EXPECT_FALSE(load(dir / "out" / "bound.json")["converged"].get<bool>());
}

TEST(Cli, ErrorsExitWithOne) {
    const auto dir = scratch("errors");
    EXPECT_EQ(run("bound", dir / "missing.json", dir / "out"), 1);
    const auto cfg = with_overrides(kData / "bound.json", {{"unexpected", 1}}, dir);
    EXPECT_EQ(run("bound", cfg, dir / "out"), 1);
    EXPECT_EQ(run("frobnicate --config " + (kData / "bound.json").string()), 1);
    EXPECT_EQ(run("bound"), 1);
    EXPECT_EQ(run("segment", kData / "bound.json", dir / "out"), 1);
    EXPECT_EQ(run("experiment", kData / "bound.json", dir / "out"), 1);
}

TEST(Cli, SolveWithBruteForceReproducesOracle) {
    const auto out = scratch("solve");
    ASSERT_EQ(run("solve", kData / "solve.json", out), 0);
    RunConfig cfg = load_run_config(kData / "solve.json");
    const auto mat = build_matrix(load_dataset(cfg), load_models(cfg));
    const auto exact = brute_force_mle(mat, 3);
    const auto bf = load(out / "brute_force.json");
    EXPECT_NEAR(bf["ll"].get<double>(), exact.ll, 1e-12);
    EXPECT_GE(load(out / "solution.json")["ll"].get<double>(), exact.ll - 1e-12);
    const auto trace = slurp(out / "restarts.csv");
    EXPECT_EQ(trace.rfind("restart,continuous_ll,projected_ll,refit_ll\n", 0), 0u);
    EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 6);
}

TEST(Cli, CertificateFieldsMatchHandRecomputation) {
    const auto out = scratch("certify");
    ASSERT_EQ(run("certify", kData / "certify.json", out), 0);
    const auto c = load(out / "certificate.json");
    const double lb = c["lb"], ub = c["ub"], rand = c["ll_rand"];
    EXPECT_LE(lb, ub + 1e-10);
    EXPECT_NEAR(c["optimality_ratio_raw"].get<double>(), (lb - rand) / (ub - rand), 1e-15);
    EXPECT_EQ(c["ub"].get<double>(), load(out / "bound.json")["certified_ub"].get<double>());
    EXPECT_EQ(c["lb"].get<double>(), load(out / "solution.json")["ll"].get<double>());
    for (const char* key : {"config_hash", "dataset_hash", "set_hash", "matrix_hash", "timestamp", "seeds"}) {
        EXPECT_TRUE(c.contains(key)) << key;
    }
}

TEST(Cli, RatioIsOneWhenEveryModelMayBeUsed) {
    const auto dir = scratch("ratio_one");
    const auto cfg = with_overrides(kData / "certify.json", {{"k", 8}}, dir);
    ASSERT_EQ(run("certify", cfg, dir / "out"), 0);
    EXPECT_NEAR(load(dir / "out" / "certificate.json")["optimality_ratio"].get<double>(), 1.0, 1e-7);
}

TEST(Cli, DegenerateCalibrationIsAnError) {
    const auto dir = scratch("degenerate");
    write_json(dir / "one.json", Json{{"components", {{{"mean", {0.0, 0.0}}, {"cov", {{1.0, 0.0}, {0.0, 1.0}}}}}}});
    auto doc = load(kData / "certify.json");
    doc["data"]["csv"] = (kData / "tiny.csv").string();
    doc["models"]["json"] = (dir / "one.json").string();
    doc["k"] = 1;
    write_json(dir / "config.json", doc);
    EXPECT_EQ(run("certify", dir / "config.json", dir / "out"), 1);
    EXPECT_FALSE(fs::exists(dir / "out" / "certificate.json"));
}

TEST(Cli, ExperimentsWriteCurves) {
    const auto t = scratch("exp_tightness");
    ASSERT_EQ(run("experiment", kData / "experiment_tightness.json", t), 0);
    const auto curve = slurp(t / "tightness.csv");
    EXPECT_EQ(curve.rfind("n,seed,ub,lb,ll_true,opt_ratio\n", 0), 0u);
    EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 5);

    const auto s = scratch("exp_separation");
    ASSERT_EQ(run("experiment", kData / "experiment_separation.json", s), 0);
    const auto bins = slurp(s / "separation_bins.csv");
    EXPECT_EQ(std::count(bins.begin(), bins.end(), '\n'), 4);

    const auto r = scratch("exp_restarts");
    ASSERT_EQ(run("experiment", kData / "experiment_restarts.json", r), 0);
    const auto study = slurp(r / "restart_study.csv");
    EXPECT_EQ(std::count(study.begin(), study.end(), '\n'), 6);
    EXPECT_TRUE(load(r / "manifest.json")["summary"].contains("spearman"));
}

TEST(Cli, SegmentRecoversTwoRegions) {
    const auto a = scratch("segment_a");
    const auto b = scratch("segment_b");
    ASSERT_EQ(run("segment", kData / "segment.json", a), 0);
    ASSERT_EQ(run("segment", kData / "segment.json", b), 0);
    EXPECT_EQ(slurp(a / "mask.ppm"), slurp(b / "mask.ppm"));
    const auto mask = read_ppm((a / "mask.ppm").string());
    ASSERT_EQ(mask.width, 24u);
    ASSERT_EQ(mask.height, 16u);
    const auto same = [&](std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1) {
        return std::equal(mask.pixel(r0, c0), mask.pixel(r0, c0) + 3, mask.pixel(r1, c1));
    };
    EXPECT_FALSE(same(0, 0, 0, 23));
    for (std::size_t r = 0; r < 16; ++r) {
        for (std::size_t c = 0; c < 24; ++c) {
            if (c >= 10 && c < 14) continue;
            EXPECT_TRUE(same(r, c, 0, c < 12 ? 0 : 23)) << r << "," << c;
        }
    }
    const auto cert = load(a / "certificate.json");
    EXPECT_LE(cert["lb"].get<double>(), cert["ub"].get<double>() + 1e-10);
}
