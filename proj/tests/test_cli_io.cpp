#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "json.hpp"
#include "spdelab/config.hpp"
#include "spdelab/experiment.hpp"
#include "spdelab/hash.hpp"
#include "spdelab/io.hpp"

using namespace spdelab;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

bool contains(const std::vector<std::string>& xs, const std::string& x) { return std::find(xs.begin(), xs.end(), x) != xs.end(); }

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("spdelab_test_" + name);
    fs::remove_all(dir);
    return dir;
}

std::vector<std::string> csv_lines(const fs::path& p) {
    std::istringstream in(read_text_file(p));
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

const char* kSmallReduction = R"(recipe: reduction
seed: 7
mesh:
  nodes: 33
system:
  T: 0.2
  dt: 0.01
ensemble:
  eps_grid: [0.1, 0.03, 0.01]
  n_paths: 20
  save_paths: 1
)";

} // namespace

TEST(Config, MinimalDocumentFillsDefaults) {
    const auto spec = parse_config("recipe: reduction\nseed: 3\n");
    EXPECT_EQ(spec.recipe, Recipe::reduction);
    EXPECT_EQ(spec.seed, 3u);
    EXPECT_EQ(spec.mesh.nodes, 129);
    EXPECT_EQ(spec.system.dt, 1e-3);
    EXPECT_EQ(spec.noise.modes, 32);
    EXPECT_EQ(spec.ensemble.n_paths, 200u);
    EXPECT_TRUE(contains(spec.applied_defaults, "system.epsilon"));
    EXPECT_TRUE(contains(spec.applied_defaults, "noise.sigma2"));
    EXPECT_TRUE(contains(spec.applied_defaults, "ensemble.eps_grid"));
    EXPECT_FALSE(contains(spec.applied_defaults, "seed"));
    EXPECT_EQ(spec.ensemble.eps_grid.size(), 4u);
}

TEST(Config, RecipeSelectsQuantityDefaults) {
    const auto ldp = parse_config("recipe: ldp_tail\nseed: 1\n");
    EXPECT_EQ(ldp.ensemble.quantities, std::vector<std::string>{"kappa_deviation"});
    EXPECT_EQ(ldp.ensemble.eps_grid, (std::vector<double>{0.04, 0.01}));
    const auto nd = parse_config("recipe: normal_deviation\nseed: 1\n");
    EXPECT_TRUE(contains(nd.ensemble.quantities, "deviation_gap"));
}

TEST(Config, EpsilonOutOfRangeIsRejectedWithLocation) {
    const auto msg = error_of("recipe: reduction\nseed: 1\nsystem:\n  epsilon: 1.5\n");
    EXPECT_NE(msg.find("epsilon out of (0,1]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 4"), std::string::npos) << msg;
}

TEST(Config, UnknownKeyIsRejected) {
    const auto msg = error_of("recipe: reduction\nseed: 1\nsystem:\n  epsilonn: 0.1\n");
    EXPECT_NE(msg.find("unknown key 'system.epsilonn'"), std::string::npos) << msg;
    EXPECT_NE(error_of("recipe: reduction\nseed: 1\nextra: 2\n").find("unknown key"), std::string::npos);
}

TEST(Config, ParseErrorReportsLine) {
    const auto msg = error_of("recipe: reduction\nseed: 1\nsystem: [1, 2\n");
    EXPECT_NE(msg.find("parse error at line"), std::string::npos) << msg;
}

TEST(Config, WrongTypeAndMissingRequiredKeys) {
    EXPECT_NE(error_of("recipe: reduction\nseed: 1\nsystem:\n  dt: fast\n").find("wrong type"), std::string::npos);
    EXPECT_FALSE(error_of("seed: 1\n").empty());
    EXPECT_FALSE(error_of("recipe: reduction\n").empty());
    EXPECT_FALSE(error_of("recipe: bake\nseed: 1\n").empty());
    EXPECT_NE(error_of("recipe: reduction\nseed: 1\nsystem:\n  T: 1\n  dt: 0.3\n").find("integer multiple"), std::string::npos);
}

TEST(Config, SerializeRoundTrips) {
    auto spec = parse_config(kSmallReduction);
    spec.ldp.delta = 0.125;
    spec.rate.M_bound = 3.0;
    spec.system.epsilon = 0.1 + 1e-17 * 3.0;
    spec.ensemble.eps_grid = {0.1, std::pow(10.0, -1.5), 0.01};
    const auto back = parse_config(serialize_config(spec));
    EXPECT_EQ(back, spec);
    EXPECT_TRUE(back.applied_defaults.empty());
}

TEST(Config, SampleConfigsParse) {
    std::size_t count = 0;
    for (const auto& entry : fs::directory_iterator(SPDELAB_CONFIG_DIR)) {
        if (entry.path().extension() != ".yaml") continue;
        EXPECT_NO_THROW(parse_config(read_text_file(entry.path()))) << entry.path();
        ++count;
    }
    EXPECT_GE(count, 5u);
}

TEST(Io, FormatDoubleIsShortestRoundTrip) {
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(format_double(1e-300), "1e-300");
    EXPECT_EQ(format_double(std::numeric_limits<double>::quiet_NaN()), "nan");
    const double x = 1.0 / 3.0;
    EXPECT_EQ(std::stod(format_double(x)), x);
}

TEST(Io, WrittenFileHashMatchesContent) {
    const auto dir = scratch("io");
    fs::create_directories(dir);
    const auto hash = write_text_file(dir / "a.csv", "x,y\n1,2\n");
    EXPECT_EQ(hash, fnv1a_hex("x,y\n1,2\n"));
    EXPECT_EQ(read_text_file(dir / "a.csv"), "x,y\n1,2\n");
    // Standard FNV-1a 64-bit test vector.
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Run, ReductionSmokeWritesAggregatesFitAndManifest) {
    const auto dir = scratch("reduction");
    RunOptions opts;
    opts.output_dir = dir.string();
    const auto outcome = run_experiment(parse_config(kSmallReduction), opts);
    EXPECT_FALSE(outcome.degraded);

    const auto agg = csv_lines(dir / "aggregate.csv");
    ASSERT_FALSE(agg.empty());
    EXPECT_EQ(agg[0], "quantity,eps,mean,variance,stderr,skewness,n_success,n_failed");
    const auto rows = std::count_if(agg.begin(), agg.end(), [](const std::string& l) { return l.rfind("error_l2l2_sq,", 0) == 0; });
    EXPECT_EQ(rows, 3);
    EXPECT_EQ(csv_lines(dir / "raw.csv").size(), 1u + 3u * 20u);

    const auto fit = csv_lines(dir / "fit.csv");
    ASSERT_GE(fit.size(), 2u);
    EXPECT_NE(read_text_file(dir / "fit.csv").find("error_l2l2_sq"), std::string::npos);

    const auto manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    EXPECT_EQ(manifest["recipe"], "reduction");
    EXPECT_EQ(manifest["seed"], 7);
    EXPECT_TRUE(manifest["fits"].contains("error_l2l2_sq"));
    ASSERT_FALSE(manifest["files"].empty());
    for (const auto& f : manifest["files"])
        EXPECT_EQ(f["fnv1a"].get<std::string>(), fnv1a_hex(read_text_file(dir / f["name"].get<std::string>()))) << f["name"];
    EXPECT_TRUE(fs::exists(dir / "paths"));
    EXPECT_EQ(manifest["exit_code"], outcome.exit_code);
}

TEST(Run, SameSpecGivesByteIdenticalCsvs) {
    const auto spec = parse_config(kSmallReduction);
    const auto a = scratch("repeat_a"), b = scratch("repeat_b");
    RunOptions oa, ob;
    oa.output_dir = a.string();
    ob.output_dir = b.string();
    ob.workers = 4;
    const auto ra = run_experiment(spec, oa), rb = run_experiment(spec, ob);
    ASSERT_EQ(ra.files.size(), rb.files.size());
    for (std::size_t i = 0; i < ra.files.size(); ++i) {
        EXPECT_EQ(ra.files[i], rb.files[i]);
        EXPECT_EQ(read_text_file(a / ra.files[i].first), read_text_file(b / rb.files[i].first));
    }
}

TEST(Run, DiagnosticsRecipePassesItsChecks) {
    const auto dir = scratch("diagnostics");
    RunOptions opts;
    opts.output_dir = dir.string();
    opts.dump_operators = true;
    const auto outcome = run_experiment(parse_config("recipe: diagnostics\nseed: 1\nmesh:\n  nodes: 33\n"), opts);
    for (const auto& c : outcome.checks) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
    EXPECT_EQ(outcome.exit_code, 0);
    const auto text = read_text_file(dir / "diagnostics.csv");
    EXPECT_EQ(text.rfind("name,value\n", 0), 0u);
    EXPECT_NE(text.find("coercivity_alpha"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "operators"));
}

TEST(Run, RateRecipeWritesControl) {
    const auto dir = scratch("rate");
    RunOptions opts;
    opts.output_dir = dir.string();
    const auto outcome = run_experiment(
        parse_config("recipe: rate_function\nseed: 2\nmesh:\n  nodes: 17\nsystem:\n  T: 0.2\n  dt: 0.01\n"), opts);
    for (const auto& c : outcome.checks) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
    EXPECT_TRUE(fs::exists(dir / "rate.csv"));
    EXPECT_TRUE(fs::exists(dir / "control.csv"));
}
