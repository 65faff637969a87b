#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "downscaler/pipeline.hpp"

using namespace downscaler;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("downscaler_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig short_config(const fs::path& bundle, const fs::path& out) {
  RunConfig c;
  c.monitors = (bundle / "monitors.csv").string();
  c.grid = (bundle / "grid.csv").string();
  c.output_dir = out.string();
  c.chain.n_iter = 200;
  c.chain.n_burnin = 100;
  c.chain.thin = 2;
  return c;
}

std::map<std::string, std::string> directory_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out[e.path().filename().string()] = io::read_file(e.path());
  return out;
}

io::CsvTable read_table(const fs::path& p) { return io::read_csv(p); }

class MiniBundle : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    bundle_ = new fs::path(scratch("bundle"));
    run_simulate(synth::mini_conus_truth(), 2011, *bundle_);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*bundle_);
    delete bundle_;
  }
  static fs::path* bundle_;
};

fs::path* MiniBundle::bundle_ = nullptr;

}  // namespace

TEST_F(MiniBundle, SimulateWritesARunnableConfig) {
  for (const char* f : {"monitors.csv", "grid.csv", "truth.json", "config.json"}) EXPECT_TRUE(fs::exists(*bundle_ / f)) << f;
  const RunConfig c = load_run_config(*bundle_ / "config.json");
  EXPECT_EQ(fs::path(c.monitors), (*bundle_ / "monitors.csv").lexically_normal());
  EXPECT_EQ(fs::path(c.output_dir), (*bundle_ / "out").lexically_normal());
}

TEST_F(MiniBundle, FitWritesOneSetOfFilesPerPopulatedBlock) {
  const fs::path out = scratch("fit_once");
  std::ostringstream log;
  const RunResult r = run_fit(short_config(*bundle_, out), log);
  EXPECT_EQ(r.exit_code, kExitOk) << log.str();
  int summaries = 0;
  for (const auto& f : r.outputs) summaries += f.rfind("summary_", 0) == 0;
  EXPECT_EQ(summaries, 2);
  EXPECT_TRUE(fs::exists(out / "summary_OhioValley_w1.csv"));
  EXPECT_TRUE(fs::exists(out / "summary_Southeast_w1.csv"));

  const auto manifest = nlohmann::json::parse(io::read_file(out / "manifest.json"));
  EXPECT_EQ(manifest.at("blocks").size(), 27u);
  EXPECT_EQ(manifest.at("config").at("n_iter"), 200);
  for (const auto& b : manifest.at("blocks"))
    if (b.at("status") == "fitted") EXPECT_EQ(b.at("jitter").size(), 5u);
  const auto summary = read_table(out / "summary_OhioValley_w1.csv");
  EXPECT_EQ(summary.rows.size(), scalar_parameter_names().size());
  fs::remove_all(out);
}

TEST_F(MiniBundle, RerunsAndWorkerCountsAreByteIdentical) {
  const fs::path a = scratch("fit_a"), b = scratch("fit_b");
  RunConfig ca = short_config(*bundle_, a), cb = short_config(*bundle_, b);
  cb.workers = 4;
  std::ostringstream log;
  run_fit(ca, log);
  run_fit(cb, log);
  const auto fa = directory_contents(a), fb = directory_contents(b);
  ASSERT_EQ(fa.size(), fb.size());
  for (const auto& [name, bytes] : fa) EXPECT_TRUE(fb.at(name) == bytes) << name;

  run_predict(ca, a, log);
  run_predict(cb, b, log);
  for (const char* f : {"surface_daily.csv", "surface_seasonal.csv", "surface_annual.csv"})
    EXPECT_TRUE(io::read_file(a / f) == io::read_file(b / f)) << f;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_F(MiniBundle, SurfacesHaveOneRowPerCellAndPeriod) {
  const fs::path fit = scratch("surf_fit"), pred = scratch("surf_pred");
  std::ostringstream log;
  RunConfig c = short_config(*bundle_, fit);
  run_fit(c, log);

  // Keep three cells of the grid.
  const auto grid = io::read_grid(*bundle_ / "grid.csv");
  std::vector<GridCellDay> subset;
  for (const auto& g : grid.rows)
    if (g.cell.id == "c0000" || g.cell.id == "c0077" || g.cell.id == "c0159") subset.push_back(g);
  {
    std::ofstream os(pred / "grid3.csv");
    io::write_grid(os, subset);
  }
  c.grid = (pred / "grid3.csv").string();
  c.output_dir = pred.string();
  const RunResult r = run_predict(c, fit, log);
  EXPECT_EQ(r.outputs.size(), 3u);

  const auto daily = read_table(pred / "surface_daily.csv");
  const auto seasonal = read_table(pred / "surface_seasonal.csv");
  const auto annual = read_table(pred / "surface_annual.csv");
  EXPECT_EQ(daily.rows.size(), subset.size());
  EXPECT_EQ(seasonal.rows.size(), 12u);
  ASSERT_EQ(annual.rows.size(), 3u);

  // Annual mean is the average over days of the daily means.
  for (const auto& row : annual.rows) {
    const std::string& id = row.fields[0];
    if (row.fields[8] == "0") continue;
    double sum = 0.0;
    int n = 0;
    for (const auto& d : daily.rows)
      if (d.fields[0] == id && d.fields[8] != "0") {
        sum += std::stod(d.fields[4]);
        ++n;
      }
    ASSERT_GT(n, 0);
    EXPECT_NEAR(std::stod(row.fields[4]), sum / n, 2e-6) << id;
    EXPECT_LE(std::stod(row.fields[6]), std::stod(row.fields[4]));
    EXPECT_GE(std::stod(row.fields[7]), std::stod(row.fields[4]));
  }
  // Winter holds the January days; the other seasons are empty.
  for (const auto& row : seasonal.rows) {
    if (row.fields[3] == "winter") continue;
    EXPECT_EQ(row.fields[8], "0");
    EXPECT_EQ(row.fields[4], "");
  }
  fs::remove_all(fit);
  fs::remove_all(pred);
}

TEST_F(MiniBundle, UnknownRegionCellsGivePartialExit) {
  const fs::path fit = scratch("partial_fit");
  std::ostringstream log;
  RunConfig c = short_config(*bundle_, fit);
  run_fit(c, log);
  std::string text = io::read_file(*bundle_ / "grid.csv");
  {
    std::istringstream in(text);
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    const auto comma = first.rfind(',');
    std::ofstream os(fit / "grid_odd.csv");
    os << header << '\n' << first << '\n' << "zz99" << first.substr(first.find(','), comma - first.find(',')) << ",Atlantis\n";
  }
  c.grid = (fit / "grid_odd.csv").string();
  const RunResult r = run_predict(c, fit, log);
  EXPECT_EQ(r.exit_code, kExitPartial);
  EXPECT_NE(log.str().find("zz99"), std::string::npos);
  fs::remove_all(fit);
}

TEST_F(MiniBundle, ValidateWritesPerSchemeReports) {
  const fs::path out = scratch("cv");
  RunConfig c = short_config(*bundle_, out);
  c.cv_folds = 3;
  c.chain.n_iter = 100;
  c.chain.n_burnin = 50;
  std::ostringstream log;
  const RunResult r = run_validate(c, log);
  EXPECT_EQ(r.exit_code, kExitOk) << log.str();
  for (const char* scheme : {"random", "spatial"}) {
    const auto report = read_table(out / ("cv_report_" + std::string(scheme) + ".csv"));
    ASSERT_EQ(report.rows.size(), 3u);
    EXPECT_EQ(report.rows.back().fields[0], "overall");
    const auto preds = read_table(out / ("cv_predictions_" + std::string(scheme) + ".csv"));
    EXPECT_EQ(std::to_string(preds.rows.size()), report.rows.back().fields[1]);
  }
  fs::remove_all(out);
}

TEST(Pipeline, MissingInputsAreInputErrors) {
  RunConfig c;
  EXPECT_THROW(run_fit(c), InputError);
  c.monitors = "/nonexistent/monitors.csv";
  EXPECT_THROW(run_fit(c), InputError);
}

TEST(Cli, ExitCodesFollowErrorKinds) {
  const char* cli = std::getenv("DOWNSCALER_CLI");
  if (!cli) GTEST_SKIP() << "DOWNSCALER_CLI not set";
  const fs::path dir = scratch("cli");
  {
    std::ofstream os(dir / "bad.json");
    os << R"({"monitors": "m.csv", "n_itr": 5})";
  }
  {
    std::ofstream os(dir / "missing.json");
    os << R"({"monitors": "m.csv"})";
  }
  auto run = [&](const std::string& args) {
    const int status = std::system((std::string(cli) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  EXPECT_EQ(run("fit -c " + (dir / "bad.json").string()), kExitInput);
  EXPECT_EQ(run("fit -c " + (dir / "missing.json").string()), kExitInput);
  EXPECT_EQ(run("fit -c " + (dir / "missing.json").string() + " -j 0"), kExitInput);
  EXPECT_EQ(run("simulate -o " + (dir / "bundle").string()), kExitOk);
  EXPECT_TRUE(fs::exists(dir / "bundle" / "config.json"));
  fs::remove_all(dir);
}
