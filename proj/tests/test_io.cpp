#include <gtest/gtest.h>

#include <sstream>

#include "downscaler/io.hpp"
#include "downscaler/pipeline.hpp"
#include "downscaler/synth.hpp"

using namespace downscaler;

namespace {

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

io::CsvTable table(const std::string& text, const std::string& source = "monitors.csv") {
  std::istringstream in(text);
  return io::parse_csv(in, source);
}

const char* kMonitorHeader =
    "site_id,lon,lat,date,pm25,aod,fire,forest,emission,rh,tmp,vgrd,ugrd,hpbl,road,region\n";

}  // namespace

TEST(Csv, SplitsQuotedFields) {
  EXPECT_EQ(io::split_csv_line(R"(a,"b,c","say ""hi""",)", "x"),
            (std::vector<std::string>{"a", "b,c", "say \"hi\"", ""}));
  EXPECT_THROW(io::split_csv_line(R"(a,"b)", "x"), InputError);
}

TEST(Csv, RowsRememberTheirLineNumbers) {
  const auto t = table("a,b\n1,2\n\n3,4\r\n");
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].line, 2);
  EXPECT_EQ(t.rows[1].line, 4);
  EXPECT_EQ(t.rows[1].fields[1], "4");
}

TEST(Csv, FieldCountMismatchNamesTheLine) {
  const std::string msg = error_of([] { table("a,b\n1,2\n1,2,3\n"); });
  EXPECT_NE(msg.find("monitors.csv line 3"), std::string::npos) << msg;
  EXPECT_THROW(table(""), InputError);
}

TEST(Monitors, ParsesMissingValuesAndRegion) {
  const auto recs = io::parse_monitors(table(std::string(kMonitorHeader) +
                                             "s1,-85.5,38.25,2011-01-03,12.5,,1,0.3,2,60,285,1,-1,800,3,ohio_valley\n"
                                             "s2,-84,38,2011-01-04,9,0.2,,0.3,2,60,285,1,-1,800,3,Southeast\n"));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_FALSE(recs[0].aod);
  EXPECT_TRUE(recs[0].missing[kInteractionIndex]);
  EXPECT_FALSE(recs[0].complete());
  EXPECT_EQ(recs[0].region, RegionId::OhioValley);
  EXPECT_TRUE(recs[1].missing[0]);
  EXPECT_FALSE(recs[1].missing[kInteractionIndex]);
  EXPECT_EQ(recs[1].region, RegionId::Southeast);
  EXPECT_EQ(format_date(recs[1].day), "2011-01-04");
}

TEST(Monitors, ErrorsNameFileAndLine) {
  const std::string good = "s1,-85,38,2011-01-03,12.5,0.2,1,0.3,2,60,285,1,-1,800,3,OhioValley\n";
  auto fails_on_line_3 = [&](const std::string& bad, const char* needle) {
    const std::string msg = error_of([&] { io::parse_monitors(table(kMonitorHeader + good + bad)); });
    EXPECT_NE(msg.find("monitors.csv line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find(needle), std::string::npos) << msg;
  };
  fails_on_line_3("s1,-85,38,2011-01-03,,0.2,1,0.3,2,60,285,1,-1,800,3,OhioValley\n", "pm25");
  fails_on_line_3("s1,-85,38,2011-01-03,abc,0.2,1,0.3,2,60,285,1,-1,800,3,OhioValley\n", "pm25");
  fails_on_line_3("s1,-85,38,2011-13-03,1,0.2,1,0.3,2,60,285,1,-1,800,3,OhioValley\n", "date");
  fails_on_line_3("s1,-85,38,2011-01-03,1,0.2,1,0.3,2,60,285,1,-1,800,3,Narnia\n", "region");
  fails_on_line_3("s1,-85,98,2011-01-03,1,0.2,1,0.3,2,60,285,1,-1,800,3,OhioValley\n", "coordinates");
  fails_on_line_3("s1,-85,38,2011-01-03,-4,0.2,1,0.3,2,60,285,1,-1,800,3,OhioValley\n", "pm25");
}

TEST(Monitors, HeaderMustMatchExactly) {
  const std::string msg = error_of([] { io::parse_monitors(table("site,lon,lat\n1,2,3\n")); });
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
}

TEST(Monitors, WriteParseRoundTripIsExact) {
  synth::TruthSpec t;
  t.n_monitors = 4;
  t.n_days = 5;
  t.aod_missing_rate = 0.3;
  const auto sim = synth::simulate(t, 3);
  std::stringstream ss;
  io::write_monitors(ss, sim.monitors);
  const auto back = io::parse_monitors(io::parse_csv(ss, "m"));
  ASSERT_EQ(back.size(), sim.monitors.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].site, sim.monitors[i].site);
    EXPECT_EQ(back[i].pm25, sim.monitors[i].pm25);
    EXPECT_EQ(back[i].aod, sim.monitors[i].aod);
    EXPECT_EQ(back[i].missing, sim.monitors[i].missing);
    for (int j = 0; j < kNumRawCovariates; ++j) EXPECT_EQ(back[i].z[j], sim.monitors[i].z[j]);
  }
}

TEST(Grid, UnknownRegionsAreSetAsideAndListed) {
  const std::string header = "cell_id,lon,lat,date,aod,fire,forest,emission,rh,tmp,vgrd,ugrd,hpbl,road,region\n";
  const auto r = io::parse_grid(table(header +
                                      "c2,-85,38,2011-01-01,0.2,1,0.3,2,60,285,1,-1,800,3,Offshore\n"
                                      "c1,-85,38,2011-01-01,,1,0.3,2,60,285,1,-1,800,3,OhioValley\n"
                                      "c2,-85,38,2011-01-02,0.2,1,0.3,2,60,285,1,-1,800,3,Offshore\n",
                                      "grid.csv"));
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_FALSE(r.rows[0].aod);
  EXPECT_EQ(r.unknown_region_cells, std::vector<std::string>{"c2"});
  const std::string msg = error_of([&] {
    io::parse_grid(table(header + "c1,-85,38,2011-01-01,-0.2,1,0.3,2,60,285,1,-1,800,3,OhioValley\n", "grid.csv"));
  });
  EXPECT_NE(msg.find("grid.csv line 2"), std::string::npos) << msg;
}

TEST(Draws, WriteParseRoundTripIsExact) {
  synth::TruthSpec t;
  t.n_monitors = 6;
  t.n_days = 8;
  const auto sim = synth::simulate(t, 4);
  const auto rows = apply_transform(fit_transform(sim.monitors), std::span<const MonitorRecord>(sim.monitors));
  const BlockData data = make_block_data(rows, make_window(2011, 1));
  ChainConfig c;
  c.n_iter = 20;
  c.n_burnin = 10;
  c.thin = 1;
  const auto d = run_chain(data, c);
  std::stringstream ss;
  io::write_draws(ss, d, data.num_sites(), data.num_days);
  const auto back = io::parse_draws(io::parse_csv(ss, "draws"), data.num_sites(), data.num_days, c.phi_grid);
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t k = 0; k < d.size(); ++k) {
    EXPECT_EQ(scalar_parameters(back.states[k], c.phi_grid), scalar_parameters(d.states[k], c.phi_grid));
    EXPECT_EQ(back.states[k].w2, d.states[k].w2);
    EXPECT_EQ(back.states[k].beta0, d.states[k].beta0);
    EXPECT_EQ(back.log_likelihood[k], d.log_likelihood[k]);
  }
  std::stringstream again;
  io::write_draws(again, back, data.num_sites(), data.num_days);
  std::stringstream first;
  io::write_draws(first, d, data.num_sites(), data.num_days);
  EXPECT_EQ(again.str(), first.str());
  EXPECT_THROW(io::parse_draws(io::parse_csv(first, "draws"), data.num_sites(), data.num_days, {100.0}), InputError);
}

TEST(BlockSites, RoundTripKeepsRoles) {
  FittedBlock fit;
  fit.sites = {{"m1", -85.1, 38.2}, {"m2", -85.3, 38.9}};
  fit.spec.core_monitors = {{"m1", -85.1, 38.2}};
  fit.spec.buffer_monitors = {{"m2", -85.3, 38.9}};
  fit.spec.core_cells = {{"c1", -85.0, 38.0}};
  fit.spec.buffer_cells = {{"c9", -84.0, 37.0}};
  std::stringstream ss;
  io::write_block_sites(ss, fit);
  FittedBlock back;
  io::parse_block_sites(io::parse_csv(ss, "sites"), back);
  EXPECT_EQ(back.sites, fit.sites);
  EXPECT_EQ(back.spec.buffer_monitors, fit.spec.buffer_monitors);
  EXPECT_EQ(back.spec.buffer_cells, fit.spec.buffer_cells);
}

TEST(Surfaces, EmptyCellPeriodHasEmptyValues) {
  std::stringstream ss;
  io::write_surface_row(ss, CellPrediction{{"c1", -85, 38}, "annual", 0, 0, 0, 0, 0});
  EXPECT_EQ(ss.str(), "c1,-85,38,annual,,,,,0\n");
  std::stringstream full;
  io::write_surface_row(full, CellPrediction{{"c1", -85, 38}, "2011-01-01", 10.25, 1.5, 8, 12.5, 2});
  EXPECT_EQ(full.str(), "c1,-85,38,2011-01-01,10.250000,1.500000,8.000000,12.500000,2\n");
}

TEST(CvOutputs, IssuesAreSanitized) {
  CvReport r;
  r.issues.push_back({2, "South_w1", "bad, very bad\nindeed"});
  std::stringstream ss;
  io::write_cv_issues(ss, r);
  EXPECT_EQ(ss.str(), "fold,block,reason\n2,South_w1,bad; very bad indeed\n");
}

TEST(Diagnostics, SignificanceFlagOnlyOnCoefficients) {
  PosteriorDraws d;
  d.phi_grid = {100.0, 200.0};
  for (int k = 0; k < 50; ++k) {
    ModelState s = ModelState::zeros(1, 2);
    s.mu0 = 5.0 + 0.01 * k;
    s.sigma2 = 2.0 + 0.01 * k;
    s.tau0 = s.tau1 = 1.0 + 0.01 * k;
    s.coreg = {1.0, 0.0, 1.0};
    d.states.push_back(s);
    d.log_likelihood.push_back(-1.0);
    d.trace.push_back(-1.0);
    d.accept_phi1_trace.push_back(0.5);
    d.accept_phi2_trace.push_back(0.5);
  }
  std::stringstream ss;
  io::write_summary(ss, summarize(d));
  std::string line;
  while (std::getline(ss, line)) {
    const std::string name = line.substr(0, line.find(','));
    const bool flagged = line.back() == '*';
    if (name == "mu0" || name == "c1") EXPECT_TRUE(flagged) << line;
    if (name == "sigma2" || name == "tau0" || name == "phi1_km") EXPECT_FALSE(flagged) << line;
  }
}

TEST(Config, StrictKeysAndTypes) {
  EXPECT_NO_THROW(parse_run_config(nlohmann::json::parse(R"({"monitors": "m.csv", "n_iter": 100, "n_burnin": 50})")));
  const std::string unknown = error_of([] { parse_run_config(nlohmann::json::parse(R"({"n_iters": 100})")); });
  EXPECT_NE(unknown.find("n_iters"), std::string::npos);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"priors": {"sigma_shape": 1}})")), InputError);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"n_iter": "many"})")), InputError);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"prediction_mode": "both"})")), InputError);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"n_iter": 10, "n_burnin": 10})")), ParameterError);
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"([1, 2])")), InputError);
}

TEST(Config, RecordExcludesSchedulingAndLocation) {
  RunConfig a = parse_run_config(nlohmann::json::parse(R"({"workers": 1, "output_dir": "x"})"));
  RunConfig b = parse_run_config(nlohmann::json::parse(R"({"workers": 8, "output_dir": "y"})"));
  EXPECT_EQ(config_record(a).dump(), config_record(b).dump());
  RunConfig c = parse_run_config(nlohmann::json::parse(R"({"master_seed": 5})"));
  EXPECT_NE(config_record(a).dump(), config_record(c).dump());
  EXPECT_EQ(hex64(255), "00000000000000ff");
}
