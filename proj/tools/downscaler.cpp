#include "CLI11.hpp"

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "downscaler/pipeline.hpp"

namespace ds = downscaler;

namespace {

struct Overrides {
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::optional<std::string> mode;
  std::optional<std::string> scheme;
  std::optional<int> folds;
};

ds::RunConfig load(const std::string& path, const Overrides& o) {
  ds::RunConfig c = ds::load_run_config(path);
  if (o.workers) c.workers = *o.workers;
  if (o.seed) c.chain.master_seed = *o.seed;
  if (o.output) c.output_dir = *o.output;
  if (o.mode) c.prediction_mode = ds::parse_mode(*o.mode);
  if (o.scheme) {
    c.cv_schemes.clear();
    if (*o.scheme == "both") c.cv_schemes = {ds::CvScheme::Random, ds::CvScheme::Spatial};
    else c.cv_schemes.push_back(ds::parse_scheme(*o.scheme));
  }
  if (o.folds) c.cv_folds = *o.folds;
  c.validate();
  return c;
}

void add_common(CLI::App* cmd, std::string& config, Overrides& o) {
  cmd->add_option("-c,--config", config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-j,--workers", o.workers, "worker threads");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("-o,--output", o.output, "output directory");
}

void print_outputs(const ds::RunResult& r) {
  for (const auto& f : r.outputs) std::cout << f << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian PM2.5 downscaler: regional/temporal AOD calibration with posterior surfaces"};
  app.require_subcommand(1);

  std::string config;
  Overrides o;
  auto* fit = app.add_subcommand("fit", "fit every (region, window) block");
  add_common(fit, config, o);

  auto* predict = app.add_subcommand("predict", "daily, seasonal and annual surfaces from fitted blocks");
  add_common(predict, config, o);
  std::string fit_dir;
  predict->add_option("--fit-dir", fit_dir, "directory holding the fit manifest (default: output directory)");
  predict->add_option("--mode", o.mode, "latent or predictive")->check(CLI::IsMember({"latent", "predictive"}));

  auto* validate = app.add_subcommand("validate", "random and/or spatial k-fold cross-validation");
  add_common(validate, config, o);
  validate->add_option("--scheme", o.scheme, "random, spatial or both")
      ->check(CLI::IsMember({"random", "spatial", "both"}));
  validate->add_option("-k,--folds", o.folds, "number of folds");

  auto* simulate = app.add_subcommand("simulate", "write the synthetic mini-CONUS bundle");
  std::string sim_out = "mini_conus";
  std::uint64_t sim_seed = 2011;
  std::string truth_file;
  simulate->add_option("-o,--output", sim_out, "output directory");
  simulate->add_option("--seed", sim_seed, "simulation seed");
  simulate->add_option("--truth", truth_file, "truth specification (JSON) replacing the bundled one")
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    ds::RunResult r;
    if (*fit) {
      r = ds::run_fit(load(config, o));
    } else if (*predict) {
      const ds::RunConfig c = load(config, o);
      r = ds::run_predict(c, fit_dir.empty() ? std::filesystem::path(c.output_dir) : std::filesystem::path(fit_dir));
    } else if (*validate) {
      r = ds::run_validate(load(config, o));
    } else if (*simulate) {
      ds::synth::TruthSpec truth = ds::synth::mini_conus_truth();
      if (!truth_file.empty()) {
        const auto j = nlohmann::json::parse(ds::io::read_file(truth_file));
        truth = j.contains("truth") ? j.at("truth").get<ds::synth::TruthSpec>() : j.get<ds::synth::TruthSpec>();
      }
      r = ds::run_simulate(truth, sim_seed, sim_out);
    }
    print_outputs(r);
    return r.exit_code;
  } catch (const ds::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return ds::kExitNumerical;
  } catch (const ds::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return ds::kExitInput;
  } catch (const ds::ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << '\n';
    return ds::kExitInput;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return ds::kExitInput;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return ds::kExitInput;
  }
}
