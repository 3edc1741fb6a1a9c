// lmnn: generate data, train, compare optimizers, run self-checks, plot.
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lmnn/check.hpp"
#include "lmnn/data.hpp"
#include "lmnn/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct ConfigFailure {
  std::string message;
};

lmnn::ExperimentConfig load(const std::string& path) {
  try {
    return lmnn::load_config(path);
  } catch (const lmnn::Error& e) {
    throw ConfigFailure{e.what()};
  }
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void summarize(const std::string& label, const lmnn::ExperimentConfig& cfg, const lmnn::RunResult& run,
               const std::string& csv) {
  const auto& last = run.records.back();
  std::cout << label << ": task=" << lmnn::to_string(cfg.task) << " optimizer=" << lmnn::to_string(cfg.optimizer)
            << " iters=" << last.iter << " epoch=" << num(last.epoch) << " train_loss=" << num(last.train_loss);
  if (last.test_loss) std::cout << " test_loss=" << num(*last.test_loss);
  if (last.test_acc) {
    std::cout << " test_acc=" << num(*last.test_acc);
    const auto e90 = lmnn::epochs_to_accuracy(run.records, 0.9);
    std::cout << " epochs_to_90=" << (e90 ? num(*e90) : std::string("not reached"));
  }
  std::cout << " wall_s=" << num(last.wall_time_s);
  if (!csv.empty()) std::cout << " csv=" << csv;
  std::cout << '\n';
}

std::vector<lmnn::CheckResult> run_checks(bool grad, bool ggn, bool hvp, bool momentum) {
  if (!grad && !ggn && !hvp && !momentum) grad = ggn = hvp = momentum = true;
  std::vector<lmnn::CheckResult> all;
  auto add = [&](std::vector<lmnn::CheckResult> part) { all.insert(all.end(), part.begin(), part.end()); };
  if (grad) add(lmnn::check_gradients());
  if (ggn) add(lmnn::check_ggn());
  if (hvp) add(lmnn::check_hvp());
  if (momentum) add(lmnn::check_momentum());
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Levenberg-Marquardt neural network training toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write the noisy sine dataset as x,y CSV");
  std::string gen_out;
  std::size_t gen_n = 400;
  double gen_lo = -2.0 * std::numbers::pi, gen_hi = 2.0 * std::numbers::pi, gen_sigma = 0.1;
  std::uint64_t gen_seed = 42;
  gen->add_option("--out", gen_out, "output CSV path")->required();
  gen->add_option("--n", gen_n, "number of samples")->capture_default_str();
  gen->add_option("--lo", gen_lo, "lower end of the x range")->capture_default_str();
  gen->add_option("--hi", gen_hi, "upper end of the x range")->capture_default_str();
  gen->add_option("--sigma", gen_sigma, "noise standard deviation")->capture_default_str();
  gen->add_option("--seed", gen_seed, "RNG seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "run one experiment config");
  std::string train_config, train_out;
  train->add_option("--config", train_config, "config file")->required();
  train->add_option("--out", train_out, "CSV path (overrides the config's out)");

  auto* compare = app.add_subcommand("compare", "run several configs and plot them together");
  std::vector<std::string> compare_configs;
  std::string compare_plot, compare_column = "train_loss", compare_dir, compare_x = "iter";
  bool compare_log = false;
  compare->add_option("--configs", compare_configs, "comma-separated config files")->required()->delimiter(',');
  compare->add_option("--plot", compare_plot, "output SVG")->required();
  compare->add_option("--column", compare_column, "CSV column to plot")->capture_default_str();
  compare->add_option("--x", compare_x, "CSV column for the x axis")->capture_default_str();
  compare->add_option("--out-dir", compare_dir, "where run CSVs go (default: next to the plot)");
  compare->add_flag("--log-y", compare_log, "logarithmic y axis");

  auto* check = app.add_subcommand("check", "run the numerical self-checks (all when no flag is given)");
  bool c_grad = false, c_ggn = false, c_hvp = false, c_mom = false;
  check->add_flag("--grad", c_grad, "gradients against finite differences");
  check->add_flag("--ggn", c_ggn, "dense curvature matrices");
  check->add_flag("--hvp", c_hvp, "matrix-free curvature products and the CG solve");
  check->add_flag("--momentum", c_mom, "adaptive momentum constraints");

  auto* plot = app.add_subcommand("plot", "plot CSV logs as SVG");
  std::vector<std::string> plot_csvs;
  std::string plot_out, plot_column = "train_loss", plot_x = "iter", plot_title;
  bool plot_log = false;
  plot->add_option("--csv", plot_csvs, "comma-separated CSV files")->required()->delimiter(',');
  plot->add_option("--out", plot_out, "output SVG")->required();
  plot->add_option("--column", plot_column, "CSV column to plot")->capture_default_str();
  plot->add_option("--x", plot_x, "CSV column for the x axis")->capture_default_str();
  plot->add_option("--title", plot_title, "plot title");
  plot->add_flag("--log-y", plot_log, "logarithmic y axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kConfigError;
  }

  try {
    if (*gen) {
      lmnn::write_sine_csv(lmnn::gen_sine(gen_n, gen_lo, gen_hi, gen_sigma, gen_seed), gen_out);
      std::cout << "wrote " << gen_n << " samples to " << gen_out << '\n';
    } else if (*train) {
      const auto cfg = load(train_config);
      const std::string csv = train_out.empty() ? cfg.out : train_out;
      summarize(train_config, cfg, lmnn::run_experiment(cfg, csv), csv);
    } else if (*compare) {
      std::vector<lmnn::ExperimentConfig> cfgs;
      for (const auto& path : compare_configs) cfgs.push_back(load(path));
      const auto dir = compare_dir.empty() ? std::filesystem::path(compare_plot).parent_path()
                                           : std::filesystem::path(compare_dir);
      if (!dir.empty()) std::filesystem::create_directories(dir);
      std::vector<std::string> csvs;
      for (std::size_t i = 0; i < cfgs.size(); ++i) {
        const std::string csv = (dir / (std::filesystem::path(compare_configs[i]).stem().string() + ".csv")).string();
        summarize(compare_configs[i], cfgs[i], lmnn::run_experiment(cfgs[i], csv), csv);
        csvs.push_back(csv);
      }
      lmnn::emit_plot(csvs, compare_column, compare_plot, {compare_log, compare_x, compare_column});
      std::cout << "wrote " << compare_plot << '\n';
    } else if (*check) {
      const auto results = run_checks(c_grad, c_ggn, c_hvp, c_mom);
      for (const auto& r : results)
        std::cout << (r.passed() ? "PASS " : "FAIL ") << r.name << ": max error " << num(r.max_error) << " (tolerance "
                  << num(r.tolerance) << ", " << r.probes << " probes)\n";
      return lmnn::all_passed(results) ? kOk : kRuntimeError;
    } else if (*plot) {
      lmnn::emit_plot(plot_csvs, plot_column, plot_out, {plot_log, plot_x, plot_title});
      std::cout << "wrote " << plot_out << '\n';
    }
  } catch (const ConfigFailure& e) {
    std::cerr << "config error: " << e.message << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
