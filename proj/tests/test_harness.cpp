#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "lmnn/harness.hpp"

using namespace lmnn;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / ("lmnn_harness_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

std::string write_text(const std::string& name, const std::string& text) {
  const auto path = temp_dir() / name;
  std::ofstream(path) << text;
  return path.string();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

Error error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "no error thrown";
  return Error(ErrorCode::InvalidArgument, "none");
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LMNN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// CSV text with the wall-clock column blanked out.
std::string without_wall_time(const std::string& csv) {
  std::string out;
  for (const auto& line : lines_of(csv)) {
    auto cells = split_csv_line(line);
    cells[2].clear();
    for (std::size_t k = 0; k < cells.size(); ++k) out += (k ? "," : "") + cells[k];
    out += '\n';
  }
  return out;
}

ExperimentConfig short_sine(OptimizerKind kind, std::size_t iterations) {
  ExperimentConfig cfg;
  cfg.optimizer = kind;
  cfg.iterations = iterations;
  return cfg;
}

}  // namespace

TEST(ParseConfig, EmptyTextGivesDefaults) {
  const ExperimentConfig cfg = parse_config("");
  EXPECT_EQ(cfg.task, Task::Sine);
  EXPECT_EQ(cfg.optimizer, OptimizerKind::LM);
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.lm.lambda0, 1.0);
  EXPECT_EQ(cfg.lm.lr0, 1.0);
  EXPECT_EQ(cfg.sgd.lr, 0.05);
  EXPECT_EQ(cfg.sgd.momentum, 0.9);
  EXPECT_EQ(cfg.sgd.weight_decay, 5e-4);
  EXPECT_EQ(cfg.adam.lr, 0.01);
  EXPECT_EQ(cfg.lbfgs.lr, 0.005);
  EXPECT_EQ(cfg.hf.lr, 0.1);
}

TEST(ParseConfig, SetsValuesAndIgnoresComments) {
  const ExperimentConfig cfg = parse_config(
      "# experiment\n"
      "lambda0 = 1.0\n"
      "  seed=7   # trailing comment\n"
      "\n"
      "uphill_mode = min_history\n"
      "momentum = false\n"
      "deltaP_scale = absolute\n"
      "out = results/run.csv\n");
  EXPECT_EQ(cfg.lm.lambda0, 1.0);
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.lm.uphill_mode, UphillMode::MinHistory);
  EXPECT_FALSE(cfg.lm.momentum_enabled);
  EXPECT_FALSE(cfg.lm.delta_p_relative);
  EXPECT_EQ(cfg.out, "results/run.csv");
  EXPECT_EQ(parse_config("lambda0 = 0.25").lm.lambda0, 0.25);
}

TEST(ParseConfig, UnknownOptimizerNamesTheLine) {
  const Error e = error_of([] { parse_config("seed = 1\noptimizer = adamm\n"); });
  EXPECT_EQ(e.code(), ErrorCode::UnknownValue);
  EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  EXPECT_NE(std::string(e.what()).find("adamm"), std::string::npos);
}

TEST(ParseConfig, RejectionCases) {
  struct Case {
    const char* text;
    ErrorCode code;
    const char* line;
  };
  const Case cases[] = {
      {"\n\nlearning_rate = 0.1", ErrorCode::UnknownKey, "line 3"},
      {"seed = many", ErrorCode::TypeError, "line 1"},
      {"lambda0 = 1.0x", ErrorCode::TypeError, "line 1"},
      {"momentum = maybe", ErrorCode::TypeError, "line 1"},
      {"seed 5", ErrorCode::ParseError, "line 1"},
      {"seed =", ErrorCode::ParseError, "line 1"},
      {"= 5", ErrorCode::ParseError, "line 1"},
      {"seed = 1\nseed = 2", ErrorCode::ParseError, "line 2"},
      {"optimizer = adam\nsgd_lr = 0.1", ErrorCode::UnknownKey, "line 2"},
      {"lambda0 = 1\noptimizer = sgd", ErrorCode::UnknownKey, "line 1"},
      {"task = cifar", ErrorCode::UnknownValue, "line 1"},
      {"xi = 1.5", ErrorCode::InvalidArgument, ""},
  };
  for (const auto& c : cases) {
    const Error e = error_of([&] { parse_config(c.text); });
    EXPECT_EQ(e.code(), c.code) << c.text;
    EXPECT_NE(std::string(e.what()).find(c.line), std::string::npos) << e.what();
    EXPECT_TRUE(is_config_error(e.code()));
  }
}

TEST(ParseConfig, ShippedConfigsLoad) {
  for (const auto& entry : fs::directory_iterator(std::string(LMNN_SOURCE_DIR) + "/configs")) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
  }
  EXPECT_EQ(error_of([] { load_config("/nonexistent/x.cfg"); }).code(), ErrorCode::IoError);
}

TEST(Csv, HeaderAndRowFormat) {
  EXPECT_EQ(kCsvHeader, "iter,epoch,wall_time_s,train_loss,train_acc,test_loss,test_acc,lambda,accepted,lr_used,step_norm");
  RunRecord r;
  r.iter = 3;
  r.epoch = 1.5;
  r.train_loss = 0.1;
  r.accepted = false;
  r.lambda = 10.0;
  EXPECT_EQ(csv_row(r), "3,1.5,0.000000,0.10000000000000001,,,,10,0,,");
  const auto cells = split_csv_line(csv_row(r));
  EXPECT_EQ(cells.size(), 11u);
}

TEST(RunExperiment, CsvRowsAreCompleteAndMonotone) {
  const auto path = (temp_dir() / "lm.csv").string();
  auto cfg = short_sine(OptimizerKind::LM, 15);
  cfg.eval_every = 4;
  const auto run = run_experiment(cfg, path);
  const auto lines = lines_of(read_text(path));
  ASSERT_EQ(lines.size(), 17u);
  EXPECT_EQ(lines[0], kCsvHeader);
  const CsvTable t = read_csv(path);
  const auto iter = t.column("iter"), wall = t.column("wall_time_s"), test = t.column("test_loss");
  const auto lambda = t.column("lambda"), accepted = t.column("accepted"), acc = t.column("train_acc");
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    EXPECT_EQ(t.rows[k].size(), 11u);
    EXPECT_EQ(*iter[k], static_cast<double>(k));
    if (k > 0) {
      EXPECT_GE(*wall[k], *wall[k - 1]);
    }
    EXPECT_EQ(test[k].has_value(), k % 4 == 0 || k == 15) << k;
    EXPECT_TRUE(lambda[k].has_value());
    EXPECT_EQ(accepted[k].has_value(), k > 0);
    EXPECT_FALSE(acc[k].has_value());  // regression has no accuracy
    EXPECT_EQ(*t.column("train_loss")[k], run.records[k].train_loss);
  }
}

TEST(RunExperiment, DeterministicModuloWallTime) {
  for (OptimizerKind kind : {OptimizerKind::LM, OptimizerKind::Adam, OptimizerKind::HF}) {
    const auto a = (temp_dir() / "det_a.csv").string(), b = (temp_dir() / "det_b.csv").string();
    run_experiment(short_sine(kind, 12), a);
    run_experiment(short_sine(kind, 12), b);
    EXPECT_EQ(without_wall_time(read_text(a)), without_wall_time(read_text(b))) << to_string(kind);
  }
}

TEST(RunExperiment, BaselinesReportTheirLearningRate) {
  const auto run = run_experiment(short_sine(OptimizerKind::SGD, 3), "");
  EXPECT_EQ(*run.records[1].lr_used, 0.05);
  EXPECT_FALSE(run.records[1].lambda.has_value());
  EXPECT_FALSE(run.records[1].accepted.has_value());
}

TEST(RunExperiment, DivergenceLeavesPartialCsv) {
  const auto path = (temp_dir() / "diverge.csv").string();
  auto cfg = short_sine(OptimizerKind::SGD, 200);
  cfg.sgd.lr = 1e4;
  const Error e = error_of([&] { run_experiment(cfg, path); });
  EXPECT_EQ(e.code(), ErrorCode::NonFiniteLoss);
  const auto lines = lines_of(read_text(path));
  ASSERT_GE(lines.size(), 2u);
  EXPECT_LT(lines.size(), 202u);
  EXPECT_EQ(lines[0], kCsvHeader);
  for (std::size_t k = 1; k < lines.size(); ++k) EXPECT_EQ(split_csv_line(lines[k]).size(), 11u);
}

TEST(RunExperiment, EpochsToAccuracy) {
  std::vector<RunRecord> recs(4);
  for (std::size_t k = 0; k < 4; ++k) recs[k].epoch = 0.5 * static_cast<double>(k);
  recs[1].test_acc = 0.5;
  recs[2].test_acc = 0.91;
  recs[3].test_acc = 0.95;
  EXPECT_EQ(*epochs_to_accuracy(recs, 0.9), 1.0);
  EXPECT_FALSE(epochs_to_accuracy(recs, 0.99).has_value());
}

TEST(RunExperiment, MissingMnistDirectoryNamesTheFiles) {
  ExperimentConfig cfg;
  cfg.task = Task::Mnist;
  cfg.mnist_dir = "/nonexistent";
  const Error e = error_of([&] { run_experiment(cfg, ""); });
  EXPECT_EQ(e.code(), ErrorCode::IoError);
  EXPECT_NE(std::string(e.what()).find("train-images-idx3-ubyte"), std::string::npos);
}

TEST(Plot, SingleRowGivesOneMarker) {
  const auto path = write_text("single.csv", "iter,train_loss\n0,0.5\n");
  const std::string svg = render_plot({path}, "train_loss");
  EXPECT_EQ(count_of(svg, "<circle"), 1u);
  EXPECT_EQ(count_of(svg, "<polyline"), 0u);
}

TEST(Plot, TwoFilesTwoPolylinesWithStemLabels) {
  const auto a = write_text("alpha.csv", "iter,train_loss\n0,1\n1,0.5\n2,0.25\n");
  const auto b = write_text("beta.csv", "iter,train_loss\n0,2\n1,1\n");
  const std::string svg = render_plot({a, b}, "train_loss", {true, "iter", "loss & more"});
  EXPECT_EQ(count_of(svg, "<polyline"), 2u);
  EXPECT_NE(svg.find(">alpha</text>"), std::string::npos);
  EXPECT_NE(svg.find(">beta</text>"), std::string::npos);
  EXPECT_NE(svg.find("loss &amp; more"), std::string::npos);
  EXPECT_EQ(svg.rfind("</svg>\n"), svg.size() - 7);
  EXPECT_EQ(svg.find("href"), std::string::npos);
}

TEST(Plot, ConstantColumnIsHorizontal) {
  const auto path = write_text("flat.csv", "iter,train_loss\n0,3\n1,3\n2,3\n");
  const std::string svg = render_plot({path}, "train_loss");
  const auto start = svg.find("points=\"") + 8;
  const auto pts = svg.substr(start, svg.find('"', start) - start);
  std::set<std::string> ys;
  std::istringstream in(pts);
  for (std::string p; in >> p;) ys.insert(p.substr(p.find(',') + 1));
  EXPECT_EQ(ys.size(), 1u);
}

TEST(Plot, ErrorsAndDeterminism) {
  const auto good = write_text("good.csv", "iter,train_loss,test_loss\n0,1,\n1,0.5,\n");
  EXPECT_EQ(error_of([&] { render_plot({good}, "nope"); }).code(), ErrorCode::MissingColumn);
  EXPECT_EQ(error_of([&] { render_plot({good}, "test_loss"); }).code(), ErrorCode::EmptyCSV);
  const auto header_only = write_text("header_only.csv", "iter,train_loss\n");
  EXPECT_EQ(error_of([&] { render_plot({header_only}, "train_loss"); }).code(), ErrorCode::EmptyCSV);
  const auto empty = write_text("empty.csv", "");
  EXPECT_EQ(error_of([&] { render_plot({empty}, "train_loss"); }).code(), ErrorCode::EmptyCSV);

  const auto out1 = (temp_dir() / "p1.svg").string(), out2 = (temp_dir() / "p2.svg").string();
  emit_plot({good}, "train_loss", out1);
  emit_plot({good}, "train_loss", out2);
  EXPECT_EQ(read_text(out1), read_text(out2));
  EXPECT_FALSE(read_text(out1).empty());
}

TEST(Cli, ExitCodes) {
  const auto dir = temp_dir();
  EXPECT_EQ(run_cli("train --config " + (dir / "missing.cfg").string()), 1);
  EXPECT_EQ(run_cli("train --config " + write_text("bad.cfg", "optimizer = adamm\n")), 1);
  EXPECT_EQ(run_cli("train"), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("check --momentum"), 0);
  EXPECT_EQ(run_cli("check --grad"), 0);
  EXPECT_EQ(run_cli("plot --csv " + (dir / "none.csv").string() + " --out " + (dir / "none.svg").string()), 2);
  EXPECT_EQ(run_cli("train --config " + write_text("mnist_missing.cfg", "task = mnist\nmnist_dir = /nonexistent\n")), 2);

  const auto sine_csv = (dir / "sine.csv").string();
  EXPECT_EQ(run_cli("gen-data --out " + sine_csv + " --n 25"), 0);
  EXPECT_EQ(lines_of(read_text(sine_csv)).size(), 26u);

  const auto cfg = write_text("tiny.cfg", "iterations = 3\n");
  const auto out = (dir / "tiny.csv").string();
  EXPECT_EQ(run_cli("train --config " + cfg + " --out " + out), 0);
  EXPECT_EQ(lines_of(read_text(out)).size(), 5u);
}

TEST(Cli, CompareWritesOneSvgWithThreeCurves) {
  const auto dir = temp_dir() / "compare";
  fs::create_directories(dir);
  const auto lm = write_text("cmp_lm.cfg", "iterations = 4\n");
  const auto adam = write_text("cmp_adam.cfg", "optimizer = adam\niterations = 4\n");
  const auto sgd = write_text("cmp_sgd.cfg", "optimizer = sgd\niterations = 4\n");
  const auto svg = (dir / "cmp.svg").string();
  ASSERT_EQ(run_cli("compare --configs " + lm + "," + adam + "," + sgd + " --plot " + svg), 0);
  const std::string text = read_text(svg);
  EXPECT_EQ(count_of(text, "<polyline"), 3u);
  for (const char* stem : {">cmp_lm<", ">cmp_adam<", ">cmp_sgd<"}) EXPECT_NE(text.find(stem), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "cmp_adam.csv"));
}
