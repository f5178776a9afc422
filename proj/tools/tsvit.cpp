// tsvit: command-line front end (dataset generation, training, evaluation,
// cost accounting and feature export).

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "tsvit/tsvit.hpp"

namespace fs = std::filesystem;
using namespace tsvit;

namespace {

void save_text(const std::string& text, const fs::path& path) {
  io::Writer w;
  w.bytes(text);
  w.save(path);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw Error(std::string(what) + " not found: " + path);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct GenSynthArgs {
  std::string out;
  std::size_t per_class = 500;
  std::uint32_t length = 2048;
  std::uint64_t seed = 42;
};

int cmd_gen_synth(const GenSynthArgs& a) {
  Dataset ds = gen_synthetic(a.per_class, a.length, a.seed);
  write_dataset(ds, a.out);
  std::cout << "wrote " << ds.size() << " samples (" << ds.num_classes() << " classes, L=" << ds.length << ") to "
            << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, test, config, out_dir;
  std::uint32_t trials = 0;
};

int cmd_train(const TrainArgs& a) {
  require_file(a.data, "dataset");
  if (!a.test.empty()) require_file(a.test, "test dataset");
  RunConfig rc = load_run_config(a.config);
  if (a.trials) rc.train.trials = a.trials;
  rc.train.validate();

  Dataset data = read_dataset(a.data);
  Dataset train, test;
  if (a.test.empty()) {
    std::tie(train, test) = split(data, SplitSpec{0.8, rc.train.seed});
  } else {
    train = std::move(data);
    test = read_dataset(a.test);
  }
  if (rc.train.standardize) {
    standardize(train);
    standardize(test);
  }
  check_compatible(rc.model, train);
  check_compatible(rc.model, test);

  std::string csv = metrics_csv_header();
  auto result = run_trials(train, test, rc.model, rc.train, [&](const EpochRecord& r) {
    csv += metrics_csv_row(r);
    std::fprintf(stderr, "trial %u epoch %u: train loss %.4f acc %.4f | test loss %.4f acc %.4f\n", r.trial, r.epoch,
                 r.train_loss, r.train_acc, r.test_loss, r.test_acc);
  });

  const fs::path out(a.out_dir);
  ensure_dir(out);
  for (std::size_t t = 0; t < result.trials.size(); ++t) {
    save_checkpoint(result.trials[t].best_model, out / ("trial_" + std::to_string(t) + ".tsvm"));
  }
  save_text(csv, out / "metrics.csv");
  const auto& s = result.summary;
  const std::string summary = "MaxAcc MinAcc AvgAcc\n" + fmt("%.6f", s.max_acc) + " " + fmt("%.6f", s.min_acc) + " " +
                              fmt("%.6f", s.avg_acc) + "\n";
  save_text(summary, out / "summary.txt");
  std::cout << summary;
  return 0;
}

struct EvalArgs {
  std::string data, checkpoint, out_dir;
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.data, "dataset");
  require_file(a.checkpoint, "checkpoint");
  Dataset ds = read_dataset(a.data);
  TsvitModel<float> model = load_checkpoint(a.checkpoint);
  check_compatible(model.config, ds);
  EvalResult ev = evaluate(model, ds);
  const fs::path out(a.out_dir);
  ensure_dir(out);
  save_text(confusion_csv(ev.confusion, ds.class_names), out / "confusion.csv");
  std::cout << "accuracy " << fmt("%.4f", ev.accuracy) << "\n";
  std::cout << "loss " << fmt("%.6f", ev.loss) << "\n";
  return 0;
}

struct CountArgs {
  std::string config;
  bool paper_compatible = false;
};

int cmd_count(const CountArgs& a) {
  const TsvitConfig cfg = load_run_config(a.config).model;
  const auto params = count_params(cfg);
  const auto flops = count_flops(cfg);
  auto line = [](const std::string& name, std::uint64_t v) {
    std::printf("%-22s %15" PRIu64 "  (%.2fM)\n", name.c_str(), v, static_cast<double>(v) / 1e6);
  };
  line("params", params);
  for (const auto& [name, v] : flops.items()) line("flops." + name, v);
  line("flops.matmul_total", flops.matmul_total());
  line("flops.total", flops.total());
  if (a.paper_compatible) {
    line("paper.params", count_params_paper_compatible(cfg));
    line("paper.flops", flops.paper_compatible());
  }
  return 0;
}

struct ExportArgs {
  std::string data, checkpoint, out;
};

int cmd_export_features(const ExportArgs& a) {
  require_file(a.data, "dataset");
  require_file(a.checkpoint, "checkpoint");
  Dataset ds = read_dataset(a.data);
  TsvitModel<float> model = load_checkpoint(a.checkpoint);
  check_compatible(model.config, ds);
  FeatureFile f = extract_features(model, ds);
  write_features(f, a.out);
  std::cout << "wrote " << f.records.size() << " feature records to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tsvit::tune_allocator();
  CLI::App app{"Time-series vision transformer for vibration fault diagnosis"};
  app.require_subcommand(1);

  GenSynthArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Generate the synthetic 4-class vibration dataset");
  gen_cmd->add_option("--out", gen.out, "Output TSVD file")->required();
  gen_cmd->add_option("--per-class", gen.per_class, "Samples per class")->capture_default_str();
  gen_cmd->add_option("--length", gen.length, "Samples per window (L)")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run repeated training trials");
  train_cmd->add_option("--data", train.data, "TSVD dataset (split 80/20 unless --test is given)")->required();
  train_cmd->add_option("--test", train.test, "Separate TSVD test set");
  train_cmd->add_option("--config", train.config, "key=value run config")->required();
  train_cmd->add_option("--out-dir", train.out_dir, "Directory for checkpoints, metrics.csv, summary.txt")->required();
  train_cmd->add_option("--trials", train.trials, "Override the number of trials");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and write its confusion matrix");
  eval_cmd->add_option("--data", ev.data, "TSVD dataset")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "TSVM checkpoint")->required();
  eval_cmd->add_option("--out-dir", ev.out_dir, "Directory for confusion.csv")->required();

  CountArgs count;
  auto* count_cmd = app.add_subcommand("count", "Print parameter and FLOP counts for a config");
  count_cmd->add_option("--config", count.config, "key=value run config")->required();
  count_cmd->add_flag("--paper-compatible", count.paper_compatible,
                      "Also print the MLP+embedding+classifier parameter and MLP+convolution FLOP subsets");

  ExportArgs exp;
  auto* exp_cmd = app.add_subcommand("export-features", "Export per-layer feature vectors (TSVF)");
  exp_cmd->add_option("--data", exp.data, "TSVD dataset")->required();
  exp_cmd->add_option("--checkpoint", exp.checkpoint, "TSVM checkpoint")->required();
  exp_cmd->add_option("--out", exp.out, "Output TSVF file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return cmd_gen_synth(gen);
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(ev);
    if (*count_cmd) return cmd_count(count);
    if (*exp_cmd) return cmd_export_features(exp);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
