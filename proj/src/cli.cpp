#include "uniphynet/cli.hpp"

#include "uniphynet/errors.hpp"
#include "uniphynet/experiment.hpp"
#include "uniphynet/gradcheck_suite.hpp"
#include "uniphynet/nn/checkpoint.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>
#include <optional>

namespace uniphynet::cli {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string protocol;
  std::string labels;
  std::string modalities;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
  std::string cache;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (INI sections [dataset] [dsp] [augment] [model] [train] [eval])");
  cmd->add_option("--protocol", f.protocol, "kfold10 | loso");
  cmd->add_option("--labels", f.labels, "binary | ternary");
  cmd->add_option("--modalities", f.modalities, "comma list of eeg, ecg, eda");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--jobs", f.jobs, "parallel folds");
  cmd->add_option("--out", f.out, "output directory");
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_experiment(f.config);
  if (!f.protocol.empty()) {
    if (f.protocol == "loso") {
      cfg.protocol = Protocol::LOSO;
    } else if (f.protocol == "kfold10") {
      cfg.protocol = Protocol::KFold;
      cfg.folds = 10;
    } else {
      throw ConfigError("--protocol must be kfold10 or loso");
    }
  }
  if (!f.labels.empty()) cfg.labels = parse_label_scheme(f.labels);
  if (!f.modalities.empty()) cfg.modalities = parse_modality_list(f.modalities);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.augment.seed = *f.seed;
    cfg.train.seed = *f.seed;
  }
  if (f.jobs) cfg.jobs = *f.jobs;
  if (!f.out.empty()) cfg.out_dir = f.out;
  cfg.validate();
  return cfg;
}

LabeledDataset prepared_data(const ExperimentConfig& cfg, const std::string& cache) {
  if (!cache.empty()) {
    LabeledDataset ds = read_window_cache(cache);
    if (ds.modalities != cfg.modalities) throw ConfigError("cache modalities differ from the configured set");
    ds.scheme = cfg.labels;
    for (const auto& ex : ds.examples)
      for (const auto& w : ex.parts)
        if (!w.preprocessed) throw ConfigError("cache holds raw windows; run preprocess first");
    return ds;
  }
  LabeledDataset ds = load_experiment_data(cfg);
  preprocess_dataset(ds, cfg);
  return ds;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw StateError("cannot write " + path.string());
  os << text;
}

struct CvArtifacts {
  eval::CvReport report;
  std::vector<fs::path> files;
};

CvArtifacts run_cv(ExperimentConfig cfg, const std::string& cache, const std::string& model_name, const fs::path& dir) {
  fs::create_directories(dir);
  const LabeledDataset ds = prepared_data(cfg, cache);
  const FoldPlan plan = make_folds(ds, cfg.protocol, cfg.seed, cfg.folds);
  eval::CvOptions opt;
  opt.val_fraction = cfg.val_fraction;
  opt.jobs = cfg.jobs;
  opt.precision = eval::precision_from_env();
  spdlog::info("{}: {} examples, {} folds ({})", model_name, ds.size(), plan.num_folds, to_string(plan.protocol));
  CvArtifacts a;
  a.report = eval::run_cross_validation(ds, plan, cfg.net_config(), cfg.train, cfg.augment, opt);
  a.report.config = cfg.to_json();
  const fs::path json = dir / "cv_report.json", summary = dir / "summary.csv", curves = dir / "curves.csv";
  write_text(json, a.report.to_json().dump(2) + "\n");
  write_text(summary, a.report.summary_csv(model_name));
  write_text(curves, a.report.curves_csv());
  a.files = {json, summary, curves};
  return a;
}

template <typename T>
std::vector<fs::path> train_single(const ExperimentConfig& cfg, const LabeledDataset& ds, const fs::path& dir,
                                   std::ostream& out) {
  // One split: fold 0 of the configured plan is the test set.
  const FoldPlan plan = make_folds(ds, cfg.protocol, cfg.seed, cfg.folds);
  const auto seeds = eval::fold_seeds(cfg.train.seed, cfg.augment.seed, 0);
  FoldSplit split = split_fold(ds, plan, 0, cfg.val_fraction, seeds.split);
  std::vector<ExampleKey> held;
  for (const auto& e : split.validation) held.push_back(e.key);
  for (const auto& e : split.test) held.push_back(e.key);
  TrainingPartition partition(std::move(split.train), std::move(held));
  const auto train_set = augment::augment_training_fold(partition, cfg.augment, RngStream(seeds.augment));

  model::Model<T> net(cfg.net_config(), seeds.model);
  train::TrainConfig tc = cfg.train;
  tc.seed = seeds.train;
  const auto log = train::train_model(net, train_set, split.validation, ds.scheme, tc);
  const auto ev = train::evaluate(net, split.test, ds.scheme);
  std::vector<int> truths;
  for (const auto& e : split.test) truths.push_back(map_label(e.rating, ds.scheme));
  const auto m = eval::compute_metrics(ev.predictions, truths, num_classes(ds.scheme));

  const fs::path log_csv = dir / "train_log.csv", ckpt = dir / "model.upn1", sidecar = dir / "model.json",
                 metrics = dir / "metrics.json";
  log.write_csv(log_csv);
  nn::save_checkpoint(ckpt, net.parameters());
  write_text(sidecar, nlohmann::json{{"net", to_json(net.config())}, {"seed", net.seed()}}.dump(2) + "\n");
  write_text(metrics, nlohmann::json{{"accuracy", m.accuracy},
                                     {"macro_f1", m.macro_f1},
                                     {"test_size", split.test.size()},
                                     {"best_epoch", log.best_epoch}}
                              .dump(2) +
                          "\n");
  fmt::print(out, "test accuracy {:.4f}  macro-F1 {:.4f}  ({} test windows, best epoch {})\n", m.accuracy,
             m.macro_f1, split.test.size(), log.best_epoch);
  return {log_csv, ckpt, sidecar, metrics};
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Physiological-signal cognitive load toolkit"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string ablate_preset, report_input;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset in the CSV directory layout");
  auto* prep = app.add_subcommand("preprocess", "filter and z-score windows into a binary cache");
  auto* trn = app.add_subcommand("train", "train and test on a single split");
  auto* cv = app.add_subcommand("cv", "cross-validation report");
  auto* ablate = app.add_subcommand("ablate", "cross-validation with an ablation preset applied");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every layer");
  auto* report = app.add_subcommand("report", "re-render a cv_report.json into CSV tables and curves");
  for (auto* c : {synth, prep, trn, cv, ablate}) add_common(c, flags);
  for (auto* c : {trn, cv, ablate}) c->add_option("--cache", flags.cache, "preprocessed window cache");
  ablate->add_option("preset", ablate_preset, "no-gru | no-aug | dsc | dsc-cbam | kernels:<list>")->required();
  report->add_option("input", report_input, "cv_report.json")->required()->check(CLI::ExistingFile);
  report->add_option("--out", flags.out, "output directory");

  std::vector<std::string> rev(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*grad) {
      bool ok = true;
      for (const auto& e : run_grad_suite()) {
        fmt::print(out, "{:<28} max rel error {:.3e}  (< {:.0e})  {} coords  {} kinked  {:.2f}s  {}\n", e.name,
                   e.max_rel_error, e.threshold, e.coords_checked, e.kinks, e.seconds, e.passed() ? "ok" : "FAIL");
        ok = ok && e.passed();
      }
      return ok ? 0 : 1;
    }
    if (*report) {
      std::ifstream is(report_input);
      const auto report_obj = eval::CvReport::from_json(nlohmann::json::parse(is));
      const fs::path dir = flags.out.empty() ? fs::path(report_input).parent_path() : fs::path(flags.out);
      if (!dir.empty()) fs::create_directories(dir);
      write_text(dir / "summary.csv", report_obj.summary_csv("UniPhyNet"));
      write_text(dir / "curves.csv", report_obj.curves_csv());
      out << report_obj.summary_csv("UniPhyNet");
      return 0;
    }

    ExperimentConfig cfg = resolve(flags);
    const eval::Precision precision = eval::precision_from_env();
    fs::create_directories(cfg.out_dir);
    std::vector<fs::path> artifacts;
    int code = 0;

    if (*synth) {
      if (!cfg.data_root.empty()) throw ConfigError("synth needs a synthetic [dataset] source");
      const fs::path dir = cfg.out_dir / "data";
      write_dataset(load_experiment_data(cfg), dir);
      for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file()) artifacts.push_back(entry.path());
      std::sort(artifacts.begin(), artifacts.end());
      fmt::print(out, "wrote {} files under {}\n", artifacts.size(), dir.string());
    } else if (*prep) {
      LabeledDataset ds = load_experiment_data(cfg);
      preprocess_dataset(ds, cfg);
      const fs::path cache = cfg.out_dir / "windows.upwc";
      write_window_cache(ds, cache);
      artifacts.push_back(cache);
      fmt::print(out, "{} preprocessed examples -> {}\n", ds.size(), cache.string());
    } else if (*trn) {
      const LabeledDataset ds = prepared_data(cfg, flags.cache);
      artifacts = precision == eval::Precision::F64 ? train_single<double>(cfg, ds, cfg.out_dir, out)
                                                    : train_single<float>(cfg, ds, cfg.out_dir, out);
    } else if (*cv || *ablate) {
      std::string name = "UniPhyNet";
      fs::path dir = cfg.out_dir;
      if (*ablate) {
        const auto preset = parse_ablation(ablate_preset);
        if (preset.kernels) {
          for (auto m : cfg.modalities) cfg.model.kernels[m] = *preset.kernels;
        }
        if (preset.use_gru) cfg.model.use_gru = *preset.use_gru;
        if (preset.block_kind) cfg.model.block_kind = *preset.block_kind;
        if (preset.disable_augmentation) cfg.augment.enabled = false;
        cfg.validate();
        name += "[" + preset.name + "]";
        std::string safe = preset.name;
        std::replace(safe.begin(), safe.end(), ':', '_');
        std::replace(safe.begin(), safe.end(), ',', '-');
        dir /= safe;
      }
      auto a = run_cv(cfg, flags.cache, name, dir);
      artifacts = a.files;
      out << a.report.summary_csv(name);
      if (a.report.has_failures) {
        err << "one or more folds failed; see cv_report.json\n";
        code = 1;
      }
      write_manifest(dir, args, cfg, artifacts, precision);
      return code;
    }
    write_manifest(cfg.out_dir, args, cfg, artifacts, precision);
    return code;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_command(int argc, char** argv) {
  return run_command(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace uniphynet::cli
