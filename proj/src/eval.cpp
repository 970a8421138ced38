#include "uniphynet/eval.hpp"

#include "uniphynet/errors.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace uniphynet::eval {

Metrics compute_metrics(std::span<const int> predictions, std::span<const int> truths, int num_classes) {
  if (predictions.empty()) throw ValidationError("no predictions to score");
  if (predictions.size() != truths.size()) throw ValidationError("prediction and truth counts differ");
  if (num_classes < 1) throw ValidationError("need at least one class");
  Metrics m;
  m.confusion.counts = Eigen::MatrixXi::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int t = truths[i], p = predictions[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes)
      throw ValidationError(fmt::format("label outside [0, {}) at position {}", num_classes, i));
    ++m.confusion.counts(t, p);
  }
  const auto& cm = m.confusion.counts;
  m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(truths.size());
  double f1_sum = 0;
  for (int c = 0; c < num_classes; ++c) {
    const double tp = cm(c, c);
    const double predicted = cm.col(c).sum(), actual = cm.row(c).sum();
    const double precision = predicted > 0 ? tp / predicted : 0.0;
    const double recall = actual > 0 ? tp / actual : 0.0;
    f1_sum += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  m.macro_f1 = f1_sum / num_classes;
  return m;
}

Precision precision_from_env() {
  const char* v = std::getenv("UNIPHYNET_PRECISION");
  if (!v || std::string_view(v).empty() || std::string_view(v) == "f32") return Precision::F32;
  if (std::string_view(v) == "f64") return Precision::F64;
  throw ConfigError(fmt::format("UNIPHYNET_PRECISION must be f32 or f64, got '{}'", v));
}

std::string_view to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

void CvReport::aggregate() {
  std::vector<double> acc, f1;
  has_failures = false;
  for (const auto& f : folds) {
    if (f.failed) {
      has_failures = true;
      continue;
    }
    acc.push_back(f.metrics.accuracy);
    f1.push_back(f.metrics.macro_f1);
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = sd = std::numeric_limits<double>::quiet_NaN();
    if (v.empty()) return;
    double s = 0;
    for (double x : v) s += x;
    mean = s / static_cast<double>(v.size());
    double sq = 0;
    for (double x : v) sq += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(sq / static_cast<double>(v.size() - 1)) : 0.0;
  };
  stats(acc, accuracy_mean, accuracy_std);
  stats(f1, f1_mean, f1_std);
}

namespace {
nlohmann::json matrix_json(const Eigen::MatrixXi& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<int> row(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXi matrix_from_json(const nlohmann::json& j) {
  const auto n = static_cast<Eigen::Index>(j.size());
  Eigen::MatrixXi m(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) m(r, c) = j.at(r).at(c).get<int>();
  return m;
}

// NaN is not representable in JSON; it travels as null.
nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
double num_back(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}
}  // namespace

nlohmann::json CvReport::to_json() const {
  nlohmann::json fj = nlohmann::json::array();
  for (const auto& f : folds) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& e : f.log.epochs)
      curve.push_back({{"epoch", e.epoch}, {"train_loss", num(e.train_loss)}, {"val_loss", num(e.val_loss)},
                       {"val_acc", num(e.val_acc)}, {"lr", e.lr}});
    nlohmann::json entry = {{"fold", f.fold},
                            {"failed", f.failed},
                            {"train_size", f.train_size},
                            {"validation_size", f.validation_size},
                            {"test_size", f.test_size},
                            {"best_epoch", f.log.best_epoch},
                            {"epochs", curve}};
    if (f.test_subject >= 0) entry["test_subject"] = f.test_subject;
    if (f.failed) {
      entry["error"] = f.error;
    } else {
      entry["accuracy"] = f.metrics.accuracy;
      entry["macro_f1"] = f.metrics.macro_f1;
      entry["confusion"] = matrix_json(f.metrics.confusion.counts);
    }
    fj.push_back(std::move(entry));
  }
  return {{"protocol", uniphynet::to_string(protocol)},
          {"num_folds", num_folds},
          {"seed", seed},
          {"f1_averaging", "macro"},
          {"std", "sample"},
          {"accuracy_mean", num(accuracy_mean)},
          {"accuracy_std", num(accuracy_std)},
          {"f1_mean", num(f1_mean)},
          {"f1_std", num(f1_std)},
          {"has_failures", has_failures},
          {"folds", fj},
          {"config", config}};
}

CvReport CvReport::from_json(const nlohmann::json& j) {
  try {
    CvReport r;
    r.protocol = j.at("protocol").get<std::string>() == "loso" ? Protocol::LOSO : Protocol::KFold;
    r.num_folds = j.at("num_folds");
    r.seed = j.at("seed");
    r.config = j.value("config", nlohmann::json::object());
    for (const auto& fj : j.at("folds")) {
      FoldResult f;
      f.fold = fj.at("fold");
      f.failed = fj.at("failed");
      f.train_size = fj.at("train_size");
      f.validation_size = fj.at("validation_size");
      f.test_size = fj.at("test_size");
      f.test_subject = fj.value("test_subject", -1);
      f.log.best_epoch = fj.value("best_epoch", -1);
      for (const auto& e : fj.at("epochs"))
        f.log.epochs.push_back({e.at("epoch").get<int>(), num_back(e.at("train_loss")), num_back(e.at("val_loss")),
                                num_back(e.at("val_acc")), e.at("lr").get<double>()});
      if (f.failed) {
        f.error = fj.value("error", "");
      } else {
        f.metrics.accuracy = fj.at("accuracy");
        f.metrics.macro_f1 = fj.at("macro_f1");
        f.metrics.confusion.counts = matrix_from_json(fj.at("confusion"));
      }
      r.folds.push_back(std::move(f));
    }
    r.aggregate();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("CV report: ") + e.what());
  }
}

std::string CvReport::summary_csv(const std::string& model_name) const {
  std::string modalities, labels;
  if (config.contains("dataset")) {
    modalities = config["dataset"].value("modalities", "");
    labels = config["dataset"].value("labels", "");
  }
  std::size_t completed = 0;
  for (const auto& f : folds) completed += f.failed ? 0 : 1;
  return fmt::format(
      "model,modalities,labels,protocol,folds,accuracy_mean,accuracy_std,f1_mean,f1_std\n"
      "{},\"{}\",{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n",
      model_name, modalities, labels, uniphynet::to_string(protocol), completed, accuracy_mean, accuracy_std, f1_mean,
      f1_std);
}

std::string CvReport::curves_csv() const {
  std::string out = "fold,epoch,train_loss,val_loss,val_acc,lr\n";
  for (const auto& f : folds)
    for (const auto& e : f.log.epochs)
      out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", f.fold, e.epoch, e.train_loss, e.val_loss,
                         e.val_acc, e.lr);
  return out;
}

FoldSeeds fold_seeds(std::uint64_t run_seed, std::uint64_t augment_seed, int fold) {
  const auto f = static_cast<std::uint64_t>(fold);
  const RngStream root(run_seed);
  return {root.split("split").key(), root.split("model").split(f).key(),
          RngStream(augment_seed).split("augment").split(f).key(), root.split("train").split(f).key()};
}

namespace {

std::vector<ExampleKey> keys_of(const std::vector<Example>& a, const std::vector<Example>& b) {
  std::vector<ExampleKey> out;
  for (const auto& e : a) out.push_back(e.key);
  for (const auto& e : b) out.push_back(e.key);
  return out;
}

template <typename T>
FoldResult run_fold(const LabeledDataset& ds, const FoldPlan& plan, int fold, const NetConfig& net,
                    const train::TrainConfig& train_cfg, const augment::AugmentPolicy& policy,
                    const CvOptions& options) {
  FoldResult r;
  r.fold = fold;
  if (plan.protocol == Protocol::LOSO) r.test_subject = plan.fold_subject.at(static_cast<std::size_t>(fold));
  const auto seeds = fold_seeds(train_cfg.seed, policy.seed, fold);
  FoldSplit split = split_fold(ds, plan, fold, options.val_fraction, seeds.split);
  if (options.on_split) options.on_split(fold, split);

  TrainingPartition partition(std::move(split.train), keys_of(split.validation, split.test));
  augment::AugmentObserver observer;
  if (options.on_augment)
    observer = [&](const ExampleKey& key, augment::Operator op) { options.on_augment(fold, key, op); };
  const auto train_set = augment::augment_training_fold(partition, policy, RngStream(seeds.augment), observer);

  r.train_size = train_set.size();
  r.validation_size = split.validation.size();
  r.test_size = split.test.size();

  model::Model<T> model(net, seeds.model);
  train::TrainConfig cfg = train_cfg;
  cfg.seed = seeds.train;
  r.log = train::train_model(model, train_set, split.validation, ds.scheme, cfg);

  const auto ev = train::evaluate(model, split.test, ds.scheme);
  std::vector<int> truths;
  for (const auto& ex : split.test) truths.push_back(map_label(ex.rating, ds.scheme));
  r.metrics = compute_metrics(ev.predictions, truths, num_classes(ds.scheme));
  return r;
}

}  // namespace

CvReport run_cross_validation(const LabeledDataset& ds, const FoldPlan& plan, const NetConfig& net,
                              const train::TrainConfig& train_cfg, const augment::AugmentPolicy& policy,
                              const CvOptions& options) {
  net.validate();
  train_cfg.validate();
  policy.validate();
  if (net.num_classes != num_classes(ds.scheme)) throw ConfigError("network class count does not match label scheme");
  if (net.modalities.size() != ds.modalities.size()) throw ConfigError("network and dataset modality sets differ");
  for (std::size_t i = 0; i < ds.modalities.size(); ++i)
    if (net.modalities[i].modality != ds.modalities[i]) throw ConfigError("network and dataset modality order differ");
  for (const auto& ex : ds.examples)
    for (const auto& w : ex.parts)
      if (!w.preprocessed) throw StateError("cross-validation expects preprocessed windows");

  CvReport report;
  report.protocol = plan.protocol;
  report.num_folds = plan.num_folds;
  report.seed = train_cfg.seed;
  report.folds.resize(static_cast<std::size_t>(plan.num_folds));

  std::atomic<int> next{0};
  std::mutex callback_mutex;
  CvOptions guarded = options;
  // User callbacks may not be thread safe; serialize them.
  if (options.on_augment)
    guarded.on_augment = [&](int f, const ExampleKey& k, augment::Operator op) {
      std::lock_guard lock(callback_mutex);
      options.on_augment(f, k, op);
    };
  if (options.on_split)
    guarded.on_split = [&](int f, const FoldSplit& s) {
      std::lock_guard lock(callback_mutex);
      options.on_split(f, s);
    };

  auto worker = [&] {
    for (int fold; (fold = next.fetch_add(1)) < plan.num_folds;) {
      FoldResult& slot = report.folds[static_cast<std::size_t>(fold)];
      try {
        slot = options.precision == Precision::F64
                   ? run_fold<double>(ds, plan, fold, net, train_cfg, policy, guarded)
                   : run_fold<float>(ds, plan, fold, net, train_cfg, policy, guarded);
        spdlog::info("fold {}/{}: accuracy {:.4f} macro-F1 {:.4f}", fold + 1, plan.num_folds, slot.metrics.accuracy,
                     slot.metrics.macro_f1);
      } catch (const std::exception& e) {
        slot = FoldResult{};
        slot.fold = fold;
        if (plan.protocol == Protocol::LOSO) slot.test_subject = plan.fold_subject.at(static_cast<std::size_t>(fold));
        slot.failed = true;
        slot.error = e.what();
        spdlog::error("fold {} failed: {}", fold + 1, e.what());
      }
    }
  };
  const int jobs = std::clamp(options.jobs, 1, std::max(1, plan.num_folds));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  report.aggregate();
  return report;
}

}  // namespace uniphynet::eval
