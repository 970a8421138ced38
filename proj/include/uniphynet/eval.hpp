#pragma once

#include "uniphynet/augment.hpp"
#include "uniphynet/dataset.hpp"
#include "uniphynet/model.hpp"
#include "uniphynet/train.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace uniphynet::eval {

struct ConfusionMatrix {
  Eigen::MatrixXi counts;  // rows = truth, cols = prediction

  int total() const { return counts.sum(); }
};

struct Metrics {
  double accuracy = 0;
  double macro_f1 = 0;
  ConfusionMatrix confusion;
};

// Macro-F1 averages per-class F1 over all C classes; a class with P + R = 0
// contributes 0.
Metrics compute_metrics(std::span<const int> predictions, std::span<const int> truths, int num_classes);

enum class Precision { F32, F64 };

// UNIPHYNET_PRECISION=f32|f64, defaulting to f32.
Precision precision_from_env();
std::string_view to_string(Precision p);

struct FoldResult {
  int fold = 0;
  int test_subject = -1;  // LOSO only
  bool failed = false;
  std::string error;
  std::size_t train_size = 0;       // after augmentation
  std::size_t validation_size = 0;
  std::size_t test_size = 0;
  Metrics metrics;
  train::TrainLog log;
};

struct CvReport {
  Protocol protocol = Protocol::KFold;
  int num_folds = 0;
  std::uint64_t seed = 0;
  std::vector<FoldResult> folds;  // ordered by fold index
  double accuracy_mean = 0, accuracy_std = 0;
  double f1_mean = 0, f1_std = 0;
  bool has_failures = false;
  nlohmann::json config;  // echo of the experiment configuration

  // Mean and sample standard deviation over the folds that completed.
  void aggregate();

  nlohmann::json to_json() const;
  static CvReport from_json(const nlohmann::json& j);
  // One row: model,modalities,labels,protocol,folds,accuracy_mean,accuracy_std,f1_mean,f1_std
  std::string summary_csv(const std::string& model_name) const;
  // Per-fold per-epoch curves: fold,epoch,train_loss,val_loss,val_acc,lr
  std::string curves_csv() const;
};

struct CvOptions {
  double val_fraction = 0.1;
  int jobs = 1;
  Precision precision = Precision::F32;
  // Sees every augmented copy the harness creates, tagged with its fold.
  std::function<void(int fold, const ExampleKey&, augment::Operator)> on_augment;
  // Sees each fold's partitions before training.
  std::function<void(int fold, const FoldSplit&)> on_split;
};

// Per fold: test = fold, validation carved from the rest, augmentation of the
// training partition only, fresh model, training, evaluation in eval mode.
// Fold failures are recorded and do not stop the other folds. Windows must be
// preprocessed.
CvReport run_cross_validation(const LabeledDataset& ds, const FoldPlan& plan, const NetConfig& net,
                              const train::TrainConfig& train_cfg, const augment::AugmentPolicy& policy,
                              const CvOptions& options = {});

// Seeds a fold derives from the run seed; exposed so callers can reproduce a
// single fold.
struct FoldSeeds {
  std::uint64_t split, model, augment, train;
};
FoldSeeds fold_seeds(std::uint64_t run_seed, std::uint64_t augment_seed, int fold);

}  // namespace uniphynet::eval
