#include "uniphynet/dsp.hpp"
#include "uniphynet/errors.hpp"
#include "uniphynet/eval.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <mutex>
#include <set>

using namespace uniphynet;
using namespace uniphynet::eval;
using Catch::Matchers::WithinAbs;

namespace {

LabeledDataset small_dataset(int subjects, int windows_per_trial, std::uint64_t seed) {
  SynthSpec spec;
  spec.subjects = subjects;
  spec.trials = 1;
  spec.windows_per_trial = windows_per_trial;
  spec.window_seconds = 2.5;
  auto ds = generate_synthetic(spec, seed);
  for (auto& ex : ds.examples)
    for (auto& w : ex.parts) w = dsp::preprocess(w);
  return ds;
}

train::TrainConfig quick_train() {
  train::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("metrics worked examples", "[eval][metrics]") {
  const std::vector<int> truth{0, 1, 0, 1}, perfect{0, 1, 0, 1}, zeros{0, 0, 0, 0};
  auto m = compute_metrics(perfect, truth, 2);
  CHECK(m.accuracy == 1.0);
  CHECK(m.macro_f1 == 1.0);

  // Class 0: precision 1/2, recall 1, F1 2/3; class 1: F1 0.
  auto z = compute_metrics(zeros, truth, 2);
  CHECK(z.accuracy == 0.5);
  CHECK_THAT(z.macro_f1, WithinAbs(1.0 / 3.0, 1e-4));

  // Only class 1 present and always right: its F1 is 1, the absent classes
  // count as 0 under the zero rule.
  const std::vector<int> ones{1, 1, 1};
  auto single = compute_metrics(ones, ones, 3);
  CHECK(single.accuracy == 1.0);
  CHECK_THAT(single.macro_f1, WithinAbs(1.0 / 3.0, 1e-12));

  CHECK_THROWS_AS(compute_metrics(std::vector<int>{}, std::vector<int>{}, 2), ValidationError);
  CHECK_THROWS_AS(compute_metrics(std::vector<int>{2}, std::vector<int>{0}, 2), ValidationError);
}

TEST_CASE("confusion matrix rows and trace", "[eval][metrics][property]") {
  RngStream rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int classes = 2 + static_cast<int>(rng.below(2));
    std::vector<int> pred, truth;
    for (int i = 0; i < 40; ++i) {
      pred.push_back(static_cast<int>(rng.below(classes)));
      truth.push_back(static_cast<int>(rng.below(classes)));
    }
    auto m = compute_metrics(pred, truth, classes);
    CHECK(m.confusion.total() == 40);
    for (int c = 0; c < classes; ++c)
      CHECK(m.confusion.counts.row(c).sum() == std::count(truth.begin(), truth.end(), c));
    CHECK(m.accuracy == static_cast<double>(m.confusion.counts.trace()) / 40.0);
    CHECK(m.macro_f1 >= 0.0);
    CHECK(m.macro_f1 <= 1.0);
  }
}

TEST_CASE("aggregate uses completed folds only", "[eval][report]") {
  CvReport r;
  for (double acc : {0.8, 0.9, 1.0}) {
    FoldResult f;
    f.metrics.accuracy = acc;
    f.metrics.macro_f1 = acc - 0.1;
    r.folds.push_back(f);
  }
  FoldResult failed;
  failed.failed = true;
  r.folds.push_back(failed);
  r.aggregate();
  CHECK(r.has_failures);
  CHECK_THAT(r.accuracy_mean, WithinAbs(0.9, 1e-12));
  CHECK_THAT(r.accuracy_std, WithinAbs(0.1, 1e-12));  // sample std of 0.8, 0.9, 1.0
  CHECK_THAT(r.f1_mean, WithinAbs(0.8, 1e-12));
}

TEST_CASE("fold seeds are distinct per fold and per purpose", "[eval][seeds]") {
  std::set<std::uint64_t> seen;
  for (int f = 0; f < 10; ++f) {
    const auto s = fold_seeds(7, 7, f);
    seen.insert(s.model);
    seen.insert(s.augment);
    seen.insert(s.train);
  }
  CHECK(seen.size() == 30);
  CHECK(fold_seeds(7, 7, 3).model == fold_seeds(7, 7, 3).model);
  CHECK(fold_seeds(7, 8, 3).augment != fold_seeds(7, 7, 3).augment);
}

TEST_CASE("LOSO cross-validation on six subjects", "[eval][cv]") {
  const auto ds = small_dataset(6, 8, 3);
  const auto plan = make_folds(ds, Protocol::LOSO, 11);
  const std::vector<Modality> eeg{Modality::EEG};
  const auto net = NetConfig::tiny(eeg, 2);
  augment::AugmentPolicy policy;

  std::map<int, std::set<ExampleKey>> held;  // fold -> validation + test keys
  std::map<int, std::set<int>> train_subjects;
  std::vector<std::string> violations;
  std::mutex m;
  CvOptions opt;
  opt.jobs = 2;
  opt.on_split = [&](int fold, const FoldSplit& s) {
    std::lock_guard lock(m);
    for (const auto& e : s.validation) held[fold].insert(e.key);
    for (const auto& e : s.test) held[fold].insert(e.key);
    for (const auto& e : s.train) train_subjects[fold].insert(e.key.subject_id);
  };
  opt.on_augment = [&](int fold, const ExampleKey& k, augment::Operator) {
    std::lock_guard lock(m);
    if (held[fold].count(k)) violations.push_back("fold " + std::to_string(fold));
  };

  const auto report = run_cross_validation(ds, plan, net, quick_train(), policy, opt);
  REQUIRE(report.folds.size() == 6);
  CHECK_FALSE(report.has_failures);
  std::set<int> subjects;
  for (const auto& f : report.folds) {
    INFO("fold " << f.fold);
    CHECK_FALSE(f.failed);
    subjects.insert(f.test_subject);
    CHECK(train_subjects[f.fold].count(f.test_subject) == 0);
    CHECK(f.test_size == 8);
    CHECK(f.log.epochs.size() == 2);
  }
  CHECK(subjects.size() == 6);
  CHECK(violations.empty());

  SECTION("rerun is bit-exact and parallelism does not matter") {
    CvOptions serial;
    const auto again = run_cross_validation(ds, plan, net, quick_train(), policy, serial);
    CHECK(again.to_json().dump() == report.to_json().dump());
  }

  SECTION("JSON round trip keeps the report") {
    const auto back = CvReport::from_json(report.to_json());
    CHECK(back.to_json().dump() == report.to_json().dump());
    CHECK(back.summary_csv("UniPhyNet") == report.summary_csv("UniPhyNet"));
    CHECK(report.curves_csv().rfind("fold,epoch,train_loss,val_loss,val_acc,lr\n", 0) == 0);
  }
}

TEST_CASE("a failing fold is recorded and the rest continue", "[eval][cv][errors]") {
  auto ds = small_dataset(3, 6, 4);
  // NaN samples for subject 0 make every fold that trains on it fail.
  for (auto& ex : ds.examples)
    if (ex.key.subject_id == 0) ex.parts[0].data(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto plan = make_folds(ds, Protocol::LOSO, 1);
  const std::vector<Modality> eeg{Modality::EEG};
  augment::AugmentPolicy policy;
  policy.enabled = false;
  const auto report = run_cross_validation(ds, plan, NetConfig::tiny(eeg, 2), quick_train(), policy);
  CHECK(report.has_failures);
  int failed = 0;
  for (const auto& f : report.folds) {
    if (f.failed) {
      ++failed;
      CHECK_FALSE(f.error.empty());
    } else {
      CHECK(f.test_subject == 0);
    }
  }
  CHECK(failed == 2);
}

TEST_CASE("raw windows are rejected", "[eval][cv][errors]") {
  SynthSpec spec;
  spec.subjects = 2;
  spec.trials = 1;
  spec.windows_per_trial = 4;
  spec.window_seconds = 2.5;
  const auto ds = generate_synthetic(spec, 1);
  const auto plan = make_folds(ds, Protocol::LOSO, 1);
  const std::vector<Modality> eeg{Modality::EEG};
  CHECK_THROWS_AS(run_cross_validation(ds, plan, NetConfig::tiny(eeg, 2), quick_train(), {}), StateError);
}
