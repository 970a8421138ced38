#pragma once

#include "uniphynet/model.hpp"

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace uniphynet::train {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double plateau_factor = 0.5;
  int plateau_patience = 15;
  double plateau_threshold = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

template <typename T>
struct AdamState {
  std::vector<nn::Vec<T>> m, v;
  long step = 0;
};

// One decoupled-weight-decay Adam update of every parameter that holds a
// gradient: w <- w - lr wd w - lr m_hat / (sqrt(v_hat) + eps).
// Throws NumericError on a non-finite gradient, leaving parameters untouched.
template <typename T>
void adamw_step(std::vector<nn::Parameter<T>>& params, AdamState<T>& state, const TrainConfig& cfg, double lr);

// Halves (by `factor`) the rate after `patience` consecutive epochs without a
// strict improvement of at least `threshold` in the monitored loss.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, double threshold);
  explicit PlateauScheduler(const TrainConfig& cfg)
      : PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold) {}

  // Returns true when the rate was reduced.
  bool step(double loss);
  double lr() const { return lr_; }
  int reductions() const { return reductions_; }
  int bad_epochs() const { return bad_; }

 private:
  double lr_, factor_, threshold_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
  int reductions_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_acc = 0;
  double lr = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0;
  int best_epoch = -1;

  std::string csv() const;  // epoch,train_loss,val_loss,val_acc,lr
  void write_csv(const std::filesystem::path& path) const;
};

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
  std::vector<int> predictions;
};

template <typename T>
Evaluation evaluate(const model::Model<T>& model, const std::vector<Example>& examples, LabelScheme scheme,
                    std::size_t batch_size = 64);

// Seeded mini-batch training on an already augmented training set. After the
// last epoch the model holds the parameters (and batch-norm buffers) of the
// epoch with the lowest validation loss. An empty validation set makes the
// training loss the monitored quantity.
template <typename T>
TrainLog train_model(model::Model<T>& model, const std::vector<Example>& train, const std::vector<Example>& validation,
                     LabelScheme scheme, const TrainConfig& cfg);

}  // namespace uniphynet::train
