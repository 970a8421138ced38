#include "uniphynet/train.hpp"

#include "uniphynet/errors.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace uniphynet::train {

using model::Model;
using nn::Tensor;

void TrainConfig::validate() const {
  if (!(lr > 0) || weight_decay < 0 || batch_size < 1 || epochs < 1)
    throw ConfigError("training needs lr > 0, weight_decay >= 0, batch_size >= 1, epochs >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0))
    throw ConfigError("Adam betas must be in [0, 1) and eps positive");
  if (!(plateau_factor > 0 && plateau_factor < 1) || plateau_patience < 1 || plateau_threshold < 0)
    throw ConfigError("plateau scheduler needs factor in (0, 1) and patience >= 1");
}

template <typename T>
void adamw_step(std::vector<nn::Parameter<T>>& params, AdamState<T>& state, const TrainConfig& cfg, double lr) {
  for (const auto& p : params)
    if (p.tensor.has_grad() && !p.tensor.grad().allFinite())
      throw NumericError("non-finite gradient in " + p.name);
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.push_back(nn::Vec<T>::Zero(p.tensor.numel()));
      state.v.push_back(nn::Vec<T>::Zero(p.tensor.numel()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (!t.has_grad()) continue;
    const auto& g = t.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    auto& w = t.value();
    w -= static_cast<T>(lr * cfg.weight_decay) * w;
    w.array() -= static_cast<T>(lr) * (m.array() / static_cast<T>(c1)) /
                 ((v.array() / static_cast<T>(c2)).sqrt() + static_cast<T>(cfg.eps));
  }
}

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, double threshold)
    : lr_(lr), factor_(factor), threshold_(threshold), patience_(patience) {}

bool PlateauScheduler::step(double loss) {
  if (loss < best_ - threshold_) {
    best_ = loss;
    bad_ = 0;
    return false;
  }
  if (++bad_ < patience_) return false;
  lr_ *= factor_;
  bad_ = 0;
  ++reductions_;
  return true;
}

std::string TrainLog::csv() const {
  std::string out = "epoch,train_loss,val_loss,val_acc,lr\n";
  for (const auto& e : epochs)
    out += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr);
  return out;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw StateError("cannot write " + path.string());
  os << csv();
}

namespace {
std::vector<int> labels_of(const std::vector<Example>& examples, std::span<const std::size_t> idx, LabelScheme scheme) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(map_label(examples[i].rating, scheme));
  return out;
}
}  // namespace

template <typename T>
Evaluation evaluate(const Model<T>& model, const std::vector<Example>& examples, LabelScheme scheme,
                    std::size_t batch_size) {
  Evaluation ev;
  if (examples.empty()) return ev;
  nn::NoGradGuard no_grad;
  double loss_sum = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
    const auto targets = labels_of(examples, idx, scheme);
    Tensor<T> logits = model.forward(model::make_batch<T>(examples, idx), nn::Mode::Eval);
    loss_sum += static_cast<double>(nn::softmax_cross_entropy<T>(logits, targets).item()) * idx.size();
    const auto c = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      nn::Index best;
      logits.value().segment(static_cast<nn::Index>(b) * c, c).maxCoeff(&best);
      ev.predictions.push_back(static_cast<int>(best));
      if (best == targets[b]) ++correct;
    }
  }
  ev.loss = loss_sum / static_cast<double>(examples.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
  return ev;
}

template <typename T>
TrainLog train_model(Model<T>& model, const std::vector<Example>& train, const std::vector<Example>& validation,
                     LabelScheme scheme, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  const auto start_time = std::chrono::steady_clock::now();
  const RngStream root = RngStream(cfg.seed).split("train");
  auto& params = model.parameters();
  AdamState<T> adam;
  PlateauScheduler scheduler(cfg);
  TrainLog log;
  double best_loss = std::numeric_limits<double>::infinity();
  typename Model<T>::Snapshot best;

  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle = root.split("shuffle").split(static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle);
    const double lr = scheduler.lr();
    double loss_sum = 0;
    std::uint64_t batch_no = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::span<const std::size_t> idx(order.data() + s,
                                             std::min(order.size() - s, static_cast<std::size_t>(cfg.batch_size)));
      RngStream drop = root.split("dropout").split(static_cast<std::uint64_t>(epoch)).split(batch_no);
      for (auto& p : params) p.tensor.zero_grad();
      const auto targets = labels_of(train, idx, scheme);
      Tensor<T> loss = nn::softmax_cross_entropy<T>(
          model.forward(model::make_batch<T>(train, idx), nn::Mode::Train, &drop), targets);
      const double l = static_cast<double>(loss.item());
      if (!std::isfinite(l))
        throw NumericError(fmt::format("non-finite training loss at epoch {} batch {}", epoch + 1, batch_no));
      loss.backward();
      adamw_step(params, adam, cfg, lr);
      loss_sum += l * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.lr = lr;
    if (validation.empty()) {
      rec.val_loss = rec.train_loss;
      rec.val_acc = std::numeric_limits<double>::quiet_NaN();
    } else {
      const auto ev = evaluate(model, validation, scheme);
      rec.val_loss = ev.loss;
      rec.val_acc = ev.accuracy;
    }
    if (!std::isfinite(rec.val_loss)) throw NumericError(fmt::format("non-finite validation loss at epoch {}", rec.epoch));
    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      best = model.snapshot();
      log.best_epoch = rec.epoch;
    }
    scheduler.step(rec.val_loss);
    spdlog::debug("epoch {} train {:.4f} val {:.4f} acc {:.3f} lr {:g}", rec.epoch, rec.train_loss, rec.val_loss,
                  rec.val_acc, rec.lr);
    log.epochs.push_back(rec);
  }
  model.restore(best);
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return log;
}

template void adamw_step<float>(std::vector<nn::Parameter<float>>&, AdamState<float>&, const TrainConfig&, double);
template void adamw_step<double>(std::vector<nn::Parameter<double>>&, AdamState<double>&, const TrainConfig&, double);
template Evaluation evaluate<float>(const Model<float>&, const std::vector<Example>&, LabelScheme, std::size_t);
template Evaluation evaluate<double>(const Model<double>&, const std::vector<Example>&, LabelScheme, std::size_t);
template TrainLog train_model<float>(Model<float>&, const std::vector<Example>&, const std::vector<Example>&,
                                     LabelScheme, const TrainConfig&);
template TrainLog train_model<double>(Model<double>&, const std::vector<Example>&, const std::vector<Example>&,
                                      LabelScheme, const TrainConfig&);

}  // namespace uniphynet::train
