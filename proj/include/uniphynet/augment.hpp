#pragma once

#include "uniphynet/dataset.hpp"
#include "uniphynet/rng.hpp"

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <optional>

namespace uniphynet::augment {

struct AugmentPolicy {
  bool enabled = true;
  double noise_sigma_rel = 0.02;
  double max_warp = 0.10;  // fraction of the window length
  int warp_knots = 4;
  double scale_low = 0.8;
  double scale_high = 1.2;
  int copies_per_window = 1;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

enum class Operator { GaussianNoise = 0, TimeWarp = 1, AmplitudeScale = 2 };

Window add_gaussian_noise(const Window& w, double sigma_rel, RngStream& rng);

// Warp map through (0, 0), (T-1, T-1) and `knots` equally spaced interior
// control points displaced by U[-max_warp T, max_warp T]. Returns nullopt
// when the spline is not strictly increasing.
std::optional<Eigen::VectorXd> draw_warp_map(Eigen::Index length, double max_warp, int knots, RngStream& rng);

// Resamples every channel at tau by linear interpolation.
Signal resample_linear(const Signal& data, const Eigen::VectorXd& tau);

// Redraws a non-monotone warp up to 20 times before giving up and returning
// the input unchanged.
Window time_warp(const Window& w, double max_warp, int knots, RngStream& rng);

Window amplitude_scale(const Window& w, double low, double high, RngStream& rng);
Window amplitude_scale_by(const Window& w, double factor);

// Called once per emitted augmented copy; used by the CV harness to audit
// which examples went through augmentation.
using AugmentObserver = std::function<void(const ExampleKey&, Operator)>;

// Original examples followed by `copies_per_window` augmented copies of each,
// each copy made by one operator chosen uniformly from the three. Per-example
// RNG streams are split from `rng` by example index and copy number.
std::vector<Example> augment_training_fold(const TrainingPartition& train, const AugmentPolicy& policy,
                                           const RngStream& rng, const AugmentObserver& observer = {});

}  // namespace uniphynet::augment
