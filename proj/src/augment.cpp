#include "uniphynet/augment.hpp"

#include "uniphynet/errors.hpp"

#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <vector>

namespace uniphynet::augment {

namespace {
constexpr int kMaxWarpAttempts = 20;

void require_preprocessed(const Window& w) {
  if (!w.preprocessed) throw StateError("augmentation expects preprocessed windows");
}
}  // namespace

void AugmentPolicy::validate() const {
  if (noise_sigma_rel < 0.0) throw ConfigError("noise_sigma_rel must be non-negative");
  if (max_warp < 0.0 || max_warp >= 0.5) throw ConfigError("max_warp must be in [0, 0.5)");
  if (warp_knots < 1) throw ConfigError("warp_knots must be at least 1");
  if (!(scale_low > 0.0) || scale_low > scale_high) throw ConfigError("need 0 < scale_low <= scale_high");
  if (copies_per_window < 0) throw ConfigError("copies_per_window must be non-negative");
}

Window add_gaussian_noise(const Window& w, double sigma_rel, RngStream& rng) {
  if (sigma_rel < 0.0) throw ConfigError("noise sigma must be non-negative");
  require_preprocessed(w);
  Window out = w;
  if (sigma_rel == 0.0) return out;
  const auto n = static_cast<double>(w.samples());
  for (Eigen::Index c = 0; c < w.channels(); ++c) {
    auto row = out.data.row(c);
    const double mean = row.mean();
    const double sd = std::sqrt((row.array() - mean).square().sum() / n);
    const double sigma = sigma_rel * sd;
    for (Eigen::Index i = 0; i < row.size(); ++i) row[i] += rng.normal(0.0, sigma);
  }
  return out;
}

std::optional<Eigen::VectorXd> draw_warp_map(Eigen::Index length, double max_warp, int knots, RngStream& rng) {
  if (knots < 1) throw ConfigError("time warp needs at least one knot");
  if (length < 2) return Eigen::VectorXd::LinSpaced(length, 0.0, static_cast<double>(length - 1));
  const double last = static_cast<double>(length - 1);
  const double step = last / (knots + 1);
  const double reach = max_warp * static_cast<double>(length);

  std::vector<double> ordinates(static_cast<std::size_t>(knots) + 2);
  ordinates.front() = 0.0;
  ordinates.back() = last;
  for (int k = 1; k <= knots; ++k) ordinates[k] = k * step + rng.uniform(-reach, reach);

  const double left_slope = (ordinates[1] - ordinates[0]) / step;
  const double right_slope = (ordinates[knots + 1] - ordinates[knots]) / step;
  const boost::math::interpolators::cardinal_cubic_b_spline<double> spline(
      ordinates.begin(), ordinates.end(), 0.0, step, left_slope, right_slope);

  Eigen::VectorXd tau(length);
  for (Eigen::Index i = 0; i < length; ++i) tau[i] = spline(static_cast<double>(i));
  tau[0] = 0.0;
  tau[length - 1] = last;
  for (Eigen::Index i = 1; i < length; ++i)
    if (!(tau[i] > tau[i - 1])) return std::nullopt;
  return tau;
}

Signal resample_linear(const Signal& data, const Eigen::VectorXd& tau) {
  const Eigen::Index n = data.cols();
  Signal out(data.rows(), tau.size());
  for (Eigen::Index i = 0; i < tau.size(); ++i) {
    const double t = std::clamp(tau[i], 0.0, static_cast<double>(n - 1));
    const auto lo = std::min(static_cast<Eigen::Index>(std::floor(t)), n - 1);
    const Eigen::Index hi = std::min(lo + 1, n - 1);
    const double frac = t - static_cast<double>(lo);
    out.col(i) = (1.0 - frac) * data.col(lo) + frac * data.col(hi);
  }
  return out;
}

Window time_warp(const Window& w, double max_warp, int knots, RngStream& rng) {
  if (knots < 1) throw ConfigError("time warp needs at least one knot");
  require_preprocessed(w);
  if (max_warp == 0.0) return w;
  for (int attempt = 0; attempt < kMaxWarpAttempts; ++attempt) {
    if (auto tau = draw_warp_map(w.samples(), max_warp, knots, rng)) {
      Window out = w;
      out.data = resample_linear(w.data, *tau);
      return out;
    }
  }
  spdlog::warn("time warp: no monotone map after {} draws, window left unchanged", kMaxWarpAttempts);
  return w;
}

Window amplitude_scale_by(const Window& w, double factor) {
  require_preprocessed(w);
  Window out = w;
  out.data *= factor;
  return out;
}

Window amplitude_scale(const Window& w, double low, double high, RngStream& rng) {
  return amplitude_scale_by(w, rng.uniform(low, high));
}

std::vector<Example> augment_training_fold(const TrainingPartition& train, const AugmentPolicy& policy,
                                           const RngStream& rng, const AugmentObserver& observer) {
  policy.validate();
  const auto& originals = train.examples();
  std::vector<Example> out;
  out.reserve(originals.size() * (1 + static_cast<std::size_t>(policy.copies_per_window)));
  for (const auto& ex : originals) out.push_back(ex);
  if (!policy.enabled) return out;

  for (std::size_t i = 0; i < originals.size(); ++i) {
    for (int copy = 0; copy < policy.copies_per_window; ++copy) {
      RngStream local = rng.split(i).split(static_cast<std::uint64_t>(copy));
      const auto op = static_cast<Operator>(local.below(3));
      Example aug = originals[i];
      for (auto& part : aug.parts) {
        switch (op) {
          case Operator::GaussianNoise: part = add_gaussian_noise(part, policy.noise_sigma_rel, local); break;
          case Operator::TimeWarp: part = time_warp(part, policy.max_warp, policy.warp_knots, local); break;
          case Operator::AmplitudeScale:
            part = amplitude_scale(part, policy.scale_low, policy.scale_high, local);
            break;
        }
      }
      if (observer) observer(aug.key, op);
      out.push_back(std::move(aug));
    }
  }
  return out;
}

}  // namespace uniphynet::augment
