#include "uniphynet/augment.hpp"
#include "uniphynet/errors.hpp"

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace uniphynet;
using namespace uniphynet::augment;
using Catch::Matchers::WithinAbs;

namespace {

Window random_window(int channels, Eigen::Index n, std::uint64_t seed) {
  RngStream rng(seed);
  Window w;
  w.data.resize(channels, n);
  for (Eigen::Index i = 0; i < w.data.size(); ++i) w.data.data()[i] = rng.normal();
  w.preprocessed = true;
  return w;
}

double channel_std(const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  return std::sqrt((x.array() - x.mean()).square().mean());
}

// Training partition of `n` small windows, marked preprocessed.
TrainingPartition partition(int subjects, int per_trial, double seconds) {
  SynthSpec spec;
  spec.subjects = subjects;
  spec.trials = 1;
  spec.windows_per_trial = per_trial;
  spec.window_seconds = seconds;
  auto ds = generate_synthetic(spec, 2);
  for (auto& ex : ds.examples)
    for (auto& p : ex.parts) p.preprocessed = true;
  return TrainingPartition(ds.examples, {});
}

}  // namespace

TEST_CASE("zero-parameter operators are identities", "[augment]") {
  const auto w = random_window(4, 640, 1);
  RngStream rng(2);
  CHECK(add_gaussian_noise(w, 0.0, rng).data == w.data);
  CHECK((time_warp(w, 0.0, 4, rng).data - w.data).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(amplitude_scale_by(w, 1.0).data == w.data);
  CHECK(amplitude_scale(w, 1.0, 1.0, rng).data == w.data);
}

TEST_CASE("operator errors", "[augment][errors]") {
  auto w = random_window(2, 100, 1);
  RngStream rng(2);
  CHECK_THROWS_AS(add_gaussian_noise(w, -0.1, rng), ConfigError);
  CHECK_THROWS_AS(time_warp(w, 0.1, 0, rng), ConfigError);
  w.preprocessed = false;
  CHECK_THROWS_AS(add_gaussian_noise(w, 0.02, rng), StateError);

  AugmentPolicy p;
  CHECK_NOTHROW(p.validate());
  p.max_warp = 0.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.scale_low = 1.3;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("amplitude scaling is linear in std", "[augment]") {
  const auto w = random_window(3, 500, 4);
  const auto s = amplitude_scale_by(w, 0.8);
  for (Eigen::Index c = 0; c < 3; ++c) CHECK_THAT(channel_std(s.data.row(c)) / channel_std(w.data.row(c)), WithinAbs(0.8, 1e-9));
}

TEST_CASE("added noise has 2% of the channel std", "[augment][statistics]") {
  const auto w = random_window(4, 2560, 5);
  RngStream rng(6);
  double sum = 0;
  for (int draw = 0; draw < 1000; ++draw) {
    const auto n = add_gaussian_noise(w, 0.02, rng);
    const int c = draw % 4;
    sum += channel_std(n.data.row(c) - w.data.row(c)) / channel_std(w.data.row(c));
    CHECK(n.data.rows() == 4);
  }
  CHECK_THAT(sum / 1000, WithinAbs(0.02, 0.002));
}

TEST_CASE("amplitude factors are uniform on [0.8, 1.2]", "[augment][statistics]") {
  auto w = random_window(1, 4, 7);
  w.data(0, 0) = 1.0;
  RngStream rng(8);
  std::vector<double> factors;
  for (int draw = 0; draw < 1000; ++draw) factors.push_back(amplitude_scale(w, 0.8, 1.2, rng).data(0, 0));
  std::sort(factors.begin(), factors.end());
  double ks = 0;
  const double n = static_cast<double>(factors.size());
  for (std::size_t i = 0; i < factors.size(); ++i) {
    REQUIRE(factors[i] >= 0.8);
    REQUIRE(factors[i] <= 1.2);
    const double cdf = (factors[i] - 0.8) / 0.4;
    ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - cdf)});
  }
  INFO("KS statistic " << ks);
  CHECK(ks < 0.05);
}

TEST_CASE("warp maps are strictly increasing with fixed endpoints", "[augment][statistics]") {
  RngStream rng(9);
  int accepted = 0;
  for (int draw = 0; draw < 1000; ++draw) {
    const auto w = random_window(2, 256, static_cast<std::uint64_t>(draw));
    const auto out = time_warp(w, 0.1, 4, rng);
    CHECK(out.data.cols() == 256);
    if (auto tau = draw_warp_map(256, 0.1, 4, rng)) {
      ++accepted;
      CHECK((*tau)[0] == 0.0);
      CHECK((*tau)[255] == 255.0);
      for (Eigen::Index i = 1; i < 256; ++i) REQUIRE((*tau)[i] > (*tau)[i - 1]);
    }
  }
  CHECK(accepted > 500);
}

TEST_CASE("linear resampling", "[augment]") {
  Signal s(1, 4);
  s << 0, 2, 4, 10;
  CHECK(resample_linear(s, Eigen::VectorXd::LinSpaced(4, 0, 3)) == s);
  const Eigen::VectorXd tau = (Eigen::VectorXd(3) << 0.5, 1.25, 3.0).finished();
  const auto r = resample_linear(s, tau);
  CHECK(r(0, 0) == 1.0);
  CHECK(r(0, 1) == 2.5);
  CHECK(r(0, 2) == 10.0);
}

TEST_CASE("training fold augmentation", "[augment][fold]") {
  const auto train = partition(2, 50, 0.5);
  REQUIRE(train.size() == 100);
  AugmentPolicy policy;
  std::array<int, 3> ops{};
  std::vector<ExampleKey> seen;
  const auto out = augment_training_fold(train, policy, RngStream(3), [&](const ExampleKey& k, Operator op) {
    ++ops[static_cast<int>(op)];
    seen.push_back(k);
  });
  REQUIRE(out.size() == 200);
  CHECK(seen.size() == 100);

  std::array<int, 2> before{}, after{};
  for (const auto& e : train.examples()) ++before[map_label(e.rating, LabelScheme::Binary)];
  for (const auto& e : out) ++after[map_label(e.rating, LabelScheme::Binary)];
  CHECK(after[0] == 2 * before[0]);
  CHECK(after[1] == 2 * before[1]);

  for (std::size_t i = 0; i < 100; ++i) {
    const auto& orig = train.examples()[i];
    const auto& copy = out[100 + i];
    CHECK(out[i].parts[0].data == orig.parts[0].data);
    CHECK(copy.key == orig.key);
    CHECK(copy.rating == orig.rating);
    CHECK(copy.parts[0].subject_id == orig.parts[0].subject_id);
    CHECK(copy.parts[0].trial_id == orig.parts[0].trial_id);
    CHECK(copy.parts[0].data.rows() == orig.parts[0].data.rows());
    CHECK(copy.parts[0].data.cols() == orig.parts[0].data.cols());
  }

  const auto again = augment_training_fold(train, policy, RngStream(3));
  bool identical = true;
  for (std::size_t i = 0; i < out.size(); ++i) identical = identical && again[i].parts[0].data == out[i].parts[0].data;
  CHECK(identical);

  policy.enabled = false;
  CHECK(augment_training_fold(train, policy, RngStream(3)).size() == 100);
}

TEST_CASE("operator choice is uniform", "[augment][fold][statistics]") {
  const auto train = partition(3, 100, 0.25);
  AugmentPolicy policy;
  policy.copies_per_window = 30;
  std::array<int, 3> ops{};
  const auto out = augment_training_fold(train, policy, RngStream(11), [&](const ExampleKey&, Operator op) {
    ++ops[static_cast<int>(op)];
  });
  REQUIRE(out.size() == 300u * 31u);
  for (int o = 0; o < 3; ++o) {
    INFO("operator " << o << " chosen " << ops[o] << " times");
    CHECK(std::abs(ops[o] / 9000.0 - 1.0 / 3.0) <= 0.03);
  }
}
