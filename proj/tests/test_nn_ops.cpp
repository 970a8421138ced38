#include "uniphynet/errors.hpp"
#include "uniphynet/nn/gradcheck.hpp"
#include "uniphynet/nn/gru.hpp"
#include "uniphynet/nn/ops.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

using namespace uniphynet;
using namespace uniphynet::nn;
using Catch::Matchers::WithinAbs;

namespace {

Tensor<double> random_tensor(Shape shape, RngStream& rng, bool requires_grad = false) {
  Tensor<double> t(std::move(shape), requires_grad);
  for (Index i = 0; i < t.numel(); ++i) t.value()[i] = rng.normal();
  return t;
}

// Direct loops over the cross-correlation definition; independent of the
// im2col path.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                               ConvGeometry geo) {
  const Index batch = x.dim(0), cin = x.dim(1), len = x.dim(2), cout = w.dim(0), k = w.dim(2);
  // Brute-force output length: count start positions whose window fits the padded signal.
  Index lout = 0;
  for (Index start = 0; start + k <= len + geo.pad_left + geo.pad_right; start += geo.stride) ++lout;
  std::vector<double> out;
  for (Index bb = 0; bb < batch; ++bb)
    for (Index o = 0; o < cout; ++o)
      for (Index t = 0; t < lout; ++t) {
        double acc = b.defined() ? b.value()[o] : 0.0;
        for (Index c = 0; c < cin; ++c)
          for (Index j = 0; j < k; ++j) {
            const Index p = t * geo.stride + j - geo.pad_left;
            if (p >= 0 && p < len) acc += w.value()[(o * cin + c) * k + j] * x.value()[(bb * cin + c) * len + p];
          }
        out.push_back(acc);
      }
  return out;
}

}  // namespace

TEST_CASE("conv1d worked examples", "[nn][conv]") {
  Tensor<double> x({1, 1, 4}, {1, 2, 3, 4});
  Tensor<double> w({1, 1, 3}, {1, 0, -1});

  auto y = conv1d(x, w, Tensor<double>(), ConvGeometry{1, 1, 1});
  REQUIRE(y.shape() == Shape{1, 1, 4});
  const std::vector<double> expect{-2, -2, -2, 3};
  for (int i = 0; i < 4; ++i) CHECK(y.value()[i] == expect[i]);

  auto s = conv1d(x, w, Tensor<double>(), ConvGeometry{2, 1, 1});
  REQUIRE(s.shape() == Shape{1, 1, 2});
  CHECK(s.value()[0] == -2);
  CHECK(s.value()[1] == -2);
}

TEST_CASE("conv1d with an identity kernel is the identity", "[nn][conv]") {
  RngStream rng(11);
  auto x = random_tensor({2, 3, 17}, rng);
  Tensor<double> w({3, 3, 3});
  for (Index c = 0; c < 3; ++c) w.value()[(c * 3 + c) * 3 + 1] = 1.0;
  auto y = conv1d(x, w, Tensor<double>(), ConvGeometry::symmetric(3));
  REQUIRE(y.shape() == x.shape());
  CHECK((y.value() - x.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv1d matches the direct oracle across geometries", "[nn][conv]") {
  RngStream rng(12);
  for (Index len : {5, 8, 13, 20})
    for (Index k : {1, 2, 3, 4, 7})
      for (Index stride : {1, 2, 3}) {
        if (k > len) continue;
        for (ConvGeometry geo : {ConvGeometry{stride, 0, 0}, ConvGeometry::symmetric(k, stride),
                                 ConvGeometry::same(k, stride)}) {
          auto x = random_tensor({2, 3, len}, rng);
          auto w = random_tensor({4, 3, k}, rng);
          auto b = random_tensor({4}, rng);
          auto y = conv1d(x, w, b, geo);
          const auto ref = naive_conv(x, w, b, geo);
          INFO("L=" << len << " k=" << k << " stride=" << stride << " pad=" << geo.pad_left << "," << geo.pad_right);
          REQUIRE(y.dim(2) == geo.output_length(len, k));
          REQUIRE(static_cast<std::size_t>(y.numel()) == ref.size());
          for (Index i = 0; i < y.numel(); ++i) CHECK_THAT(y.value()[i], WithinAbs(ref[i], 1e-12));
        }
      }
}

TEST_CASE("'same' geometry keeps length for even kernels", "[nn][conv]") {
  for (Index k : {2, 3, 4, 9, 64}) CHECK(ConvGeometry::same(k).output_length(100, k) == 100);
}

TEST_CASE("depthwise conv matches per-channel oracle", "[nn][conv]") {
  RngStream rng(13);
  auto x = random_tensor({2, 4, 12}, rng);
  auto w = random_tensor({4, 1, 3}, rng);
  auto y = depthwise_conv1d(x, w, Tensor<double>(), ConvGeometry::symmetric(3, 2));
  REQUIRE(y.shape() == Shape{2, 4, 6});
  for (Index c = 0; c < 4; ++c) {
    Tensor<double> xc({2, 1, 12}), wc({1, 1, 3});
    for (Index b = 0; b < 2; ++b) xc.value().segment(b * 12, 12) = x.value().segment((b * 4 + c) * 12, 12);
    wc.value() = w.value().segment(c * 3, 3);
    const auto ref = naive_conv(xc, wc, Tensor<double>(), ConvGeometry::symmetric(3, 2));
    for (Index b = 0; b < 2; ++b)
      for (Index t = 0; t < 6; ++t) CHECK_THAT(y.value()[(b * 4 + c) * 6 + t], WithinAbs(ref[b * 6 + t], 1e-12));
  }
}

TEST_CASE("conv1d rejects a channel mismatch", "[nn][conv][errors]") {
  Tensor<double> x({1, 2, 8}), w({1, 3, 3});
  CHECK_THROWS_AS(conv1d(x, w, Tensor<double>(), ConvGeometry::symmetric(3)), ShapeError);
}

TEST_CASE("batch norm", "[nn][bn]") {
  RngStream rng(14);
  auto x = random_tensor({4, 3, 10}, rng);
  Tensor<double> gamma({3}, {1, 1, 1}), beta({3}, {0, 0, 0});

  SECTION("eval with initial statistics is the identity") {
    BatchNormState<double> st(3);
    auto y = batch_norm(x, gamma, beta, st, Mode::Eval);
    CHECK((y.value() - x.value()).cwiseAbs().maxCoeff() < 1e-4);  // eps 1e-5 under the sqrt
  }

  SECTION("train normalizes each channel over batch and time") {
    BatchNormState<double> st(3);
    auto y = batch_norm(x, gamma, beta, st, Mode::Train);
    for (Index c = 0; c < 3; ++c) {
      double sum = 0, sq = 0;
      for (Index b = 0; b < 4; ++b)
        for (Index t = 0; t < 10; ++t) {
          const double v = y.value()[(b * 3 + c) * 10 + t];
          sum += v;
          sq += v * v;
        }
      CHECK_THAT(sum / 40, WithinAbs(0.0, 1e-12));
      CHECK_THAT(sq / 40, WithinAbs(1.0, 1e-4));
    }
    CHECK(st.trained);
    // Running mean moved 10% of the way toward the batch mean.
    double mu0 = 0;
    for (Index b = 0; b < 4; ++b) mu0 += x.value().segment(b * 30, 10).sum();
    CHECK_THAT(st.running_mean[0], WithinAbs(0.1 * mu0 / 40, 1e-12));
  }
}

TEST_CASE("activations", "[nn][act]") {
  Tensor<double> x({3}, {-1, 0, 1});
  CHECK_THAT(silu(x).value()[2], WithinAbs(0.731059, 1e-5));
  CHECK(silu(x).value()[1] == 0.0);
  CHECK(relu(x).value()[0] == 0.0);
  CHECK_THAT(sigmoid(x).value()[1], WithinAbs(0.5, 1e-15));
  CHECK_THAT(nn::tanh(x).value()[0], WithinAbs(std::tanh(-1.0), 1e-15));
}

TEST_CASE("pooling", "[nn][pool]") {
  // [B=1, C=2, L=2], channels [1,5] and [3,2].
  Tensor<double> x({1, 2, 2}, {1, 5, 3, 2}, true);
  auto mx = pool(Pool::MaxOverChannels, x);
  REQUIRE(mx.shape() == Shape{1, 1, 2});
  CHECK(mx.value()[0] == 3);
  CHECK(mx.value()[1] == 5);
  auto avg = pool(Pool::AvgOverChannels, x);
  CHECK(avg.value()[0] == 2);
  auto gt = pool(Pool::GlobalMaxTime, x);
  REQUIRE(gt.shape() == Shape{1, 2});
  CHECK(gt.value()[0] == 5);
  CHECK(gt.value()[1] == 3);
  CHECK(pool(Pool::GlobalAvgTime, x).value()[1] == 2.5);
}

TEST_CASE("max pooling routes the gradient of a tie to the first index", "[nn][pool]") {
  Tensor<double> x({1, 1, 4}, {2, 7, 7, 1}, true);
  pool(Pool::GlobalMaxTime, x).backward();
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("linear", "[nn][linear]") {
  Tensor<double> w({1, 2}, {1, 2}), b({1}, {0.5}), x({1, 2}, {3, 4});
  CHECK(linear(x, w, b).value()[0] == 11.5);

  RngStream rng(15);
  auto v = random_tensor({5, 3}, rng);
  Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), zero({3});
  CHECK((linear(v, eye, zero).value() - v.value()).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(linear(x, Tensor<double>({1, 3}), b), ShapeError);
}

TEST_CASE("linear gradient matches central differences tightly", "[nn][linear][grad]") {
  RngStream rng(16);
  auto x = random_tensor({4, 3}, rng, true);
  auto w = random_tensor({2, 3}, rng, true);
  auto b = random_tensor({2}, rng, true);
  const Vec<double> proj = random_tensor({8}, rng).value();
  const auto res = grad_check([&] { return weighted_sum(linear(x, w, b), proj); }, {x, w, b});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("GRU scalar case", "[nn][gru]") {
  GruWeights<double> p{Tensor<double>({3, 1}, {0, 0, 1}), Tensor<double>({3, 1}), Tensor<double>({3})};
  Tensor<double> x({1, 1, 1}, {1.0});
  auto h = gru_direction(x, p, false);
  // z = 0.5, candidate tanh(1), h1 = 0.5 tanh(1).
  CHECK_THAT(h.value()[0], WithinAbs(0.38080, 1e-4));
  CHECK_THAT(h.value()[0], WithinAbs(0.5 * std::tanh(1.0), 1e-12));
}

TEST_CASE("GRU matches a hand-rolled recurrence", "[nn][gru]") {
  RngStream rng(17);
  const Index batch = 2, len = 5, n = 4, hid = 3;
  auto x = random_tensor({batch, len, n}, rng);
  GruWeights<double> p{random_tensor({3 * hid, n}, rng), random_tensor({3 * hid, hid}, rng),
                       random_tensor({3 * hid}, rng)};
  using M = Eigen::MatrixXd;
  const M W = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(p.w.data(), 3 * hid, n);
  const M U = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(p.u.data(), 3 * hid, hid);
  const Eigen::VectorXd bias = p.b.value();
  auto sig = [](const Eigen::VectorXd& v) { return (1.0 / (1.0 + (-v.array()).exp())).matrix().eval(); };

  for (bool reverse : {false, true}) {
    auto out = gru_direction(x, p, reverse);
    for (Index b = 0; b < batch; ++b) {
      Eigen::VectorXd h = Eigen::VectorXd::Zero(hid);
      for (Index s = 0; s < len; ++s) {
        const Index t = reverse ? len - 1 - s : s;
        const Eigen::VectorXd xt = x.value().segment((b * len + t) * n, n);
        const Eigen::VectorXd z = sig(W.topRows(hid) * xt + U.topRows(hid) * h + bias.head(hid));
        const Eigen::VectorXd r = sig(W.middleRows(hid, hid) * xt + U.middleRows(hid, hid) * h + bias.segment(hid, hid));
        const Eigen::VectorXd c =
            (W.bottomRows(hid) * xt + U.bottomRows(hid) * r.cwiseProduct(h) + bias.tail(hid)).array().tanh().matrix();
        h = (1.0 - z.array()) * h.array() + z.array() * c.array();
        for (Index j = 0; j < hid; ++j) CHECK_THAT(out.value()[(b * len + t) * hid + j], WithinAbs(h[j], 1e-12));
      }
    }
  }
}

TEST_CASE("bidirectional GRU shapes and final state", "[nn][gru]") {
  RngStream rng(18);
  const Index hid = 64;
  auto make = [&] {
    return GruWeights<double>{random_tensor({3 * hid, 64}, rng), random_tensor({3 * hid, hid}, rng),
                              random_tensor({3 * hid}, rng)};
  };
  auto fwd = make(), bwd = make();
  auto x = random_tensor({2, 10, 64}, rng);
  auto out = bigru(x, fwd, bwd);
  REQUIRE(out.outputs.shape() == Shape{2, 10, 128});
  REQUIRE(out.final.shape() == Shape{2, 128});
  for (Index b = 0; b < 2; ++b)
    for (Index j = 0; j < hid; ++j) {
      CHECK(out.final.value()[b * 128 + j] == out.outputs.value()[(b * 10 + 9) * 128 + j]);
      CHECK(out.final.value()[b * 128 + hid + j] == out.outputs.value()[(b * 10 + 0) * 128 + hid + j]);
    }

  GruWeights<double> zero{Tensor<double>({3 * hid, 64}), Tensor<double>({3 * hid, hid}), Tensor<double>({3 * hid})};
  CHECK(bigru(x, zero, zero).outputs.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("concat", "[nn][concat]") {
  RngStream rng(19);
  std::vector<Tensor<double>> parts{random_tensor({2, 32, 10}, rng), random_tensor({2, 32, 10}, rng),
                                    random_tensor({2, 32, 10}, rng)};
  auto y = concat(std::span<const Tensor<double>>(parts), 1);
  REQUIRE(y.shape() == Shape{2, 96, 10});
  CHECK(y.value()[(1 * 96 + 40) * 10 + 3] == parts[1].value()[(1 * 32 + 8) * 10 + 3]);

  auto one = concat<double>({parts[0]}, 1);
  CHECK(one.value() == parts[0].value());

  CHECK_THROWS_AS(concat<double>({parts[0], random_tensor({2, 32, 9}, rng)}, 1), ShapeError);
}

TEST_CASE("softmax and cross-entropy", "[nn][loss]") {
  const std::vector<int> zero{0};
  CHECK_THAT(softmax_cross_entropy(Tensor<double>({1, 3}, {0, 0, 0}), std::span<const int>(zero)).item(),
             WithinAbs(std::log(3.0), 1e-12));
  CHECK(softmax_cross_entropy(Tensor<double>({1, 2}, {100, 0}), std::span<const int>(zero)).item() < 1e-6);

  Tensor<double> logits({1, 2}, {0, 0}, true);
  softmax_cross_entropy(logits, std::span<const int>(zero)).backward();
  CHECK_THAT(logits.grad()[0], WithinAbs(-0.5, 1e-15));
  CHECK_THAT(logits.grad()[1], WithinAbs(0.5, 1e-15));

  const std::vector<int> bad{2};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor<double>({1, 2}), std::span<const int>(bad)), ValidationError);
}

TEST_CASE("softmax rows sum to one and CE gradient rows sum to zero", "[nn][loss][property]") {
  RngStream rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 5}, rng, true);
    x.value() *= 5.0;
    auto p = softmax(x);
    for (Index r = 0; r < 4; ++r) CHECK_THAT(p.value().segment(r * 5, 5).sum(), WithinAbs(1.0, 1e-6));
    std::vector<int> targets;
    for (int r = 0; r < 4; ++r) targets.push_back(static_cast<int>(rng.below(5)));
    softmax_cross_entropy(x, std::span<const int>(targets)).backward();
    for (Index r = 0; r < 4; ++r) CHECK_THAT(x.grad().segment(r * 5, 5).sum(), WithinAbs(0.0, 1e-6));
  }
}

TEST_CASE("dropout", "[nn][dropout]") {
  RngStream rng(21);
  Tensor<double> x({1, 20000}, Vec<double>::Ones(20000));
  CHECK(dropout(x, 0.25, Mode::Eval, rng).value() == x.value());
  auto y = dropout(x, 0.25, Mode::Train, rng);
  Index kept = 0;
  for (Index i = 0; i < y.numel(); ++i) {
    if (y.value()[i] != 0.0) {
      CHECK_THAT(y.value()[i], WithinAbs(1.0 / 0.75, 1e-12));
      ++kept;
    }
  }
  CHECK_THAT(static_cast<double>(kept) / 20000, WithinAbs(0.75, 0.02));
}

TEST_CASE("forward results are bit-identical across repeats", "[nn][determinism]") {
  auto run = [] {
    RngStream rng(22);
    auto x = random_tensor({2, 3, 16}, rng);
    auto w = random_tensor({4, 3, 5}, rng);
    GruWeights<float> g{Tensor<float>({6, 4}), Tensor<float>({6, 2}), Tensor<float>({6})};
    for (auto* t : {&g.w, &g.u, &g.b})
      for (Index i = 0; i < t->numel(); ++i) t->value()[i] = static_cast<float>(rng.normal());
    Tensor<float> xf(x.shape(), x.value().cast<float>()), wf(w.shape(), w.value().cast<float>());
    auto y = conv1d(xf, wf, Tensor<float>(), ConvGeometry::same(5));
    return bigru(transpose12(y), g, g).final.value().eval();
  };
  CHECK(run() == run());
}

TEST_CASE("gradient checks of conv1d and bigru on random graphs", "[nn][grad]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(100 + seed);
    auto x = random_tensor({2, 3, 16}, rng, true);
    auto w = random_tensor({4, 3, 5}, rng, true);
    auto b = random_tensor({4}, rng, true);
    const Vec<double> proj = random_tensor({4 * 16 * 2}, rng).value();
    auto conv = grad_check([&] { return weighted_sum(conv1d(x, w, b, ConvGeometry::same(5)), proj); }, {x, w, b});
    CHECK(conv.max_rel_error < 1e-4);

    auto xs = random_tensor({2, 5, 4}, rng, true);
    auto mk = [&] {
      return GruWeights<double>{random_tensor({9, 4}, rng, true), random_tensor({9, 3}, rng, true),
                                random_tensor({9}, rng, true)};
    };
    auto f = mk(), r = mk();
    const Vec<double> proj2 = random_tensor({2 * 5 * 6}, rng).value();
    auto gru = grad_check([&] { return weighted_sum(bigru(xs, f, r).outputs, proj2); },
                          {xs, f.w, f.u, f.b, r.w, r.u, r.b});
    CHECK(gru.max_rel_error < 1e-4);
  }
}
