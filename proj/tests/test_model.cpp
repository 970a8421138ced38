#include "uniphynet/errors.hpp"
#include "uniphynet/model.hpp"
#include "uniphynet/nn/checkpoint.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

using namespace uniphynet;
using namespace uniphynet::model;
using nn::Shape;
using Catch::Matchers::WithinAbs;

namespace {

Tensor<double> random_tensor(Shape shape, RngStream& rng) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t.value()[i] = rng.normal();
  return t;
}

void zero(Tensor<double>& t) {
  if (t.defined()) t.value().setZero();
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("default configs reproduce the length schedule", "[model][config]") {
  for (Modality m : {Modality::EEG, Modality::ECG, Modality::EDA}) {
    const auto cfg = ModalityConfig::defaults(m);
    CHECK(cfg.trunk_length() == 10);
    CHECK(cfg.window_length() == 10 * cfg.sample_rate_hz);
    CHECK(cfg.feature_maps == 64);
    CHECK(ModalityConfig::defaults(m, true).feature_maps == 32);
  }
  CHECK(ModalityConfig::defaults(Modality::EEG).kernels == std::vector<int>{3, 9});
  CHECK(ModalityConfig::defaults(Modality::ECG).kernels == std::vector<int>{5, 11});
  CHECK(ModalityConfig::defaults(Modality::EDA).kernels == std::vector<int>{13});
  CHECK(ModalityConfig::defaults(Modality::EEG).resnet_blocks == 8);
  CHECK(ModalityConfig::defaults(Modality::ECG).resnet_blocks == 9);
  CHECK(ModalityConfig::defaults(Modality::EDA).resnet_blocks == 7);
}

TEST_CASE("config validation", "[model][config][errors]") {
  const std::vector<Modality> eeg{Modality::EEG};
  auto cfg = NetConfig::defaults(eeg, 2);
  CHECK_NOTHROW(cfg.validate());

  auto bad = cfg;
  bad.modalities[0].kernels = {3, 5, 9};  // 64 maps over 3 branches
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.modalities[0].resnet_blocks = 10;  // 2^10 does not divide 2560
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.fusion = Fusion::SelfAttention;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  const std::vector<Modality> all{Modality::EEG, Modality::ECG, Modality::EDA};
  auto multi = NetConfig::defaults(all, 3);
  CHECK(multi.fusion == Fusion::SelfAttention);
  multi.fusion = Fusion::None;
  CHECK_THROWS_AS(multi.validate(), ConfigError);

  bad = cfg;
  bad.num_classes = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parallel conv block", "[model][block]") {
  ParamStore<double> ps(RngStream(1));
  RngStream rng(2);
  auto block = make_parallel_conv_block(ps, "p", 4, {3, 9}, 64);
  REQUIRE(block.convs.size() == 2);
  CHECK(block.convs[0].weight.shape() == Shape{32, 4, 3});
  auto x = random_tensor({2, 4, 2560}, rng);
  CHECK(block(x, Mode::Train).shape() == Shape{2, 64, 2560});

  auto eda = make_parallel_conv_block(ps, "e", 3, {13}, 64);
  CHECK(eda(random_tensor({1, 3, 1280}, rng), Mode::Eval).shape() == Shape{1, 64, 1280});

  auto even = make_parallel_conv_block(ps, "k", 4, {3, 64}, 16);
  CHECK(even(random_tensor({2, 4, 100}, rng), Mode::Train).shape() == Shape{2, 16, 100});

  for (auto& c : block.convs) zero(c.weight);
  CHECK(block(x, Mode::Train).value().cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(make_parallel_conv_block(ps, "bad", 4, {3, 5, 9}, 64), ConfigError);
}

TEST_CASE("residual block halves the length and rejects odd input", "[model][block]") {
  ParamStore<double> ps(RngStream(3));
  RngStream rng(4);
  for (BlockKind kind : {BlockKind::ResNetCBAM, BlockKind::ResNetPlain, BlockKind::DSC, BlockKind::DSCCBAM}) {
    auto block = make_res_block(ps, std::string(to_string(kind)), 16, kind, 8);
    CHECK(block(random_tensor({2, 16, 64}, rng), Mode::Train).shape() == Shape{2, 16, 32});
    CHECK_THROWS_AS(block(random_tensor({2, 16, 63}, rng), Mode::Train), ShapeError);
  }
  auto big = make_res_block(ps, "big", 64, BlockKind::ResNetCBAM, 8);
  CHECK(big(random_tensor({1, 64, 2560}, rng), Mode::Eval).shape() == Shape{1, 64, 1280});
}

TEST_CASE("zeroed residual branch leaves CBAM of the shortcut", "[model][block][property]") {
  RngStream rng(5);
  for (BlockKind kind : {BlockKind::ResNetCBAM, BlockKind::ResNetPlain, BlockKind::DSC, BlockKind::DSCCBAM}) {
    ParamStore<double> ps(RngStream(6));
    auto block = make_res_block(ps, "b", 16, kind, 8);
    for (auto* convs : {&block.conv1, &block.conv2})
      for (auto& c : *convs) {
        zero(c.weight);
        zero(c.bias);
      }
    auto x = random_tensor({2, 16, 32}, rng);
    auto y = block(x, Mode::Train);
    Tensor<double> expect = block.shortcut(x);
    if (uses_cbam(kind)) expect = block.temporal(block.channel(expect).output).output;
    CHECK(y.value() == expect.value());
  }
}

TEST_CASE("channel attention", "[model][cbam]") {
  ParamStore<double> ps(RngStream(7));
  RngStream rng(8);
  auto att = make_channel_attention(ps, "c", 16, 8);

  auto y = random_tensor({2, 16, 12}, rng);
  auto out = att(y);
  REQUIRE(out.weights.shape() == Shape{2, 16});
  CHECK(out.weights.value().minCoeff() > 0.0);
  CHECK(out.weights.value().maxCoeff() < 1.0);

  // Identical channels feed the MLP a constant vector; the weights then agree
  // whenever fc2 maps it to a constant, i.e. its rows and biases coincide.
  Tensor<double> same({1, 16, 12});
  const auto seq = random_tensor({12}, rng);
  for (Index c = 0; c < 16; ++c) same.value().segment(c * 12, 12) = seq.value();
  for (Index c = 1; c < 16; ++c) att.fc2.weight.value().segment(c * 2, 2) = att.fc2.weight.value().head(2);
  auto sym = att(same);
  for (Index c = 1; c < 16; ++c) CHECK(sym.weights.value()[c] == sym.weights.value()[0]);

  zero(att.fc1.weight);
  zero(att.fc1.bias);
  zero(att.fc2.bias);
  auto half = att(y);
  for (Index i = 0; i < half.weights.numel(); ++i) CHECK(half.weights.value()[i] == 0.5);
  CHECK((half.output.value() - 0.5 * y.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("temporal attention", "[model][cbam]") {
  ParamStore<double> ps(RngStream(9));
  RngStream rng(10);
  auto att = make_temporal_attention(ps, "t");

  auto y = random_tensor({2, 8, 20}, rng);
  auto out = att(y);
  REQUIRE(out.weights.shape() == Shape{2, 1, 20});
  CHECK(out.weights.value().minCoeff() > 0.0);
  CHECK(out.weights.value().maxCoeff() < 1.0);

  CHECK_THROWS_AS(att(random_tensor({1, 8, 6}, rng)), ConfigError);

  SECTION("circular time shift of constant-channel input shifts the map") {
    const Index len = 30, shift = 5;
    const auto seq = random_tensor({len}, rng);
    Tensor<double> a({1, 4, len}), b({1, 4, len});
    for (Index c = 0; c < 4; ++c)
      for (Index t = 0; t < len; ++t) {
        a.value()[c * len + t] = seq.value()[t];
        b.value()[c * len + t] = seq.value()[(t - shift + len) % len];
      }
    const auto sa = att(a).weights.value(), sb = att(b).weights.value();
    // Positions whose 7-tap window stays clear of both the edges and the wrap.
    for (Index t = 3 + shift; t < len - 3; ++t) CHECK_THAT(sb[t], WithinAbs(sa[t - shift], 1e-5));
  }

  zero(att.conv.weight);
  zero(att.conv.bias);
  auto flat = att(y);
  for (Index i = 0; i < flat.weights.numel(); ++i) CHECK(flat.weights.value()[i] == 0.5);
}

TEST_CASE("trunks reach length 10 at full size", "[model][trunk]") {
  RngStream rng(11);
  for (Modality m : {Modality::EEG, Modality::ECG, Modality::EDA}) {
    ParamStore<double> ps(RngStream(12));
    const auto cfg = ModalityConfig::defaults(m);
    auto trunk = make_trunk(ps, "t", cfg, BlockKind::ResNetCBAM);
    auto y = trunk(random_tensor({1, cfg.in_channels, cfg.window_length()}, rng), Mode::Eval);
    INFO(to_string(m));
    CHECK(y.shape() == Shape{1, 64, 10});
  }
}

TEST_CASE("head width", "[model][head]") {
  const std::vector<Modality> eeg{Modality::EEG};
  auto cfg = NetConfig::defaults(eeg, 2);
  Model<float> with(cfg, 1);
  CHECK(with.head().fc.weight.shape() == Shape{2, 192});
  cfg.use_gru = false;
  Model<float> without(cfg, 1);
  CHECK(without.head().fc.weight.shape() == Shape{2, 64});
}

TEST_CASE("parameter count equals the sum of declared layer shapes", "[model][params]") {
  const std::vector<Modality> eeg{Modality::EEG};
  const auto cfg = NetConfig::defaults(eeg, 2);
  const Index F = 64, cin = 4, H = 64, C = 2, r = 8, blocks = 8;

  Index expect = 0;
  for (Index k : {3, 9}) expect += (F / 2) * cin * k + 2 * (F / 2);  // branch conv (no bias) + BN
  const Index block = 2 * F + 2 * F                                   // bn1, bn2
                      + F * F * 3                                     // conv1, no bias
                      + F * F * 3 + F                                 // conv2
                      + F * F + F                                     // 1x1 shortcut
                      + F * (F / r) + F / r + (F / r) * F + F         // channel MLP
                      + 2 * 7 + 1;                                    // temporal conv
  expect += blocks * block;
  expect += 2 * (3 * H * F + 3 * H * H + 3 * H);  // GRU, two directions
  expect += (F + 2 * H) * C + C;                  // FC

  Model<float> net(cfg, 3);
  CHECK(net.parameter_count() == expect);
}

TEST_CASE("parameter names are unique", "[model][params]") {
  const std::vector<Modality> all{Modality::EEG, Modality::ECG, Modality::EDA};
  Model<float> net(NetConfig::tiny(all, 3), 1);
  std::set<std::string> names;
  for (const auto& p : net.parameters()) CHECK(names.insert(p.name).second);
}

TEST_CASE("fusion attention", "[model][fusion]") {
  ParamStore<double> ps(RngStream(13));
  RngStream rng(14);
  auto fusion = make_fusion(ps, "f", 96);
  std::vector<Tensor<double>> seqs{random_tensor({2, 32, 10}, rng), random_tensor({2, 32, 10}, rng),
                                   random_tensor({2, 32, 10}, rng)};
  auto out = fusion(seqs);
  REQUIRE(out.output.shape() == Shape{2, 96, 10});
  REQUIRE(out.weights.shape() == Shape{2, 10, 10});
  for (Index row = 0; row < 20; ++row) CHECK_THAT(out.weights.value().segment(row * 10, 10).sum(), WithinAbs(1.0, 1e-6));
  CHECK(out.weights.value().minCoeff() >= 0.0);

  zero(fusion.value.weight);
  zero(fusion.value.bias);
  zero(fusion.output.weight);
  zero(fusion.output.bias);
  auto id = fusion(seqs);
  const auto concat = nn::concat(std::span<const Tensor<double>>(seqs), 1);
  CHECK(id.output.value() == concat.value());

  seqs.push_back(random_tensor({2, 32, 9}, rng));
  CHECK_THROWS_AS(fusion(seqs), ShapeError);
}

TEST_CASE("multimodal forward", "[model][forward]") {
  const std::vector<Modality> all{Modality::EEG, Modality::ECG, Modality::EDA};
  RngStream rng(15);
  for (bool tiny : {true, false}) {
    const auto cfg = tiny ? NetConfig::tiny(all, 3) : NetConfig::defaults(all, 3);
    Model<float> net(cfg, 4);
    std::vector<Tensor<float>> inputs;
    for (const auto& m : cfg.modalities) {
      Tensor<float> x({2, m.in_channels, m.window_length()});
      for (Index i = 0; i < x.numel(); ++i) x.value()[i] = static_cast<float>(rng.normal());
      inputs.push_back(x);
    }
    ForwardTrace<float> trace;
    auto logits = net.forward(inputs, Mode::Eval, nullptr, &trace);
    CHECK(logits.shape() == Shape{2, 3});
    CHECK(logits.value().allFinite());
    for (const auto& s : trace.trunk_outputs) CHECK(s.dim(2) == cfg.modalities.front().trunk_length());
    const Index len = cfg.modalities.front().trunk_length();
    CHECK(trace.fusion_weights.shape() == Shape{2, len, len});
    inputs.pop_back();
    CHECK_THROWS_AS(net.forward(inputs, Mode::Eval), ShapeError);
  }
}

TEST_CASE("attention weights stay in range through a full forward", "[model][forward][property]") {
  const std::vector<Modality> eeg{Modality::EEG};
  Model<double> net(NetConfig::tiny(eeg, 2), 5);
  RngStream rng(16);
  auto x = random_tensor({3, 4, 640}, rng);
  ForwardTrace<double> trace;
  RngStream drop(1);
  net.forward({x}, Mode::Train, &drop, &trace);
  REQUIRE(trace.blocks.size() == 1);
  for (const auto& t : trace.blocks[0]) {
    CHECK(t.channel_weights.value().minCoeff() > 0.0);
    CHECK(t.channel_weights.value().maxCoeff() < 1.0);
    CHECK(t.temporal_weights.value().minCoeff() > 0.0);
    CHECK(t.temporal_weights.value().maxCoeff() < 1.0);
  }
}

TEST_CASE("eval forward is repeatable and not scale invariant", "[model][forward]") {
  const std::vector<Modality> eeg{Modality::EEG};
  Model<float> net(NetConfig::tiny(eeg, 2), 6);
  RngStream rng(17);
  Tensor<float> x({2, 4, 640});
  for (Index i = 0; i < x.numel(); ++i) x.value()[i] = static_cast<float>(rng.normal());
  // One train step so BN running statistics differ from their initial values.
  RngStream drop(2);
  net.forward({x}, Mode::Train, &drop);
  auto a = net.forward({x}, Mode::Eval), b = net.forward({x}, Mode::Eval);
  CHECK(a.value() == b.value());
  Tensor<float> x2(x.shape(), (2.0f * x.value()).eval());
  CHECK(net.forward({x2}, Mode::Eval).value() != a.value());
}

TEST_CASE("rebuild from config and seed is bit-identical", "[model][determinism]") {
  const std::vector<Modality> all{Modality::EEG, Modality::ECG, Modality::EDA};
  const auto cfg = NetConfig::tiny(all, 2);
  Model<float> a(cfg, 99), b(cfg, 99), c(cfg, 100);
  const auto dir = std::filesystem::temp_directory_path() / "uniphynet_test_model";
  std::filesystem::create_directories(dir);
  nn::save_checkpoint(dir / "a.upn1", a.parameters());
  nn::save_checkpoint(dir / "b.upn1", b.parameters());
  nn::save_checkpoint(dir / "c.upn1", c.parameters());
  CHECK(read_bytes(dir / "a.upn1") == read_bytes(dir / "b.upn1"));
  CHECK(read_bytes(dir / "a.upn1") != read_bytes(dir / "c.upn1"));
}

TEST_CASE("checkpoint round trip", "[model][checkpoint]") {
  const std::vector<Modality> eeg{Modality::EEG};
  const auto cfg = NetConfig::tiny(eeg, 2);
  Model<double> a(cfg, 1), b(cfg, 2);
  const auto path = std::filesystem::temp_directory_path() / "uniphynet_test_model" / "rt.upn1";
  std::filesystem::create_directories(path.parent_path());
  nn::save_checkpoint(path, a.parameters());

  const auto records = nn::read_checkpoint(path);
  REQUIRE(records.size() == a.parameters().size());
  CHECK(records.front().name == a.parameters().front().name);
  CHECK(records.front().shape == a.parameters().front().tensor.shape());

  const std::string bytes = read_bytes(path);
  CHECK(bytes.substr(0, 4) == "UPN1");
  CHECK(static_cast<int>(bytes[4]) == 8);

  nn::load_checkpoint(path, b.parameters());
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    CHECK(a.parameters()[i].tensor.value() == b.parameters()[i].tensor.value());

  Model<double> other(NetConfig::tiny(std::vector<Modality>{Modality::EDA}, 2), 1);
  CHECK_THROWS(nn::load_checkpoint(path, other.parameters()));
}

TEST_CASE("ablation presets", "[model][ablation]") {
  auto k = parse_ablation("kernels:3,64");
  REQUIRE(k.kernels);
  CHECK(*k.kernels == std::vector<int>{3, 64});
  CHECK(parse_ablation("no-gru").use_gru == false);
  CHECK(parse_ablation("no-aug").disable_augmentation);
  CHECK(parse_ablation("dsc").block_kind == BlockKind::DSC);
  CHECK(parse_ablation("dsc-cbam").block_kind == BlockKind::DSCCBAM);
  CHECK_THROWS_AS(parse_ablation("wider"), ConfigError);
  CHECK_THROWS_AS(parse_ablation("kernels:"), ConfigError);

  const std::vector<Modality> eeg{Modality::EEG};
  auto cfg = NetConfig::tiny(eeg, 2);
  apply_ablation(k, cfg);
  CHECK(cfg.modalities[0].kernels == std::vector<int>{3, 64});

  // DSC without GRU on one kernel: shape contract of a compact depthwise network.
  auto slim = NetConfig::tiny(eeg, 2);
  apply_ablation(parse_ablation("dsc"), slim);
  apply_ablation(parse_ablation("no-gru"), slim);
  apply_ablation(parse_ablation("kernels:64"), slim);
  Model<float> net(slim, 1);
  Tensor<float> x({2, 4, 640});
  CHECK(net.forward({x}, Mode::Eval).shape() == Shape{2, 2});
  CHECK(net.head().fc.weight.shape() == Shape{2, 16});
  CHECK(net.trunks()[0].blocks[0].conv1.size() == 2);
  CHECK(net.trunks()[0].blocks[0].conv1[0].depthwise);
}

TEST_CASE("net config JSON round trip", "[model][config]") {
  const std::vector<Modality> all{Modality::EEG, Modality::ECG, Modality::EDA};
  auto cfg = NetConfig::tiny(all, 3);
  cfg.block_kind = BlockKind::DSCCBAM;
  const auto back = net_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
}
