#pragma once

#include "uniphynet/dataset.hpp"
#include "uniphynet/nn/gru.hpp"
#include "uniphynet/nn/ops.hpp"
#include "uniphynet/rng.hpp"

#include <nlohmann/json.hpp>

#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace uniphynet {

enum class BlockKind { ResNetCBAM, ResNetPlain, DSC, DSCCBAM };
enum class Fusion { None, SelfAttention };

std::string_view to_string(BlockKind k);
BlockKind parse_block_kind(std::string_view name);
inline bool uses_cbam(BlockKind k) { return k == BlockKind::ResNetCBAM || k == BlockKind::DSCCBAM; }
inline bool uses_dsc(BlockKind k) { return k == BlockKind::DSC || k == BlockKind::DSCCBAM; }

struct ModalityConfig {
  Modality modality = Modality::EEG;
  int in_channels = 4;
  int sample_rate_hz = 256;
  double window_seconds = 10.0;
  std::vector<int> kernels{3, 9};
  int resnet_blocks = 8;
  int feature_maps = 64;
  int gru_hidden = 64;
  int cbam_reduction = 8;
  bool gru_on_raw = false;

  Eigen::Index window_length() const;
  Eigen::Index trunk_length() const;  // window_length / 2^resnet_blocks

  // Per-modality table: EEG [3,9] x 8 blocks, ECG [5,11] x 9, EDA [13] x 7;
  // 64 feature maps alone, 32 inside a multimodal network.
  static ModalityConfig defaults(Modality m, bool multimodal = false);
};

struct NetConfig {
  std::vector<ModalityConfig> modalities{ModalityConfig::defaults(Modality::EEG)};
  int num_classes = 2;
  double dropout = 0.25;
  Fusion fusion = Fusion::None;
  bool use_gru = true;
  BlockKind block_kind = BlockKind::ResNetCBAM;

  void validate() const;  // throws ConfigError

  // Full-size network for the modality set.
  static NetConfig defaults(std::span<const Modality> modalities, int num_classes);
  // Desk-scale network: 16 feature maps, 4 blocks, GRU hidden 16, default
  // window 2.5 s.
  static NetConfig tiny(std::span<const Modality> modalities, int num_classes, double window_seconds = 2.5);
};

nlohmann::json to_json(const NetConfig& cfg);
NetConfig net_config_from_json(const nlohmann::json& j);

// Ablation overrides: `no-gru`, `no-aug`, `dsc`, `dsc-cbam`, `kernels:<list>`.
struct AblationPreset {
  std::string name;
  std::optional<std::vector<int>> kernels;
  std::optional<bool> use_gru;
  std::optional<BlockKind> block_kind;
  bool disable_augmentation = false;
};

AblationPreset parse_ablation(std::string_view preset);
void apply_ablation(const AblationPreset& preset, NetConfig& cfg);
std::vector<std::string> standard_ablations();  // every preset name, kernel sets included

namespace model {

using nn::BatchNormState;
using nn::Index;
using nn::Mode;
using nn::Tensor;

// Collects named parameters and batch-norm buffers while layers are built.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(RngStream rng) : rng_(rng) {}

  // Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), drawn from the
  // stream split by `name`.
  Tensor<T> glorot(const std::string& name, nn::Shape shape, Index fan_in, Index fan_out);
  Tensor<T> constant(const std::string& name, nn::Shape shape, T value);
  BatchNormState<T>* batch_norm_state(const std::string& name, Index channels);

  std::vector<nn::Parameter<T>>& parameters() { return params_; }
  const std::vector<nn::Parameter<T>>& parameters() const { return params_; }
  std::deque<BatchNormState<T>>& bn_states() { return bn_; }
  const std::deque<BatchNormState<T>>& bn_states() const { return bn_; }

 private:
  RngStream rng_;
  std::vector<nn::Parameter<T>> params_;
  std::deque<BatchNormState<T>> bn_;
};

template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;  // may be undefined
  nn::ConvGeometry geo;
  bool depthwise = false;

  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
Conv<T> make_conv(ParamStore<T>& ps, const std::string& name, Index cin, Index cout, Index k, nn::ConvGeometry geo,
                  bool bias);
template <typename T>
Conv<T> make_depthwise(ParamStore<T>& ps, const std::string& name, Index ch, Index k, nn::ConvGeometry geo);

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  BatchNormState<T>* state = nullptr;

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const;
};

template <typename T>
BatchNorm<T> make_batch_norm(ParamStore<T>& ps, const std::string& name, Index channels);

template <typename T>
struct Linear {
  Tensor<T> weight, bias;
  Tensor<T> operator()(const Tensor<T>& x) const { return nn::linear(x, weight, bias); }
};

template <typename T>
Linear<T> make_linear(ParamStore<T>& ps, const std::string& name, Index in, Index out, bool bias = true);

// Kernel branches conv(Cin -> F/|kernels|, no bias) -> BN -> SiLU, concatenated
// along channels. Lengths are preserved for odd and even kernels alike.
template <typename T>
struct ParallelConvBlock {
  std::vector<Conv<T>> convs;
  std::vector<BatchNorm<T>> norms;

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const;
};

template <typename T>
ParallelConvBlock<T> make_parallel_conv_block(ParamStore<T>& ps, const std::string& name, Index cin,
                                              const std::vector<int>& kernels, Index feature_maps);

template <typename T>
struct Attended {
  Tensor<T> output;
  Tensor<T> weights;
};

// a = sigmoid(MLP(avg_t y) + MLP(max_t y)), shared MLP F -> F/r -> F.
template <typename T>
struct ChannelAttention {
  Linear<T> fc1, fc2;
  Attended<T> operator()(const Tensor<T>& y) const;
};

template <typename T>
ChannelAttention<T> make_channel_attention(ParamStore<T>& ps, const std::string& name, Index channels,
                                           int reduction);

// s = sigmoid(conv7([avg_c y; max_c y])).
template <typename T>
struct TemporalAttention {
  Conv<T> conv;
  Attended<T> operator()(const Tensor<T>& y) const;
};

template <typename T>
TemporalAttention<T> make_temporal_attention(ParamStore<T>& ps, const std::string& name);

// Pre-activation residual block halving the length, with optional CBAM.
template <typename T>
struct ResBlock {
  BlockKind kind = BlockKind::ResNetCBAM;
  BatchNorm<T> bn1, bn2;
  std::vector<Conv<T>> conv1;  // one conv, or depthwise + pointwise
  std::vector<Conv<T>> conv2;
  Conv<T> shortcut;
  ChannelAttention<T> channel;
  TemporalAttention<T> temporal;

  struct Trace {
    Tensor<T> channel_weights;
    Tensor<T> temporal_weights;
  };
  Tensor<T> operator()(const Tensor<T>& x, Mode mode, Trace* trace = nullptr) const;
};

template <typename T>
ResBlock<T> make_res_block(ParamStore<T>& ps, const std::string& name, Index channels, BlockKind kind,
                           int reduction);

template <typename T>
struct Trunk {
  ParallelConvBlock<T> input_block;
  std::vector<ResBlock<T>> blocks;

  Tensor<T> operator()(const Tensor<T>& x, Mode mode, std::vector<typename ResBlock<T>::Trace>* traces = nullptr) const;
};

template <typename T>
Trunk<T> make_trunk(ParamStore<T>& ps, const std::string& name, const ModalityConfig& cfg, BlockKind kind);

// Single-head self-attention over time tokens with a residual connection:
// tokens [B, L, D], out = tokens + Wo softmax(Q K^T / sqrt(D)) V. The key
// projection has no bias: it would add the same constant to every score in
// a softmax row.
template <typename T>
struct FusionAttention {
  Linear<T> query, key, value, output;

  Attended<T> operator()(const std::vector<Tensor<T>>& seqs) const;  // weights [B, L, L]
};

template <typename T>
FusionAttention<T> make_fusion(ParamStore<T>& ps, const std::string& name, Index width);

template <typename T>
struct Head {
  bool use_gru = true;
  nn::GruWeights<T> gru_fwd, gru_bwd;
  Linear<T> fc;
  T dropout = T(0.25);

  // seq [B, F, L]; gru_input [B, L', n] (the transposed seq unless the GRU
  // reads the raw window).
  Tensor<T> operator()(const Tensor<T>& seq, const Tensor<T>& gru_input, Mode mode, RngStream* rng) const;
};

template <typename T>
Head<T> make_head(ParamStore<T>& ps, const std::string& name, Index features, Index gru_input, Index hidden,
                  bool use_gru, int num_classes, double dropout);

template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> trunk_outputs;
  std::vector<std::vector<typename ResBlock<T>::Trace>> blocks;  // per modality
  Tensor<T> fusion_weights;
};

template <typename T>
class Model {
 public:
  Model(NetConfig cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // One [B, C, L] tensor per configured modality. `rng` drives dropout in
  // train mode and may be null otherwise.
  Tensor<T> forward(const std::vector<Tensor<T>>& inputs, Mode mode, RngStream* rng = nullptr,
                    ForwardTrace<T>* trace = nullptr) const;

  const NetConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::vector<nn::Parameter<T>>& parameters() { return store_.parameters(); }
  const std::vector<nn::Parameter<T>>& parameters() const { return store_.parameters(); }
  std::deque<BatchNormState<T>>& bn_states() { return store_.bn_states(); }
  Index parameter_count() const;

  struct Snapshot {
    std::vector<nn::Vec<T>> values;
    std::vector<BatchNormState<T>> bn;
  };
  Snapshot snapshot() const;
  void restore(const Snapshot& s);

  const std::vector<Trunk<T>>& trunks() const { return trunks_; }
  std::vector<Trunk<T>>& trunks() { return trunks_; }
  const std::optional<FusionAttention<T>>& fusion() const { return fusion_; }
  const Head<T>& head() const { return head_; }

 private:
  NetConfig cfg_;
  std::uint64_t seed_;
  ParamStore<T> store_;
  std::vector<Trunk<T>> trunks_;
  std::optional<FusionAttention<T>> fusion_;
  Head<T> head_;
};

// Stacks example windows into per-modality [B, C, L] tensors.
template <typename T>
std::vector<Tensor<T>> make_batch(const std::vector<Example>& examples, std::span<const std::size_t> indices);

template <typename T>
std::vector<int> predict(const Model<T>& model, const std::vector<Example>& examples, std::size_t batch_size = 64);

}  // namespace model

}  // namespace uniphynet
