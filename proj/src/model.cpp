#include "uniphynet/model.hpp"

#include "uniphynet/errors.hpp"

#include <cmath>

namespace uniphynet::model {

using nn::ConvGeometry;
using nn::Shape;
using nn::Vec;

template <typename T>
Tensor<T> ParamStore<T>::glorot(const std::string& name, Shape shape, Index fan_in, Index fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  RngStream local = rng_.split(name);
  Vec<T> v(nn::numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(local.uniform(-a, a));
  Tensor<T> t(std::move(shape), std::move(v), true);
  params_.push_back({name, t});
  return t;
}

template <typename T>
Tensor<T> ParamStore<T>::constant(const std::string& name, Shape shape, T value) {
  const Index n = nn::numel(shape);
  Tensor<T> t(std::move(shape), Vec<T>::Constant(n, value), true);
  params_.push_back({name, t});
  return t;
}

template <typename T>
BatchNormState<T>* ParamStore<T>::batch_norm_state(const std::string&, Index channels) {
  bn_.emplace_back(channels);
  return &bn_.back();
}

template <typename T>
Tensor<T> Conv<T>::operator()(const Tensor<T>& x) const {
  return depthwise ? nn::depthwise_conv1d(x, weight, bias, geo) : nn::conv1d(x, weight, bias, geo);
}

template <typename T>
Conv<T> make_conv(ParamStore<T>& ps, const std::string& name, Index cin, Index cout, Index k, ConvGeometry geo,
                  bool bias) {
  Conv<T> c;
  c.weight = ps.glorot(name + ".weight", {cout, cin, k}, cin * k, cout * k);
  if (bias) c.bias = ps.constant(name + ".bias", {cout}, T(0));
  c.geo = geo;
  return c;
}

template <typename T>
Conv<T> make_depthwise(ParamStore<T>& ps, const std::string& name, Index ch, Index k, ConvGeometry geo) {
  Conv<T> c;
  c.weight = ps.glorot(name + ".weight", {ch, 1, k}, k, k);
  c.geo = geo;
  c.depthwise = true;
  return c;
}

template <typename T>
Tensor<T> BatchNorm<T>::operator()(const Tensor<T>& x, Mode mode) const {
  return nn::batch_norm(x, gamma, beta, *state, mode);
}

template <typename T>
BatchNorm<T> make_batch_norm(ParamStore<T>& ps, const std::string& name, Index channels) {
  return {ps.constant(name + ".gamma", {channels}, T(1)), ps.constant(name + ".beta", {channels}, T(0)),
          ps.batch_norm_state(name, channels)};
}

template <typename T>
Linear<T> make_linear(ParamStore<T>& ps, const std::string& name, Index in, Index out, bool bias) {
  return {ps.glorot(name + ".weight", {out, in}, in, out),
          bias ? ps.constant(name + ".bias", {out}, T(0)) : Tensor<T>()};
}

template <typename T>
Tensor<T> ParallelConvBlock<T>::operator()(const Tensor<T>& x, Mode mode) const {
  std::vector<Tensor<T>> branches;
  for (std::size_t i = 0; i < convs.size(); ++i) branches.push_back(nn::silu(norms[i](convs[i](x), mode)));
  return nn::concat(std::span<const Tensor<T>>(branches), 1);
}

template <typename T>
ParallelConvBlock<T> make_parallel_conv_block(ParamStore<T>& ps, const std::string& name, Index cin,
                                              const std::vector<int>& kernels, Index feature_maps) {
  const auto branches = static_cast<Index>(kernels.size());
  if (branches == 0 || feature_maps % branches != 0)
    throw ConfigError("feature maps " + std::to_string(feature_maps) + " not divisible by " +
                      std::to_string(branches) + " branches");
  const Index width = feature_maps / branches;
  ParallelConvBlock<T> block;
  for (int k : kernels) {
    const std::string branch = name + ".k" + std::to_string(k);
    block.convs.push_back(make_conv(ps, branch + ".conv", cin, width, k, ConvGeometry::same(k), false));
    block.norms.push_back(make_batch_norm(ps, branch + ".bn", width));
  }
  return block;
}

template <typename T>
Attended<T> ChannelAttention<T>::operator()(const Tensor<T>& y) const {
  auto mlp = [&](const Tensor<T>& v) { return fc2(nn::relu(fc1(v))); };
  Tensor<T> a = nn::sigmoid(nn::add(mlp(nn::pool(nn::Pool::GlobalAvgTime, y)), mlp(nn::pool(nn::Pool::GlobalMaxTime, y))));
  return {nn::scale_channels(y, a), a};
}

template <typename T>
ChannelAttention<T> make_channel_attention(ParamStore<T>& ps, const std::string& name, Index channels,
                                           int reduction) {
  if (reduction < 1 || channels % reduction != 0) throw ConfigError("channels not divisible by CBAM reduction");
  const Index hidden = channels / reduction;
  return {make_linear(ps, name + ".fc1", channels, hidden), make_linear(ps, name + ".fc2", hidden, channels)};
}

template <typename T>
Attended<T> TemporalAttention<T>::operator()(const Tensor<T>& y) const {
  if (y.dim(2) < 7) throw ConfigError("temporal attention needs at least 7 steps, got " + std::to_string(y.dim(2)));
  Tensor<T> stats = nn::concat<T>({nn::pool(nn::Pool::AvgOverChannels, y), nn::pool(nn::Pool::MaxOverChannels, y)}, 1);
  Tensor<T> s = nn::sigmoid(conv(stats));
  return {nn::scale_time(y, s), s};
}

template <typename T>
TemporalAttention<T> make_temporal_attention(ParamStore<T>& ps, const std::string& name) {
  return {make_conv(ps, name + ".conv", 2, 1, 7, ConvGeometry::symmetric(7), true)};
}

template <typename T>
Tensor<T> ResBlock<T>::operator()(const Tensor<T>& x, Mode mode, Trace* trace) const {
  if (x.dim(2) % 2 != 0) throw ShapeError("residual block needs an even length, got " + std::to_string(x.dim(2)));
  auto apply = [](const std::vector<Conv<T>>& convs, Tensor<T> v) {
    for (const auto& c : convs) v = c(v);
    return v;
  };
  Tensor<T> f = apply(conv1, nn::relu(bn1(x, mode)));
  f = apply(conv2, nn::relu(bn2(f, mode)));
  Tensor<T> y = nn::add(shortcut(x), f);
  if (!uses_cbam(kind)) return y;
  auto ca = channel(y);
  auto ta = temporal(ca.output);
  if (trace) *trace = {ca.weights, ta.weights};
  return ta.output;
}

template <typename T>
ResBlock<T> make_res_block(ParamStore<T>& ps, const std::string& name, Index channels, BlockKind kind,
                           int reduction) {
  ResBlock<T> b;
  b.kind = kind;
  b.bn1 = make_batch_norm(ps, name + ".bn1", channels);
  b.bn2 = make_batch_norm(ps, name + ".bn2", channels);
  // conv1 feeds bn2, so it carries no bias.
  if (uses_dsc(kind)) {
    b.conv1 = {make_depthwise(ps, name + ".conv1.depthwise", channels, 3, ConvGeometry::symmetric(3, 2)),
               make_conv(ps, name + ".conv1.pointwise", channels, channels, 1, ConvGeometry{}, false)};
    b.conv2 = {make_depthwise(ps, name + ".conv2.depthwise", channels, 3, ConvGeometry::symmetric(3, 1)),
               make_conv(ps, name + ".conv2.pointwise", channels, channels, 1, ConvGeometry{}, true)};
  } else {
    b.conv1 = {make_conv(ps, name + ".conv1", channels, channels, 3, ConvGeometry::symmetric(3, 2), false)};
    b.conv2 = {make_conv(ps, name + ".conv2", channels, channels, 3, ConvGeometry::symmetric(3, 1), true)};
  }
  b.shortcut = make_conv(ps, name + ".shortcut", channels, channels, 1, ConvGeometry{2, 0, 0}, true);
  if (uses_cbam(kind)) {
    b.channel = make_channel_attention(ps, name + ".channel_att", channels, reduction);
    b.temporal = make_temporal_attention(ps, name + ".temporal_att");
  }
  return b;
}

template <typename T>
Tensor<T> Trunk<T>::operator()(const Tensor<T>& x, Mode mode,
                               std::vector<typename ResBlock<T>::Trace>* traces) const {
  Tensor<T> h = input_block(x, mode);
  if (traces) traces->assign(blocks.size(), {});
  for (std::size_t i = 0; i < blocks.size(); ++i) h = blocks[i](h, mode, traces ? &(*traces)[i] : nullptr);
  return h;
}

template <typename T>
Trunk<T> make_trunk(ParamStore<T>& ps, const std::string& name, const ModalityConfig& cfg, BlockKind kind) {
  Trunk<T> t;
  t.input_block = make_parallel_conv_block(ps, name + ".pconv", cfg.in_channels, cfg.kernels, cfg.feature_maps);
  for (int i = 0; i < cfg.resnet_blocks; ++i)
    t.blocks.push_back(make_res_block(ps, name + ".block" + std::to_string(i), cfg.feature_maps, kind,
                                      cfg.cbam_reduction));
  return t;
}

template <typename T>
Attended<T> FusionAttention<T>::operator()(const std::vector<Tensor<T>>& seqs) const {
  if (seqs.empty()) throw ShapeError("fusion: no inputs");
  for (const auto& s : seqs)
    if (s.rank() != 3 || s.dim(0) != seqs[0].dim(0) || s.dim(2) != seqs[0].dim(2))
      throw ShapeError("fusion: sequences differ in batch or length: " + nn::shape_string(s.shape()) + " vs " +
                       nn::shape_string(seqs[0].shape()));
  Tensor<T> fused = nn::concat(std::span<const Tensor<T>>(seqs), 1);  // [B, D, L]
  Tensor<T> tokens = nn::transpose12(fused);                          // [B, L, D]
  const T scale = T(1) / std::sqrt(static_cast<T>(fused.dim(1)));
  Tensor<T> scores = nn::mul_scalar(nn::bmm(query(tokens), key(tokens), true), scale);
  Tensor<T> attn = nn::softmax(scores);
  Tensor<T> out = nn::add(tokens, output(nn::bmm(attn, value(tokens))));
  return {nn::transpose12(out), attn};
}

template <typename T>
FusionAttention<T> make_fusion(ParamStore<T>& ps, const std::string& name, Index width) {
  return {make_linear(ps, name + ".query", width, width), make_linear(ps, name + ".key", width, width, false),
          make_linear(ps, name + ".value", width, width), make_linear(ps, name + ".output", width, width)};
}

template <typename T>
Tensor<T> Head<T>::operator()(const Tensor<T>& seq, const Tensor<T>& gru_input, Mode mode, RngStream* rng) const {
  Tensor<T> features = nn::pool(nn::Pool::GlobalAvgTime, seq);
  if (use_gru) features = nn::concat<T>({features, nn::bigru(gru_input, gru_fwd, gru_bwd).final}, 1);
  if (mode == Mode::Train && dropout > T(0)) {
    if (!rng) throw StateError("dropout in train mode needs a random stream");
    features = nn::dropout(features, dropout, mode, *rng);
  }
  return fc(features);
}

template <typename T>
Head<T> make_head(ParamStore<T>& ps, const std::string& name, Index features, Index gru_input, Index hidden,
                  bool use_gru, int num_classes, double dropout) {
  Head<T> h;
  h.use_gru = use_gru;
  h.dropout = static_cast<T>(dropout);
  if (use_gru) {
    auto dir = [&](const std::string& d) {
      const std::string p = name + ".gru." + d;
      return nn::GruWeights<T>{ps.glorot(p + ".W", {3 * hidden, gru_input}, gru_input, 3 * hidden),
                               ps.glorot(p + ".U", {3 * hidden, hidden}, hidden, 3 * hidden),
                               ps.constant(p + ".b", {3 * hidden}, T(0))};
    };
    h.gru_fwd = dir("fwd");
    h.gru_bwd = dir("bwd");
  }
  h.fc = make_linear(ps, name + ".fc", features + (use_gru ? 2 * hidden : 0), num_classes);
  return h;
}

template <typename T>
Model<T>::Model(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed), store_(RngStream(seed)) {
  cfg_.validate();
  Index width = 0;
  for (const auto& m : cfg_.modalities) {
    trunks_.push_back(make_trunk(store_, std::string(to_string(m.modality)), m, cfg_.block_kind));
    width += m.feature_maps;
    // Length schedule: every stride-2 block halves the window exactly.
    Index len = m.window_length();
    for (const auto& b : trunks_.back().blocks) len = b.shortcut.geo.output_length(len, 1);
    if (len != m.trunk_length() || len * (Index{1} << m.resnet_blocks) != m.window_length())
      throw ConfigError(std::string(to_string(m.modality)) + ": trunk length schedule broken");
  }
  if (cfg_.fusion == Fusion::SelfAttention) fusion_ = make_fusion(store_, "fusion", width);
  const auto& first = cfg_.modalities.front();
  const Index gru_in = first.gru_on_raw ? first.in_channels : width;
  head_ = make_head(store_, "head", width, gru_in, first.gru_hidden, cfg_.use_gru, cfg_.num_classes, cfg_.dropout);
}

template <typename T>
Tensor<T> Model<T>::forward(const std::vector<Tensor<T>>& inputs, Mode mode, RngStream* rng,
                            ForwardTrace<T>* trace) const {
  if (inputs.size() != trunks_.size())
    throw ShapeError("model expects " + std::to_string(trunks_.size()) + " modality inputs, got " +
                     std::to_string(inputs.size()));
  std::vector<Tensor<T>> seqs;
  if (trace) trace->blocks.assign(trunks_.size(), {});
  for (std::size_t i = 0; i < trunks_.size(); ++i) {
    const auto& m = cfg_.modalities[i];
    const auto& x = inputs[i];
    if (x.rank() != 3 || x.dim(1) != m.in_channels || x.dim(2) != m.window_length())
      throw ShapeError(std::string(to_string(m.modality)) + " input " + nn::shape_string(x.shape()) +
                       " does not match [B," + std::to_string(m.in_channels) + "," +
                       std::to_string(m.window_length()) + "]");
    seqs.push_back(trunks_[i](x, mode, trace ? &trace->blocks[i] : nullptr));
  }
  if (trace) trace->trunk_outputs = seqs;
  Tensor<T> seq = seqs.front();
  if (fusion_) {
    auto fused = (*fusion_)(seqs);
    seq = fused.output;
    if (trace) trace->fusion_weights = fused.weights;
  }
  Tensor<T> gru_input;
  if (head_.use_gru) gru_input = nn::transpose12(cfg_.modalities.front().gru_on_raw ? inputs.front() : seq);
  return head_(seq, gru_input, mode, rng);
}

template <typename T>
Index Model<T>::parameter_count() const {
  Index n = 0;
  for (const auto& p : store_.parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
typename Model<T>::Snapshot Model<T>::snapshot() const {
  Snapshot s;
  for (const auto& p : store_.parameters()) s.values.push_back(p.tensor.value());
  s.bn.assign(store_.bn_states().begin(), store_.bn_states().end());
  return s;
}

template <typename T>
void Model<T>::restore(const Snapshot& s) {
  auto& params = store_.parameters();
  auto& bn = store_.bn_states();
  if (s.values.size() != params.size() || s.bn.size() != bn.size()) throw StateError("snapshot from another model");
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.value() = s.values[i];
  for (std::size_t i = 0; i < bn.size(); ++i) bn[i] = s.bn[i];
}

template <typename T>
std::vector<Tensor<T>> make_batch(const std::vector<Example>& examples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("empty batch");
  const auto& first = examples.at(indices[0]);
  std::vector<Tensor<T>> out;
  for (std::size_t m = 0; m < first.parts.size(); ++m) {
    const Index ch = first.parts[m].channels(), len = first.parts[m].samples();
    const auto batch = static_cast<Index>(indices.size());
    Vec<T> v(batch * ch * len);
    for (Index b = 0; b < batch; ++b) {
      const auto& w = examples.at(indices[b]).parts.at(m);
      if (w.channels() != ch || w.samples() != len) throw ShapeError("windows in a batch differ in shape");
      v.segment(b * ch * len, ch * len) = Eigen::Map<const Eigen::VectorXd>(w.data.data(), ch * len).cast<T>();
    }
    out.emplace_back(Shape{batch, ch, len}, std::move(v));
  }
  return out;
}

template <typename T>
std::vector<int> predict(const Model<T>& model, const std::vector<Example>& examples, std::size_t batch_size) {
  nn::NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(examples.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
    Tensor<T> logits = model.forward(make_batch<T>(examples, idx), Mode::Eval);
    const Index c = logits.dim(1);
    for (Index b = 0; b < logits.dim(0); ++b) {
      Index best;
      logits.value().segment(b * c, c).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

#define UNIPHYNET_INSTANTIATE(T)                                                                                  \
  template class ParamStore<T>;                                                                                   \
  template struct Conv<T>;                                                                                        \
  template struct BatchNorm<T>;                                                                                   \
  template struct ParallelConvBlock<T>;                                                                           \
  template struct ChannelAttention<T>;                                                                            \
  template struct TemporalAttention<T>;                                                                           \
  template struct ResBlock<T>;                                                                                    \
  template struct Trunk<T>;                                                                                       \
  template struct FusionAttention<T>;                                                                             \
  template struct Head<T>;                                                                                        \
  template class Model<T>;                                                                                        \
  template Conv<T> make_conv(ParamStore<T>&, const std::string&, Index, Index, Index, ConvGeometry, bool);        \
  template Conv<T> make_depthwise(ParamStore<T>&, const std::string&, Index, Index, ConvGeometry);                \
  template BatchNorm<T> make_batch_norm(ParamStore<T>&, const std::string&, Index);                               \
  template Linear<T> make_linear(ParamStore<T>&, const std::string&, Index, Index, bool);                               \
  template ParallelConvBlock<T> make_parallel_conv_block(ParamStore<T>&, const std::string&, Index,               \
                                                         const std::vector<int>&, Index);                        \
  template ChannelAttention<T> make_channel_attention(ParamStore<T>&, const std::string&, Index, int);            \
  template TemporalAttention<T> make_temporal_attention(ParamStore<T>&, const std::string&);                      \
  template ResBlock<T> make_res_block(ParamStore<T>&, const std::string&, Index, BlockKind, int);                 \
  template Trunk<T> make_trunk(ParamStore<T>&, const std::string&, const ModalityConfig&, BlockKind);             \
  template FusionAttention<T> make_fusion(ParamStore<T>&, const std::string&, Index);                             \
  template Head<T> make_head(ParamStore<T>&, const std::string&, Index, Index, Index, bool, int, double);         \
  template std::vector<Tensor<T>> make_batch<T>(const std::vector<Example>&, std::span<const std::size_t>);       \
  template std::vector<int> predict(const Model<T>&, const std::vector<Example>&, std::size_t);

UNIPHYNET_INSTANTIATE(float)
UNIPHYNET_INSTANTIATE(double)

#undef UNIPHYNET_INSTANTIATE

}  // namespace uniphynet::model
