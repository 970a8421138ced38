#include "uniphynet/gradcheck_suite.hpp"

#include "uniphynet/model.hpp"

#include <chrono>
#include <memory>

namespace uniphynet {

namespace {

using nn::GradCase;
using nn::Index;
using nn::Mode;
using nn::Shape;
using nn::Vec;
using D = double;
using TensorD = nn::Tensor<D>;

TensorD random(Shape shape, RngStream& rng, double scale = 1.0) {
  Vec<D> v(nn::numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.normal(0.0, scale);
  return TensorD(std::move(shape), std::move(v), true);
}

Vec<D> random_weights(Index n, RngStream& rng) {
  Vec<D> w(n);
  for (Index i = 0; i < n; ++i) w[i] = rng.normal();
  return w;
}

// Reduces `f()` to a scalar with fixed random weights.
GradCase reduce(std::function<TensorD()> f, std::vector<TensorD> wrt, RngStream& rng) {
  TensorD probe;
  {
    nn::NoGradGuard ng;
    probe = f();
  }
  auto w = std::make_shared<Vec<D>>(random_weights(probe.numel(), rng));
  return {[f, w] { return nn::weighted_sum(f(), *w); }, std::move(wrt)};
}

template <typename Store>
std::vector<TensorD> params_of(const Store& store) {
  std::vector<TensorD> out;
  for (const auto& p : store->parameters()) out.push_back(p.tensor);
  return out;
}

// Parameters drawn larger than the default init so that every path carries a
// clearly non-zero gradient.
void perturb(model::ParamStore<D>& store, RngStream& rng) {
  for (auto& p : store.parameters())
    for (Index i = 0; i < p.tensor.numel(); ++i) p.tensor.value()[i] += rng.normal(0.0, 0.3);
}

struct Case {
  std::string name;
  double threshold;
  std::function<GradCase(RngStream&)> make;
};

std::vector<Case> layer_cases() {
  std::vector<Case> cases;
  auto add = [&](std::string name, std::function<GradCase(RngStream&)> make) {
    cases.push_back({std::move(name), 1e-4, std::move(make)});
  };

  add("conv1d", [](RngStream& r) {
    auto x = random({2, 3, 16}, r), w = random({4, 3, 5}, r), b = random({4}, r);
    return reduce([=] { return nn::conv1d(x, w, b, nn::ConvGeometry::symmetric(5)); }, {x, w, b}, r);
  });
  add("conv1d_stride2", [](RngStream& r) {
    auto x = random({2, 3, 16}, r), w = random({4, 3, 3}, r), b = random({4}, r);
    return reduce([=] { return nn::conv1d(x, w, b, nn::ConvGeometry::symmetric(3, 2)); }, {x, w, b}, r);
  });
  add("conv1d_even_kernel", [](RngStream& r) {
    auto x = random({2, 2, 12}, r), w = random({3, 2, 4}, r);
    return reduce([=] { return nn::conv1d(x, w, TensorD(), nn::ConvGeometry::same(4)); }, {x, w}, r);
  });
  add("depthwise_conv1d", [](RngStream& r) {
    auto x = random({2, 3, 12}, r), w = random({3, 1, 3}, r), b = random({3}, r);
    return reduce([=] { return nn::depthwise_conv1d(x, w, b, nn::ConvGeometry::symmetric(3, 2)); }, {x, w, b}, r);
  });
  add("batchnorm_train", [](RngStream& r) {
    auto x = random({3, 4, 6}, r), g = random({4}, r), b = random({4}, r);
    auto st = std::make_shared<nn::BatchNormState<D>>(4);
    return reduce([=] { return nn::batch_norm(x, g, b, *st, Mode::Train); }, {x, g, b}, r);
  });
  add("batchnorm_eval", [](RngStream& r) {
    auto x = random({3, 4, 6}, r), g = random({4}, r), b = random({4}, r);
    auto st = std::make_shared<nn::BatchNormState<D>>(4);
    st->running_mean = random_weights(4, r);
    st->running_var = random_weights(4, r).array().abs() + 0.5;
    st->trained = true;
    return reduce([=] { return nn::batch_norm(x, g, b, *st, Mode::Eval); }, {x, g, b}, r);
  });
  for (auto [name, kind] : {std::pair{"silu", nn::Activation::SiLU}, std::pair{"relu", nn::Activation::ReLU},
                            std::pair{"sigmoid", nn::Activation::Sigmoid}, std::pair{"tanh", nn::Activation::Tanh}}) {
    add(name, [kind = kind](RngStream& r) {
      auto x = random({2, 3, 5}, r);
      return reduce([=] { return nn::activation(kind, x); }, {x}, r);
    });
  }
  for (auto [name, kind] : {std::pair{"pool_avg_time", nn::Pool::GlobalAvgTime},
                            std::pair{"pool_max_time", nn::Pool::GlobalMaxTime},
                            std::pair{"pool_avg_channels", nn::Pool::AvgOverChannels},
                            std::pair{"pool_max_channels", nn::Pool::MaxOverChannels}}) {
    add(name, [kind = kind](RngStream& r) {
      auto x = random({2, 3, 7}, r);
      return reduce([=] { return nn::pool(kind, x); }, {x}, r);
    });
  }
  add("linear", [](RngStream& r) {
    auto x = random({2, 3, 5}, r), w = random({4, 5}, r), b = random({4}, r);
    return reduce([=] { return nn::linear(x, w, b); }, {x, w, b}, r);
  });
  for (bool final_state : {false, true}) {
    add(final_state ? "bigru_final" : "bigru_outputs", [final_state](RngStream& r) {
      auto x = random({2, 5, 4}, r);
      auto dir = [&] { return nn::GruWeights<D>{random({9, 4}, r, 0.5), random({9, 3}, r, 0.5), random({9}, r, 0.5)}; };
      auto f = dir(), b = dir();
      return reduce(
          [=] {
            auto o = nn::bigru(x, f, b);
            return final_state ? o.final : o.outputs;
          },
          {x, f.w, f.u, f.b, b.w, b.u, b.b}, r);
    });
  }
  add("concat", [](RngStream& r) {
    auto a = random({2, 3, 4}, r), b = random({2, 1, 4}, r), c = random({2, 2, 4}, r);
    return reduce([=] { return nn::concat<D>({a, b, c}, 1); }, {a, b, c}, r);
  });
  add("add_mul_scalar", [](RngStream& r) {
    auto a = random({2, 3}, r), b = random({2, 3}, r);
    return reduce([=] { return nn::mul_scalar(nn::add(a, b), 0.7); }, {a, b}, r);
  });
  add("scale_channels", [](RngStream& r) {
    auto y = random({2, 3, 5}, r), a = random({2, 3}, r);
    return reduce([=] { return nn::scale_channels(y, a); }, {y, a}, r);
  });
  add("scale_time", [](RngStream& r) {
    auto y = random({2, 3, 5}, r), s = random({2, 1, 5}, r);
    return reduce([=] { return nn::scale_time(y, s); }, {y, s}, r);
  });
  add("transpose12", [](RngStream& r) {
    auto x = random({2, 3, 4}, r);
    return reduce([=] { return nn::transpose12(x); }, {x}, r);
  });
  add("bmm", [](RngStream& r) {
    auto a = random({2, 3, 4}, r), b = random({2, 4, 5}, r);
    return reduce([=] { return nn::bmm(a, b); }, {a, b}, r);
  });
  add("bmm_transposed", [](RngStream& r) {
    auto a = random({2, 3, 4}, r), b = random({2, 5, 4}, r);
    return reduce([=] { return nn::bmm(a, b, true); }, {a, b}, r);
  });
  add("softmax", [](RngStream& r) {
    auto x = random({2, 3, 4}, r);
    return reduce([=] { return nn::softmax(x); }, {x}, r);
  });
  add("softmax_cross_entropy", [](RngStream& r) {
    auto x = random({4, 3}, r);
    std::vector<int> t;
    for (int i = 0; i < 4; ++i) t.push_back(static_cast<int>(r.below(3)));
    return GradCase{[=] { return nn::softmax_cross_entropy<D>(x, t); }, {x}};
  });
  add("dropout", [](RngStream& r) {
    auto x = random({2, 8}, r);
    const auto key = r.key();
    return reduce(
        [=] {
          RngStream d(key);
          return nn::dropout(x, 0.25, Mode::Train, d);
        },
        {x}, r);
  });

  // Model blocks, with their parameters.
  auto block = [&](std::string name, auto build) {
    add(std::move(name), [build](RngStream& r) {
      auto store = std::make_shared<model::ParamStore<D>>(r.split("init"));
      auto fn = build(*store, r);
      perturb(*store, r);
      auto wrt = params_of(store);
      wrt.insert(wrt.end(), fn.first.begin(), fn.first.end());
      auto f = fn.second;
      return reduce([store, f] { return f(); }, wrt, r);
    });
  };
  block("parallel_conv_block", [](model::ParamStore<D>& ps, RngStream& r) {
    auto layer = model::make_parallel_conv_block(ps, "p", 3, {3, 4}, 4);
    auto x = random({2, 3, 10}, r);
    return std::pair{std::vector<TensorD>{x}, std::function<TensorD()>([=] { return layer(x, Mode::Train); })};
  });
  block("channel_attention", [](model::ParamStore<D>& ps, RngStream& r) {
    auto layer = model::make_channel_attention(ps, "ca", 8, 4);
    auto x = random({2, 8, 9}, r);
    return std::pair{std::vector<TensorD>{x}, std::function<TensorD()>([=] { return layer(x).output; })};
  });
  block("temporal_attention", [](model::ParamStore<D>& ps, RngStream& r) {
    auto layer = model::make_temporal_attention(ps, "ta");
    auto x = random({2, 4, 9}, r);
    return std::pair{std::vector<TensorD>{x}, std::function<TensorD()>([=] { return layer(x).output; })};
  });
  for (auto kind : {BlockKind::ResNetCBAM, BlockKind::ResNetPlain, BlockKind::DSC, BlockKind::DSCCBAM}) {
    block(std::string("res_block_") + std::string(to_string(kind)), [kind](model::ParamStore<D>& ps, RngStream& r) {
      auto layer = model::make_res_block(ps, "b", 8, kind, 4);
      auto x = random({2, 8, 16}, r);
      return std::pair{std::vector<TensorD>{x}, std::function<TensorD()>([=] { return layer(x, Mode::Train); })};
    });
  }
  block("fusion_attention", [](model::ParamStore<D>& ps, RngStream& r) {
    auto layer = model::make_fusion(ps, "f", 6);
    auto a = random({2, 2, 5}, r), b = random({2, 4, 5}, r);
    return std::pair{std::vector<TensorD>{a, b}, std::function<TensorD()>([=] { return layer({a, b}).output; })};
  });
  block("head_gru", [](model::ParamStore<D>& ps, RngStream& r) {
    auto head = model::make_head(ps, "h", 6, 6, 3, true, 3, 0.0);
    auto x = random({2, 6, 5}, r);
    return std::pair{std::vector<TensorD>{x}, std::function<TensorD()>([=] { return head(x, nn::transpose12(x), Mode::Train, nullptr); })};
  });
  return cases;
}

Case network_case() {
  return {"network_tiny_eeg", 1e-3, [](RngStream& r) {
            const Modality eeg[] = {Modality::EEG};
            const NetConfig cfg = NetConfig::tiny(eeg, 2);
            auto net = std::make_shared<model::Model<D>>(cfg, r.split("init").key());
            const auto& m = cfg.modalities.front();
            auto x = random({2, m.in_channels, m.window_length()}, r);
            const std::vector<int> targets{0, 1};
            const auto key = r.split("dropout").key();
            std::vector<TensorD> wrt;
            for (const auto& p : net->parameters()) wrt.push_back(p.tensor);
            wrt.push_back(x);
            return GradCase{[=] {
                              RngStream d(key);
                              return nn::softmax_cross_entropy<D>(net->forward({x}, Mode::Train, &d), targets);
                            },
                            wrt};
          }};
}

}  // namespace

std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& options) {
  auto cases = layer_cases();
  if (options.include_network) cases.push_back(network_case());
  std::vector<GradSuiteEntry> out;
  const RngStream root(options.base_seed);
  for (const auto& c : cases) {
    GradSuiteEntry e;
    e.name = c.name;
    e.threshold = c.threshold;
    const auto start = std::chrono::steady_clock::now();
    for (int s = 0; s < options.seeds; ++s) {
      nn::GradCheckOptions opt;
      const bool network = c.threshold > 1e-4;
      if (network) opt.max_coords_per_tensor = options.network_coords_per_tensor;
      opt.sample_seed = root.split("coords").split(static_cast<std::uint64_t>(s)).key();
      const auto res = nn::grad_check_resampling(
          [&](int attempt) {
            RngStream r = root.split(c.name).split(static_cast<std::uint64_t>(s)).split(static_cast<std::uint64_t>(attempt));
            return c.make(r);
          },
          opt);
      e.max_rel_error = std::max(e.max_rel_error, res.max_rel_error);
      e.coords_checked += res.coords_checked;
      e.kinks += res.kinks;
    }
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.push_back(e);
  }
  return out;
}

}  // namespace uniphynet
