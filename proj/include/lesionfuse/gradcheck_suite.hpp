#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lesionfuse/backbones.hpp"
#include "lesionfuse/fusion.hpp"
#include "lesionfuse/gradcheck.hpp"
#include "lesionfuse/nn.hpp"
#include "lesionfuse/ops.hpp"

namespace lesionfuse {

struct ComponentCheck {
  std::string component;
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  double seconds = 0;
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<ComponentCheck> components;
  double tolerance = 1e-4;
  bool passed() const {
    for (const auto& c : components)
      if (!c.passed) return false;
    return !components.empty();
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& c : components)
      if (!c.passed) out.push_back(c.component);
    return out;
  }
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// Values in [-1,-margin] U [margin,1], away from the relu kink.
inline Tensor off_kink_tensor(Shape shape, Rng& rng, double margin = 0.1) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (auto& v : t.data()) v = std::copysign(margin + (1 - margin) * std::abs(v), v);
  return t;
}

/// Scalar probe: sum(y * R) for a fixed random R, so every output coordinate matters.
inline Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

inline std::vector<Tensor> with_params(const Module& m, std::vector<Tensor> inputs) {
  for (auto& p : m.parameters()) inputs.push_back(p);
  return inputs;
}

}  // namespace detail

/// Runs the finite-difference suite over every op, layer, backbone, fusion block and
/// end-to-end composition. Each component uses small shapes so every coordinate is checked.
inline GradSuiteReport run_gradcheck_suite(double tolerance = 1e-4, double h = 1e-5, std::uint64_t seed = 2024) {
  using detail::off_kink_tensor;
  using detail::probe;
  using detail::random_tensor;
  using detail::with_params;

  GradSuiteReport report;
  report.tolerance = tolerance;
  Rng rng(seed);

  auto run = [&](const std::string& name, const std::function<Tensor()>& loss, std::vector<Tensor> inputs) {
    const auto t0 = std::chrono::steady_clock::now();
    ComponentCheck c{name};
    try {
      auto r = check_gradients(loss, std::move(inputs), h);
      c.max_rel_error = r.max_rel_error;
      c.coordinates = r.coordinates;
      c.passed = r.max_rel_error <= tolerance;
    } catch (const NonFiniteError&) {
      c.max_rel_error = std::numeric_limits<double>::infinity();
      c.passed = false;
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.components.push_back(c);
  };

  {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    run("matmul", [=] { return probe(matmul(a, b), 1); }, {a, b});
  }
  {
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 3}, rng);
    run("bmm", [=] { return probe(bmm(a, b), 2); }, {a, b});
  }
  {
    Tensor x = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng), b = random_tensor({3}, rng);
    run("linear", [=] { return probe(linear(x, w, b), 3); }, {x, w, b});
  }
  {
    Tensor x = random_tensor({3, 2, 4}, rng), y = random_tensor({2, 4}, rng), z = random_tensor({3, 2, 4}, rng);
    run("add_mul_broadcast", [=] { return probe(mul(add(x, y), add(z, y)), 4); }, {x, y, z});
  }
  {
    Tensor x = random_tensor({3, 5}, rng, -3, 3);
    run("sigmoid_tanh", [=] { return probe(add(sigmoid(x), tanh(x)), 5); }, {x});
  }
  {
    Tensor x = off_kink_tensor({4, 6}, rng);
    run("relu", [=] { return probe(relu(x), 6); }, {x});
  }
  {
    Tensor x = random_tensor({3, 6}, rng, -2, 2);
    run("softmax", [=] { return probe(softmax(x), 7); }, {x});
  }
  {
    Tensor x = random_tensor({5, 6}, rng, -2, 2);
    const std::vector<int> labels{0, 5, 2, 3, 1};
    run("cross_entropy", [=] { return cross_entropy(x, labels); }, {x});
  }
  {
    Tensor x = random_tensor({3, 2, 5}, rng), g = random_tensor({5}, rng, 0.5, 1.5), s = random_tensor({5}, rng);
    run("layer_norm", [=] { return probe(layer_norm(x, g, s), 8); }, {x, g, s});
  }
  {
    Tensor x = random_tensor({2, 3, 4}, rng), y = random_tensor({2, 2, 4}, rng);
    run("shape_ops",
        [=] {
          Tensor c = concat({x, y}, 1);                   // [2 x 5 x 4]
          Tensor p = permute(c, {2, 0, 1});               // [4 x 2 x 5]
          Tensor s = slice(reshape(p, {8, 5}), 0, 1, 6);  // [6 x 5]
          return probe(s, 9);
        },
        {x, y});
  }
  {
    Tensor x = random_tensor({2, 2, 5, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    run("conv2d", [=] { return probe(conv2d(x, w, b, 2, 1), 10); }, {x, w, b});
  }
  {
    Tensor x = random_tensor({2, 3, 3, 4}, rng);
    run("adaptive_avg_pool", [=] { return probe(adaptive_avg_pool_1x1(x), 11); }, {x});
  }
  {
    MultiHeadAttention mha(8, 2);
    init_params(mha, {InitScheme::uniform_fan, 12});
    Tensor q = random_tensor({2, 3, 8}, rng), kv = random_tensor({2, 4, 8}, rng);
    run("attention", [&] { return probe(mha.forward(q, kv), 12); }, with_params(mha, {q, kv}));
  }
  {
    TransformerBlock block(8, 2, 12);
    init_params(block, {InitScheme::uniform_fan, 13});
    Tensor x = random_tensor({2, 3, 8}, rng);
    run("transformer_block", [&] { return probe(block.forward(x), 13); }, with_params(block, {x}));
  }

  const ImageShape small_image{3, 8, 8};
  {
    TinyCnn cnn({{2, 3}, 3, small_image}, 14);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    run("tiny_cnn", [&] { return probe(adapt(cnn.forward(x)).v, 14); }, with_params(cnn, {x}));
  }
  TinyVitConfig vit_small{4, 8, 1, 2, 12, small_image};
  {
    TinyVit vit(vit_small, 15);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    run("tiny_vit", [&] { return probe(std::get<TokenSeq>(vit.forward(x)).tokens, 15); }, with_params(vit, {x}));
  }
  {
    TinyDualVit dual({vit_small, {8, 4, 1, 2, 8, small_image}}, 16);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    run("tiny_dualvit", [&] { return probe(adapt(dual.forward(x)).v, 16); }, with_params(dual, {x}));
  }
  {
    Tensor tokens = random_tensor({2, 4, 5}, rng), map = random_tensor({2, 3, 2, 2}, rng);
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 4}, rng);
    run("adapter",
        [=] {
          Tensor s = adapt(SpatialMap{map}).v;
          Tensor t = adapt(TokenSeq{tokens}).v;
          Tensor u = adapt(MultiToken{{a, b}}).v;
          return add(add(probe(s, 17), probe(t, 18)), probe(u, 19));
        },
        {tokens, map, a, b});
  }

  const std::size_t d_f = 20, d_m = 7, B = 3;
  {
    ConcatFusion f(d_f, d_m);
    Tensor v = random_tensor({B, d_f}, rng), m = random_tensor({B, d_m}, rng);
    run("fuse_concat", [&] { return probe(f.forward(v, m), 20); }, {v, m});
  }
  {
    MetaBlockFusion f(d_f, d_m, 21);
    Tensor v = random_tensor({B, d_f}, rng), m = random_tensor({B, d_m}, rng);
    run("fuse_metablock", [&] { return probe(f.forward(v, m), 21); }, with_params(f, {v, m}));
  }
  {
    MetaNetFusion f(d_f, d_m, 9, 22);
    Tensor v = random_tensor({B, d_f}, rng), m = random_tensor({B, d_m}, rng);
    run("fuse_metanet", [&] { return probe(f.forward(v, m), 22); }, with_params(f, {v, m}));
  }
  {
    MatFusion f(d_f, d_m, 4, 8, 2, 23);
    Tensor v = random_tensor({B, d_f}, rng), m = random_tensor({B, d_m}, rng);
    run("fuse_mat", [&] { return probe(f.forward(v, m), 23); }, with_params(f, {v, m}));
  }
  {
    ReducerHead head(12, 9, 4, 24);
    Tensor f = random_tensor({B, 12}, rng);
    const std::vector<int> labels{3, 0, 2};
    run("reduce_and_classify", [&] { return cross_entropy(head.forward(f), labels); }, with_params(head, {f}));
  }

  struct EndToEnd {
    const char* name;
    BackboneKind backbone;
    FusionKind fusion;
  };
  const EndToEnd pairs[] = {{"end_to_end_cnn_concat", BackboneKind::tiny_cnn, FusionKind::concat},
                            {"end_to_end_cnn_metablock", BackboneKind::tiny_cnn, FusionKind::metablock},
                            {"end_to_end_vit_mat", BackboneKind::tiny_vit, FusionKind::mat},
                            {"end_to_end_dualvit_metanet", BackboneKind::tiny_dualvit, FusionKind::metanet}};
  for (const auto& pair : pairs) {
    ModelConfig mc;
    mc.backbone.kind = pair.backbone;
    mc.backbone.cnn = {{2, 3}, 3, small_image};
    mc.backbone.vit = vit_small;
    mc.backbone.dualvit = {vit_small, {8, 4, 1, 2, 8, small_image}};
    mc.fusion = {pair.fusion, 6, 2, 4, 2};
    mc.reducer_dim = 5;
    FusionModel model = build_model(mc, small_image, 4, 3, 25);
    Tensor x = random_tensor({2, 3, 8, 8}, rng), m = random_tensor({2, 4}, rng);
    const std::vector<int> labels{2, 0};
    run(pair.name, [&] { return cross_entropy(model.forward(x, m), labels); }, with_params(model, {x, m}));
  }
  return report;
}

}  // namespace lesionfuse
