#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lesionfuse/ops.hpp"
#include "lesionfuse/tensor.hpp"

namespace lesionfuse {

using Rng = std::mt19937_64;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class InitScheme { uniform_fan, zeros };

struct InitSpec {
  InitScheme scheme = InitScheme::uniform_fan;
  std::uint64_t seed = 0;
};

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline double fan_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline void fill_uniform(Tensor& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = dist(rng);
}

inline void fill_constant(Tensor& t, double value) {
  for (auto& v : t.data()) v = value;
}

inline Tensor parameter(Shape shape) {
  Tensor t(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

using NamedTensor = std::pair<std::string, Tensor>;

class Module {
 public:
  virtual ~Module() = default;

  virtual void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const = 0;
  virtual void reset_parameters(InitScheme scheme, Rng& rng) = 0;

  std::vector<NamedTensor> named_parameters(const std::string& prefix = "") const {
    std::vector<NamedTensor> out;
    collect_parameters(prefix, out);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.size();
    return n;
  }
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline void init_params(Module& module, const InitSpec& spec) {
  Rng rng(spec.seed);
  module.reset_parameters(spec.scheme, rng);
}

class Linear : public Module {
 public:
  Linear(std::size_t in, std::size_t out) : weight_(parameter({out, in})), bias_(parameter({out})) {}

  Tensor forward(const Tensor& x) const { return linear(x, weight_, bias_); }

  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.emplace_back(join_name(prefix, "weight"), weight_);
    out.emplace_back(join_name(prefix, "bias"), bias_);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    fill_constant(bias_, 0.0);
    if (scheme == InitScheme::zeros)
      fill_constant(weight_, 0.0);
    else
      fill_uniform(weight_, fan_bound(in_features(), out_features()), rng);
  }

 private:
  Tensor weight_, bias_;
};

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding)
      : weight_(parameter({out_channels, in_channels, kernel, kernel})),
        bias_(parameter({out_channels})),
        stride_(stride),
        padding_(padding) {}

  Tensor forward(const Tensor& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

  std::size_t out_channels() const { return weight_.dim(0); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.emplace_back(join_name(prefix, "weight"), weight_);
    out.emplace_back(join_name(prefix, "bias"), bias_);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    fill_constant(bias_, 0.0);
    const std::size_t kk = weight_.dim(2) * weight_.dim(3);
    if (scheme == InitScheme::zeros)
      fill_constant(weight_, 0.0);
    else
      fill_uniform(weight_, fan_bound(weight_.dim(1) * kk, weight_.dim(0) * kk), rng);
  }

 private:
  Tensor weight_, bias_;
  std::size_t stride_, padding_;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(std::size_t dim, double eps = 1e-5)
      : gain_(parameter({dim})), shift_(parameter({dim})), eps_(eps) {
    fill_constant(gain_, 1.0);
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain_, shift_, eps_); }

  Tensor& gain() { return gain_; }
  Tensor& shift() { return shift_; }
  double epsilon() const { return eps_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.emplace_back(join_name(prefix, "gain"), gain_);
    out.emplace_back(join_name(prefix, "shift"), shift_);
  }

  void reset_parameters(InitScheme scheme, Rng&) override {
    fill_constant(gain_, scheme == InitScheme::zeros ? 0.0 : 1.0);
    fill_constant(shift_, 0.0);
  }

 private:
  Tensor gain_, shift_;
  double eps_;
};

/// Two affine maps with a relu in between.
class Mlp : public Module {
 public:
  Mlp(std::size_t in, std::size_t hidden, std::size_t out) : fc1_(in, hidden), fc2_(hidden, out) {}

  Tensor forward(const Tensor& x) const { return fc2_.forward(relu(fc1_.forward(x))); }

  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    fc1_.collect_parameters(join_name(prefix, "fc1"), out);
    fc2_.collect_parameters(join_name(prefix, "fc2"), out);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    fc1_.reset_parameters(scheme, rng);
    fc2_.reset_parameters(scheme, rng);
  }

 private:
  Linear fc1_, fc2_;
};

struct AttentionOutput {
  Tensor output;   // [B x Tq x d]
  Tensor weights;  // [B x heads x Tq x Tk]
};

/// Scaled dot-product attention with `heads` heads over a model dimension divisible by
/// `heads`. Accepts [T x d] or batched [B x T x d] inputs.
class MultiHeadAttention : public Module {
 public:
  MultiHeadAttention(std::size_t model_dim, std::size_t heads)
      : heads_(heads), dim_(model_dim), wq_(model_dim, model_dim), wk_(model_dim, model_dim),
        wv_(model_dim, model_dim), wo_(model_dim, model_dim) {
    if (heads == 0 || model_dim % heads != 0)
      throw ConfigError("attention dimension " + std::to_string(model_dim) + " is not divisible by " +
                        std::to_string(heads) + " heads");
  }

  std::size_t heads() const { return heads_; }
  std::size_t model_dim() const { return dim_; }

  AttentionOutput forward_with_weights(const Tensor& queries, const Tensor& keys_values) const {
    const bool unbatched = queries.rank() == 2;
    Tensor q = unbatched ? reshape(queries, {1, queries.dim(0), queries.dim(1)}) : queries;
    Tensor kv = keys_values.rank() == 2 ? reshape(keys_values, {1, keys_values.dim(0), keys_values.dim(1)})
                                        : keys_values;
    if (q.rank() != 3 || kv.rank() != 3 || q.dim(2) != dim_ || kv.dim(2) != dim_ || q.dim(0) != kv.dim(0))
      throw ShapeError("attention: queries " + to_string(queries.shape()) + " and keys " +
                       to_string(keys_values.shape()) + " incompatible with model dim " + std::to_string(dim_));
    const std::size_t B = q.dim(0), tq = q.dim(1), tk = kv.dim(1), dh = dim_ / heads_;

    const std::size_t bh = B * heads_;
    Tensor Q = reshape(permute(reshape(wq_.forward(q), {B, tq, heads_, dh}), {0, 2, 1, 3}), {bh, tq, dh});
    Tensor Kt = reshape(permute(reshape(wk_.forward(kv), {B, tk, heads_, dh}), {0, 2, 3, 1}), {bh, dh, tk});
    Tensor V = reshape(permute(reshape(wv_.forward(kv), {B, tk, heads_, dh}), {0, 2, 1, 3}), {bh, tk, dh});
    Tensor w = softmax(scale(bmm(Q, Kt), 1.0 / std::sqrt(static_cast<double>(dh))), -1);
    Tensor ctx = bmm(w, V);
    ctx = reshape(permute(reshape(ctx, {B, heads_, tq, dh}), {0, 2, 1, 3}), {B, tq, dim_});
    Tensor out = wo_.forward(ctx);
    if (unbatched) out = reshape(out, {tq, dim_});
    return {out, reshape(w, {B, heads_, tq, tk})};
  }

  Tensor forward(const Tensor& queries, const Tensor& keys_values) const {
    return forward_with_weights(queries, keys_values).output;
  }

  Linear& query() { return wq_; }
  Linear& key() { return wk_; }
  Linear& value() { return wv_; }
  Linear& output() { return wo_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    wq_.collect_parameters(join_name(prefix, "q"), out);
    wk_.collect_parameters(join_name(prefix, "k"), out);
    wv_.collect_parameters(join_name(prefix, "v"), out);
    wo_.collect_parameters(join_name(prefix, "o"), out);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    wq_.reset_parameters(scheme, rng);
    wk_.reset_parameters(scheme, rng);
    wv_.reset_parameters(scheme, rng);
    wo_.reset_parameters(scheme, rng);
  }

 private:
  std::size_t heads_, dim_;
  Linear wq_, wk_, wv_, wo_;
};

/// Pre-norm encoder block: x + MHA(LN(x)), then x + MLP(LN(x)).
class TransformerBlock : public Module {
 public:
  TransformerBlock(std::size_t dim, std::size_t heads, std::size_t mlp_hidden)
      : ln1_(dim), attn_(dim, heads), ln2_(dim), mlp_(dim, mlp_hidden, dim) {}

  Tensor forward(const Tensor& x) const {
    Tensor h = ln1_.forward(x);
    Tensor y = add(x, attn_.forward(h, h));
    return add(y, mlp_.forward(ln2_.forward(y)));
  }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    ln1_.collect_parameters(join_name(prefix, "ln1"), out);
    attn_.collect_parameters(join_name(prefix, "attn"), out);
    ln2_.collect_parameters(join_name(prefix, "ln2"), out);
    mlp_.collect_parameters(join_name(prefix, "mlp"), out);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    ln1_.reset_parameters(scheme, rng);
    attn_.reset_parameters(scheme, rng);
    ln2_.reset_parameters(scheme, rng);
    mlp_.reset_parameters(scheme, rng);
  }

 private:
  LayerNorm ln1_;
  MultiHeadAttention attn_;
  LayerNorm ln2_;
  Mlp mlp_;
};

}  // namespace lesionfuse
