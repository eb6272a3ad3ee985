#pragma once

#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "lesionfuse/fault.hpp"
#include "lesionfuse/nn.hpp"

namespace lesionfuse {

// Feature formats produced by image encoders.

/// [B x C x H x W] convolutional feature map.
struct SpatialMap {
  Tensor map;
};

/// [B x (1+N) x D] token sequence; index 0 along axis 1 is the class token.
struct TokenSeq {
  Tensor tokens;
};

/// Per-branch class tokens, each [B x D_i], in declared order.
struct MultiToken {
  std::vector<Tensor> tokens;
};

using FeatureBundle = std::variant<SpatialMap, TokenSeq, MultiToken>;

inline void validate(const FeatureBundle& bundle) {
  if (const auto* seq = std::get_if<TokenSeq>(&bundle)) {
    if (seq->tokens.rank() != 3 || seq->tokens.dim(1) < 2)
      throw ShapeError("token sequence needs a class token and at least one patch token, got " +
                       to_string(seq->tokens.shape()));
  } else if (const auto* multi = std::get_if<MultiToken>(&bundle)) {
    if (multi->tokens.size() < 2) throw ShapeError("multi-token bundle needs at least two class tokens");
    for (const auto& t : multi->tokens)
      if (t.rank() != 2 || t.dim(0) != multi->tokens[0].dim(0))
        throw ShapeError("multi-token entries must be [B x D_i] with a common batch size");
  } else if (std::get<SpatialMap>(bundle).map.rank() != 4) {
    throw ShapeError("spatial map must be [B x C x H x W]");
  }
}

enum class BackboneKind { tiny_cnn, tiny_vit, tiny_dualvit };

inline std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::tiny_cnn: return "tiny_cnn";
    case BackboneKind::tiny_vit: return "tiny_vit";
    case BackboneKind::tiny_dualvit: return "tiny_dualvit";
  }
  return "?";
}

struct ImageShape {
  std::size_t channels = 3, height = 32, width = 32;
  bool operator==(const ImageShape&) const = default;
};

/// Image encoder. `feature_dim()` is the length of the adapted feature vector.
class Backbone : public Module {
 public:
  virtual BackboneKind kind() const = 0;
  virtual FeatureBundle forward(const Tensor& images) const = 0;
  virtual std::size_t feature_dim() const = 0;
};

struct TinyCnnConfig {
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t kernel = 3;
  ImageShape input{};
  bool operator==(const TinyCnnConfig&) const = default;
};

/// Stride-2 conv + relu stages; each stage halves the spatial size.
class TinyCnn : public Backbone {
 public:
  TinyCnn(TinyCnnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.channels.empty()) throw ConfigError("tiny_cnn needs at least one stage");
    if (cfg_.kernel % 2 == 0) throw ConfigError("tiny_cnn kernel size must be odd");
    const auto& in = cfg_.input;
    if (in.height < 8 || in.width < 8)
      throw ConfigError("tiny_cnn input must be at least 8x8, got " + std::to_string(in.height) + "x" +
                        std::to_string(in.width));
    std::size_t h = in.height, w = in.width;
    std::size_t c = in.channels;
    for (auto out : cfg_.channels) {
      h = (h + 1) / 2;
      w = (w + 1) / 2;
      stages_.emplace_back(c, out, cfg_.kernel, 2, cfg_.kernel / 2);
      c = out;
    }
    if ((in.height >> cfg_.channels.size()) == 0 || (in.width >> cfg_.channels.size()) == 0)
      throw ConfigError("input " + std::to_string(in.height) + "x" + std::to_string(in.width) + " too small for " +
                        std::to_string(cfg_.channels.size()) + " stride-2 stages");
    out_h_ = h;
    out_w_ = w;
    init_params(*this, {InitScheme::uniform_fan, seed});
  }

  BackboneKind kind() const override { return BackboneKind::tiny_cnn; }
  std::size_t feature_dim() const override { return cfg_.channels.back(); }
  std::size_t output_height() const { return out_h_; }
  std::size_t output_width() const { return out_w_; }
  const TinyCnnConfig& config() const { return cfg_; }

  FeatureBundle forward(const Tensor& images) const override {
    check_images(images);
    Tensor x = images;
    for (const auto& stage : stages_) x = relu(stage.forward(x));
    return SpatialMap{fault::point("tiny_cnn", x)};
  }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    for (std::size_t i = 0; i < stages_.size(); ++i)
      stages_[i].collect_parameters(join_name(prefix, "stage" + std::to_string(i)), out);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    for (auto& s : stages_) s.reset_parameters(scheme, rng);
  }

 private:
  void check_images(const Tensor& images) const {
    const auto& in = cfg_.input;
    if (images.rank() != 4 || images.dim(1) != in.channels || images.dim(2) != in.height || images.dim(3) != in.width)
      throw ShapeError("tiny_cnn expects [B x " + std::to_string(in.channels) + " x " + std::to_string(in.height) +
                       " x " + std::to_string(in.width) + "], got " + to_string(images.shape()));
  }

  TinyCnnConfig cfg_;
  std::vector<Conv2d> stages_;
  std::size_t out_h_ = 0, out_w_ = 0;
};

struct TinyVitConfig {
  std::size_t patch_size = 8;
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 64;
  ImageShape input{};
  bool operator==(const TinyVitConfig&) const = default;
};

/// Patch embedding + learned class token and position embeddings + pre-norm encoder blocks.
class TinyVit : public Backbone {
 public:
  TinyVit(TinyVitConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    const auto& in = cfg_.input;
    const std::size_t p = cfg_.patch_size;
    if (p == 0 || in.height % p != 0 || in.width % p != 0)
      throw ConfigError("image " + std::to_string(in.height) + "x" + std::to_string(in.width) +
                        " is not divisible by patch size " + std::to_string(p));
    if (cfg_.depth == 0) throw ConfigError("tiny_vit depth must be positive");
    grid_h_ = in.height / p;
    grid_w_ = in.width / p;
    const std::size_t d = cfg_.embed_dim;
    embed_ = std::make_unique<Linear>(in.channels * p * p, d);
    class_token_ = parameter({1, d});
    positions_ = parameter({token_count(), d});
    for (std::size_t i = 0; i < cfg_.depth; ++i) blocks_.emplace_back(d, cfg_.heads, cfg_.mlp_hidden);
    norm_ = std::make_unique<LayerNorm>(d);
    init_params(*this, {InitScheme::uniform_fan, seed});
  }

  BackboneKind kind() const override { return BackboneKind::tiny_vit; }
  std::size_t feature_dim() const override { return cfg_.embed_dim; }
  std::size_t token_count() const { return 1 + grid_h_ * grid_w_; }
  const TinyVitConfig& config() const { return cfg_; }
  Tensor& position_embeddings() { return positions_; }
  Tensor& class_token() { return class_token_; }

  /// [B x C x H x W] -> [B x N x C*P*P], patches in row-major grid order.
  Tensor patchify(const Tensor& images) const {
    const auto& in = cfg_.input;
    if (images.rank() != 4 || images.dim(1) != in.channels || images.dim(2) != in.height || images.dim(3) != in.width)
      throw ShapeError("tiny_vit expects [B x " + std::to_string(in.channels) + " x " + std::to_string(in.height) +
                       " x " + std::to_string(in.width) + "], got " + to_string(images.shape()));
    const std::size_t B = images.dim(0), p = cfg_.patch_size;
    Tensor x = reshape(images, {B, in.channels, grid_h_, p, grid_w_, p});
    x = permute(x, {0, 2, 4, 1, 3, 5});
    return reshape(x, {B, grid_h_ * grid_w_, in.channels * p * p});
  }

  /// Encoder on already-flattened patches.
  Tensor encode_patches(const Tensor& patches) const {
    const std::size_t B = patches.dim(0);
    Tensor x = embed_->forward(patches);
    Tensor cls = reshape(broadcast_batch(class_token_, B), {B, 1, cfg_.embed_dim});
    x = add(concat({cls, x}, 1), positions_);
    for (const auto& block : blocks_) x = block.forward(x);
    return fault::point("tiny_vit", norm_->forward(x));
  }

  FeatureBundle forward(const Tensor& images) const override { return TokenSeq{encode_patches(patchify(images))}; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    embed_->collect_parameters(join_name(prefix, "patch_embed"), out);
    out.emplace_back(join_name(prefix, "class_token"), class_token_);
    out.emplace_back(join_name(prefix, "positions"), positions_);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect_parameters(join_name(prefix, "block" + std::to_string(i)), out);
    norm_->collect_parameters(join_name(prefix, "norm"), out);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    embed_->reset_parameters(scheme, rng);
    const double a = std::sqrt(3.0 / static_cast<double>(cfg_.embed_dim));
    if (scheme == InitScheme::zeros) {
      fill_constant(class_token_, 0.0);
      fill_constant(positions_, 0.0);
    } else {
      fill_uniform(class_token_, a, rng);
      fill_uniform(positions_, a, rng);
    }
    for (auto& b : blocks_) b.reset_parameters(scheme, rng);
    norm_->reset_parameters(scheme, rng);
  }

 private:
  TinyVitConfig cfg_;
  std::size_t grid_h_ = 0, grid_w_ = 0;
  std::unique_ptr<Linear> embed_;
  Tensor class_token_, positions_;
  std::vector<TransformerBlock> blocks_;
  std::unique_ptr<LayerNorm> norm_;
};

struct TinyDualVitConfig {
  TinyVitConfig big{8, 32, 2, 4, 64, {}};
  TinyVitConfig small{16, 16, 2, 4, 32, {}};
  bool operator==(const TinyDualVitConfig&) const = default;
};

/// Two independent ViT branches at different patch sizes; emits both class tokens.
class TinyDualVit : public Backbone {
 public:
  TinyDualVit(TinyDualVitConfig cfg, std::uint64_t seed) : TinyDualVit(std::move(cfg), seed, seed + 1) {}

  TinyDualVit(TinyDualVitConfig cfg, std::uint64_t big_seed, std::uint64_t small_seed)
      : cfg_(std::move(cfg)), big_(cfg_.big, big_seed), small_(cfg_.small, small_seed) {
    if (!(cfg_.big.input == cfg_.small.input)) throw ConfigError("dual ViT branches must share the input shape");
  }

  BackboneKind kind() const override { return BackboneKind::tiny_dualvit; }
  std::size_t feature_dim() const override { return cfg_.big.embed_dim + cfg_.small.embed_dim; }
  const TinyDualVitConfig& config() const { return cfg_; }
  TinyVit& big_branch() { return big_; }
  TinyVit& small_branch() { return small_; }

  FeatureBundle forward(const Tensor& images) const override {
    MultiToken out;
    for (const TinyVit* branch : {&big_, &small_}) {
      Tensor seq = std::get<TokenSeq>(branch->forward(images)).tokens;
      const std::size_t B = seq.dim(0), d = seq.dim(2);
      out.tokens.push_back(reshape(slice(seq, 1, 0, 1), {B, d}));
    }
    return out;
  }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    big_.collect_parameters(join_name(prefix, "big"), out);
    small_.collect_parameters(join_name(prefix, "small"), out);
  }

  void reset_parameters(InitScheme scheme, Rng& rng) override {
    big_.reset_parameters(scheme, rng);
    small_.reset_parameters(scheme, rng);
  }

 private:
  TinyDualVitConfig cfg_;
  TinyVit big_, small_;
};

}  // namespace lesionfuse
