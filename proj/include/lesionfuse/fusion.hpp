#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lesionfuse/backbones.hpp"
#include "lesionfuse/fault.hpp"
#include "lesionfuse/nn.hpp"

namespace lesionfuse {

// ---------------------------------------------------------------------------
// Adapter
// ---------------------------------------------------------------------------

struct AdaptedFeatures {
  Tensor v;  // [B x d_f]
  std::size_t dim = 0;
};

/// Reformats any backbone output to a flat [B x d_f] vector: spatial maps are average
/// pooled over H x W, token sequences keep only the class token, and multi-token bundles
/// concatenate their class tokens in order.
inline AdaptedFeatures adapt(const FeatureBundle& features) {
  validate(features);
  Tensor v = std::visit(
      [](const auto& f) -> Tensor {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, SpatialMap>) {
          return adaptive_avg_pool_1x1(f.map);
        } else if constexpr (std::is_same_v<T, TokenSeq>) {
          const std::size_t B = f.tokens.dim(0), d = f.tokens.dim(2);
          return reshape(slice(f.tokens, 1, 0, 1), {B, d});
        } else {
          return concat(f.tokens, 1);
        }
      },
      features);
  return {v, v.dim(1)};
}

// ---------------------------------------------------------------------------
// Fusion blocks
// ---------------------------------------------------------------------------

enum class FusionKind { concat, metablock, metanet, mat };

inline constexpr FusionKind kAllFusionKinds[] = {FusionKind::concat, FusionKind::mat, FusionKind::metablock,
                                                 FusionKind::metanet};

inline std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::concat: return "concat";
    case FusionKind::metablock: return "metablock";
    case FusionKind::metanet: return "metanet";
    case FusionKind::mat: return "mat";
  }
  return "?";
}

/// Section heading used in rendered comparison tables.
inline std::string display_name(FusionKind kind) {
  switch (kind) {
    case FusionKind::concat: return "Concatenation Fusion";
    case FusionKind::metablock: return "MetaBlock Fusion";
    case FusionKind::metanet: return "MetaNet Fusion";
    case FusionKind::mat: return "MAT Fusion";
  }
  return "?";
}

inline FusionKind parse_fusion_kind(const std::string& name) {
  for (auto k : kAllFusionKinds)
    if (to_string(k) == name) return k;
  throw ConfigError("unknown fusion kind \"" + name + "\"; valid kinds: concat, metablock, metanet, mat");
}

struct FusionConfig {
  FusionKind kind = FusionKind::concat;
  std::size_t metanet_hidden = 64;
  std::size_t mat_chunks = 8;
  std::size_t mat_attn_dim = 32;
  std::size_t mat_heads = 4;
  bool operator==(const FusionConfig&) const = default;
};

class FusionBlock : public Module {
 public:
  FusionBlock(std::size_t image_dim, std::size_t metadata_dim) : image_dim_(image_dim), metadata_dim_(metadata_dim) {}

  virtual FusionKind kind() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual Tensor fuse(const Tensor& v, const Tensor& m) const = 0;

  Tensor forward(const Tensor& v, const Tensor& m) const {
    check_inputs(v, m);
    return fuse(v, m);
  }

  std::size_t image_dim() const { return image_dim_; }
  std::size_t metadata_dim() const { return metadata_dim_; }

 protected:
  void check_inputs(const Tensor& v, const Tensor& m) const {
    if (v.rank() != 2 || m.rank() != 2 || v.dim(0) != m.dim(0) || v.dim(1) != image_dim_ || m.dim(1) != metadata_dim_)
      throw ShapeError(to_string(kind()) + ": expected image [B x " + std::to_string(image_dim_) + "] and metadata [B x " +
                       std::to_string(metadata_dim_) + "], got " + lesionfuse::to_string(v.shape()) + " and " +
                       lesionfuse::to_string(m.shape()));
  }

 private:
  std::size_t image_dim_, metadata_dim_;
};

/// f = [v ; m]. Parameter-free.
class ConcatFusion : public FusionBlock {
 public:
  using FusionBlock::FusionBlock;
  FusionKind kind() const override { return FusionKind::concat; }
  std::size_t output_dim() const override { return image_dim() + metadata_dim(); }
  Tensor fuse(const Tensor& v, const Tensor& m) const override {
    return fault::point("fuse_concat", concat({v, m}, 1));
  }
  void collect_parameters(const std::string&, std::vector<NamedTensor>&) const override {}
  void reset_parameters(InitScheme, Rng&) override {}
};

/// Metadata-driven gating: f = sigmoid(tanh(W_b m + b_b) * v + (W_c m + b_c)).
class MetaBlockFusion : public FusionBlock {
 public:
  MetaBlockFusion(std::size_t image_dim, std::size_t metadata_dim, std::uint64_t seed)
      : FusionBlock(image_dim, metadata_dim), gate_(metadata_dim, image_dim), shift_(metadata_dim, image_dim) {
    init_params(*this, {InitScheme::uniform_fan, seed});
  }
  FusionKind kind() const override { return FusionKind::metablock; }
  std::size_t output_dim() const override { return image_dim(); }

  Tensor fuse(const Tensor& v, const Tensor& m) const override {
    Tensor pre = add(mul(tanh(gate_.forward(m)), v), shift_.forward(m));
    return sigmoid(fault::point("fuse_metablock", pre));
  }

  Linear& gate() { return gate_; }
  Linear& shift() { return shift_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    gate_.collect_parameters(join_name(prefix, "gate"), out);
    shift_.collect_parameters(join_name(prefix, "shift"), out);
  }
  void reset_parameters(InitScheme scheme, Rng& rng) override {
    gate_.reset_parameters(scheme, rng);
    shift_.reset_parameters(scheme, rng);
  }

 private:
  Linear gate_, shift_;
};

/// Per-coordinate importance from metadata: f = sigmoid(W2 relu(W1 m + b1) + b2) * v.
class MetaNetFusion : public FusionBlock {
 public:
  MetaNetFusion(std::size_t image_dim, std::size_t metadata_dim, std::size_t hidden, std::uint64_t seed)
      : FusionBlock(image_dim, metadata_dim), scale_net_(metadata_dim, hidden, image_dim) {
    init_params(*this, {InitScheme::uniform_fan, seed});
  }
  FusionKind kind() const override { return FusionKind::metanet; }
  std::size_t output_dim() const override { return image_dim(); }

  Tensor channel_scale(const Tensor& m) const { return sigmoid(scale_net_.forward(m)); }

  Tensor fuse(const Tensor& v, const Tensor& m) const override {
    return mul(fault::point("fuse_metanet", channel_scale(m)), v);
  }

  Mlp& scale_net() { return scale_net_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    scale_net_.collect_parameters(join_name(prefix, "scale"), out);
  }
  void reset_parameters(InitScheme scheme, Rng& rng) override { scale_net_.reset_parameters(scheme, rng); }

 private:
  Mlp scale_net_;
};

/// Guided cross-attention: the image vector is zero-padded and split into T chunks that
/// are projected to attention tokens; a single metadata query attends over them, then a
/// residual MLP. Output is [attended ; query].
class MatFusion : public FusionBlock {
 public:
  struct Result {
    Tensor fused;    // [B x 2*attn_dim]
    Tensor weights;  // [B x heads x 1 x T]
  };

  MatFusion(std::size_t image_dim, std::size_t metadata_dim, std::size_t chunks, std::size_t attn_dim,
            std::size_t heads, std::uint64_t seed)
      : FusionBlock(image_dim, metadata_dim),
        chunks_(validated_chunks(chunks)),
        chunk_len_((image_dim + chunks - 1) / chunks),
        attn_dim_(attn_dim),
        chunk_proj_(chunk_len_, attn_dim),
        query_proj_(metadata_dim, attn_dim),
        attention_(attn_dim, heads),
        unit_(attn_dim, 2 * attn_dim, attn_dim) {
    init_params(*this, {InitScheme::uniform_fan, seed});
  }

  FusionKind kind() const override { return FusionKind::mat; }
  std::size_t output_dim() const override { return 2 * attn_dim_; }
  std::size_t chunks() const { return chunks_; }
  std::size_t chunk_length() const { return chunk_len_; }

  /// [B x d_f] -> [B x T x attn_dim] image tokens.
  Tensor image_tokens(const Tensor& v) const {
    const std::size_t B = v.dim(0), padded = chunks_ * chunk_len_;
    Tensor x = padded == image_dim() ? v : concat({v, Tensor::zeros({B, padded - image_dim()})}, 1);
    return chunk_proj_.forward(reshape(x, {B, chunks_, chunk_len_}));
  }

  Result forward_with_weights(const Tensor& v, const Tensor& m) const {
    check_inputs(v, m);
    const std::size_t B = v.dim(0);
    Tensor tokens = image_tokens(v);
    Tensor q = reshape(query_proj_.forward(m), {B, 1, attn_dim_});
    auto att = attention_.forward_with_weights(q, tokens);
    Tensor a = add(q, att.output);
    Tensor u = add(a, unit_.forward(a));
    Tensor fused = concat({reshape(u, {B, attn_dim_}), reshape(q, {B, attn_dim_})}, 1);
    return {fault::point("fuse_mat", fused), att.weights};
  }

  Tensor fuse(const Tensor& v, const Tensor& m) const override { return forward_with_weights(v, m).fused; }

  Linear& chunk_projection() { return chunk_proj_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    chunk_proj_.collect_parameters(join_name(prefix, "chunk_proj"), out);
    query_proj_.collect_parameters(join_name(prefix, "query_proj"), out);
    attention_.collect_parameters(join_name(prefix, "attn"), out);
    unit_.collect_parameters(join_name(prefix, "unit"), out);
  }
  void reset_parameters(InitScheme scheme, Rng& rng) override {
    chunk_proj_.reset_parameters(scheme, rng);
    query_proj_.reset_parameters(scheme, rng);
    attention_.reset_parameters(scheme, rng);
    unit_.reset_parameters(scheme, rng);
  }

 private:
  static std::size_t validated_chunks(std::size_t chunks) {
    if (chunks < 2)
      throw ConfigError("MAT fusion needs at least 2 image chunks (got " + std::to_string(chunks) +
                        "); a single key makes attention constant");
    return chunks;
  }

  std::size_t chunks_, chunk_len_, attn_dim_;
  Linear chunk_proj_, query_proj_;
  MultiHeadAttention attention_;
  Mlp unit_;
};

inline std::unique_ptr<FusionBlock> make_fusion(const FusionConfig& cfg, std::size_t image_dim,
                                                std::size_t metadata_dim, std::uint64_t seed) {
  switch (cfg.kind) {
    case FusionKind::concat: return std::make_unique<ConcatFusion>(image_dim, metadata_dim);
    case FusionKind::metablock: return std::make_unique<MetaBlockFusion>(image_dim, metadata_dim, seed);
    case FusionKind::metanet:
      return std::make_unique<MetaNetFusion>(image_dim, metadata_dim, cfg.metanet_hidden, seed);
    case FusionKind::mat:
      return std::make_unique<MatFusion>(image_dim, metadata_dim, cfg.mat_chunks, cfg.mat_attn_dim, cfg.mat_heads,
                                         seed);
  }
  throw ConfigError("unhandled fusion kind");
}

// ---------------------------------------------------------------------------
// Reducer + classifier
// ---------------------------------------------------------------------------

/// logits = W_cls relu(W_red f + b_red) + b_cls; the reducer width is the same for every
/// backbone/fusion pair.
class ReducerHead : public Module {
 public:
  ReducerHead(std::size_t fused_dim, std::size_t reducer_dim, std::size_t classes, std::uint64_t seed)
      : reducer_(fused_dim, reducer_dim), classifier_(reducer_dim, classes) {
    init_params(*this, {InitScheme::uniform_fan, seed});
  }

  std::size_t input_dim() const { return reducer_.in_features(); }
  std::size_t reducer_dim() const { return reducer_.out_features(); }
  std::size_t classes() const { return classifier_.out_features(); }

  Tensor reduce(const Tensor& f) const {
    if (f.rank() != 2 || f.dim(1) != input_dim())
      throw ShapeError("reducer expects [B x " + std::to_string(input_dim()) + "], got " + to_string(f.shape()));
    return relu(reducer_.forward(f));
  }

  Tensor forward(const Tensor& f) const { return fault::point("reduce_and_classify", classifier_.forward(reduce(f))); }

  Linear& reducer() { return reducer_; }
  Linear& classifier() { return classifier_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    reducer_.collect_parameters(join_name(prefix, "reducer"), out);
    classifier_.collect_parameters(join_name(prefix, "classifier"), out);
  }
  void reset_parameters(InitScheme scheme, Rng& rng) override {
    reducer_.reset_parameters(scheme, rng);
    classifier_.reset_parameters(scheme, rng);
  }

 private:
  Linear reducer_, classifier_;
};

inline Tensor reduce_and_classify(const ReducerHead& head, const Tensor& f) { return head.forward(f); }

// ---------------------------------------------------------------------------
// End-to-end model
// ---------------------------------------------------------------------------

/// Backbone -> adapter -> fusion -> reducer -> classifier.
class FusionModel : public Module {
 public:
  FusionModel(std::unique_ptr<Backbone> backbone, std::unique_ptr<FusionBlock> fusion, std::unique_ptr<ReducerHead> head)
      : backbone_(std::move(backbone)), fusion_(std::move(fusion)), head_(std::move(head)) {
    if (!backbone_ || !fusion_ || !head_) throw ConfigError("model: missing stage");
    if (fusion_->image_dim() != backbone_->feature_dim())
      throw ConfigError("model: adapter->fusion mismatch: " + to_string(backbone_->kind()) + " publishes " +
                        std::to_string(backbone_->feature_dim()) + " features but " + to_string(fusion_->kind()) +
                        " expects " + std::to_string(fusion_->image_dim()));
    if (head_->input_dim() != fusion_->output_dim())
      throw ConfigError("model: fusion->reducer mismatch: " + to_string(fusion_->kind()) + " emits " +
                        std::to_string(fusion_->output_dim()) + " but the reducer expects " +
                        std::to_string(head_->input_dim()));
  }

  Tensor forward(const Tensor& images, const Tensor& metadata) const {
    AdaptedFeatures features = adapt(backbone_->forward(images));
    if (features.dim != backbone_->feature_dim())
      throw ShapeError("adapter produced " + std::to_string(features.dim) + " features, backbone declared " +
                       std::to_string(backbone_->feature_dim()));
    return head_->forward(fusion_->forward(features.v, metadata));
  }

  const Backbone& backbone() const { return *backbone_; }
  const FusionBlock& fusion() const { return *fusion_; }
  const ReducerHead& head() const { return *head_; }
  Backbone& backbone() { return *backbone_; }
  FusionBlock& fusion() { return *fusion_; }
  ReducerHead& head() { return *head_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    backbone_->collect_parameters(join_name(prefix, "backbone"), out);
    fusion_->collect_parameters(join_name(prefix, "fusion"), out);
    head_->collect_parameters(join_name(prefix, "head"), out);
  }
  void reset_parameters(InitScheme scheme, Rng& rng) override {
    backbone_->reset_parameters(scheme, rng);
    fusion_->reset_parameters(scheme, rng);
    head_->reset_parameters(scheme, rng);
  }

 private:
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<FusionBlock> fusion_;
  std::unique_ptr<ReducerHead> head_;
};

inline Tensor model_forward(const FusionModel& model, const Tensor& images, const Tensor& metadata) {
  return model.forward(images, metadata);
}

struct BackboneConfig {
  BackboneKind kind = BackboneKind::tiny_cnn;
  TinyCnnConfig cnn{};
  TinyVitConfig vit{};
  TinyDualVitConfig dualvit{};
  bool operator==(const BackboneConfig&) const = default;
};

inline std::unique_ptr<Backbone> make_backbone(const BackboneConfig& cfg, const ImageShape& input, std::uint64_t seed) {
  switch (cfg.kind) {
    case BackboneKind::tiny_cnn: {
      auto c = cfg.cnn;
      c.input = input;
      return std::make_unique<TinyCnn>(c, seed);
    }
    case BackboneKind::tiny_vit: {
      auto c = cfg.vit;
      c.input = input;
      return std::make_unique<TinyVit>(c, seed);
    }
    case BackboneKind::tiny_dualvit: {
      auto c = cfg.dualvit;
      c.big.input = input;
      c.small.input = input;
      return std::make_unique<TinyDualVit>(c, seed);
    }
  }
  throw ConfigError("unhandled backbone kind");
}

struct ModelConfig {
  BackboneConfig backbone{};
  FusionConfig fusion{};
  std::size_t reducer_dim = 90;
  bool operator==(const ModelConfig&) const = default;
};

/// Builds and audits a model. Stage seeds are derived from `seed` so the backbone, fusion
/// block and head draw from independent streams.
inline FusionModel build_model(const ModelConfig& cfg, const ImageShape& input, std::size_t metadata_dim,
                               std::size_t classes, std::uint64_t seed) {
  auto backbone = make_backbone(cfg.backbone, input, seed * 3 + 0);
  auto fusion = make_fusion(cfg.fusion, backbone->feature_dim(), metadata_dim, seed * 3 + 1);
  auto head = std::make_unique<ReducerHead>(fusion->output_dim(), cfg.reducer_dim, classes, seed * 3 + 2);
  return FusionModel(std::move(backbone), std::move(fusion), std::move(head));
}

}  // namespace lesionfuse
