// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "resnas/ops.hpp"
#include "resnas/rng.hpp"
#include "resnas/tensor.hpp"

namespace resnas {

constexpr double kLayerNormEps = 1e-6;

/// One transformer block: h attention heads of width head_dim, FFN hidden size.
struct BlockConfig {
  int heads = 1;
  int head_dim = 64;
  int hidden = 1;
  int attn_width() const { return heads * head_dim; }
};

struct StageConfig {
  int embed_dim = 1;
  std::vector<BlockConfig> blocks;
  int grid = 0;  // patch grid side length, derived from input resolution
};

/// Full architectural description of a ViT-Res network.
struct ArchConfig {
  int stem_channels = 24;
  std::vector<StageConfig> stages;  // exactly 3
  int num_classes = 1000;
  int input_resolution = 224;

  void compute_grids();
  void validate() const;  // throws ContractError on invariant violations
  int stage_tokens(int stage) const { return stages[static_cast<std::size_t>(stage)].grid *
                                             stages[static_cast<std::size_t>(stage)].grid; }
  /// Patch count of the last stage; the token-labeling K.
  int last_stage_tokens() const { return stage_tokens(2); }
};

/// cls + patch tokens at one point of the network. N = grid_side^2.
struct TokenSequence {
  Tensor cls;      // [B, 1, d]
  Tensor patches;  // [B, N, d]
  int grid_side = 0;
};

/// Named collection of learnable tensors, ordered by registration. The order
/// is the checkpoint and optimizer traversal order.
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool decay;  // participates in weight decay
  };

  Tensor& add(const std::string& name, Tensor t, bool decay);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  void zero_grads();
  i64 total_params() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Per-example active widths and keep coefficients for one block site.
/// Null pointers mean "unmasked" (the plain single-architecture model).
struct BlockMaskView {
  const std::vector<i64>* embed = nullptr;
  const std::vector<i64>* attn = nullptr;
  const std::vector<i64>* hidden = nullptr;
  const std::vector<double>* keep = nullptr;
};

struct RsrMaskView {
  const std::vector<i64>* in_embed = nullptr;
  const std::vector<i64>* out_embed = nullptr;
};

/// Per-example masks for a whole forward pass, one entry per block slot.
struct ForwardMasks {
  std::array<std::vector<i64>, 3> stage_embed;            // [B]
  std::array<std::vector<std::vector<i64>>, 3> attn;      // [slot][B]
  std::array<std::vector<std::vector<i64>>, 3> hidden;    // [slot][B]
  std::array<std::vector<std::vector<double>>, 3> keep;   // [slot][B], 0 or 1
};

struct ForwardOptions {
  bool training = false;
  double drop_path_rate = 0.0;
  Rng* rng = nullptr;  // required when training with drop path
  const ForwardMasks* masks = nullptr;
};

struct ForwardResult {
  Tensor cls_logits;    // [B, classes]
  Tensor token_logits;  // [B, K, classes]
};

/// ViT-Res-Tiny exactly: stem C=24, stage dims 192/384/768, 4 blocks per
/// stage with head_dim 64 and h = 3/6/12, hidden 4x embed, resolution 224.
ArchConfig vit_res_tiny_config();

/// Builds all learnable tensors for the architecture, deterministically from
/// the seed, in the fixed registration order used everywhere else.
ModelParams init_params(const ArchConfig& cfg, std::uint64_t seed);

TokenSequence stem_tokenize(const Tensor& image, const ArchConfig& cfg,
                            const ModelParams& params, const ForwardMasks* masks = nullptr);

TokenSequence mhsa_forward(const TokenSequence& seq, const BlockConfig& block,
                           const ModelParams& params, const std::string& prefix,
                           const BlockMaskView& mask = {});

TokenSequence ffn_forward(const TokenSequence& seq, const BlockConfig& block,
                          const ModelParams& params, const std::string& prefix,
                          const BlockMaskView& mask = {});

TokenSequence block_forward(const TokenSequence& seq, const BlockConfig& block,
                            const ModelParams& params, const std::string& prefix,
                            double drop_path_rate, bool training, Rng* rng,
                            const BlockMaskView& mask = {});

/// Residual spatial reduction entering stage `stage_to` (1 or 2): doubles the
/// embedding width to d_next and halves the grid.
TokenSequence rsr_forward(const TokenSequence& seq, const ModelParams& params, int stage_to,
                          i64 d_next, const RsrMaskView& mask = {});

ForwardResult model_forward(const Tensor& image, const ArchConfig& cfg,
                            const ModelParams& params, const ForwardOptions& opts = {});

/// Convenience bundle of a config and its parameters.
class VitResModel {
 public:
  VitResModel(ArchConfig cfg, std::uint64_t seed);
  VitResModel(ArchConfig cfg, ModelParams params);

  ForwardResult forward(const Tensor& images, const ForwardOptions& opts = {}) {
    return model_forward(images, cfg_, params_, opts);
  }
  const ArchConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

 private:
  ArchConfig cfg_;
  ModelParams params_;
};

}  // namespace resnas
