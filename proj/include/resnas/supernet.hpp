// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "resnas/model.hpp"
#include "resnas/search_space.hpp"

namespace resnas {

/// Active-prefix widths realizing one sub-network inside the super-network:
/// embedding width per stage, attention/hidden width per block slot, and a
/// keep flag per slot (non-skippable slots are always 1).
struct MaskSet {
  std::array<i64, 3> stage_embed{};
  std::array<std::vector<i64>, 3> attn_width;
  std::array<std::vector<i64>, 3> hidden_width;
  std::array<std::vector<char>, 3> block_keep;
};

MaskSet masks_from_choice(const SubNetChoice& choice, const SearchSpaceDef& space);

/// Inverse of masks_from_choice (the choice is recoverable from the widths).
SubNetChoice choice_from_masks(const MaskSet& masks, const SearchSpaceDef& space);

/// Per-example masks for a batch of B examples covered by N_a choices;
/// example i uses choice floor(i * N_a / B). N_a must divide B.
ForwardMasks batch_masks(const std::vector<SubNetChoice>& choices, const SearchSpaceDef& space,
                         i64 batch);

/// Weight-sharing super-network: the maximal architecture of a search space
/// plus the masking machinery for multi-architectural sampling.
class Supernet {
 public:
  Supernet(SearchSpaceDef space, std::uint64_t seed);
  Supernet(SearchSpaceDef space, ModelParams params);

  const SearchSpaceDef& space() const { return space_; }
  const ArchConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  /// One tape, one forward pass; each sub-batch runs under its choice's masks.
  ForwardResult forward_multi(const Tensor& batch, const std::vector<SubNetChoice>& choices,
                              bool training = false, double drop_path_rate = 0.0,
                              Rng* rng = nullptr) const;

 private:
  SearchSpaceDef space_;
  ArchConfig cfg_;
  ModelParams params_;
};

/// Standalone sub-network: weights sliced to the chosen prefix widths,
/// skipped blocks omitted. Runs without any masking machinery.
struct ExtractedSubnet {
  ArchConfig config;
  ModelParams params;
};

ExtractedSubnet extract_subnet(const Supernet& supernet, const SubNetChoice& choice);

}  // namespace resnas
