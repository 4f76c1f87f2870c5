// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "resnas/model.hpp"
#include "resnas/rng.hpp"

namespace resnas {

/// Searchable dimensions of one stage. Option lists are sorted descending;
/// index 0 is always the largest (super-network) value. Block slots come in
/// (always, skippable) pairs, optionally followed by one extra always slot.
struct StageSpace {
  std::vector<int> embed_options;
  int num_pairs = 0;
  bool extra_block = false;
  std::vector<int> head_options;
  std::vector<int> hidden_options;
  int head_dim = 64;

  int num_slots() const { return 2 * num_pairs + (extra_block ? 1 : 0); }
  int num_skippable() const { return num_pairs; }
  /// True when the slot can be removed (second member of a pair).
  bool slot_skippable(int slot) const { return slot < 2 * num_pairs && slot % 2 == 1; }
};

struct SearchSpaceDef {
  std::array<StageSpace, 3> stages;
  int stem_channels = 24;
  int num_classes = 1000;
  int input_resolution = 224;
  long long max_macs = 0;  // resource constraint; 0 = unconstrained

  void validate() const;
};

/// One sub-network of the super-network: chosen embedding width per stage,
/// per-slot head counts and hidden sizes, and keep flags for skippable slots.
/// Values for skipped slots are carried (the genome is fixed-length) but do
/// not affect the network.
struct SubNetChoice {
  std::array<int, 3> stage_embed{};
  std::array<std::vector<int>, 3> heads;       // per slot
  std::array<std::vector<int>, 3> hidden;      // per slot
  std::array<std::vector<char>, 3> keep;       // per skippable slot, 1 = keep

  bool operator==(const SubNetChoice&) const = default;
};

/// Flat categorical index vector over the whole space; the evolutionary
/// search's genome. Layout per stage: embed index, then (head, hidden) index
/// pairs for every slot, then keep flags (0 = keep, 1 = skip).
using ArchGene = std::vector<int>;

/// Per-position allowed option counts: position i may take indices
/// [0, allowed[i]). Grown by the warmup schedule until the full space.
struct Bounds {
  std::vector<int> allowed;
};

/// Number of gene positions for the space.
int gene_length(const SearchSpaceDef& space);

/// Option-list size per gene position, in gene order.
std::vector<int> gene_option_counts(const SearchSpaceDef& space);

ArchGene encode_choice(const SubNetChoice& choice, const SearchSpaceDef& space);
SubNetChoice decode_gene(const ArchGene& gene, const SearchSpaceDef& space);
void validate_gene(const ArchGene& gene, const SearchSpaceDef& space);

/// The largest sub-network (index 0 everywhere, all blocks kept).
SubNetChoice maximal_choice(const SearchSpaceDef& space);

Bounds full_bounds(const SearchSpaceDef& space);

/// Draws every architectural parameter independently and uniformly from its
/// currently allowed prefix.
SubNetChoice sample_choice(const SearchSpaceDef& space, Rng& rng, const Bounds& bounds);

/// Progressive-shrinking schedule: at fraction 0 only the maxima are allowed;
/// each parameter gains one option at evenly spaced fractions until the full
/// space opens at warmup_end (default 25% of training).
Bounds warmup_bounds(double epoch_fraction, const SearchSpaceDef& space,
                     double warmup_end = 0.25);

/// Standalone architecture realized by a choice: kept blocks only, widths as
/// chosen, per-stage head_dim from the space.
ArchConfig choice_to_config(const SearchSpaceDef& space, const SubNetChoice& choice);

/// Architecture of the super-network itself (the maximal choice).
ArchConfig supernet_config(const SearchSpaceDef& space);

}  // namespace resnas
