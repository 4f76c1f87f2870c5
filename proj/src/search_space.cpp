// SPDX-License-Identifier: Apache-2.0
#include "resnas/search_space.hpp"

#include <algorithm>
#include <cmath>

namespace resnas {

namespace {

void check_descending(const std::vector<int>& v, const char* what) {
  if (v.empty()) throw ContractError(std::string("SearchSpaceDef: empty ") + what + " list");
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    if (v[i] <= v[i + 1]) {
      throw ContractError(std::string("SearchSpaceDef: ") + what +
                          " options must be sorted descending");
    }
  }
  if (v.back() <= 0) throw ContractError(std::string("SearchSpaceDef: nonpositive ") + what);
}

}  // namespace

void SearchSpaceDef::validate() const {
  int prev_max = 0;
  for (const auto& st : stages) {
    check_descending(st.embed_options, "embed");
    check_descending(st.head_options, "head");
    check_descending(st.hidden_options, "hidden");
    if (st.head_dim < 1) throw ContractError("SearchSpaceDef: head_dim must be positive");
    if (st.num_pairs < 0 || st.num_slots() < 1) {
      throw ContractError("SearchSpaceDef: each stage needs at least one block slot");
    }
    // The parameter-free pooling branch pads channels upward, so any chosen
    // next-stage width must cover every previous-stage width.
    if (st.embed_options.back() <= prev_max) {
      throw ContractError(
          "SearchSpaceDef: smallest embed option must exceed the previous stage's largest");
    }
    prev_max = st.embed_options.front();
  }
  if (stem_channels < 1 || num_classes < 1) {
    throw ContractError("SearchSpaceDef: bad stem_channels or num_classes");
  }
  if (input_resolution % 14 != 0 || (input_resolution / 14) % 4 != 0) {
    throw ContractError("SearchSpaceDef: input_resolution must keep the grid ladder integral");
  }
}

int gene_length(const SearchSpaceDef& space) {
  int n = 0;
  for (const auto& st : space.stages) n += 1 + 2 * st.num_slots() + st.num_skippable();
  return n;
}

std::vector<int> gene_option_counts(const SearchSpaceDef& space) {
  std::vector<int> counts;
  for (const auto& st : space.stages) {
    counts.push_back(static_cast<int>(st.embed_options.size()));
    for (int slot = 0; slot < st.num_slots(); ++slot) {
      counts.push_back(static_cast<int>(st.head_options.size()));
      counts.push_back(static_cast<int>(st.hidden_options.size()));
    }
    for (int t = 0; t < st.num_skippable(); ++t) counts.push_back(2);
  }
  return counts;
}

ArchGene encode_choice(const SubNetChoice& choice, const SearchSpaceDef& space) {
  ArchGene gene;
  auto index_of = [](const std::vector<int>& options, int value, const char* what) {
    auto it = std::find(options.begin(), options.end(), value);
    if (it == options.end()) {
      throw ContractError(std::string("encode_choice: ") + what + " value " +
                          std::to_string(value) + " not in the space");
    }
    return static_cast<int>(it - options.begin());
  };
  for (int s = 0; s < 3; ++s) {
    const auto& st = space.stages[static_cast<std::size_t>(s)];
    const auto su = static_cast<std::size_t>(s);
    gene.push_back(index_of(st.embed_options, choice.stage_embed[su], "embed"));
    if (static_cast<int>(choice.heads[su].size()) != st.num_slots() ||
        static_cast<int>(choice.hidden[su].size()) != st.num_slots() ||
        static_cast<int>(choice.keep[su].size()) != st.num_skippable()) {
      throw ContractError("encode_choice: choice does not match the space's slot counts");
    }
    for (int slot = 0; slot < st.num_slots(); ++slot) {
      gene.push_back(index_of(st.head_options, choice.heads[su][static_cast<std::size_t>(slot)],
                              "heads"));
      gene.push_back(index_of(st.hidden_options,
                              choice.hidden[su][static_cast<std::size_t>(slot)], "hidden"));
    }
    for (int t = 0; t < st.num_skippable(); ++t) {
      gene.push_back(choice.keep[su][static_cast<std::size_t>(t)] ? 0 : 1);
    }
  }
  return gene;
}

void validate_gene(const ArchGene& gene, const SearchSpaceDef& space) {
  const std::vector<int> counts = gene_option_counts(space);
  if (gene.size() != counts.size()) {
    throw ContractError("gene length " + std::to_string(gene.size()) +
                        " does not match the space (" + std::to_string(counts.size()) + ")");
  }
  for (std::size_t i = 0; i < gene.size(); ++i) {
    if (gene[i] < 0 || gene[i] >= counts[i]) {
      throw ContractError("gene index out of range at position " + std::to_string(i));
    }
  }
}

SubNetChoice decode_gene(const ArchGene& gene, const SearchSpaceDef& space) {
  validate_gene(gene, space);
  SubNetChoice c;
  std::size_t p = 0;
  for (int s = 0; s < 3; ++s) {
    const auto& st = space.stages[static_cast<std::size_t>(s)];
    const auto su = static_cast<std::size_t>(s);
    c.stage_embed[su] = st.embed_options[static_cast<std::size_t>(gene[p++])];
    for (int slot = 0; slot < st.num_slots(); ++slot) {
      c.heads[su].push_back(st.head_options[static_cast<std::size_t>(gene[p++])]);
      c.hidden[su].push_back(st.hidden_options[static_cast<std::size_t>(gene[p++])]);
    }
    for (int t = 0; t < st.num_skippable(); ++t) {
      c.keep[su].push_back(gene[p++] == 0 ? 1 : 0);
    }
  }
  return c;
}

SubNetChoice maximal_choice(const SearchSpaceDef& space) {
  ArchGene gene(static_cast<std::size_t>(gene_length(space)), 0);
  return decode_gene(gene, space);
}

Bounds full_bounds(const SearchSpaceDef& space) {
  return Bounds{gene_option_counts(space)};
}

SubNetChoice sample_choice(const SearchSpaceDef& space, Rng& rng, const Bounds& bounds) {
  const std::vector<int> counts = gene_option_counts(space);
  if (bounds.allowed.size() != counts.size()) {
    throw ContractError("sample_choice: bounds do not match the space");
  }
  ArchGene gene(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const int k = bounds.allowed[i];
    if (k < 1 || k > counts[i]) throw ContractError("sample_choice: empty or oversized bounds");
    gene[i] = rng.uniform_int(k);
  }
  return decode_gene(gene, space);
}

Bounds warmup_bounds(double epoch_fraction, const SearchSpaceDef& space, double warmup_end) {
  const std::vector<int> counts = gene_option_counts(space);
  Bounds b;
  b.allowed.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (epoch_fraction >= warmup_end) {
      b.allowed[i] = counts[i];
      continue;
    }
    const double f = std::max(0.0, epoch_fraction) / warmup_end;
    const int extra = static_cast<int>(std::floor(f * (counts[i] - 1)));
    b.allowed[i] = std::min(counts[i], 1 + extra);
  }
  return b;
}

ArchConfig choice_to_config(const SearchSpaceDef& space, const SubNetChoice& choice) {
  ArchConfig cfg;
  cfg.stem_channels = space.stem_channels;
  cfg.num_classes = space.num_classes;
  cfg.input_resolution = space.input_resolution;
  for (int s = 0; s < 3; ++s) {
    const auto& st = space.stages[static_cast<std::size_t>(s)];
    const auto su = static_cast<std::size_t>(s);
    StageConfig sc;
    sc.embed_dim = choice.stage_embed[su];
    int skippable_seen = 0;
    for (int slot = 0; slot < st.num_slots(); ++slot) {
      bool kept = true;
      if (st.slot_skippable(slot)) {
        kept = choice.keep[su][static_cast<std::size_t>(skippable_seen)] != 0;
        ++skippable_seen;
      }
      if (kept) {
        sc.blocks.push_back(BlockConfig{choice.heads[su][static_cast<std::size_t>(slot)],
                                        st.head_dim,
                                        choice.hidden[su][static_cast<std::size_t>(slot)]});
      }
    }
    cfg.stages.push_back(std::move(sc));
  }
  cfg.compute_grids();
  cfg.validate();
  return cfg;
}

ArchConfig supernet_config(const SearchSpaceDef& space) {
  return choice_to_config(space, maximal_choice(space));
}

}  // namespace resnas
