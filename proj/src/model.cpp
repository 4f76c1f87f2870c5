// SPDX-License-Identifier: Apache-2.0
#include "resnas/model.hpp"

#include <cmath>
#include <string>

namespace resnas {

void ArchConfig::compute_grids() {
  int g = input_resolution / 14;
  for (auto& st : stages) {
    st.grid = g;
    g /= 2;
  }
}

void ArchConfig::validate() const {
  if (stages.size() != 3) throw ContractError("ArchConfig: exactly 3 stages required");
  if (stem_channels < 1) throw ContractError("ArchConfig: stem_channels must be positive");
  if (num_classes < 1) throw ContractError("ArchConfig: num_classes must be positive");
  if (input_resolution < 14 || input_resolution % 14 != 0) {
    throw ContractError("ArchConfig: input_resolution must be a positive multiple of 14");
  }
  const int g1 = input_resolution / 14;
  if (g1 % 4 != 0) {
    throw ContractError("ArchConfig: stage-1 grid must be divisible by 4 (two halvings)");
  }
  int expect = g1;
  int prev_dim = 0;
  for (const auto& st : stages) {
    if (st.grid != expect) throw ContractError("ArchConfig: grid must halve per stage");
    if (st.embed_dim <= prev_dim) {
      throw ContractError("ArchConfig: embed_dim must strictly increase across stages");
    }
    prev_dim = st.embed_dim;
    for (const auto& b : st.blocks) {
      if (b.heads < 1 || b.head_dim < 1 || b.hidden < 1) {
        throw ContractError("ArchConfig: block fields must be positive");
      }
    }
    expect /= 2;
  }
}

ArchConfig vit_res_tiny_config() {
  ArchConfig cfg;
  cfg.stem_channels = 24;
  cfg.num_classes = 1000;
  cfg.input_resolution = 224;
  const int dims[3] = {192, 384, 768};
  const int heads[3] = {3, 6, 12};
  for (int s = 0; s < 3; ++s) {
    StageConfig st;
    st.embed_dim = dims[s];
    st.blocks.assign(4, BlockConfig{heads[s], 64, dims[s] * 4});
    cfg.stages.push_back(st);
  }
  cfg.compute_grids();
  cfg.validate();
  return cfg;
}

Tensor& ModelParams::add(const std::string& name, Tensor t, bool decay) {
  if (index_.count(name)) throw ContractError("ModelParams: duplicate name " + name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, std::move(t), decay});
  return entries_.back().tensor;
}

Tensor& ModelParams::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ModelParams: unknown name " + name);
  return entries_[it->second].tensor;
}

const Tensor& ModelParams::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ModelParams: unknown name " + name);
  return entries_[it->second].tensor;
}

void ModelParams::zero_grads() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

i64 ModelParams::total_params() const {
  i64 n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

namespace {

Tensor trunc_normal_tensor(std::vector<i64> shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (i64 i = 0; i < t.numel(); ++i) {
    t.buf().set(static_cast<std::size_t>(i), rng.truncated_normal(stddev));
  }
  return t;
}

Tensor he_normal_conv(std::vector<i64> shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  const double stddev = std::sqrt(2.0 / fan_in);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (i64 i = 0; i < t.numel(); ++i) {
    t.buf().set(static_cast<std::size_t>(i), rng.gaussian() * stddev);
  }
  return t;
}

void add_linear(ModelParams& p, const std::string& prefix, i64 din, i64 dout, Rng& rng) {
  p.add(prefix + ".w", trunc_normal_tensor({din, dout}, 0.02, rng), true);
  p.add(prefix + ".b", Tensor::zeros({dout}, true), false);
}

void add_norm(ModelParams& p, const std::string& prefix, i64 dim) {
  p.add(prefix + ".gamma", Tensor::full({dim}, 1.0, true), false);
  p.add(prefix + ".beta", Tensor::zeros({dim}, true), false);
}

void add_conv(ModelParams& p, const std::string& prefix, i64 cout, i64 cin, i64 k, Rng& rng) {
  p.add(prefix + ".w", he_normal_conv({cout, cin, k, k}, rng), true);
  p.add(prefix + ".b", Tensor::zeros({cout}, true), false);
}

}  // namespace

ModelParams init_params(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams p;
  const i64 c = cfg.stem_channels;
  const i64 d1 = cfg.stages[0].embed_dim;

  add_conv(p, "stem.conv0", c, 3, 3, rng);
  add_conv(p, "stem.conv1", c, c, 3, rng);
  add_conv(p, "stem.conv2", c, c, 3, rng);
  add_conv(p, "stem.patch", d1, c, 7, rng);
  p.add("cls_token", trunc_normal_tensor({1, d1}, 0.02, rng), false);

  for (int s = 0; s < 3; ++s) {
    const auto& st = cfg.stages[static_cast<std::size_t>(s)];
    const i64 d = st.embed_dim;
    const i64 tokens = static_cast<i64>(st.grid) * st.grid + 1;
    if (s > 0) {
      const i64 dp = cfg.stages[static_cast<std::size_t>(s - 1)].embed_dim;
      const std::string rp = "rsr" + std::to_string(s);
      add_norm(p, rp + ".norm", dp);
      add_conv(p, rp + ".conv", d, dp, 3, rng);
      add_norm(p, rp + ".cls_norm", dp);
      add_linear(p, rp + ".cls_linear", dp, d, rng);
    }
    p.add("stage" + std::to_string(s) + ".pos", trunc_normal_tensor({tokens, d}, 0.02, rng),
          false);
    for (std::size_t i = 0; i < st.blocks.size(); ++i) {
      const auto& blk = st.blocks[i];
      const i64 aw = blk.attn_width();
      const std::string bp = "stage" + std::to_string(s) + ".block" + std::to_string(i);
      add_norm(p, bp + ".norm1", d);
      add_linear(p, bp + ".attn.q", d, aw, rng);
      add_linear(p, bp + ".attn.k", d, aw, rng);
      add_linear(p, bp + ".attn.v", d, aw, rng);
      add_linear(p, bp + ".attn.o", aw, d, rng);
      add_norm(p, bp + ".norm2", d);
      add_linear(p, bp + ".ffn.fc1", d, blk.hidden, rng);
      add_linear(p, bp + ".ffn.fc2", blk.hidden, d, rng);
    }
  }

  const i64 d3 = cfg.stages[2].embed_dim;
  add_norm(p, "final_norm", d3);
  add_linear(p, "head", d3, cfg.num_classes, rng);
  add_linear(p, "token_head", d3, cfg.num_classes, rng);
  return p;
}

namespace {

Tensor norm_site(const Tensor& x, const ModelParams& params, const std::string& prefix,
                 const std::vector<i64>* active) {
  const Tensor& gamma = params.get(prefix + ".gamma");
  const Tensor& beta = params.get(prefix + ".beta");
  if (active) return masked_layer_norm(x, *active, gamma, beta, kLayerNormEps);
  return layer_norm(x, gamma, beta, kLayerNormEps);
}

Tensor maybe_mask(Tensor x, const std::vector<i64>* widths) {
  if (!widths) return x;
  return mask_channels(x, *widths);
}

}  // namespace

TokenSequence stem_tokenize(const Tensor& image, const ArchConfig& cfg,
                            const ModelParams& params, const ForwardMasks* masks) {
  if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != cfg.input_resolution ||
      image.dim(3) != cfg.input_resolution) {
    throw DimensionError("stem_tokenize: image must be [B, 3, R, R] at the configured resolution");
  }
  const i64 batch = image.dim(0);
  Tensor h1 = gelu(conv2d(image, params.get("stem.conv0.w"), params.get("stem.conv0.b"), 2, 1));
  Tensor h2 = gelu(conv2d(h1, params.get("stem.conv1.w"), params.get("stem.conv1.b"), 1, 1));
  Tensor h3 = gelu(conv2d(h2, params.get("stem.conv2.w"), params.get("stem.conv2.b"), 1, 1));
  Tensor merged = add(h3, h1);  // skip connection from the first conv output
  Tensor pg = conv2d(merged, params.get("stem.patch.w"), params.get("stem.patch.b"), 7, 0);

  TokenSequence seq;
  seq.grid_side = static_cast<int>(pg.dim(2));
  seq.patches = grid_to_seq(pg);
  seq.cls = broadcast_batch(params.get("cls_token"), batch);

  const Tensor& pos = params.get("stage0.pos");
  const i64 n = seq.patches.dim(1);
  seq.patches = add_broadcast_batch(seq.patches, slice(pos, 0, 1, n));
  seq.cls = add_broadcast_batch(seq.cls, slice(pos, 0, 0, 1));
  if (masks) {
    seq.patches = mask_channels(seq.patches, masks->stage_embed[0]);
    seq.cls = mask_channels(seq.cls, masks->stage_embed[0]);
  }
  return seq;
}

TokenSequence mhsa_forward(const TokenSequence& seq, const BlockConfig& block,
                           const ModelParams& params, const std::string& prefix,
                           const BlockMaskView& mask) {
  if (seq.cls.shape().back() != params.get(prefix + ".attn.q.w").dim(0)) {
    throw DimensionError("mhsa_forward: sequence dim does not match block weights");
  }
  Tensor x = concat(seq.cls, seq.patches, 1);
  const i64 s = x.dim(1);
  Tensor q = maybe_mask(linear(x, params.get(prefix + ".attn.q.w"), params.get(prefix + ".attn.q.b")), mask.attn);
  Tensor k = maybe_mask(linear(x, params.get(prefix + ".attn.k.w"), params.get(prefix + ".attn.k.b")), mask.attn);
  Tensor v = maybe_mask(linear(x, params.get(prefix + ".attn.v.w"), params.get(prefix + ".attn.v.b")), mask.attn);
  Tensor qh = heads_split(q, block.heads);
  Tensor kh = heads_split(k, block.heads);
  Tensor vh = heads_split(v, block.heads);
  Tensor scores = scale(bmm(qh, kh, /*transpose_b=*/true),
                        1.0 / std::sqrt(static_cast<double>(block.head_dim)));
  Tensor probs = softmax_rows(scores);
  Tensor mixed = bmm(probs, vh);
  Tensor out = linear(heads_merge(mixed, block.heads), params.get(prefix + ".attn.o.w"),
                      params.get(prefix + ".attn.o.b"));
  out = maybe_mask(out, mask.embed);
  TokenSequence r;
  r.cls = slice(out, 1, 0, 1);
  r.patches = slice(out, 1, 1, s - 1);
  r.grid_side = seq.grid_side;
  return r;
}

TokenSequence ffn_forward(const TokenSequence& seq, const BlockConfig& block,
                          const ModelParams& params, const std::string& prefix,
                          const BlockMaskView& mask) {
  const Tensor& w1 = params.get(prefix + ".ffn.fc1.w");
  const Tensor& b1 = params.get(prefix + ".ffn.fc1.b");
  const Tensor& w2 = params.get(prefix + ".ffn.fc2.w");
  const Tensor& b2 = params.get(prefix + ".ffn.fc2.b");
  if (seq.cls.shape().back() != w1.dim(0)) {
    throw DimensionError("ffn_forward: sequence dim does not match block weights");
  }
  auto apply = [&](const Tensor& t) {
    Tensor h = maybe_mask(linear(t, w1, b1), mask.hidden);
    h = gelu(h);  // gelu(0) = 0, masked slots stay zero
    return maybe_mask(linear(h, w2, b2), mask.embed);
  };
  TokenSequence r;
  r.cls = apply(seq.cls);
  r.patches = apply(seq.patches);
  r.grid_side = seq.grid_side;
  return r;
}

namespace {

// One drop-path coefficient per example: 0 drops the branch, survivors are
// rescaled by 1/(1-rate). Block-skip flags fold in multiplicatively.
std::vector<double> branch_coefficients(i64 batch, double rate, bool training, Rng* rng,
                                        const std::vector<double>* keep) {
  std::vector<double> c(static_cast<std::size_t>(batch), 1.0);
  if (training && rate > 0.0) {
    if (!rng) throw ContractError("block_forward: drop path in training mode requires an rng");
    for (auto& v : c) v = rng->bernoulli(rate) ? 0.0 : 1.0 / (1.0 - rate);
  }
  if (keep) {
    for (i64 b = 0; b < batch; ++b) {
      c[static_cast<std::size_t>(b)] *= (*keep)[static_cast<std::size_t>(b)];
    }
  }
  return c;
}

bool all_ones(const std::vector<double>& c) {
  for (double v : c) {
    if (v != 1.0) return false;
  }
  return true;
}

}  // namespace

TokenSequence block_forward(const TokenSequence& seq, const BlockConfig& block,
                            const ModelParams& params, const std::string& prefix,
                            double drop_path_rate, bool training, Rng* rng,
                            const BlockMaskView& mask) {
  if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) {
    throw ContractError("block_forward: drop path rate must be in [0, 1)");
  }
  const i64 batch = seq.cls.dim(0);

  TokenSequence n1{norm_site(seq.cls, params, prefix + ".norm1", mask.embed),
                   norm_site(seq.patches, params, prefix + ".norm1", mask.embed),
                   seq.grid_side};
  TokenSequence attn = mhsa_forward(n1, block, params, prefix, mask);
  std::vector<double> c1 = branch_coefficients(batch, drop_path_rate, training, rng, mask.keep);
  TokenSequence mid;
  mid.grid_side = seq.grid_side;
  if (all_ones(c1)) {
    mid.cls = add(seq.cls, attn.cls);
    mid.patches = add(seq.patches, attn.patches);
  } else {
    mid.cls = add(seq.cls, scale_examples(attn.cls, c1));
    mid.patches = add(seq.patches, scale_examples(attn.patches, c1));
  }

  TokenSequence n2{norm_site(mid.cls, params, prefix + ".norm2", mask.embed),
                   norm_site(mid.patches, params, prefix + ".norm2", mask.embed),
                   seq.grid_side};
  TokenSequence ff = ffn_forward(n2, block, params, prefix, mask);
  std::vector<double> c2 = branch_coefficients(batch, drop_path_rate, training, rng, mask.keep);
  TokenSequence out;
  out.grid_side = seq.grid_side;
  if (all_ones(c2)) {
    out.cls = add(mid.cls, ff.cls);
    out.patches = add(mid.patches, ff.patches);
  } else {
    out.cls = add(mid.cls, scale_examples(ff.cls, c2));
    out.patches = add(mid.patches, scale_examples(ff.patches, c2));
  }
  return out;
}

TokenSequence rsr_forward(const TokenSequence& seq, const ModelParams& params, int stage_to,
                          i64 d_next, const RsrMaskView& mask) {
  if (seq.grid_side % 2 != 0) {
    throw DimensionError("rsr_forward: grid side must be even");
  }
  const std::string rp = "rsr" + std::to_string(stage_to);
  const i64 n_next = static_cast<i64>(seq.grid_side / 2) * (seq.grid_side / 2);

  // Residual branch: norm, strided conv on the 2D map, new position embeddings;
  // the cls token goes through norm + linear instead.
  Tensor np = norm_site(seq.patches, params, rp + ".norm", mask.in_embed);
  Tensor rpatches = grid_to_seq(conv2d(seq_to_grid(np), params.get(rp + ".conv.w"),
                                       params.get(rp + ".conv.b"), 2, 1));
  rpatches = maybe_mask(rpatches, mask.out_embed);
  Tensor nc = norm_site(seq.cls, params, rp + ".cls_norm", mask.in_embed);
  Tensor rcls = maybe_mask(linear(nc, params.get(rp + ".cls_linear.w"),
                                  params.get(rp + ".cls_linear.b")),
                           mask.out_embed);
  const Tensor& pos = params.get("stage" + std::to_string(stage_to) + ".pos");
  rpatches = maybe_mask(add_broadcast_batch(rpatches, slice(pos, 0, 1, n_next)), mask.out_embed);
  rcls = maybe_mask(add_broadcast_batch(rcls, slice(pos, 0, 0, 1)), mask.out_embed);

  // Main branch: average pooling plus zero channel padding, no parameters.
  Tensor mpatches = zero_pad_channels(grid_to_seq(avg_pool2d(seq_to_grid(seq.patches), 2, 2)),
                                      d_next);
  Tensor mcls = zero_pad_channels(seq.cls, d_next);

  TokenSequence out;
  out.cls = add(mcls, rcls);
  out.patches = add(mpatches, rpatches);
  out.grid_side = seq.grid_side / 2;
  return out;
}

ForwardResult model_forward(const Tensor& image, const ArchConfig& cfg,
                            const ModelParams& params, const ForwardOptions& opts) {
  const ForwardMasks* masks = opts.masks;
  if (masks && static_cast<i64>(masks->stage_embed[0].size()) != image.dim(0)) {
    throw ContractError("model_forward: mask batch does not match image batch");
  }
  TokenSequence seq = stem_tokenize(image, cfg, params, masks);
  for (int s = 0; s < 3; ++s) {
    const auto& st = cfg.stages[static_cast<std::size_t>(s)];
    if (s > 0) {
      RsrMaskView rmask;
      if (masks) {
        rmask.in_embed = &masks->stage_embed[static_cast<std::size_t>(s - 1)];
        rmask.out_embed = &masks->stage_embed[static_cast<std::size_t>(s)];
      }
      seq = rsr_forward(seq, params, s, st.embed_dim, rmask);
    }
    for (std::size_t i = 0; i < st.blocks.size(); ++i) {
      BlockMaskView bmask;
      if (masks) {
        bmask.embed = &masks->stage_embed[static_cast<std::size_t>(s)];
        bmask.attn = &masks->attn[static_cast<std::size_t>(s)][i];
        bmask.hidden = &masks->hidden[static_cast<std::size_t>(s)][i];
        bmask.keep = &masks->keep[static_cast<std::size_t>(s)][i];
      }
      const std::string bp = "stage" + std::to_string(s) + ".block" + std::to_string(i);
      seq = block_forward(seq, st.blocks[i], params, bp, opts.drop_path_rate, opts.training,
                          opts.rng, bmask);
    }
  }

  const std::vector<i64>* final_active = masks ? &masks->stage_embed[2] : nullptr;
  Tensor ncls = norm_site(seq.cls, params, "final_norm", final_active);
  Tensor npatches = norm_site(seq.patches, params, "final_norm", final_active);

  ForwardResult r;
  Tensor cls_logits = linear(ncls, params.get("head.w"), params.get("head.b"));
  r.cls_logits = reshape(cls_logits, {cls_logits.dim(0), cls_logits.dim(2)});
  r.token_logits = linear(npatches, params.get("token_head.w"), params.get("token_head.b"));
  return r;
}

VitResModel::VitResModel(ArchConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), params_(init_params(cfg_, seed)) {}

VitResModel::VitResModel(ArchConfig cfg, ModelParams params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

}  // namespace resnas
