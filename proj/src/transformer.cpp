#include "hmeta/transformer.hpp"

#include <cmath>

#include "hmeta/errors.hpp"

namespace hmeta {

Tensor positional_table(std::int64_t length, std::int64_t d_model) {
  if (length < 1) throw ContractError("positional table length must be >= 1");
  if (d_model < 2 || d_model % 2 != 0)
    throw ContractError("positional table needs even d_model >= 2");
  Tensor t({length, d_model});
  for (std::int64_t p = 0; p < length; ++p)
    for (std::int64_t i = 0; i < d_model / 2; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                static_cast<double>(d_model));
      const double arg = static_cast<double>(p) * freq;
      t.at(p, 2 * i) = std::sin(arg);
      t.at(p, 2 * i + 1) = std::cos(arg);
    }
  return t;
}

EncoderStack::EncoderStack(ParamRegistry& reg, std::string prefix,
                           StackConfig cfg, Rng& rng)
    : cfg_(cfg) {
  if (cfg_.d_model % cfg_.heads != 0)
    throw ContractError("d_model must be divisible by head count");
  if (cfg_.input_dim < 1) throw ContractError("input_dim must be >= 1");
  if (!cfg_.input_embed && cfg_.input_dim != cfg_.d_model)
    throw ContractError("without an input embed, input_dim must equal d_model");
  if (cfg_.input_embed) {
    embed_w_ = &reg.create_linear_weight(prefix + ".embed.w", cfg_.input_dim,
                                         cfg_.d_model, rng);
    embed_b_ = &reg.create(prefix + ".embed.b", {cfg_.d_model});
  }
  for (std::int64_t b = 0; b < cfg_.blocks; ++b) {
    const std::string bp = prefix + ".b" + std::to_string(b);
    BlockParams blk;
    blk.ln1_g = &reg.create_init(bp + ".ln1.g", Tensor::full({cfg_.d_model}, 1.0));
    blk.ln1_b = &reg.create(bp + ".ln1.b", {cfg_.d_model});
    blk.wq = &reg.create_linear_weight(bp + ".attn.wq", cfg_.d_model, cfg_.d_model, rng);
    blk.bq = &reg.create(bp + ".attn.bq", {cfg_.d_model});
    blk.wk = &reg.create_linear_weight(bp + ".attn.wk", cfg_.d_model, cfg_.d_model, rng);
    blk.bk = &reg.create(bp + ".attn.bk", {cfg_.d_model});
    blk.wv = &reg.create_linear_weight(bp + ".attn.wv", cfg_.d_model, cfg_.d_model, rng);
    blk.bv = &reg.create(bp + ".attn.bv", {cfg_.d_model});
    blk.wo = &reg.create_linear_weight(bp + ".attn.wo", cfg_.d_model, cfg_.d_model, rng);
    blk.bo = &reg.create(bp + ".attn.bo", {cfg_.d_model});
    blk.ln2_g = &reg.create_init(bp + ".ln2.g", Tensor::full({cfg_.d_model}, 1.0));
    blk.ln2_b = &reg.create(bp + ".ln2.b", {cfg_.d_model});
    blk.ff_w1 = &reg.create_linear_weight(bp + ".ff.w1", cfg_.d_model, cfg_.d_ff, rng);
    blk.ff_b1 = &reg.create(bp + ".ff.b1", {cfg_.d_ff});
    blk.ff_w2 = &reg.create_linear_weight(bp + ".ff.w2", cfg_.d_ff, cfg_.d_model, rng);
    blk.ff_b2 = &reg.create(bp + ".ff.b2", {cfg_.d_model});
    blocks_.push_back(blk);
  }
  if (cfg_.positional) pos_table_ = positional_table(cfg_.max_len, cfg_.d_model);
}

Val EncoderStack::block_forward(Graph& g, const BlockParams& bp, Val x,
                                Val mask, std::int64_t n_seq,
                                std::int64_t t_len) const {
  const std::int64_t d = cfg_.d_model;
  const std::int64_t hd = d / cfg_.heads;

  Val normed = g.layer_norm(x, g.leaf(*bp.ln1_g), g.leaf(*bp.ln1_b));
  Val flat = g.reshape(normed, {n_seq * t_len, d});
  Val q = g.add_bias(g.matmul(flat, g.leaf(*bp.wq)), g.leaf(*bp.bq));
  Val k = g.add_bias(g.matmul(flat, g.leaf(*bp.wk)), g.leaf(*bp.bk));
  Val v = g.add_bias(g.matmul(flat, g.leaf(*bp.wv)), g.leaf(*bp.bv));
  Val qh = g.split_heads(g.reshape(q, {n_seq, t_len, d}), cfg_.heads);
  Val kh = g.split_heads(g.reshape(k, {n_seq, t_len, d}), cfg_.heads);
  Val vh = g.split_heads(g.reshape(v, {n_seq, t_len, d}), cfg_.heads);
  Val scores = g.scale(g.bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (attn_counter)
    *attn_counter += static_cast<std::uint64_t>(n_seq) *
                     static_cast<std::uint64_t>(cfg_.heads) *
                     static_cast<std::uint64_t>(t_len) *
                     static_cast<std::uint64_t>(t_len);
  Val probs = g.softmax_masked(scores, mask);
  Val ctx = g.merge_heads(g.bmm_nn(probs, vh), cfg_.heads);
  Val ctx_flat = g.reshape(ctx, {n_seq * t_len, d});
  Val attn_out = g.add_bias(g.matmul(ctx_flat, g.leaf(*bp.wo)), g.leaf(*bp.bo));
  Val h = g.add(x, g.reshape(attn_out, {n_seq, t_len, d}));

  Val normed2 = g.layer_norm(h, g.leaf(*bp.ln2_g), g.leaf(*bp.ln2_b));
  Val ff_in = g.reshape(normed2, {n_seq * t_len, d});
  Val ff1 = g.gelu(g.add_bias(g.matmul(ff_in, g.leaf(*bp.ff_w1)), g.leaf(*bp.ff_b1)));
  Val ff2 = g.add_bias(g.matmul(ff1, g.leaf(*bp.ff_w2)), g.leaf(*bp.ff_b2));
  return g.add(h, g.reshape(ff2, {n_seq, t_len, d}));
}

Val EncoderStack::forward(Graph& g, Val x, Val mask) const {
  const auto& s = g.shape(x);
  if (s.size() != 3) throw ShapeError("encoder input must be [N,T,*]");
  const std::int64_t n_seq = s[0], t_len = s[1];
  if (n_seq < 1 || t_len < 1)
    throw ContractError("encoder input needs at least one sequence and slot");
  if (s[2] != cfg_.input_dim)
    throw ShapeError("encoder input width " + std::to_string(s[2]) +
                     ", expected " + std::to_string(cfg_.input_dim));
  const auto& ms = g.shape(mask);
  if (ms.size() != 2 || ms[0] != n_seq || ms[1] != t_len)
    throw ShapeError("mask must be [N,T]");

  Val h = x;
  if (cfg_.input_embed) {
    Val flat = g.reshape(x, {n_seq * t_len, cfg_.input_dim});
    Val lifted = g.add_bias(g.matmul(flat, g.leaf(*embed_w_)), g.leaf(*embed_b_));
    h = g.reshape(lifted, {n_seq, t_len, cfg_.d_model});
  }
  if (cfg_.positional) h = g.add_positional(h, mask, pos_table_);
  for (const auto& bp : blocks_) h = block_forward(g, bp, h, mask, n_seq, t_len);
  return h;
}

Val EncoderStack::encode(Graph& g, Val x, Val mask) const {
  return g.take_last_valid(forward(g, x, mask), mask);
}

Tensor encode_intra(const EncoderStack& t1, const Tensor& x, const Tensor& mask) {
  if (x.ndim() != 3 || x.extent(0) < 1 || x.extent(1) < 1)
    throw ContractError("encode_intra needs [K,S,input_dim] with K,S >= 1");
  Graph g;
  Val out = t1.encode(g, g.constant(x), g.constant(mask));
  return g.value(out);
}

Tensor encode_inter(const EncoderStack& t2, const Tensor& z_seq) {
  if (z_seq.ndim() != 2 || z_seq.extent(0) < 1)
    throw ContractError("encode_inter needs [K,d_model] with K >= 1");
  const std::int64_t k = z_seq.extent(0);
  Graph g;
  Val x = g.constant(z_seq.reshaped({1, k, z_seq.extent(1)}));
  Val mask = g.constant(Tensor::full({1, k}, 1.0));
  Val out = t2.encode(g, x, mask);
  return g.value(out).reshaped({z_seq.extent(1)});
}

}  // namespace hmeta
