#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hmeta/graph.hpp"
#include "hmeta/params.hpp"
#include "hmeta/tensor.hpp"

namespace hmeta {

/// Sinusoidal table: row p holds sin(p/10000^{2i/d}) at even columns and
/// cos of the same argument at the following odd column.
Tensor positional_table(std::int64_t length, std::int64_t d_model);

struct StackConfig {
  std::int64_t input_dim = 0;   // raw width fed to the stack
  bool input_embed = false;     // linear lift input_dim -> d_model in front
  std::int64_t d_model = 64;
  std::int64_t heads = 4;
  std::int64_t d_ff = 128;
  std::int64_t blocks = 2;
  bool positional = true;
  std::int64_t max_len = 128;   // positional table rows
};

/// A stack of pre-norm encoder blocks over [N,T,*] inputs with a per-slot
/// validity mask [N,T]. Masked slots never contribute as attention keys,
/// and with left padding the readout slot T-1 is always valid.
class EncoderStack {
 public:
  EncoderStack(ParamRegistry& reg, std::string prefix, StackConfig cfg,
               Rng& rng);

  /// Full sequence output [N,T,d_model].
  Val forward(Graph& g, Val x, Val mask) const;
  /// Output at the final slot of each sequence, [N,d_model].
  Val encode(Graph& g, Val x, Val mask) const;

  const StackConfig& config() const { return cfg_; }

  /// When set, each attention accumulates its score-matrix size
  /// (sequences x heads x T x T) here.
  std::uint64_t* attn_counter = nullptr;

 private:
  struct BlockParams {
    Parameter* ln1_g;
    Parameter* ln1_b;
    Parameter* wq;
    Parameter* bq;
    Parameter* wk;
    Parameter* bk;
    Parameter* wv;
    Parameter* bv;
    Parameter* wo;
    Parameter* bo;
    Parameter* ln2_g;
    Parameter* ln2_b;
    Parameter* ff_w1;
    Parameter* ff_b1;
    Parameter* ff_w2;
    Parameter* ff_b2;
  };

  Val block_forward(Graph& g, const BlockParams& bp, Val x, Val mask,
                    std::int64_t n_seq, std::int64_t t_len) const;

  StackConfig cfg_;
  Parameter* embed_w_ = nullptr;
  Parameter* embed_b_ = nullptr;
  std::vector<BlockParams> blocks_;
  Tensor pos_table_;
};

/// Per-decision-point encoders matching the architecture contracts.
/// x is [K,S,input_dim] with mask [K,S]; returns z_seq [K,d_model].
Tensor encode_intra(const EncoderStack& t1, const Tensor& x, const Tensor& mask);
/// z_seq is [K,d_model]; returns z_task [d_model], read at row K.
Tensor encode_inter(const EncoderStack& t2, const Tensor& z_seq);

}  // namespace hmeta
